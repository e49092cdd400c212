"""Patch graph, GCN and the attention-based hybrid fusion with its class-row head."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

DEFAULT_KNN = 8
DEFAULT_HEADS = 4
FUSION_MODES = ("ours", "cat", "add")


# ---------------------------------------------------------------- graph

@dataclass
class PatchGraph:
    adjacency: np.ndarray        # (K, K) binary, symmetric, zero diagonal
    norm_adjacency: np.ndarray   # D^-1/2 (A + I) D^-1/2
    degree: np.ndarray           # row sums of A + I
    directed: np.ndarray         # row j marks the k nearest neighbours of node j

    @property
    def k(self) -> int:
        return self.adjacency.shape[0]


def knn_graph(slide, gx, gy, k: int = DEFAULT_KNN) -> PatchGraph:
    """k-nearest-neighbour graph on grid coordinates, built separately per slide.

    Distances are Euclidean in (gx, gy). Equal distances go to the neighbour
    earlier in raster order (gy, then gx), which is the lower original index
    for bags stored in raster order and does not depend on row order. The
    directed graph is symmetrised with max(A, A^T); no edges cross slides.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    slide = np.asarray(slide)
    xy = np.stack([np.asarray(gx, dtype=float), np.asarray(gy, dtype=float)], axis=1)
    n = slide.size
    directed = np.zeros((n, n))
    for s in np.unique(slide):
        idx = np.flatnonzero(slide == s)
        if idx.size < 2:
            continue
        diff = xy[idx, None, :] - xy[None, idx, :]
        dist = np.sqrt((diff ** 2).sum(-1))
        np.fill_diagonal(dist, np.inf)
        kk = min(k, idx.size - 1)
        m = idx.size
        keys = (np.broadcast_to(np.arange(m), (m, m)), np.broadcast_to(xy[idx, 0], (m, m)),
                np.broadcast_to(xy[idx, 1], (m, m)), dist)
        nearest = np.lexsort(keys, axis=-1)[:, :kk]
        directed[np.repeat(idx, kk), idx[nearest.ravel()]] = 1.0
    adj = np.maximum(directed, directed.T)
    deg = adj.sum(axis=1) + 1.0
    inv = 1.0 / np.sqrt(deg)
    norm = inv[:, None] * (adj + np.eye(n)) * inv[None, :]
    return PatchGraph(adj, norm, deg, directed)


def gcn_forward(features, graph: PatchGraph, w1, w2):
    """Two propagation layers: ``A_hat relu(A_hat V W1) W2``."""
    a_hat = ad.Tensor(graph.norm_adjacency)
    v = ad.as_tensor(features)
    if v.shape[0] != graph.k:
        raise ad.ShapeError(f"{v.shape[0]} node features for a {graph.k}-node graph")
    h = ad.relu(ad.matmul(a_hat, ad.matmul(v, w1)))
    return ad.matmul(a_hat, ad.matmul(h, w2))


# ---------------------------------------------------------------- attention blocks

@dataclass
class AttentionBlock:
    wq: ad.Param
    wk: ad.Param
    wv: ad.Param
    gain: ad.Param
    bias: ad.Param

    @classmethod
    def init(cls, name: str, d: int, rng) -> "AttentionBlock":
        g = lambda: rng.standard_normal((d, d)) / np.sqrt(d)
        return cls(ad.Param(g(), f"{name}.wq"), ad.Param(g(), f"{name}.wk"),
                   ad.Param(g(), f"{name}.wv"), ad.Param(np.ones((1, d)), f"{name}.ln_gain"),
                   ad.Param(np.zeros((1, d)), f"{name}.ln_bias"))

    def params(self) -> list[ad.Param]:
        return [self.wq, self.wk, self.wv, self.gain, self.bias]


def cross_attention(query, context, block: AttentionBlock, heads: int = DEFAULT_HEADS):
    """LayerNorm of multi-head attention of ``query`` rows over ``context`` rows.

    Per head: softmax((Q Wq)(X Wk)^T / sqrt(d_head)) (X Wv); heads are
    concatenated back to width d. No residual path. Returns (out, weights).
    """
    q, x = ad.as_tensor(query), ad.as_tensor(context)
    if x.shape[0] < 1:
        raise ad.ShapeError("cross attention needs at least one context row")
    out, weights = ad.multihead_attention(
        ad.matmul(q, block.wq), ad.matmul(x, block.wk), ad.matmul(x, block.wv), heads)
    return ad.layernorm_rows(out, block.gain, block.bias), weights


def self_attention(features, block: AttentionBlock, heads: int = DEFAULT_HEADS):
    return cross_attention(features, features, block, heads)


# ---------------------------------------------------------------- model

@dataclass
class FusionConfig:
    d: int
    num_classes: int
    t: int = 4
    heads: int = DEFAULT_HEADS
    use_gcn: bool = True
    use_text: bool = True
    fusion: str = "ours"
    # prompt rows also serve as keys/values of the text attention; without this
    # the query-only prompt rows never reach the class-row logits
    prompt_context: bool = True

    def validate(self) -> None:
        if self.d % self.heads:
            raise ValueError(f"d={self.d} is not divisible by heads={self.heads}")
        if self.fusion not in FUSION_MODES:
            raise ValueError(f"unknown fusion mode {self.fusion!r}")
        if self.fusion != "ours" and not (self.use_gcn and self.use_text):
            raise ValueError("cat/add fusion combine visual, graph and text features")


@dataclass
class FusionTrace:
    v_att: np.ndarray
    v_g: np.ndarray | None
    f_vg: np.ndarray | None
    f_vg_fused: np.ndarray | None
    f_vgt: np.ndarray | None
    logits: np.ndarray
    attention: dict = field(default_factory=dict)

    def report(self) -> str:
        lines = []
        for name in ("v_att", "v_g", "f_vg", "f_vg_fused", "f_vgt", "logits"):
            arr = getattr(self, name)
            shape = "-" if arr is None else "x".join(str(s) for s in arr.shape)
            lines.append(f"{name:<12} {shape}")
        for name, w in self.attention.items():
            sums = w.sum(axis=-1)
            lines.append(f"attn[{name}] heads={w.shape[0]} rows={w.shape[1]} "
                         f"row_sum_min={sums.min():.9f} row_sum_max={sums.max():.9f}")
        return "\n".join(lines)


class FusionModel:
    """Trainable fusion stack: self-attention, GCN, graph/text cross-attention, head."""

    def __init__(self, config: FusionConfig, frozen_text: np.ndarray | None,
                 prompt_init: np.ndarray | None = None, seed: int = 0):
        config.validate()
        self.config = config
        d, c = config.d, config.num_classes
        rng = np.random.default_rng([seed, 0xF05E])
        g = lambda r, cols: rng.standard_normal((r, cols)) / np.sqrt(r)
        self.self_block = AttentionBlock.init("self", d, rng)
        self.graph_block = self.gcn_w1 = self.gcn_w2 = self.fuse_w = None
        self.text_block = self.prompts = self.head = self.pool_head = None
        self.cat_w = self.naive_gain = self.naive_bias = None
        if config.use_gcn:
            self.gcn_w1 = ad.Param(g(d, d), "gcn.w1")
            self.gcn_w2 = ad.Param(g(d, d), "gcn.w2")
            if config.fusion == "ours":
                self.graph_block = AttentionBlock.init("graph", d, rng)
                self.fuse_w = ad.Param(g(d, d), "fuse.w")
        if config.use_text:
            if frozen_text is None or frozen_text.shape != (c, d):
                raise ad.ShapeError(f"frozen text rows must be ({c}, {d})")
            self.frozen_text = np.asarray(frozen_text, dtype=np.float64)
            if config.t:
                init = prompt_init if prompt_init is not None else np.zeros((config.t, d))
                self.prompts = ad.Param(np.array(init, dtype=np.float64), "text.prompts")
            self.head = ad.Param(g(d, 1), "head.w")
            if config.fusion == "ours":
                self.text_block = AttentionBlock.init("text", d, rng)
            else:
                self.naive_gain = ad.Param(np.ones((1, d)), "naive.ln_gain")
                self.naive_bias = ad.Param(np.zeros((1, d)), "naive.ln_bias")
                if config.fusion == "cat":
                    self.cat_w = ad.Param(g(3 * d, d), "naive.cat_w")
        else:
            self.frozen_text = None
            self.pool_head = ad.Param(g(d, c), "head.pool")

    def params(self) -> list[ad.Param]:
        out = list(self.self_block.params())
        for blk in (self.graph_block, self.text_block):
            if blk is not None:
                out += blk.params()
        for p in (self.gcn_w1, self.gcn_w2, self.fuse_w, self.prompts, self.head,
                  self.pool_head, self.cat_w, self.naive_gain, self.naive_bias):
            if p is not None:
                out.append(p)
        return out

    def named_params(self) -> dict[str, ad.Param]:
        return {p.name: p for p in self.params()}

    def prompt_tensor(self):
        frozen = ad.Tensor(self.frozen_text)
        if self.prompts is None:
            return frozen
        return ad.concat_rows([frozen, self.prompts])

    def forward(self, features, graph: PatchGraph | None = None, graph_features=None):
        """Run the stack on selected patch features (K, d).

        ``graph_features`` overrides V_g (used when the graph is built before
        attention selection). Returns (logits tensor (1, C), FusionTrace).
        """
        cfg = self.config
        b = ad.as_tensor(features)
        attn = {}
        v_att, attn["self"] = self_attention(b, self.self_block, cfg.heads)
        v_g = f_vg = fused = f_vgt = None
        visual = v_att
        if cfg.use_gcn:
            if graph_features is not None:
                v_g = graph_features
            else:
                if graph is None:
                    raise ValueError("GCN variant needs a patch graph")
                v_g = gcn_forward(b, graph, self.gcn_w1, self.gcn_w2)
            if cfg.fusion == "ours":
                f_vg, attn["graph"] = cross_attention(v_att, v_g, self.graph_block, cfg.heads)
                fused = ad.matmul(ad.concat_rows([v_att, f_vg]), self.fuse_w)
                visual = fused
        c = cfg.num_classes
        if cfg.use_text and cfg.fusion == "ours":
            t = self.prompt_tensor()
            context = ad.concat_rows([t, visual]) if cfg.prompt_context else visual
            f_vgt, attn["text"] = cross_attention(t, context, self.text_block, cfg.heads)
            logits = ad.transpose(ad.matmul(ad.take_rows(f_vgt, np.arange(c)), self.head))
        elif cfg.use_text:
            f_vgt = self._naive_fusion(v_att, v_g)
            logits = ad.transpose(ad.matmul(ad.take_rows(f_vgt, np.arange(c)), self.head))
        else:
            logits = ad.matmul(ad.mean_rows(visual), self.pool_head)
        trace = FusionTrace(
            v_att.value, None if v_g is None else v_g.value,
            None if f_vg is None else f_vg.value, None if fused is None else fused.value,
            None if f_vgt is None else f_vgt.value, logits.value.ravel().copy(), attn)
        return logits, trace

    def _naive_fusion(self, v_att, v_g):
        t = self.prompt_tensor()
        rows = np.zeros(t.shape[0], dtype=np.intp)
        m_att = ad.take_rows(ad.mean_rows(v_att), rows)
        m_g = ad.take_rows(ad.mean_rows(v_g), rows)
        if self.config.fusion == "add":
            z = ad.add(ad.add(t, m_att), m_g)
        else:
            z = ad.matmul(ad.concat_cols([t, m_att, m_g]), self.cat_w)
        return ad.layernorm_rows(z, self.naive_gain, self.naive_bias)


def fuse_graph(v_att, v_g, block: AttentionBlock, fuse_w, heads: int = DEFAULT_HEADS):
    """F_vg = CA(V_att, V_g); returns (F_vg, rowconcat(V_att, F_vg) @ W) with 2K rows."""
    v_att = ad.as_tensor(v_att)
    f_vg, _ = cross_attention(v_att, v_g, block, heads)
    return f_vg, ad.matmul(ad.concat_rows([v_att, f_vg]), fuse_w)


def fuse_text(prompts, fused, block: AttentionBlock, heads: int = DEFAULT_HEADS,
              prompt_context: bool = True):
    """Prompt rows (C + t, d) attend over the fused visual rows; returns (C + t, d).

    With ``prompt_context`` the prompt rows are prepended to the context, which
    is what lets the learnable rows influence the class rows.
    """
    prompts, fused = ad.as_tensor(prompts), ad.as_tensor(fused)
    context = ad.concat_rows([prompts, fused]) if prompt_context else fused
    out, _ = cross_attention(prompts, context, block, heads)
    return out


def classify(f_vgt, head, num_classes: int):
    """Logits (1, C) from the shared d->1 head over the first C class-aligned rows."""
    f = ad.as_tensor(f_vgt)
    if f.shape[0] < num_classes:
        raise ad.ShapeError(f"need at least {num_classes} rows, got {f.shape[0]}")
    return ad.transpose(ad.matmul(ad.take_rows(f, np.arange(num_classes)), head))


def forward_full(features, graph: PatchGraph, model: FusionModel):
    """Full stack; returns the FusionTrace (logits included)."""
    return model.forward(features, graph)[1]
