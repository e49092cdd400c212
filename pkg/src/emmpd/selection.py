"""Two-stage patch selection: window-based redundancy removal, then top-K attention."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .bagio import PatchBag

DEFAULT_WINDOW = 8
DEFAULT_K = 64
FULL_SCALE_K = 4000
DEFAULT_ATTN_HIDDEN = 64
# cosine similarities equal up to single-precision storage error count as ties
TIE_TOL = 1e-6
DEGENERATE_NORM = 1e-12


def normalize_embeddings(emb: np.ndarray):
    """Return (unit-norm rows, degenerate mask). Rows with norm < 1e-12 stay zero."""
    emb = np.asarray(emb, dtype=np.float64)
    norms = np.linalg.norm(emb, axis=1)
    degenerate = norms < DEGENERATE_NORM
    out = np.zeros_like(emb)
    ok = ~degenerate
    out[ok] = emb[ok] / norms[ok, None]
    return out, degenerate


@dataclass
class WindowIndex:
    slide: int
    row: int
    col: int
    members: np.ndarray   # original patch indices, ascending


def window_partition(bag: PatchBag, w: int = DEFAULT_WINDOW) -> list[WindowIndex]:
    """Disjoint w x w windows per slide, keyed by (slide, gy // w, gx // w)."""
    if w < 1:
        raise ValueError("window size must be >= 1")
    groups: dict[tuple, list[int]] = defaultdict(list)
    for i, (s, x, y) in enumerate(zip(bag.slide.tolist(), bag.gx.tolist(), bag.gy.tolist())):
        groups[(s, y // w, x // w)].append(i)
    return [WindowIndex(s, r, c, np.array(groups[(s, r, c)], dtype=np.intp))
            for (s, r, c) in sorted(groups)]


def window_threshold(sim: np.ndarray) -> float:
    """Mean similarity over unordered pairs i < j; 0.0 for fewer than two members."""
    m = sim.shape[0]
    if m < 2:
        return 0.0
    iu = np.triu_indices(m, k=1)
    return float(sim[iu].mean())


def compress_window(members, normalized: np.ndarray, tie_tol: float = TIE_TOL):
    """Drop redundant members of one window.

    theta is the mean pairwise similarity. Pairs (i, j), i < j, are scanned in
    raster order; if both are still live and ``S_ij > theta + tie_tol`` the
    later patch j is removed. Returns ``(kept, theta)``.
    """
    members = np.asarray(members, dtype=np.intp)
    if members.size == 0:
        raise ValueError("empty window")
    if members.size == 1:
        return members.copy(), 0.0
    v = normalized[members]
    sim = v @ v.T
    theta = window_threshold(sim)
    live = np.ones(members.size, dtype=bool)
    cut = theta + tie_tol
    # row i's scan can only remove j > i, and i itself was settled by earlier rows
    for i in range(members.size - 1):
        if live[i]:
            live[i + 1:] &= ~(sim[i, i + 1:] > cut)
    return members[live], theta


@dataclass
class SelectionReport:
    patient_id: str
    n: int
    n_compressed: int = 0
    k: int = 0
    kept_compress: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.intp))
    kept_select: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.intp))
    thetas: list = field(default_factory=list)
    window_sizes: list = field(default_factory=list)
    window_removed: list = field(default_factory=list)
    scores: np.ndarray | None = None

    @property
    def removal_rate(self) -> float:
        return 1.0 - self.n_compressed / self.n if self.n else 0.0

    def summary(self) -> dict:
        th = np.asarray(self.thetas, dtype=float)
        hist, edges = np.histogram(th, bins=10, range=(-1.0, 1.0)) if th.size else (np.zeros(10), np.linspace(-1, 1, 11))
        return {
            "patient_id": self.patient_id, "N": self.n, "N_compressed": self.n_compressed,
            "K": self.k, "removal_rate": round(self.removal_rate, 6),
            "windows": len(self.thetas),
            "theta_hist": {"edges": [round(e, 3) for e in edges.tolist()],
                           "counts": [int(c) for c in hist]},
        }


def two_dim_compress(bag: PatchBag, w: int = DEFAULT_WINDOW, tie_tol: float = TIE_TOL):
    """Window-wise compression of a whole bag. Returns (kept indices, report)."""
    normed, _ = normalize_embeddings(bag.embeddings)
    report = SelectionReport(bag.patient_id, bag.n)
    kept = []
    for win in window_partition(bag, w):
        k, theta = compress_window(win.members, normed, tie_tol)
        kept.append(k)
        report.thetas.append(theta)
        report.window_sizes.append(int(win.members.size))
        report.window_removed.append(int(win.members.size - k.size))
    kept = np.sort(np.concatenate(kept)) if kept else np.zeros(0, dtype=np.intp)
    report.kept_compress = kept
    report.n_compressed = int(kept.size)
    return kept, report


def one_dim_compress(bag: PatchBag, w: int = DEFAULT_WINDOW, tie_tol: float = TIE_TOL):
    """Same redundancy rule over runs of w*w consecutive patches in stored order."""
    normed, _ = normalize_embeddings(bag.embeddings)
    run = w * w
    kept = [compress_window(np.arange(s, min(s + run, bag.n)), normed, tie_tol)[0]
            for s in range(0, bag.n, run)]
    return np.concatenate(kept)


def top_k_select(scores, k: int) -> np.ndarray:
    """Indices of the k largest scores (ties -> lower index), returned ascending."""
    if k < 1:
        raise ValueError("K must be >= 1")
    scores = np.asarray(scores, dtype=np.float64).ravel()
    if k >= scores.size:
        return np.arange(scores.size)
    order = np.lexsort((np.arange(scores.size), -scores))
    return np.sort(order[:k])


# ---------------------------------------------------------------- gated attention

@dataclass
class SelectorParams:
    V: ad.Param      # (d, h) tanh branch
    U: ad.Param      # (d, h) sigmoid gate
    w: ad.Param      # (h, 1)
    head: ad.Param   # (d, C)

    @classmethod
    def init(cls, d: int, num_classes: int, hidden: int = DEFAULT_ATTN_HIDDEN, seed: int = 0):
        rng = np.random.default_rng([seed, 0x5E1])
        g = lambda r, c: rng.standard_normal((r, c)) / np.sqrt(r)
        return cls(ad.Param(g(d, hidden), "selector.V"), ad.Param(g(d, hidden), "selector.U"),
                   ad.Param(g(hidden, 1), "selector.w"), ad.Param(g(d, num_classes), "selector.head"))

    def params(self) -> list[ad.Param]:
        return [self.V, self.U, self.w, self.head]

    def copy(self) -> "SelectorParams":
        return SelectorParams(*(ad.Param(p.value.copy(), p.name) for p in self.params()))


def gated_attention_logits(features, params: SelectorParams):
    """Raw scores ``w^T (tanh(V^T f) * sigmoid(U^T f))`` as a (K, 1) tensor."""
    f = ad.as_tensor(features)
    if f.shape[1] != params.V.shape[0]:
        raise ad.ShapeError(f"features have d={f.shape[1]}, selector expects {params.V.shape[0]}")
    gate = ad.mul(ad.tanh(ad.matmul(f, params.V)), ad.sigmoid(ad.matmul(f, params.U)))
    return ad.matmul(gate, params.w)


def gated_attention_scores(features, params: SelectorParams):
    """Attention weights over patches as a (1, K) tensor summing to 1."""
    return ad.softmax_rows(ad.transpose(gated_attention_logits(features, params)))


def selector_logits(features, params: SelectorParams):
    f = ad.as_tensor(features)
    pooled = ad.matmul(gated_attention_scores(f, params), f)
    return ad.matmul(pooled, params.head)


def pretrain_selector(bags, labels, epochs: int, *, lr: float = 1e-4, alpha: float = 0.25,
                      gamma: float = 2.0, hidden: int = DEFAULT_ATTN_HIDDEN, seed: int = 0,
                      init: SelectorParams | None = None, history: list | None = None):
    """Train the gated-attention MIL classifier on (already compressed) bags.

    ``bags`` are (n_i, d) arrays, ``labels`` (C,) vectors. Batch size 1, Adam,
    linear lr decay over ``epochs``. Returns the trained params.
    """
    bags = [np.asarray(b, dtype=np.float64) for b in bags]
    if not bags:
        raise ValueError("selector pretraining needs at least one bag")
    labels = [np.asarray(y, dtype=np.float64) for y in labels]
    params = init.copy() if init is not None else SelectorParams.init(
        bags[0].shape[1], labels[0].size, hidden, seed)
    opt = ad.Adam(params.params(), lr=lr)
    rng = np.random.default_rng([seed, 0xA77])
    for epoch in range(epochs):
        opt.lr = lr * (1.0 - epoch / epochs)
        running = 0.0
        for i in rng.permutation(len(bags)):
            with ad.Tape() as tape:
                loss = ad.focal_bce(selector_logits(bags[i], params), labels[i], alpha, gamma)
            tape.backward(loss, params.params())
            opt.step()
            running += loss.item()
        if history is not None:
            history.append(running / len(bags))
    return params


def score_patches(features, params: SelectorParams) -> np.ndarray:
    return gated_attention_logits(features, params).value.ravel()


def select_patches(bag: PatchBag, params: SelectorParams | None, k: int = DEFAULT_K,
                   w: int = DEFAULT_WINDOW, compress: bool = True, attend: bool = True,
                   tie_tol: float = TIE_TOL, rng=None):
    """Run 2D compression and/or attention top-K. Returns (indices into bag, report).

    With ``attend=False`` K patches are drawn uniformly (seeded ``rng``) from
    the compressed bag instead of by score.
    """
    if compress:
        kept, report = two_dim_compress(bag, w, tie_tol)
    else:
        kept = np.arange(bag.n)
        report = SelectionReport(bag.patient_id, bag.n, n_compressed=bag.n, kept_compress=kept)
    if attend:
        if params is None:
            raise ValueError("attention selection needs selector params")
        scores = score_patches(bag.embeddings[kept], params)
        report.scores = scores
        chosen = kept[top_k_select(scores, k)]
    elif kept.size > k:
        rng = rng if rng is not None else np.random.default_rng(0)
        chosen = np.sort(rng.choice(kept, size=k, replace=False))
    else:
        chosen = kept
    report.kept_select = chosen
    report.k = int(chosen.size)
    return chosen, report
