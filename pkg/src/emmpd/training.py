"""End-to-end training and evaluation: selection, selector pretraining, fusion training."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .bagio import DatasetManifest, PatchBag, TextBank
from .fusion import FusionConfig, FusionModel, PatchGraph, gcn_forward, knn_graph
from .metrics import MetricsReport, evaluate_scores
from .selection import (SelectorParams, one_dim_compress, pretrain_selector, score_patches,
                        top_k_select, two_dim_compress)

log = logging.getLogger(__name__)

SAMPLING_MODES = ("tsps", "2dcom", "attsel", "random", "pos", "1dcom")
CHECKPOINT_MAGIC = b"EMPC"
CHECKPOINT_VERSION = 1


class NumericalError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass
class TrainConfig:
    lr: float = 1e-4
    epochs: int = 50
    patience: int = 10
    alpha: float = 0.25
    gamma: float = 2.0
    w: int = 8
    K: int = 64
    k_nn: int = 8
    heads: int = 4
    t: int = 4
    seed: int = 0
    task_mode: str = "multilabel"
    selector_epochs: int = 20
    selector_lr: float | None = None   # defaults to lr
    selector_hidden: int = 64
    sampling: str = "tsps"
    use_gcn: bool = True
    use_text: bool = True
    fusion: str = "ours"
    gcn_placement: str = "after"
    shuffle_labels: bool = False

    def validate(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        for name in ("w", "K", "k_nn", "heads", "patience", "selector_hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.epochs < 0 or self.selector_epochs < 0 or self.t < 0:
            raise ValueError("epoch counts and t must be >= 0")
        if self.sampling not in SAMPLING_MODES:
            raise ValueError(f"unknown sampling mode {self.sampling!r}")
        if self.gcn_placement not in ("after", "before"):
            raise ValueError(f"unknown gcn placement {self.gcn_placement!r}")
        if self.task_mode not in ("multilabel", "multiclass"):
            raise ValueError(f"unknown task_mode {self.task_mode!r}")

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def focal_bce(logits, target, alpha: float = 0.25, gamma: float = 2.0):
    return ad.focal_bce(logits, target, alpha, gamma)


# ---------------------------------------------------------------- prepared bags

@dataclass
class PreparedBag:
    """Everything the fusion stage needs for one bag, computed once."""
    patient_id: str
    label: np.ndarray
    features: np.ndarray          # B'' rows (K, d)
    graph: PatchGraph | None      # graph over B'' (placement "after")
    pre_features: np.ndarray | None = None   # nodes of the "before" graph
    pre_graph: PatchGraph | None = None
    pre_rows: np.ndarray | None = None       # rows of B'' inside pre_features
    n: int = 0
    n_compressed: int = 0


def _bag_rng(seed: int, pid: str):
    return np.random.default_rng([seed, zlib.crc32(pid.encode())])


def candidate_indices(bag: PatchBag, cfg: TrainConfig) -> np.ndarray:
    """Patches that survive the parameter-free stage of the configured sampling."""
    if cfg.sampling in ("tsps", "2dcom"):
        return two_dim_compress(bag, cfg.w)[0]
    if cfg.sampling == "1dcom":
        return one_dim_compress(bag, cfg.w)
    return np.arange(bag.n)


def select_for(bag: PatchBag, cand: np.ndarray, cfg: TrainConfig,
               selector: SelectorParams | None) -> np.ndarray:
    if cfg.sampling in ("tsps", "attsel"):
        return cand[top_k_select(score_patches(bag.embeddings[cand], selector), cfg.K)]
    if cand.size <= cfg.K:
        return cand
    if cfg.sampling == "pos":
        return cand[: cfg.K]
    return np.sort(_bag_rng(cfg.seed, bag.patient_id).choice(cand, size=cfg.K, replace=False))


def prepare_bag(bag: PatchBag, cand: np.ndarray, cfg: TrainConfig,
                selector: SelectorParams | None) -> PreparedBag:
    chosen = select_for(bag, cand, cfg, selector)
    sub = bag.subset(chosen)
    prep = PreparedBag(bag.patient_id, np.asarray(bag.label, dtype=float), sub.embeddings,
                       None, n=bag.n, n_compressed=int(cand.size))
    if cfg.use_gcn:
        if cfg.gcn_placement == "after":
            prep.graph = knn_graph(sub.slide, sub.gx, sub.gy, cfg.k_nn)
        else:
            pre = bag.subset(cand)
            prep.pre_features = pre.embeddings
            prep.pre_graph = knn_graph(pre.slide, pre.gx, pre.gy, cfg.k_nn)
            prep.pre_rows = np.searchsorted(cand, chosen)
    return prep


def model_forward(model: FusionModel, prep: PreparedBag):
    if model.config.use_gcn and prep.pre_graph is not None:
        v_g = ad.take_rows(gcn_forward(prep.pre_features, prep.pre_graph,
                                       model.gcn_w1, model.gcn_w2), prep.pre_rows)
        return model.forward(prep.features, graph_features=v_g)
    return model.forward(prep.features, prep.graph)


def bag_loss(model: FusionModel, prep: PreparedBag, cfg: TrainConfig):
    logits, _ = model_forward(model, prep)
    return ad.focal_bce(logits, prep.label, cfg.alpha, cfg.gamma)


# ---------------------------------------------------------------- training

@dataclass
class TrainResult:
    config: TrainConfig
    model: FusionModel
    selector: SelectorParams | None
    history: list = field(default_factory=list)
    selector_history: list = field(default_factory=list)
    best_epoch: int = -1
    best_val_loss: float = float("inf")
    text_bank: TextBank | None = None

    def write_history(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "val_loss", "lr"])
            for row in self.history:
                w.writerow([row["epoch"], repr(row["train_loss"]), repr(row["val_loss"]), repr(row["lr"])])


def _shuffled(labels: list[np.ndarray], seed: int) -> list[np.ndarray]:
    perm = np.random.default_rng([seed, 0x5F1]).permutation(len(labels))
    return [labels[i] for i in perm]


def mean_loss(model: FusionModel, preps, cfg: TrainConfig) -> float:
    return float(np.mean([bag_loss(model, p, cfg).item() for p in preps]))


def build_model(cfg: TrainConfig, d: int, num_classes: int, text: TextBank | None) -> FusionModel:
    fcfg = FusionConfig(d, num_classes, cfg.t if cfg.use_text else 0, cfg.heads,
                        cfg.use_gcn, cfg.use_text, cfg.fusion)
    frozen = text.frozen if (cfg.use_text and text is not None) else None
    init = text.init_learnable() if (cfg.use_text and text is not None and cfg.t) else None
    return FusionModel(fcfg, frozen, init, seed=cfg.seed)


def _selector_key(cfg: TrainConfig) -> tuple:
    return (cfg.sampling, cfg.w, cfg.selector_epochs, cfg.selector_lr, cfg.lr, cfg.alpha,
            cfg.gamma, cfg.selector_hidden, cfg.seed, cfg.shuffle_labels)


def train_prepared(train_bags: list[PatchBag], val_bags: list[PatchBag], cfg: TrainConfig,
                   text: TextBank | None, cache: dict | None = None):
    """Two-phase training on already-loaded bags. Returns (TrainResult, prepare fn).

    ``cache`` may be shared between runs on the same bags; it memoizes the
    candidate sets and pretrained selectors, which depend only on a few fields.
    """
    cfg.validate()
    if not train_bags or not val_bags:
        raise ValueError("training needs nonempty train and validation splits")
    d, num_classes = train_bags[0].d, len(train_bags[0].label)
    if cfg.shuffle_labels:
        shuffled = _shuffled([b.label for b in train_bags], cfg.seed)
        train_bags = [dataclasses.replace(b, label=y) for b, y in zip(train_bags, shuffled)]

    cache = {} if cache is None else cache
    cand_store = cache.setdefault(("cand", cfg.sampling, cfg.w), {})
    for b in train_bags + val_bags:
        if b.patient_id not in cand_store:
            cand_store[b.patient_id] = candidate_indices(b, cfg)
    cands = {id(b): cand_store[b.patient_id] for b in train_bags + val_bags}
    selector = None
    sel_hist: list = []
    if cfg.sampling in ("tsps", "attsel"):
        key = ("selector",) + _selector_key(cfg)
        if key not in cache:
            hist: list = []
            sel = pretrain_selector(
                [b.embeddings[cands[id(b)]] for b in train_bags], [b.label for b in train_bags],
                cfg.selector_epochs, lr=cfg.selector_lr if cfg.selector_lr is not None else cfg.lr,
                alpha=cfg.alpha, gamma=cfg.gamma, hidden=cfg.selector_hidden, seed=cfg.seed,
                history=hist)
            cache[key] = (sel, hist)
        selector, sel_hist = cache[key][0].copy(), list(cache[key][1])

    def prepare(bags, cache=None):
        out = []
        for b in bags:
            cand = cache[id(b)] if cache and id(b) in cache else candidate_indices(b, cfg)
            out.append(prepare_bag(b, cand, cfg, selector))
        return out

    train_p = prepare(train_bags, cands)
    val_p = prepare(val_bags, cands)

    model = build_model(cfg, d, num_classes, text)
    params = model.params()
    opt = ad.Adam(params, lr=cfg.lr)
    rng = np.random.default_rng([cfg.seed, 0x7A1])
    result = TrainResult(cfg, model, selector, selector_history=sel_hist, text_bank=text)
    best = [p.value.copy() for p in params]
    stale = 0
    for epoch in range(cfg.epochs):
        opt.lr = cfg.lr * (1.0 - epoch / cfg.epochs)
        total = 0.0
        for i in rng.permutation(len(train_p)):
            with ad.Tape() as tape:
                loss = bag_loss(model, train_p[i], cfg)
            if not np.isfinite(loss.value).all():
                raise NumericalError(
                    f"non-finite loss at epoch {epoch} on bag {train_p[i].patient_id}")
            tape.backward(loss, params)
            opt.step()
            total += loss.item()
        val_loss = mean_loss(model, val_p, cfg)
        if not np.isfinite(val_loss):
            raise NumericalError(f"non-finite validation loss at epoch {epoch}")
        result.history.append({"epoch": epoch, "train_loss": total / len(train_p),
                               "val_loss": val_loss, "lr": opt.lr})
        log.debug("epoch %d train %.5f val %.5f", epoch, total / len(train_p), val_loss)
        if val_loss < result.best_val_loss:
            result.best_val_loss, result.best_epoch = val_loss, epoch
            best = [p.value.copy() for p in params]
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    for p, v in zip(params, best):
        p.value[...] = v
    return result, prepare


def train(manifest: DatasetManifest, cfg: TrainConfig) -> TrainResult:
    """Train on the manifest's train split with early stopping on its val split."""
    text = manifest.load_text_bank(seed=cfg.seed, t=cfg.t) if cfg.use_text else None
    result, _ = train_prepared(manifest.load_split("train"), manifest.load_split("val"), cfg, text)
    return result


def predict_scores(model: FusionModel, preps, task_mode: str) -> np.ndarray:
    logits = np.vstack([model_forward(model, p)[0].value for p in preps])
    if task_mode == "multiclass":
        z = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)
    return ad._sigmoid(logits)


def evaluate(result: TrainResult, bags: list[PatchBag], class_names=None) -> MetricsReport:
    cfg = result.config
    preps = [prepare_bag(b, candidate_indices(b, cfg), cfg, result.selector) for b in bags]
    scores = predict_scores(result.model, preps, cfg.task_mode)
    labels = np.vstack([p.label for p in preps])
    return evaluate_scores(scores, labels, cfg.task_mode, class_names)


# ---------------------------------------------------------------- checkpoints

class CheckpointError(ValueError):
    pass


def save_checkpoint(result: TrainResult, path) -> None:
    """EMPC: magic, u32 version, u32 count, then (u32 len, name, u32 rows, u32 cols, f64 data)."""
    cfg = result.config
    blocks = {"meta.dims": np.array([[result.model.config.d, result.model.config.num_classes,
                                      cfg.t, cfg.heads]], dtype=float)}
    if result.selector is not None:
        blocks.update({p.name: p.value for p in result.selector.params()})
    blocks.update({p.name: p.value for p in result.model.params()})
    if result.model.frozen_text is not None:
        blocks["text.frozen"] = result.model.frozen_text
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(blocks)))
        for name, arr in blocks.items():
            raw = name.encode()
            fh.write(struct.pack("<I", len(raw)) + raw + struct.pack("<II", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_checkpoint(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: version {version} unsupported")
    off, blocks = 12, {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", raw, off)
            name = raw[off + 4: off + 4 + n].decode()
            rows, cols = struct.unpack_from("<II", raw, off + 4 + n)
            off += 12 + n
            arr = np.frombuffer(raw, dtype="<f8", count=rows * cols, offset=off).reshape(rows, cols)
            blocks[name] = arr.copy()
            off += 8 * rows * cols
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: truncated checkpoint") from exc
    return blocks


def load_checkpoint(path, cfg: TrainConfig, d: int | None = None,
                    num_classes: int | None = None) -> TrainResult:
    blocks = read_checkpoint(path)
    ck_d, ck_c, _, _ = (int(v) for v in blocks["meta.dims"].ravel())
    if d is not None and ck_d != d:
        raise ad.ShapeError(f"checkpoint has d={ck_d}, dataset has d={d}")
    if num_classes is not None and ck_c != num_classes:
        raise ad.ShapeError(f"checkpoint has C={ck_c}, dataset has C={num_classes}")
    text = TextBank(blocks["text.frozen"], t=cfg.t, seed=cfg.seed) if "text.frozen" in blocks else None
    model = build_model(cfg, ck_d, ck_c, text)
    for name, p in model.named_params().items():
        if name not in blocks or blocks[name].shape != p.shape:
            raise CheckpointError(f"checkpoint lacks a matching block for {name}")
        p.value[...] = blocks[name]
    selector = None
    if "selector.V" in blocks:
        selector = SelectorParams(*(ad.Param(blocks[f"selector.{k}"], f"selector.{k}")
                                    for k in ("V", "U", "w", "head")))
    return TrainResult(cfg, model, selector, text_bank=text)


def save_config(cfg: TrainConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=1) + "\n", encoding="utf-8")


def load_config(path) -> TrainConfig:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    known = {f.name for f in dataclasses.fields(TrainConfig)}
    return TrainConfig(**{k: v for k, v in doc.items() if k in known})
