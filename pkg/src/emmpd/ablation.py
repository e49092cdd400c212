"""Ablation harness: train and evaluate a family of variants on a shared seed."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

from .bagio import DatasetManifest
from .training import TrainConfig, evaluate, train_prepared

ABLATION_MODES = ("modules", "sampling", "window", "gcn_placement", "fusion",
                  "k_sweep", "alpha_sweep", "gamma_sweep")

# named rows; each maps to TrainConfig overrides
MODULE_VARIANTS = {
    "2dcom": dict(sampling="2dcom", use_gcn=False, use_text=False),
    "attsel": dict(sampling="attsel", use_gcn=False, use_text=False),
    "2dcom+attsel": dict(sampling="tsps", use_gcn=False, use_text=False),
    "2dcom+attsel+gcn": dict(sampling="tsps", use_gcn=True, use_text=False),
    "2dcom+attsel+text": dict(sampling="tsps", use_gcn=False, use_text=True),
    "full": dict(sampling="tsps", use_gcn=True, use_text=True),
}
SAMPLING_VARIANTS = {
    "random": dict(sampling="random"),
    "pos-k": dict(sampling="pos"),
    "1dcom": dict(sampling="1dcom"),
    "tsps": dict(sampling="tsps"),
}
PLACEMENT_VARIANTS = {"before": dict(gcn_placement="before"), "after": dict(gcn_placement="after")}
FUSION_VARIANTS = {"cat": dict(fusion="cat"), "add": dict(fusion="add"), "ours": dict(fusion="ours")}

NAMED = {"modules": MODULE_VARIANTS, "sampling": SAMPLING_VARIANTS,
         "gcn_placement": PLACEMENT_VARIANTS, "fusion": FUSION_VARIANTS}
SWEEP_FIELD = {"window": "w", "k_sweep": "K", "alpha_sweep": "alpha", "gamma_sweep": "gamma"}
DEFAULT_GRID = {"window": [6, 8, 10], "k_sweep": [16, 32, 64, 128],
                "alpha_sweep": [0.1, 0.25, 0.5, 0.75], "gamma_sweep": [0.0, 1.0, 2.0, 5.0]}


class UnknownVariantError(ValueError):
    pass


@dataclass
class AblationPlan:
    mode: str
    grid: list = field(default_factory=list)
    seed: int | None = None

    def variants(self) -> list[tuple[str, dict]]:
        """(row name, config overrides) in plan order."""
        if self.mode in NAMED:
            table = NAMED[self.mode]
            names = [str(g) for g in self.grid] if self.grid else list(table)
            unknown = [n for n in names if n not in table]
            if unknown:
                raise UnknownVariantError(
                    f"unknown {self.mode} variant(s) {unknown}; choose from {list(table)}")
            return [(n, dict(table[n])) for n in names]
        if self.mode in SWEEP_FIELD:
            grid = self.grid or DEFAULT_GRID[self.mode]
            key = SWEEP_FIELD[self.mode]
            cast = float if key in ("alpha", "gamma") else int
            return [(f"{key}={cast(v)}", {key: cast(v)}) for v in grid]
        raise UnknownVariantError(f"unknown ablation mode {self.mode!r}; choose from {ABLATION_MODES}")

    def validate(self) -> None:
        if not self.variants():
            raise UnknownVariantError("plan has no variants")


@dataclass
class AblationRow:
    name: str
    overrides: dict
    val: dict
    test: dict | None
    best_epoch: int
    seconds: float

    def to_dict(self) -> dict:
        return {"name": self.name, "overrides": self.overrides, "val": self.val, "test": self.test,
                "best_epoch": self.best_epoch, "seconds": round(self.seconds, 3)}


@dataclass
class AblationReport:
    mode: str
    seed: int
    rows: list[AblationRow]
    rank_by: str = "val_f1"

    def ranked(self) -> list[AblationRow]:
        # stable: equal scores keep plan order
        return sorted(self.rows, key=lambda r: -r.val["f1"])

    def row(self, name: str) -> AblationRow:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {"mode": self.mode, "seed": self.seed, "rank_by": self.rank_by,
                "rows": [r.to_dict() for r in self.ranked()]}

    def to_text(self) -> str:
        head = (f"{'rank':<5}{'variant':<22}{'val_f1':>8}{'val_acc':>9}{'val_auc':>9}"
                f"{'test_f1':>9}{'test_acc':>10}{'test_auc':>10}{'epoch':>7}")
        lines = [f"ablation mode={self.mode} seed={self.seed}", head]
        for i, r in enumerate(self.ranked(), 1):
            t = r.test or {}
            fmt = lambda v: f"{v:.4f}" if v is not None else "-"
            lines.append(f"{i:<5}{r.name:<22}{fmt(r.val['f1']):>8}{fmt(r.val['acc']):>9}"
                         f"{fmt(r.val['roc_auc']):>9}{fmt(t.get('f1')):>9}{fmt(t.get('acc')):>10}"
                         f"{fmt(t.get('roc_auc')):>10}{r.best_epoch:>7}")
        return "\n".join(lines)

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"ablation_{self.mode}.json").write_text(json.dumps(self.to_dict(), indent=1) + "\n",
                                                        encoding="utf-8")
        (out / f"ablation_{self.mode}.txt").write_text(self.to_text() + "\n", encoding="utf-8")


def _summary(report) -> dict:
    return {"f1": report.f1, "acc": report.acc, "roc_auc": report.roc_auc, "pr_auc": report.pr_auc}


def run_ablation(plan: AblationPlan, manifest: DatasetManifest, base: TrainConfig,
                 evaluate_test: bool = True, progress=None) -> AblationReport:
    """Train every variant of ``plan`` from ``base`` and rank them by validation macro-F1."""
    variants = plan.variants()
    if not variants:
        raise UnknownVariantError("plan has no variants")
    if plan.seed is not None:
        base = base.replace(seed=plan.seed)
    train_bags = manifest.load_split("train")
    val_bags = manifest.load_split("val")
    test_bags = manifest.load_split("test") if evaluate_test else []
    cache: dict = {}
    rows = []
    for name, overrides in variants:
        cfg = base.replace(**overrides)
        cfg.validate()
        text = manifest.load_text_bank(seed=cfg.seed, t=cfg.t) if cfg.use_text else None
        start = time.perf_counter()
        result, _ = train_prepared(train_bags, val_bags, cfg, text, cache=cache)
        val = _summary(evaluate(result, val_bags, manifest.class_names))
        test = _summary(evaluate(result, test_bags, manifest.class_names)) if test_bags else None
        rows.append(AblationRow(name, overrides, val, test, result.best_epoch,
                                time.perf_counter() - start))
        if progress is not None:
            progress(rows[-1])
    return AblationReport(plan.mode, base.seed, rows)
