"""Finite-difference checks for every trainable parameter group on small fixed shapes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .fusion import FusionConfig, FusionModel, knn_graph
from .selection import SelectorParams, selector_logits

SUITE_K, SUITE_D, SUITE_HEADS, SUITE_C, SUITE_T = 6, 8, 2, 2, 1
TOLERANCE = 1e-4


@dataclass
class GradCheckRow:
    group: str
    name: str
    shape: tuple
    rel_err: float
    grad_norm: float = 1.0

    @property
    def ok(self) -> bool:
        # a vanishing gradient means the group is disconnected from the loss
        return bool(np.isfinite(self.rel_err) and self.rel_err < TOLERANCE and self.grad_norm > 0)


@dataclass
class GradSuiteReport:
    rows: list[GradCheckRow]

    @property
    def ok(self) -> bool:
        return all(r.ok for r in self.rows)

    @property
    def worst(self) -> float:
        return max(r.rel_err for r in self.rows)

    def groups(self) -> list[str]:
        return sorted({r.group for r in self.rows})

    def to_text(self) -> str:
        lines = [f"{'group':<18}{'parameter':<20}{'shape':<10}{'rel_err':>12}{'|grad|':>11}  status"]
        for r in self.rows:
            lines.append(f"{r.group:<18}{r.name:<20}{'x'.join(map(str, r.shape)):<10}"
                         f"{r.rel_err:>12.3e}{r.grad_norm:>11.3e}  {'ok' if r.ok else 'FAIL'}")
        lines.append(f"worst={self.worst:.3e} tolerance={TOLERANCE:g} -> {'PASS' if self.ok else 'FAIL'}")
        return "\n".join(lines)


def _group(name: str) -> str:
    head = name.split(".")[0]
    return {"self": "attention.self", "graph": "attention.graph", "text": "attention.text",
            "gcn": "gcn", "fuse": "fusion", "head": "head", "selector": "selector",
            "naive": "naive_fusion", "focal": "focal"}.get(head, head) if name != "text.prompts" else "prompts"


def _fixture(seed: int):
    rng = np.random.default_rng([seed, 0x6C])
    feats = rng.standard_normal((SUITE_K, SUITE_D))
    gx = rng.permutation(16)[:SUITE_K]
    gy = rng.permutation(16)[:SUITE_K]
    slide = np.zeros(SUITE_K, dtype=int)
    label = np.array([1.0, 0.0])
    return rng, feats, knn_graph(slide, gx, gy, k=3), label


def run_grad_suite(seed: int = 0, step: float = 1e-5, alpha: float = 0.25,
                   gamma: float = 2.0) -> GradSuiteReport:
    rng, feats, graph, label = _fixture(seed)
    rows: list[GradCheckRow] = []

    def record(errs: dict, params):
        for p in params:
            norm = float(np.linalg.norm(p.grad)) if p.grad is not None else 0.0
            rows.append(GradCheckRow(_group(p.name), p.name, p.shape, errs[p.name], norm))

    sel = SelectorParams.init(SUITE_D, SUITE_C, hidden=SUITE_HEADS, seed=seed)
    _, errs = ad.gradcheck(lambda: ad.focal_bce(selector_logits(feats, sel), label, alpha, gamma),
                           sel.params(), step, per_param=True)
    record(errs, sel.params())

    frozen = rng.standard_normal((SUITE_C, SUITE_D)) / np.sqrt(SUITE_D)
    prompts = rng.uniform(-0.5, 0.5, (SUITE_T, SUITE_D))
    cfg = FusionConfig(SUITE_D, SUITE_C, SUITE_T, SUITE_HEADS, True, True, "ours")
    model = FusionModel(cfg, frozen, prompts, seed=seed)
    params = model.params()
    _, errs = ad.gradcheck(lambda: ad.focal_bce(model.forward(feats, graph)[0], label, alpha, gamma),
                           params, step, per_param=True)
    record(errs, params)

    logits = ad.Param(rng.standard_normal((1, SUITE_C)) * 2.0, "focal.logits")
    _, errs = ad.gradcheck(lambda: ad.focal_bce(logits, label, alpha, gamma), [logits], step,
                           per_param=True)
    record(errs, [logits])
    return GradSuiteReport(rows)
