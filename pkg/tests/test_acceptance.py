"""The nine acceptance criteria, each at its stated tolerance and runtime limit.

Every test prints one ``CRITERION n PASS|FAIL`` line; the lines are repeated
in the terminal summary. Criteria 4 and 5 train real models and take about
two and eleven minutes respectively on one core.
"""
import itertools
import math
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from emmpd import autodiff as ad
from emmpd.ablation import AblationPlan, run_ablation
from emmpd.bagio import SyntheticSpec, generate_synthetic
from emmpd.fusion import FusionConfig, FusionModel, knn_graph
from emmpd.gradsuite import run_grad_suite
from emmpd.metrics import binary_average_precision, binary_roc_auc
from emmpd.selection import compress_window, normalize_embeddings, two_dim_compress
from emmpd.training import (TrainConfig, evaluate, focal_bce, save_checkpoint, train)

# Desk-scale training settings; lr=1e-4 is the library default
# but needs more than 50 epochs on this cohort (see README).
ACCEPT = TrainConfig(lr=3e-4, selector_lr=3e-3, epochs=30)
COHORT = SyntheticSpec(seed=7)


def report(n: int, ok: bool, detail: str) -> None:
    line = f"CRITERION {n} {'PASS' if ok else 'FAIL'}: {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


@pytest.fixture(scope="module")
def cohort(tmp_path_factory):
    return generate_synthetic(COHORT, tmp_path_factory.mktemp("cohort"))


# ---------------------------------------------------------------- 1

def test_criterion_1_gradient_suite():
    start = time.perf_counter()
    rep = run_grad_suite()
    secs = time.perf_counter() - start
    want = {"selector", "gcn", "attention.self", "attention.graph", "attention.text",
            "fusion", "prompts", "head"}
    ok = rep.ok and want <= set(rep.groups()) and rep.worst < 1e-4 and secs < 30
    report(1, ok, f"{len(rep.rows)} parameters, worst rel err {rep.worst:.2e}, {secs:.1f}s")


# ---------------------------------------------------------------- 2

def brute_keep(vectors):
    m = len(vectors)
    unit = [v / np.linalg.norm(v) for v in vectors]
    sim = {(i, j): float(unit[i] @ unit[j]) for i, j in itertools.combinations(range(m), 2)}
    theta = sum(sim.values()) / len(sim) if sim else 0.0
    live = set(range(m))
    for i, j in itertools.combinations(range(m), 2):
        if i in live and j in live and sim[(i, j)] > theta:
            live.discard(j)
    return sorted(live)


def test_criterion_2_compression_oracle():
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    mismatches = 0
    for _ in range(500):
        m, d = int(rng.integers(1, 13)), int(rng.integers(2, 9))
        v = rng.standard_normal((m, d))
        for i in range(1, m):
            if rng.random() < 0.4:
                v[i] = v[rng.integers(i)] + 0.05 * rng.standard_normal(d)
        kept, _ = compress_window(np.arange(m), normalize_embeddings(v)[0], tie_tol=0.0)
        mismatches += kept.tolist() != brute_keep(v)
    secs = time.perf_counter() - start
    report(2, mismatches == 0 and secs < 5, f"500 windows, {mismatches} mismatches, {secs:.1f}s")


# ---------------------------------------------------------------- 3

def removal_rate(manifest):
    n = kept = 0
    for split in manifest.splits:
        for bag in manifest.load_split(split):
            k, _ = two_dim_compress(bag, 8)
            n, kept = n + bag.n, kept + k.size
    return 1 - kept / n


def test_criterion_3_compression_ratio(tmp_path):
    start = time.perf_counter()
    high = removal_rate(generate_synthetic(SyntheticSpec(seed=7, dup_ratio=0.6), tmp_path / "a"))
    zero = removal_rate(generate_synthetic(SyntheticSpec(seed=7, dup_ratio=0.0), tmp_path / "b"))
    secs = time.perf_counter() - start
    ok = 0.55 <= high <= 0.65 and 0.0 <= zero <= 0.05 and secs < 30
    report(3, ok, f"removal {high:.2%} at ratio 0.6, {zero:.2%} at ratio 0, {secs:.1f}s")


# ---------------------------------------------------------------- 4

def test_criterion_4_end_to_end(cohort):
    start = time.perf_counter()
    val = cohort.load_split("val")
    f1 = evaluate(train(cohort, ACCEPT), val).f1
    control = evaluate(train(cohort, ACCEPT.replace(shuffle_labels=True)), val).f1
    secs = time.perf_counter() - start
    ok = f1 >= 0.9 and control <= 0.55 and secs < 600
    report(4, ok, f"val macro-F1 {f1:.4f}, shuffled control {control:.4f}, {secs:.0f}s")


# ---------------------------------------------------------------- 5

def test_criterion_5_ablation_orderings(cohort):
    start = time.perf_counter()
    f1 = {mode: {r.name: r.val["f1"] for r in run_ablation(AblationPlan(mode), cohort, ACCEPT,
                                                             evaluate_test=False).rows}
          for mode in ("sampling", "modules", "fusion", "gcn_placement")}
    secs = time.perf_counter() - start
    s, m, f, g = f1["sampling"], f1["modules"], f1["fusion"], f1["gcn_placement"]
    checks = {
        "tsps>random": s["tsps"] > s["random"],
        "full>=partials": all(m["full"] >= v for k, v in m.items() if k != "full"),
        "ours>cat,add": f["ours"] > f["cat"] and f["ours"] > f["add"],
        "after>=before": g["after"] >= g["before"],
        "runtime": secs < 45 * 60,
    }
    detail = " ".join(f"{k}={'ok' if v else 'no'}" for k, v in checks.items())
    detail += (f" (tsps {s['tsps']:.3f} random {s['random']:.3f}; full {m['full']:.3f} best partial "
               f"{max(v for k, v in m.items() if k != 'full'):.3f}; ours {f['ours']:.3f} cat "
               f"{f['cat']:.3f} add {f['add']:.3f}; after {g['after']:.3f} before {g['before']:.3f};"
               f" {secs / 60:.1f} min)")
    report(5, all(checks.values()), detail)


# ---------------------------------------------------------------- 6

def pair_count_auc(s, y):
    pos = [a for a, t in zip(s, y) if t]
    neg = [b for b, t in zip(s, y) if not t]
    return sum(1.0 if a > b else 0.5 if a == b else 0.0 for a in pos for b in neg) / (len(pos) * len(neg))


def rank_walk_ap(s, y):
    n_pos, ap, prev = sum(y), 0.0, 0.0
    for thr in sorted(set(s), reverse=True):
        admitted = [t for a, t in zip(s, y) if a >= thr]
        recall = sum(admitted) / n_pos
        ap += (recall - prev) * sum(admitted) / len(admitted)
        prev = recall
    return ap


def test_criterion_6_metric_oracles():
    rng = np.random.default_rng(6)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(2, 16))
        y = rng.integers(0, 2, n)
        if y.min() == y.max():
            y[0] = 1 - y[0]
        s = rng.integers(0, 6, n).astype(float) if rng.random() < 0.5 else rng.random(n)
        auc = binary_roc_auc(s, y)
        worst = max(worst, abs(auc - pair_count_auc(s, y)),
                    abs(binary_average_precision(s, y) - rank_walk_ap(list(s), list(y))),
                    abs(binary_roc_auc(np.exp(3 * s) - 2, y) - auc))
    secs = time.perf_counter() - start
    report(6, worst < 1e-9 and secs < 10, f"1000 cases, worst deviation {worst:.1e}, {secs:.1f}s")


# ---------------------------------------------------------------- 7

def test_criterion_7_focal_anchors():
    start = time.perf_counter()
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(200):
        z, y = float(rng.standard_normal() * 4), int(rng.integers(0, 2))
        p = 1 / (1 + math.exp(-z))
        bce = -math.log(p) if y else -math.log(1 - p)
        worst = max(worst, abs(focal_bce(np.array([[z]]), np.array([[y]]), 0.5, 0.0).item() - 0.5 * bce))
    single = focal_bce(np.array([[math.log(9.0)]]), np.array([[1.0]])).item()
    anchor = abs(single - 0.25 * 0.1 ** 2 * -math.log(0.9))
    defaults = (TrainConfig().alpha, TrainConfig().gamma) == (0.25, 2.0)
    secs = time.perf_counter() - start
    ok = worst < 1e-12 and anchor < 1e-9 and defaults and secs < 1
    report(7, ok, f"0.5*BCE dev {worst:.1e}, anchor dev {anchor:.1e}, defaults {defaults}, {secs:.2f}s")


# ---------------------------------------------------------------- 8

def random_instance(rng):
    heads = int(rng.choice([1, 2, 4]))
    d, c, t, k = heads * int(rng.integers(1, 5)), int(rng.integers(2, 5)), int(rng.integers(0, 4)), int(rng.integers(2, 14))
    frozen = rng.standard_normal((c, d))
    model = FusionModel(FusionConfig(d, c, t, heads), frozen, rng.uniform(-.02, .02, (t, d)),
                        seed=int(rng.integers(1 << 30)))
    cells = rng.choice(100, k, replace=False)
    return model, rng.standard_normal((k, d)), rng.integers(0, 2, k), cells % 10, cells // 10


def test_criterion_8_structural_invariants():
    rng = np.random.default_rng(8)
    start = time.perf_counter()
    failures = []
    for trial in range(40):
        model, b, s, gx, gy = random_instance(rng)
        k, d = b.shape
        c, t = model.config.num_classes, model.config.t
        g = knn_graph(s, gx, gy, k=3)
        _, tr = model.forward(b, g)
        if (tr.v_att.shape, tr.f_vg_fused.shape, tr.f_vgt.shape, tr.logits.shape) != ((k, d), (2 * k, d), (c + t, d), (c,)):
            failures.append(f"shape {trial}")
        if any(np.abs(w.sum(-1) - 1).max() > 1e-6 for w in tr.attention.values()):
            failures.append(f"rowsum {trial}")
        same = s[:, None] == s[None, :]
        out_deg = np.minimum(3, same.sum(1) - 1)
        if not (np.array_equal(g.adjacency, g.adjacency.T) and np.array_equal(g.directed.sum(1), out_deg)
                and (g.adjacency.sum(1) >= out_deg).all() and not (g.adjacency * ~same).any()
                and np.allclose(g.degree, g.adjacency.sum(1) + 1)):
            failures.append(f"knn {trial}")
        perm = rng.permutation(k)
        moved = model.forward(b[perm], knn_graph(s[perm], gx[perm], gy[perm], k=3))[1].logits
        if np.abs(moved - tr.logits).max() > 1e-9:
            failures.append(f"perm {trial}")
    secs = time.perf_counter() - start
    report(8, not failures and secs < 10, f"40 random instances, failures {failures or 'none'}, {secs:.1f}s")


# ---------------------------------------------------------------- 9

def test_criterion_9_determinism(tmp_path):
    spec = SyntheticSpec(num_patients=30, d=48, patches_per_slide=(40, 56), slides_per_patient=(1, 2), seed=9)
    m = generate_synthetic(spec, tmp_path / "ds")
    cfg = ACCEPT.replace(epochs=4, selector_epochs=3, seed=9)
    runs = []
    for i in range(2):
        res = train(m, cfg)
        save_checkpoint(res, tmp_path / f"{i}.empc")
        runs.append(((tmp_path / f"{i}.empc").read_bytes(), evaluate(res, m.load_split("val")).to_dict()))
    same_ckpt = runs[0][0] == runs[1][0]
    same_report = runs[0][1] == runs[1][1]
    report(9, same_ckpt and same_report,
           f"checkpoints identical {same_ckpt} ({len(runs[0][0])} bytes), reports identical {same_report}")
