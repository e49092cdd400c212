import csv
import math

import numpy as np
import pytest

from emmpd import autodiff as ad
from emmpd.ablation import AblationPlan, UnknownVariantError, run_ablation
from emmpd.training import (NumericalError, TrainConfig, evaluate, focal_bce, load_checkpoint,
                            read_checkpoint, save_checkpoint, train, train_prepared)

FAST = dict(epochs=3, selector_epochs=2, K=16, lr=3e-4, selector_lr=3e-3, heads=2, t=2)


def focal_scalar(z, y, alpha, gamma):
    p = 1 / (1 + math.exp(-z))
    pt, at = (p, alpha) if y else (1 - p, 1 - alpha)
    return at * (1 - pt) ** gamma * -math.log(pt)


def test_focal_reduces_to_half_bce():
    rng = np.random.default_rng(0)
    z = rng.standard_normal((1, 5)) * 3
    y = rng.integers(0, 2, (1, 5))
    p = 1 / (1 + np.exp(-z))
    bce = -(y * np.log(p) + (1 - y) * np.log(1 - p))
    for c in range(5):
        got = focal_bce(z[:, c:c + 1], y[:, c:c + 1], alpha=0.5, gamma=0.0).item()
        assert abs(got - 0.5 * bce[0, c]) < 1e-12


def test_focal_single_term_anchor_and_defaults():
    z = math.log(9.0)       # sigmoid(z) = 0.9
    got = focal_bce(np.array([[z]]), np.array([[1.0]])).item()
    assert abs(got - 0.25 * 0.1 ** 2 * -math.log(0.9)) < 1e-9
    cfg = TrainConfig()
    assert (cfg.alpha, cfg.gamma) == (0.25, 2.0)
    assert abs(focal_bce(np.array([[0.4, -1.2]]), np.array([[0, 1]])).item()
               - focal_scalar(0.4, 0, 0.25, 2) - focal_scalar(-1.2, 1, 0.25, 2)) < 1e-12


def test_config_validation():
    for bad in (dict(alpha=1.5), dict(gamma=-1), dict(K=0), dict(sampling="nope"),
                dict(gcn_placement="middle"), dict(task_mode="x")):
        with pytest.raises(ValueError):
            TrainConfig(**bad).validate()


def test_zero_lr_leaves_parameters(tiny_manifest):
    cfg = TrainConfig(**{**FAST, "lr": 0.0, "selector_epochs": 0})
    res = train(tiny_manifest, cfg)
    fresh, _ = train_prepared(tiny_manifest.load_split("train"), tiny_manifest.load_split("val"),
                              cfg.replace(epochs=0), tiny_manifest.load_text_bank(seed=0, t=2))
    for a, b in zip(res.model.params(), fresh.model.params()):
        np.testing.assert_array_equal(a.value, b.value)


def test_training_reduces_loss(tiny_manifest):
    res = train(tiny_manifest, TrainConfig(**{**FAST, "epochs": 6}))
    losses = [h["train_loss"] for h in res.history]
    assert losses[-1] < losses[0]
    assert res.best_epoch == int(np.argmin([h["val_loss"] for h in res.history]))


def test_early_stopping_restores_best(tiny_manifest):
    res = train(tiny_manifest, TrainConfig(**{**FAST, "epochs": 12, "patience": 1, "lr": 3e-2}))
    val = [h["val_loss"] for h in res.history]
    assert len(val) == res.best_epoch + 2 or len(val) == 12
    from emmpd.training import mean_loss, prepare_bag, candidate_indices
    preps = [prepare_bag(b, candidate_indices(b, res.config), res.config, res.selector)
             for b in tiny_manifest.load_split("val")]
    assert mean_loss(res.model, preps, res.config) == pytest.approx(min(val), rel=1e-12)


def test_history_csv(tiny_manifest, tmp_path):
    res = train(tiny_manifest, TrainConfig(**FAST))
    res.write_history(tmp_path / "h.csv")
    rows = list(csv.DictReader(open(tmp_path / "h.csv")))
    assert [int(r["epoch"]) for r in rows] == [0, 1, 2]
    assert float(rows[0]["lr"]) == FAST["lr"]
    assert float(rows[1]["val_loss"]) == res.history[1]["val_loss"]


def test_determinism_and_checkpoint_round_trip(tiny_manifest, tmp_path):
    cfg = TrainConfig(**FAST)
    a, b = train(tiny_manifest, cfg), train(tiny_manifest, cfg)
    save_checkpoint(a, tmp_path / "a.empc")
    save_checkpoint(b, tmp_path / "b.empc")
    assert (tmp_path / "a.empc").read_bytes() == (tmp_path / "b.empc").read_bytes()
    val = tiny_manifest.load_split("val")
    back = load_checkpoint(tmp_path / "a.empc", cfg, d=tiny_manifest.d, num_classes=tiny_manifest.C)
    assert evaluate(back, val).to_dict() == evaluate(a, val).to_dict()
    blocks = read_checkpoint(tmp_path / "a.empc")
    assert {"gcn.w1", "fuse.w", "head.w", "selector.V"} <= set(blocks)


def test_checkpoint_errors(tiny_manifest, tmp_path):
    res = train(tiny_manifest, TrainConfig(**{**FAST, "epochs": 1}))
    save_checkpoint(res, tmp_path / "c.empc")
    with pytest.raises(ad.ShapeError):
        load_checkpoint(tmp_path / "c.empc", res.config, num_classes=tiny_manifest.C + 1)
    raw = (tmp_path / "c.empc").read_bytes()
    (tmp_path / "t.empc").write_bytes(raw[:40])
    from emmpd.training import CheckpointError
    with pytest.raises(CheckpointError):
        read_checkpoint(tmp_path / "t.empc")
    (tmp_path / "m.empc").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(CheckpointError):
        read_checkpoint(tmp_path / "m.empc")


def test_non_finite_loss_raises(tiny_manifest):
    train_bags = tiny_manifest.load_split("train")
    train_bags[0].embeddings[:] = np.nan
    with pytest.raises((NumericalError, FloatingPointError)):
        train_prepared(train_bags, tiny_manifest.load_split("val"),
                       TrainConfig(**{**FAST, "sampling": "random", "use_text": False}), None)


def test_ablation_single_variant_matches_plain_run(tiny_manifest):
    base = TrainConfig(**FAST)
    rep = run_ablation(AblationPlan("fusion"), tiny_manifest, base, evaluate_test=False)
    assert [r.name for r in rep.rows] == ["cat", "add", "ours"]
    plain = evaluate(train(tiny_manifest, base), tiny_manifest.load_split("val"))
    ours = rep.row("ours").val
    assert ours["f1"] == plain.f1 and ours["roc_auc"] == plain.roc_auc
    ranked = [r.val["f1"] for r in rep.ranked()]
    assert ranked == sorted(ranked, reverse=True)


def test_ablation_plans():
    assert [n for n, _ in AblationPlan("sampling").variants()] == ["random", "pos-k", "1dcom", "tsps"]
    assert [n for n, _ in AblationPlan("window", [6, 8, 10]).variants()] == ["w=6", "w=8", "w=10"]
    with pytest.raises(UnknownVariantError):
        AblationPlan("nonsense").validate()
