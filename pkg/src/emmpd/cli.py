"""Command-line entry point: ``emmpd <command> [flags]``.

Exit codes: 0 success, 1 usage error, 2 data or validation error, 3 numerical failure.
Values from ``--config`` (a JSON object) are overridden by flags given on the
command line. ``EMMPD_SEED`` supplies the seed when neither sets one.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .ablation import ABLATION_MODES, AblationPlan, UnknownVariantError, run_ablation
from .autodiff import ShapeError
from .bagio import BagFormatError, SyntheticSpec, generate_synthetic, load_manifest
from .gradsuite import run_grad_suite
from .selection import DEFAULT_WINDOW, two_dim_compress
from .training import (SAMPLING_MODES, CheckpointError, NumericalError, TrainConfig, evaluate,
                       load_checkpoint, load_config, model_forward, prepare_bag, candidate_indices,
                       save_checkpoint, save_config, train)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
CHECKPOINT_NAME = "checkpoint.empc"

log = logging.getLogger("emmpd")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


_UNSET = object()


class _Flags:
    """Declares flags whose defaults are shown in --help but can still be told apart
    from explicit values, so config-file values only fill what the user left unset."""

    def __init__(self, parser: argparse.ArgumentParser):
        self.parser = parser
        self.defaults: dict[str, object] = {}

    def add(self, flag: str, default, help: str, **kw):
        dest = flag.lstrip("-").replace("-", "_")
        self.defaults[dest] = default
        shown = "none" if default is None else default
        if isinstance(default, (list, tuple)):
            shown = ",".join(map(str, default))
        self.parser.add_argument(flag, dest=dest, default=_UNSET,
                                 help=f"{help} (default: {shown})", **kw)


def _int_pair(text: str) -> tuple[int, int]:
    parts = [int(p) for p in text.split(",")]
    if len(parts) == 1:
        parts *= 2
    if len(parts) != 2:
        raise argparse.ArgumentTypeError("expected LO,HI")
    return parts[0], parts[1]


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _grid(text: str) -> list:
    out = []
    for item in text.split(","):
        item = item.strip()
        try:
            out.append(int(item))
        except ValueError:
            try:
                out.append(float(item))
            except ValueError:
                out.append(item)
    return out


def _common(p: argparse.ArgumentParser) -> _Flags:
    f = _Flags(p)
    p.add_argument("--config", default=None, help="JSON file of flag values; flags win (default: none)")
    f.add("--seed", 0, "random seed; falls back to $EMMPD_SEED", type=int)
    f.add("--threads", 1, "worker threads for per-bag stages", type=int)
    f.add("--verbose", False, "debug logging", type=_bool, nargs="?", const=True)
    return f


def _train_flags(f: _Flags) -> None:
    d = TrainConfig()
    f.add("--manifest", None, "dataset manifest.json")
    f.add("--lr", d.lr, "Adam learning rate", type=float)
    f.add("--epochs", d.epochs, "fusion training epochs", type=int)
    f.add("--patience", d.patience, "early-stopping patience in epochs", type=int)
    f.add("--alpha", d.alpha, "focal loss alpha", type=float)
    f.add("--gamma", d.gamma, "focal loss gamma", type=float)
    f.add("--w", d.w, "compression window size", type=int)
    f.add("--K", d.K, "patches kept by attention selection", type=int)
    f.add("--k-nn", d.k_nn, "neighbours in the patch graph", type=int)
    f.add("--heads", d.heads, "attention heads", type=int)
    f.add("--t", d.t, "learnable prompt rows", type=int)
    f.add("--task-mode", d.task_mode, "multilabel or multiclass", choices=["multilabel", "multiclass"])
    f.add("--selector-epochs", d.selector_epochs, "selector pretraining epochs", type=int)
    f.add("--selector-lr", d.selector_lr, "selector learning rate (none: use --lr)", type=float)
    f.add("--selector-hidden", d.selector_hidden, "gated attention hidden width", type=int)
    f.add("--sampling", d.sampling, "patch sampling", choices=list(SAMPLING_MODES))
    f.add("--use-gcn", d.use_gcn, "enable the graph branch", type=_bool)
    f.add("--use-text", d.use_text, "enable the text branch", type=_bool)
    f.add("--fusion", d.fusion, "fusion method", choices=["ours", "cat", "add"])
    f.add("--gcn-placement", d.gcn_placement, "build the graph after or before attention selection",
          choices=["after", "before"])
    f.add("--shuffle-labels", d.shuffle_labels, "permute training labels (control run)", type=_bool)


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, _Flags]]:
    parser = _Parser(prog="emmpd", description="Multi-slide pathology MIL pipeline.",
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=f"emmpd {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    flags = {}

    p = sub.add_parser("synth", help="generate a seeded synthetic dataset")
    f = flags["synth"] = _common(p)
    s = SyntheticSpec()
    f.add("--out", None, "output directory")
    f.add("--patients", s.num_patients, "number of patients", type=int)
    f.add("--classes", s.C, "number of classes", type=int)
    f.add("--dim", s.d, "embedding dimension", type=int)
    f.add("--slides", s.slides_per_patient, "slides per patient LO,HI", type=_int_pair)
    f.add("--patches", s.patches_per_slide, "patches per slide LO,HI", type=_int_pair)
    f.add("--dup-ratio", s.dup_ratio, "fraction of near-duplicate patches", type=float)
    f.add("--signature-strength", s.signature_strength, "class signature component", type=float)
    f.add("--noise-scale", s.noise_scale, "duplicate perturbation relative to norm", type=float)
    f.add("--prevalence", s.prevalence, "per-class positive rate (multilabel)", type=float)
    f.add("--task-mode", s.task_mode, "multilabel or multiclass", choices=["multilabel", "multiclass"])
    f.add("--force", False, "write into a non-empty directory", type=_bool, nargs="?", const=True)

    p = sub.add_parser("compress", help="run window compression and report removal rates")
    f = flags["compress"] = _common(p)
    f.add("--manifest", None, "dataset manifest.json")
    f.add("--w", DEFAULT_WINDOW, "compression window size", type=int)
    f.add("--split", "all", "split to process (train, val, test or all)")
    f.add("--out", None, "directory for per-bag SelectionReport files")

    p = sub.add_parser("train", help="train the full pipeline and write a checkpoint")
    f = flags["train"] = _common(p)
    _train_flags(f)
    f.add("--out", None, "output directory for checkpoint, history and config")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    f = flags["eval"] = _common(p)
    _train_flags(f)
    f.add("--checkpoint", None, "checkpoint file written by train")
    f.add("--split", "test", "split to evaluate")
    f.add("--out", None, "write the MetricsReport JSON here")
    f.add("--trace", None, "write a per-stage shape report for the first bag here")

    p = sub.add_parser("ablate", help="run an ablation study and write a ranked table")
    f = flags["ablate"] = _common(p)
    _train_flags(f)
    f.add("--mode", None, "ablation mode", choices=list(ABLATION_MODES))
    f.add("--grid", None, "comma-separated values or variant names", type=_grid)
    f.add("--out", None, "output directory for the tables")

    p = sub.add_parser("gradcheck", help="finite-difference check of every parameter group")
    flags["gradcheck"] = _common(p)
    return parser, flags


def resolve(args: argparse.Namespace, flags: _Flags) -> dict:
    """Merge explicit flags over config-file values over defaults."""
    config = {}
    if getattr(args, "config", None):
        try:
            config = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise UsageError(f"config file not found: {args.config}")
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file is not valid JSON: {exc}")
        if not isinstance(config, dict):
            raise UsageError("config file must hold a JSON object")
        config = {k.replace("-", "_"): v for k, v in config.items()}
        unknown = sorted(set(config) - set(flags.defaults) - {"config"})
        if unknown:
            raise UsageError(f"unknown config keys: {unknown}")
    out = {}
    for key, default in flags.defaults.items():
        value = getattr(args, key)
        if value is not _UNSET:
            out[key] = value
        elif key in config:
            out[key] = config[key]
        elif key == "seed" and os.environ.get("EMMPD_SEED"):
            try:
                out[key] = int(os.environ["EMMPD_SEED"])
            except ValueError:
                raise UsageError(f"EMMPD_SEED must be an integer, got {os.environ['EMMPD_SEED']!r}")
        else:
            out[key] = default
    if out.get("threads", 1) < 1:
        raise UsageError("--threads must be >= 1")
    return out


def _need(opts: dict, *keys: str) -> None:
    missing = [f"--{k.replace('_', '-')}" for k in keys if opts.get(k) is None]
    if missing:
        raise UsageError(f"missing required option(s): {' '.join(missing)}")


def _train_config(opts: dict) -> TrainConfig:
    fields = {k: opts[k] for k in TrainConfig.__dataclass_fields__ if k in opts}
    cfg = TrainConfig(**fields)
    cfg.validate()
    return cfg


def _emit(text: str) -> None:
    sys.stdout.write(text.rstrip("\n") + "\n")


# ---------------------------------------------------------------- commands

def cmd_synth(opts: dict) -> int:
    _need(opts, "out")
    spec = SyntheticSpec(num_patients=opts["patients"], slides_per_patient=tuple(opts["slides"]),
                         patches_per_slide=tuple(opts["patches"]), d=opts["dim"], C=opts["classes"],
                         dup_ratio=opts["dup_ratio"], signature_strength=opts["signature_strength"],
                         noise_scale=opts["noise_scale"], prevalence=opts["prevalence"],
                         task_mode=opts["task_mode"], seed=opts["seed"])
    spec.validate()
    out = Path(opts["out"])
    if out.exists() and any(out.iterdir()) and not opts["force"]:
        raise FileExistsError(f"{out} is not empty; pass --force to write into it")
    manifest = generate_synthetic(spec, out)
    counts = {k: len(v) for k, v in manifest.splits.items()}
    positives = np.sum([e.label for v in manifest.splits.values() for e in v], axis=0)
    _emit(f"wrote {spec.num_patients} patients to {out}")
    _emit("splits: " + " ".join(f"{k}={n}" for k, n in counts.items()))
    _emit("positives per class: " + " ".join(
        f"{name}={int(n)}" for name, n in zip(manifest.class_names, positives)))
    _emit(f"d={spec.d} C={spec.C} dup_ratio={spec.dup_ratio} seed={spec.seed}")
    return EXIT_OK


def cmd_compress(opts: dict) -> int:
    _need(opts, "manifest")
    if opts["w"] < 1:
        raise ValueError("--w must be >= 1")
    manifest = load_manifest(opts["manifest"])
    splits = list(manifest.splits) if opts["split"] == "all" else [opts["split"]]
    for s in splits:
        if s not in manifest.splits:
            raise ValueError(f"manifest has no split {s!r}")
    bags = [b for s in splits for b in manifest.load_split(s)]
    with ThreadPoolExecutor(max_workers=opts["threads"]) as pool:
        reports = list(pool.map(lambda b: two_dim_compress(b, opts["w"])[1], bags))
    total = sum(r.n for r in reports)
    kept = sum(r.n_compressed for r in reports)
    aggregate = {"bags": len(reports), "N": total, "N_compressed": kept,
                 "removal_rate": round(1.0 - kept / total, 6) if total else 0.0, "w": opts["w"]}
    if opts["out"]:
        out = Path(opts["out"])
        out.mkdir(parents=True, exist_ok=True)
        for r in reports:
            (out / f"{r.patient_id}.json").write_text(json.dumps(r.summary()) + "\n", encoding="utf-8")
        (out / "aggregate.json").write_text(json.dumps(aggregate, indent=1) + "\n", encoding="utf-8")
    _emit(f"{'patient':<10}{'N':>7}{'kept':>7}{'removed':>9}")
    for r in reports:
        _emit(f"{r.patient_id:<10}{r.n:>7}{r.n_compressed:>7}{r.removal_rate:>9.2%}")
    _emit(f"aggregate: bags={aggregate['bags']} N={total} kept={kept} "
          f"removal_rate={aggregate['removal_rate']:.4f}")
    return EXIT_OK


def cmd_train(opts: dict) -> int:
    _need(opts, "manifest", "out")
    cfg = _train_config(opts)
    manifest = load_manifest(opts["manifest"])
    if manifest.task_mode != cfg.task_mode:
        raise ValueError(f"manifest task_mode {manifest.task_mode!r} != config {cfg.task_mode!r}")
    out = Path(opts["out"])
    out.mkdir(parents=True, exist_ok=True)
    result = train(manifest, cfg)
    save_checkpoint(result, out / CHECKPOINT_NAME)
    result.write_history(out / "history.csv")
    save_config(cfg, out / "config.json")
    report = evaluate(result, manifest.load_split("val"), manifest.class_names)
    _emit(f"best epoch {result.best_epoch} val_loss {result.best_val_loss:.6f}")
    _emit("validation: " + report.to_text())
    _emit(f"checkpoint: {out / CHECKPOINT_NAME}")
    return EXIT_OK


def cmd_eval(opts: dict) -> int:
    _need(opts, "manifest", "checkpoint")
    cfg = _train_config(opts)
    manifest = load_manifest(opts["manifest"])
    result = load_checkpoint(opts["checkpoint"], cfg, d=manifest.d, num_classes=manifest.C)
    if opts["split"] not in manifest.splits:
        raise ValueError(f"manifest has no split {opts['split']!r}")
    bags = manifest.load_split(opts["split"])
    if not bags:
        raise ValueError(f"split {opts['split']!r} is empty")
    report = evaluate(result, bags, manifest.class_names)
    if opts["out"]:
        Path(opts["out"]).write_text(json.dumps(report.to_dict(), indent=1) + "\n", encoding="utf-8")
    if opts["trace"]:
        prep = prepare_bag(bags[0], candidate_indices(bags[0], cfg), cfg, result.selector)
        _, trace = model_forward(result.model, prep)
        Path(opts["trace"]).write_text(f"patient {bags[0].patient_id}\n{trace.report()}\n",
                                       encoding="utf-8")
    _emit(report.to_text())
    return EXIT_OK


def cmd_ablate(opts: dict) -> int:
    _need(opts, "manifest", "mode")
    cfg = _train_config(opts)
    plan = AblationPlan(opts["mode"], list(opts["grid"] or []), seed=cfg.seed)
    plan.validate()
    manifest = load_manifest(opts["manifest"])
    report = run_ablation(plan, manifest, cfg,
                          progress=lambda r: log.info("%s val_f1=%.4f", r.name, r.val["f1"]))
    if opts["out"]:
        report.write(opts["out"])
    _emit(report.to_text())
    return EXIT_OK


def cmd_gradcheck(opts: dict) -> int:
    report = run_grad_suite(seed=opts["seed"])
    _emit(report.to_text())
    return EXIT_OK if report.ok else EXIT_NUMERIC


COMMANDS = {"synth": cmd_synth, "compress": cmd_compress, "train": cmd_train,
            "eval": cmd_eval, "ablate": cmd_ablate, "gradcheck": cmd_gradcheck}


def main(argv=None) -> int:
    parser, flags = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            raise UsageError("a command is required; see emmpd --help")
        opts = resolve(args, flags[args.command])
        logging.basicConfig(level=logging.DEBUG if opts.get("verbose") else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[args.command](opts)
    except UsageError as exc:
        sys.stderr.write(f"usage error: {exc}\n")
        return EXIT_USAGE
    except UnknownVariantError as exc:
        sys.stderr.write(f"usage error: {exc}\n")
        return EXIT_USAGE
    except (NumericalError, FloatingPointError) as exc:
        sys.stderr.write(f"numerical failure: {exc}\n")
        return EXIT_NUMERIC
    except (BagFormatError, CheckpointError, ShapeError, ValueError, OSError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
