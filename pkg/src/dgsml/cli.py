"""Command-line harness: ``dgsml {gen-data,train,ablate,gradcheck}``.

Exit codes: 0 success, 1 check or run failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import gradcheck
from .domains import ConfigurationError, ParseError, mask_labels, write_collection
from .experiments import (
    ABLATION_VARIANTS,
    METHODS,
    DatasetSpec,
    ExperimentConfig,
    default_out_dir,
    run_sweep,
    write_ablation_table,
    write_summary,
)

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

log = logging.getLogger("dgsml")


class UsageError(Exception):
    pass


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _targets(text: str):
    return "all" if text == "all" else _ints(text)


def _names(text: str) -> list[str]:
    return [v.strip() for v in text.split(",") if v.strip()]


def _add_dataset_flags(p: argparse.ArgumentParser, from_dir: bool = True):
    g = p.add_argument_group("dataset")
    if from_dir:
        g.add_argument("--data", help="directory written by gen-data (overrides the generator flags)")
    g.add_argument("--generator", choices=["moons", "gaussians"])
    g.add_argument("--domains", type=int, dest="n_domains")
    g.add_argument("--n", type=int, dest="samples_per_domain", help="samples per domain")
    g.add_argument("--rotations", type=_floats, help="degrees per domain, comma-separated")
    g.add_argument("--translations", type=_floats, help="per-domain shift (gaussians)")
    g.add_argument("--classes", type=int, dest="num_classes", help="number of classes (gaussians)")
    g.add_argument("--separation", type=float, dest="class_separation")
    g.add_argument("--noise", type=float, dest="noise_sd")
    if from_dir:
        g.add_argument("--data-seed", type=int, dest="data_seed")


def _add_run_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", help="JSON experiment config; flags override its values")
    _add_dataset_flags(p)
    g = p.add_argument_group("protocol")
    g.add_argument("--rates", type=_floats)
    g.add_argument("--seeds", type=_ints)
    g.add_argument("--targets", type=_targets, help="'all' (leave-one-domain-out) or comma-separated ids")
    g.add_argument("--out", help="output directory (default: $DGSML_OUT or ./runs)")
    g.add_argument("--jobs", type=int)
    h = p.add_argument_group("hyperparameters")
    for name in ("alpha0", "alpha1", "beta0", "beta1"):
        h.add_argument(f"--{name}", type=float)
    h.add_argument("--batch", type=int, dest="batch_per_domain")
    h.add_argument("--iterations", type=int)
    h.add_argument("--first-order", action="store_true", default=None)
    h.add_argument("--hidden", type=_ints, dest="hidden_dims")
    h.add_argument("--feature-dim", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dgsml", description="Semi-supervised domain generalization experiments.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="write a synthetic multi-domain dataset")
    _add_dataset_flags(gen, from_dir=False)
    gen.add_argument("--seed", type=int, help="generator seed")
    gen.add_argument("--rate", type=float, default=0.0, help="fraction of labels to hide")
    gen.add_argument("--mask-seed", type=int, default=0)
    gen.add_argument("--out", required=True)

    tr = sub.add_parser("train", help="run methods over (rate, seed, target) and summarize")
    _add_run_flags(tr)
    tr.add_argument("--method", type=_names, dest="methods", help=f"comma-separated, from {METHODS}")

    ab = sub.add_parser("ablate", help="compare DGSML with each loss removed")
    _add_run_flags(ab)
    ab.add_argument("--variants", type=_names, help=f"comma-separated, from {ABLATION_VARIANTS}")

    gc = sub.add_parser("gradcheck", help="finite-difference checks of every op and the meta-gradient")
    gc.add_argument("--cases", type=int, default=100)
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--no-second-order", action="store_true")
    gc.add_argument("--corrupt", action="append", default=[], help=argparse.SUPPRESS)
    return parser


def _dataset_overrides(args) -> dict:
    keys = ("generator", "n_domains", "samples_per_domain", "rotations", "translations", "num_classes", "class_separation", "noise_sd")
    d = {k: getattr(args, k) for k in keys if getattr(args, k, None) is not None}
    if getattr(args, "data_seed", None) is not None:
        d["seed"] = args.data_seed
    if getattr(args, "data", None):
        d["path"] = args.data
    if "rotations" in d and "n_domains" not in d:
        d["n_domains"] = len(d["rotations"])
    return d


def load_config(args) -> ExperimentConfig:
    """Config file (if any), then command-line flags on top."""
    raw: dict = {}
    if args.config:
        try:
            raw = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
    raw.setdefault("out_dir", default_out_dir())
    raw["dataset"] = {**raw.get("dataset", {}), **_dataset_overrides(args)}
    hyper = dict(raw.get("hyper", {}))
    for k in ("alpha0", "alpha1", "beta0", "beta1", "batch_per_domain", "iterations"):
        if getattr(args, k, None) is not None:
            hyper[k] = getattr(args, k)
    if args.first_order:
        hyper["second_order"] = False
    raw["hyper"] = hyper
    for k, dest in (("rates", "rates"), ("seeds", "seeds"), ("targets", "targets"), ("jobs", "jobs"),
                    ("hidden_dims", "hidden_dims"), ("feature_dim", "feature_dim"), ("out", "out_dir")):
        if getattr(args, k, None) is not None:
            raw[dest] = getattr(args, k)
    if getattr(args, "methods", None):
        raw["methods"] = args.methods
    try:
        config = ExperimentConfig.from_dict(raw)
    except TypeError as exc:
        raise UsageError(f"bad config: {exc}") from exc
    config.validate()
    return config


def cmd_gen_data(args) -> int:
    overrides = _dataset_overrides(args)
    overrides.pop("path", None)
    if args.seed is not None:
        overrides["seed"] = args.seed
    spec = DatasetSpec(**overrides)
    coll = spec.build()
    if args.rate:
        coll = mask_labels(coll, args.rate, args.mask_seed)
    for path in write_collection(coll, args.out):
        print(path)
    return EXIT_OK


def _finish(records, summary, out: Path) -> int:
    ok = [r for r in records if r.status == "ok"]
    for o in summary["overall"]:
        print(f"{o['method']:<20} rate={o['rate']:<5g} mean over {o['n_targets']} targets: {o['mean_over_targets']:.4f}")
    failed = len(records) - len(ok)
    if failed:
        print(f"{failed} run(s) diverged and were recorded as failed", file=sys.stderr)
    return EXIT_OK if ok else EXIT_FAIL


def cmd_train(args) -> int:
    config = load_config(args)
    records, _ = run_sweep(config)
    out = Path(config.out_dir)
    summary = write_summary(records, out / "summary.json")
    (out / "config.json").write_text(json.dumps(config.to_dict(), indent=2) + "\n")
    return _finish(records, summary, out)


def cmd_ablate(args) -> int:
    config = load_config(args)
    variants = args.variants or ABLATION_VARIANTS
    bad = [v for v in variants if v not in ABLATION_VARIANTS]
    if bad:
        raise UsageError(f"unknown variant(s) {bad}; choose from {ABLATION_VARIANTS}")
    config = replace(config, methods=list(variants))
    records, _ = run_sweep(config, metrics_name="ablation_metrics.csv")
    out = Path(config.out_dir)
    summary = write_summary(records, out / "ablation_summary.json")
    write_ablation_table(summary, out / "ablation_table.csv")
    (out / "ablation_config.json").write_text(json.dumps(config.to_dict(), indent=2) + "\n")
    return _finish(records, summary, out)


def cmd_gradcheck(args) -> int:
    corrupt = {}
    for item in args.corrupt:
        name, _, amount = item.partition("=")
        corrupt[name] = float(amount or 1e-2)
    results = gradcheck.run_all(args.cases, args.seed, not args.no_second_order, corrupt)
    failures = [r for r in results if not r.passed]
    for r in results:
        mark = "ok  " if r.passed else "FAIL"
        print(f"{mark} {r.name:<28} cases={r.cases:<4d} max_rel_error={r.max_rel_error:.3e} tol={r.tolerance:g}")
    if failures:
        print("failed: " + ", ".join(r.name for r in failures), file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "ablate": cmd_ablate, "gradcheck": cmd_gradcheck}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigurationError, ParseError, FileNotFoundError) as exc:
        print(f"dgsml {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
