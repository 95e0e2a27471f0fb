"""Command line entry point: ``activeseg <command> [options]``.

Exit codes: 0 success, 1 usage error, 2 data error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .errors import ActiveSegError, InvalidArgumentError, ParseError
from .experiment import (
    CASE_FIELDS,
    STRATEGIES,
    SUMMARY_FIELDS,
    ExperimentConfig,
    csv_text,
    generate_dataset,
    load_config,
    read_csv_rows,
    read_manifest,
    run,
    summarize_case_rows,
    write_dataset,
    write_text_atomic,
)
from .learner import PartialLabels, load_checkpoint, predict, save_checkpoint, threshold, train
from .metrics import evaluate_case
from .uncertainty import mc_sample, predictive_entropy, profile_with_peaks
from .volume import read_mhd, write_mhd

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _arms(text: str) -> tuple[str, ...]:
    arms = tuple(a.strip().upper() for a in text.split(",") if a.strip())
    bad = [a for a in arms if a not in STRATEGIES]
    if bad:
        raise argparse.ArgumentTypeError(f"unknown strategies {bad}; choose from {','.join(s.lower() for s in STRATEGIES)}")
    return arms


def _u64(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="activeseg", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="write a phantom dataset and manifest")
    g.add_argument("--config", type=Path, help="experiment config JSON")
    g.add_argument("--seed", type=_u64, help="master seed (overrides the config)")
    g.add_argument("--out", type=Path, required=True, help="output directory")

    r = sub.add_parser("run", help="run the full active-learning experiment")
    r.add_argument("--config", type=Path, help="experiment config JSON")
    r.add_argument("--seed", type=_u64, help="master seed (overrides the config)")
    r.add_argument("--out", type=Path, required=True, help="output directory")
    r.add_argument("--arms", type=_arms, help="comma-separated subset of uvs,rvs,uss,rss")
    r.add_argument("--iterations", type=int, help="active-learning iterations")
    r.add_argument("--converged", action="store_true", help="train with early stopping instead of the step cap")
    r.add_argument("--keep-volumes", action="store_true", help="write test predictions and probabilities")
    r.add_argument("--threads", type=int, help="arms run concurrently")

    t = sub.add_parser("train", help="train one model on the fully annotated pool of a manifest")
    t.add_argument("--manifest", type=Path, required=True)
    t.add_argument("--out", type=Path, required=True, help="checkpoint path")
    t.add_argument("--config", type=Path, help="experiment config JSON")
    t.add_argument("--seed", type=_u64, help="master seed (overrides the config)")
    t.add_argument("--volumes", help="comma-separated pool ids (default: whole pool)")
    t.add_argument("--converged", action="store_true", help="train with early stopping instead of the step cap")

    u = sub.add_parser("uncertainty", help="entropy map and slice profile for one volume")
    u.add_argument("--checkpoint", type=Path, required=True)
    u.add_argument("--image", type=Path, required=True)
    u.add_argument("--out", type=Path, required=True, help="output directory")
    u.add_argument("--samples", type=int, default=20, help="MC dropout samples (default: 20)")
    u.add_argument("--seed", type=_u64, default=0, help="dropout seed (default: 0)")

    e = sub.add_parser("evaluate", help="metrics of a prediction against a reference")
    e.add_argument("pred", type=Path, help="predicted label volume (.mha/.mhd)")
    e.add_argument("ref", type=Path, help="reference label volume (.mha/.mhd)")

    rep = sub.add_parser("report", help="recompute summary.csv from cases.csv")
    rep.add_argument("cases", type=Path, help="cases.csv from a run")
    rep.add_argument("--out", type=Path, help="summary path (default: stdout)")
    return p


def _config(args) -> ExperimentConfig:
    """Config file plus flag overrides; invalid settings are usage errors."""
    try:
        return _build_config(args)
    except InvalidArgumentError as exc:
        raise UsageError(f"activeseg {args.command}: {exc}") from None


def _build_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else ExperimentConfig()
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "arms", None):
        changes["arms"] = args.arms
    if getattr(args, "iterations", None) is not None:
        changes["iterations"] = args.iterations
    if getattr(args, "converged", False):
        changes["converged"] = True
    if getattr(args, "keep_volumes", False):
        changes["keep_volumes"] = True
    if getattr(args, "threads", None) is not None:
        changes["threads"] = args.threads
    cfg = replace(cfg, **changes)
    cfg.validate()
    return cfg


def _fmt(x) -> str:
    return "nan" if x is None else repr(float(x))


def cmd_generate(args) -> int:
    cfg = _config(args)
    write_dataset(generate_dataset(cfg), args.out, cfg.seed, cfg.phantom)
    print(args.out / "manifest.json")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = _config(args)
    result = run(cfg, args.out)
    for rep in result.reports:
        d = [m.dice for _, m in rep.cases if m.dice is not None]
        if d:
            print(f"{rep.strategy:9s} {str(rep.iteration):9s} mean_dice={np.mean(d):.4f} "
                  f"slices={rep.ledger.slices} volumes={rep.ledger.volumes}")
    for arm, msg in sorted(result.partial.items()):
        print(f"{arm}: aborted ({msg})", file=sys.stderr)
    return EXIT_DATA if result.partial else EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    data = read_manifest(args.manifest)
    pool = {c.id: c for c in data["pool"]}
    ids = [v.strip() for v in args.volumes.split(",")] if args.volumes else sorted(pool)
    missing = [v for v in ids if v not in pool]
    if missing:
        raise ActiveSegError(f"volumes not in the pool: {missing}")
    items = [(pool[v].image, PartialLabels.full(pool[v].label)) for v in ids]
    val = [(c.image, c.label) for c in data["val"]]
    tcfg = cfg.converged_train if args.converged else cfg.train
    if args.seed is not None:
        tcfg = replace(tcfg, seed=args.seed)
    params, tlog = train(items, val, tcfg, cfg.features)
    save_checkpoint(args.out, params, cfg.features)
    print(f"best_step={tlog.best_step} steps_run={tlog.steps_run} val_jaccard={tlog.best_jaccard!r}")
    return EXIT_OK


def cmd_uncertainty(args) -> int:
    params, features = load_checkpoint(args.checkpoint)
    image = read_mhd(args.image, as_label=False)
    ent = predictive_entropy(mc_sample(params, image, features, args.samples, args.seed))
    prof = profile_with_peaks(ent)
    args.out.mkdir(parents=True, exist_ok=True)
    write_mhd(args.out / "entropy.mha", ent)
    write_mhd(args.out / "prediction.mha", threshold(predict(params, image, features)))
    doc = {"values": [float(x) for x in prof.values], "peaks": [int(z) for z in prof.peaks]}
    write_text_atomic(args.out / "profile.json", json.dumps(doc, indent=1) + "\n")
    print("z,uncertainty,peak")
    peaks = set(prof.peaks)
    for z, val in enumerate(prof.values):
        print(f"{z},{val!r},{int(z in peaks)}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    pred = read_mhd(args.pred, as_label=True)
    ref = read_mhd(args.ref, as_label=True)
    m = evaluate_case(pred, ref)
    print("dice,rve_pct,msd_mm,hd_mm")
    print(",".join(_fmt(x) for x in m.as_tuple()))
    return EXIT_OK


def cmd_report(args) -> int:
    rows = read_csv_rows(args.cases)
    if not rows or set(CASE_FIELDS) - set(rows[0]):
        raise ParseError(f"{args.cases} is not a cases table", "header")
    text = csv_text(summarize_case_rows(rows), SUMMARY_FIELDS)
    if args.out:
        write_text_atomic(args.out, text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "run": cmd_run,
    "train": cmd_train,
    "uncertainty": cmd_uncertainty,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (ActiveSegError, OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"activeseg {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
