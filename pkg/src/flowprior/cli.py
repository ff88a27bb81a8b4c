"""``flowprior`` command line: train, solve, eval, sweep, verify-theorem, synth-data.

Exit codes: 0 success, 2 config error, 3 numeric failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys

from . import experiments
from .config import Config, ConfigError, apply_override, load_config, parse_config
from .flow import FlowModel, checkpoint_save
from .numkit import FormatError, InvalidArgument, NumericError, make_rng
from .training import SYNTH_KINDS, TrainConfig, load_dataset, save_dataset, synth_dataset, train_flow

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

log = logging.getLogger("flowprior")

# section whose seed a --seed flag overrides
_SEED_TARGET = {"train": "train", "solve": "experiment", "sweep": "experiment", "verify-theorem": "theorem"}


def _load(args) -> Config:
    cfg = load_config(args.config) if args.config else parse_config("")
    for assignment in args.set or []:
        apply_override(cfg, assignment)
    if getattr(args, "seed", None) is not None:
        cfg.set(_SEED_TARGET[args.command], "seed", args.seed)
    if getattr(args, "workers", None) is not None:
        cfg.set("experiment", "workers", args.workers)
    return cfg


def _out_dir(args, cfg: Config, section: str, default: str) -> str:
    out = args.out or cfg.get(section, "out") or default
    os.makedirs(out, exist_ok=True)
    return out


def cmd_train(args) -> int:
    cfg = _load(args)
    if args.print_config:
        sys.stdout.write(cfg.to_text())
        return EXIT_OK
    source = cfg.get("train", "data", "synth:blobs8x8")
    if source.startswith("synth:"):
        kind = source.split(":", 1)[1]
        if kind not in SYNTH_KINDS:
            raise ConfigError("train.data", f"unknown synthetic kind {kind!r}", cfg.lines.get(("train", "data")))
        data = synth_dataset(kind, cfg.get("train", "n", 4000), make_rng([cfg.get("train", "seed", 0), 1]))
    else:
        if not os.path.isfile(source):
            raise ConfigError("train.data", f"file not found: {source}", cfg.lines.get(("train", "data")))
        data = load_dataset(source, bounded=False)
    try:
        tc = TrainConfig(
            epochs=cfg.get("train", "epochs", 100),
            batch_size=cfg.get("train", "batch_size", 128),
            lr=cfg.get("train", "lr", 1e-3),
            lr_halving_period=cfg.get("train", "lr_halving_period", 40),
            max_grad_norm=cfg.get("train", "max_grad_norm", 100.0),
            seed=cfg.get("train", "seed", 0),
        )
        depth = 4 if data.d <= 2 else 8
        model = FlowModel(data.d, cfg.get("train", "layers", depth), cfg.get("train", "hidden", 64),
                          cfg.get("train", "s_clamp", 3.0),
                          rng=make_rng(cfg.get("train", "init_seed", tc.seed + 1)))
    except InvalidArgument as exc:
        raise ConfigError("train", str(exc)) from None
    out = _out_dir(args, cfg, "train", "train_out")
    result = train_flow(model, data, tc, log=lambda e, nll: log.info("epoch %d nll %.6f", e, nll))
    checkpoint_save(model, os.path.join(out, "model.nfck"))
    with open(os.path.join(out, "nll_trace.csv"), "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "nll"])
        for epoch, nll in enumerate(result.nll_trace):
            writer.writerow([epoch, repr(nll)])
    with open(os.path.join(out, "config.ini"), "w", encoding="utf-8") as fh:
        fh.write(cfg.to_text())
    final = result.nll_trace[-1] if result.nll_trace else float("nan")
    print(f"wrote {out}/model.nfck  final nll {final:.6f}")
    return EXIT_OK


def cmd_solve(args) -> int:
    cfg = _load(args)
    exp = experiments.resolve(cfg)
    text = experiments.resolved_config(exp).to_text()
    if args.print_config:
        sys.stdout.write(text)
        return EXIT_OK
    out = _out_dir(args, cfg, "experiment", "solve_out")
    records = experiments.run_experiment(exp, cfg.get("experiment", "workers", 1))
    report = experiments.write_report(out, records, text)
    _print_rows(report["aggregates"])
    return EXIT_OK


def cmd_eval(args) -> int:
    path = os.path.join(args.report_dir, "records.jsonl")
    if not os.path.isfile(path):
        raise FileNotFoundError(f"no records.jsonl in {args.report_dir}")
    report = experiments.evaluate_dir(args.report_dir)
    _print_rows(report["aggregates"])
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _load(args)
    if args.axis:
        cfg.set("sweep", "axis", args.axis)
    if args.values:
        cfg.set("sweep", "values", args.values)
    axis = cfg.get("sweep", "axis")
    if axis is None:
        raise ConfigError("sweep.axis", "missing")
    values = cfg.get("sweep", "values", [])
    text = experiments.resolved_config(experiments.resolve(cfg)).to_text()
    if args.print_config:
        sys.stdout.write(text)
        return EXIT_OK
    records, _ = experiments.run_sweep(cfg, axis, values, cfg.get("experiment", "workers", 1))
    out = _out_dir(args, cfg, "experiment", "sweep_out")
    report = experiments.write_report(out, records, text, axis=axis)
    _print_rows(report["aggregates"])
    return EXIT_OK


def cmd_verify_theorem(args) -> int:
    cfg = _load(args)
    if args.print_config:
        sys.stdout.write(cfg.to_text())
        return EXIT_OK
    summary = experiments.run_theorem(cfg)
    out = _out_dir(args, cfg, "experiment", "theorem_out")
    with open(os.path.join(out, "theorem.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, sort_keys=True, indent=1)
        fh.write("\n")
    print(f"{summary['prior']}: {summary['passed']}/{summary['cases']} within bound, "
          f"{summary['violations']} violations, max ratio {summary['max_ratio']:.6f}")
    if summary["violations"] or summary["converged"] < summary["cases"]:
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_synth_data(args) -> int:
    try:
        data = synth_dataset(args.kind, args.n, make_rng(args.seed))
    except InvalidArgument as exc:
        raise ConfigError("synth-data", str(exc)) from None
    save_dataset(data, args.out)
    print(f"wrote {data.n} x {data.d} {args.kind} items to {args.out}")
    return EXIT_OK


def _print_rows(rows) -> None:
    for r in rows:
        prefix = "" if r["axis_value"] is None else f"{r['axis_value']:>8g}  "
        print(f"{prefix}{r['method']:<12} n={r['n']:<4d} psnr {r['mean_psnr']:8.3f} +- {r['std_psnr']:.3f}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flowprior", description="Flow priors for inverse problems.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, workers=True):
        p.add_argument("--config", help="INI experiment config")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config value")
        p.add_argument("--print-config", action="store_true", help="print the resolved config and exit")
        if workers:
            p.add_argument("--workers", type=int)
        return p

    common(sub.add_parser("train", help="fit a flow to a dataset"), workers=False).set_defaults(func=cmd_train)
    common(sub.add_parser("solve", help="run an experiment")).set_defaults(func=cmd_solve)
    p = sub.add_parser("eval", help="recompute aggregates from records")
    p.add_argument("report_dir")
    p.set_defaults(func=cmd_eval)
    p = common(sub.add_parser("sweep", help="run an experiment across axis values"))
    p.add_argument("--axis", choices=experiments.SWEEP_AXES)
    p.add_argument("--values", type=lambda s: [float(v) for v in s.split(",")], help="comma-separated")
    p.set_defaults(func=cmd_sweep)
    common(sub.add_parser("verify-theorem", help="check the denoising recovery bound"),
           workers=False).set_defaults(func=cmd_verify_theorem)
    p = sub.add_parser("synth-data", help="write a synthetic IMGD dataset")
    p.add_argument("--kind", required=True, choices=SYNTH_KINDS)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth_data)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except InvalidArgument as exc:
        print(f"invalid argument: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
