"""Command-line entry point.

Exit codes: 0 success, 2 usage or config error, 3 runtime error,
4 a required verification check failed.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .adapter import ABLATIONS
from .domains import PARADIGMS, DomainSequenceSpec
from .errors import ConfigError, CosdaError, PreconditionError
from .experiment import (ExperimentConfig, run_experiment, staged_output, write_dataset_files,
                         write_pretrain, write_run)
from .losses import SIGN_MODES

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_RUNTIME = 3
EXIT_VERIFY = 4


def _count(text: str) -> int:
    # accepts 1e6 style values
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if v != int(v):
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}")
    return int(v)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cosda", description="Continual source-free domain adaptation toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate every domain of a sequence spec as CSV")
    g.add_argument("spec", help="sequence spec JSON")
    g.add_argument("out_dir")

    p = sub.add_parser("pretrain", help="supervised training on the source domain")
    p.add_argument("config", nargs="?", help="experiment config JSON (defaults if omitted)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory (overrides output_dir)")

    r = sub.add_parser("run", help="pretrain, adapt through the sequence, evaluate and report")
    r.add_argument("config", nargs="?", help="experiment config JSON (defaults if omitted)")
    r.add_argument("--seed", type=int)
    r.add_argument("--ablation", action="append", choices=ABLATIONS, default=None,
                   help="may be given more than once")
    r.add_argument("--mi-sign", choices=SIGN_MODES)
    r.add_argument("--paradigm", choices=PARADIGMS)
    r.add_argument("--out", help="output directory (overrides output_dir)")

    v = sub.add_parser("verify", help="run the numerical oracle suite")
    v.add_argument("--trials", type=_count, default=1_000_000)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--out", help="directory for oracle_report.json")
    return parser


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg.apply_seed(args.seed)
    if getattr(args, "ablation", None):
        cfg.adapt.ablations = sorted(set(args.ablation))
    if getattr(args, "mi_sign", None):
        cfg.adapt.mi_sign_mode = args.mi_sign
    if getattr(args, "paradigm", None):
        cfg.sequence.paradigm = args.paradigm
    if args.out:
        cfg.output_dir = args.out
    cfg.adapt.validate()
    cfg.sequence.validate()
    return cfg


def cmd_gen(args) -> int:
    spec = DomainSequenceSpec.from_json(args.spec)
    for path, rows in write_dataset_files(spec, args.out_dir):
        print(f"{path.name}: {rows} rows")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = _load_config(args)
    acc, history = write_pretrain(cfg, cfg.output_dir)
    print(f"pretrained {len(history)} epochs; source test accuracy {acc:.2f}%")
    print(f"checkpoint: {Path(cfg.output_dir) / 'source.npz'}")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = _load_config(args)
    result = run_experiment(cfg)
    write_run(result, cfg, cfg.output_dir)
    rep = result.report
    print(f"domains: {', '.join(rep.matrix.domain_names)}")
    if rep.bwt is not None:
        print(f"BWT: {rep.bwt:.2f}")
    print(f"final accuracies: " + ", ".join(f"{v:.2f}" for v in rep.matrix.values[:, -1]))
    print(f"outputs: {cfg.output_dir}")
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import run_all_oracles

    report = run_all_oracles(seed=args.seed, trials=args.trials)
    print(report.summary_table())
    if args.out:
        with staged_output(args.out) as tmp:
            (tmp / "oracle_report.json").write_text(report.to_json())
    return EXIT_OK if report.ok else EXIT_VERIFY


COMMANDS = {"gen": cmd_gen, "pretrain": cmd_pretrain, "run": cmd_run, "verify": cmd_verify}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse reports usage errors with code 2
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, PreconditionError) as exc:
        print(f"cosda {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CosdaError, OSError, ValueError, FloatingPointError) as exc:
        print(f"cosda {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
