"""Command-line entry point: ``slimdp train | compare | sweep``."""

from __future__ import annotations

import argparse
import sys
from dataclasses import fields
from pathlib import Path

from slimdp.experiment import (
    ExperimentConfig,
    compare_runs,
    comparisons_json,
    format_comparisons,
    parse_config,
    run_experiment,
    serialize_config,
    sweep_configs,
)
from slimdp.sim import ConfigError

EXIT_OK, EXIT_ERROR, EXIT_USAGE = 0, 1, 2


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value file; flags override it")
    for f in fields(ExperimentConfig):
        p.add_argument(f"--{f.name.replace('_', '-')}", dest=f.name, default=None, metavar="V")


def _overrides(ns: argparse.Namespace) -> dict[str, str]:
    return {f.name: getattr(ns, f.name) for f in fields(ExperimentConfig) if getattr(ns, f.name) is not None}


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="slimdp", description="Synchronous data-parallel training simulator.")
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="run one configuration and write a metrics CSV")
    _add_config_flags(train)
    train.add_argument("--print-config", action="store_true", help="print the resolved config and exit")

    cmp_ = sub.add_parser("compare", help="speedups and savings of runs against a baseline CSV")
    cmp_.add_argument("baseline")
    cmp_.add_argument("candidates", nargs="*")
    cmp_.add_argument("--json", action="store_true", help="emit JSON instead of a table")

    sweep = sub.add_parser("sweep", help="grid over (alpha, beta) plus a full-exchange baseline")
    _add_config_flags(sweep)
    sweep.add_argument("--alphas", type=_floats, default=[0.3])
    sweep.add_argument("--betas", type=_floats, default=[0.0, 0.15, 0.3])
    sweep.add_argument("--out-dir", default="runs/sweep")
    return parser


def _summary_line(cfg: ExperimentConfig, summary) -> str:
    acc = "n/a" if summary.final_test_acc is None else f"{summary.final_test_acc:.4f}"
    return (
        f"{cfg.method} alpha={cfg.alpha:g} beta={cfg.beta:g}: rounds={summary.rounds} acc={acc} "
        f"words={summary.total_words} sim_s={summary.sim_total_s:.3f} -> {cfg.out}"
    )


def _train(ns) -> int:
    cfg = parse_config(ns.config, _overrides(ns))
    if ns.print_config:
        sys.stdout.write(serialize_config(cfg))
        return EXIT_OK
    summary, _ = run_experiment(cfg)
    print(_summary_line(cfg, summary))
    return EXIT_OK


def _compare(ns) -> int:
    rows = compare_runs(ns.baseline, ns.candidates)
    sys.stdout.write(comparisons_json(rows) if ns.json else format_comparisons(rows) + "\n")
    return EXIT_OK


def _sweep(ns) -> int:
    overrides = _overrides(ns)
    overrides.setdefault("method", "slim")
    base = parse_config(ns.config, overrides)
    out_dir = Path(ns.out_dir)
    plump = base.replace(method="plump", out=str(out_dir / "plump.csv"))
    configs = [plump] + [
        c.replace(out=str(out_dir / f"slim_a{c.alpha:g}_b{c.beta:g}.csv")) for c in sweep_configs(base, ns.alphas, ns.betas)
    ]
    if len(configs) == 1:
        raise ConfigError("sweep: no (alpha, beta) pair with beta <= alpha")
    for cfg in configs:
        summary, _ = run_experiment(cfg)
        print(_summary_line(cfg, summary), flush=True)
    rows = compare_runs(plump.out, [c.out for c in configs[1:]])
    (out_dir / "compare.json").write_text(comparisons_json(rows))
    print(format_comparisons(rows))
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    handler = {"train": _train, "compare": _compare, "sweep": _sweep}[ns.command]
    try:
        return handler(ns)
    except (ConfigError, ValueError) as e:
        print(f"slimdp {ns.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE if isinstance(e, ConfigError) else EXIT_ERROR
    except OSError as e:
        print(f"slimdp {ns.command}: error: {e}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
