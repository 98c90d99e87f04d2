"""Command-line interface.

Verbs: ``eval``, ``sweep-shots``, ``sweep-windows``, ``compare``,
``make-fixture``. Flags override values from a ``--config`` YAML file; the
default data root comes from $VLMAD_DATA_ROOT. Exit codes: 0 success,
1 configuration error, 2 data error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from . import runner
from .dataset import DefectSpec, FixtureSpec, make_fixture
from .errors import ConfigurationError, IngestionError, InputError, VlmadError
from .metrics import load_report


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # map argparse failures onto exit code 1
        raise ConfigurationError(message)


def _int_list(text: str) -> list[int]:
    try:
        return [int(part) for part in text.split(",") if part.strip() != ""]
    except ValueError as exc:
        raise ConfigurationError(f"expected a comma-separated integer list, got {text!r}") from exc


def _add_common_flags(parser: argparse.ArgumentParser, shots_as_list: bool = False) -> None:
    parser.add_argument("--config", help="YAML run config; flags override file values")
    parser.add_argument("--method", choices=runner.METHODS)
    parser.add_argument("--data-root")
    parser.add_argument("--categories", help="comma-separated category filter")
    if shots_as_list:
        parser.add_argument("--shots", help="comma-separated shot counts, e.g. 0,1,4")
    else:
        parser.add_argument("--shots", type=int)
    parser.add_argument("--shot-seed", type=int)
    parser.add_argument("--window-sizes", help="comma-separated window sizes")
    parser.add_argument("--backbone", choices=("toy", "external"))
    parser.add_argument("--backbone-factory", help="module.path:factory for --backbone external")
    parser.add_argument("--checkpoint", help="prompt-token checkpoint archive")
    parser.add_argument("--aupro-cap", type=float)
    parser.add_argument("--out")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--workers", type=int)


def _build_config(args: argparse.Namespace) -> runner.RunConfig:
    config = runner.load_config(args.config) if args.config else runner.RunConfig()
    overrides = {}
    if args.method is not None:
        overrides["method"] = args.method
    if args.data_root is not None:
        overrides["data_root"] = args.data_root
    if args.categories is not None:
        overrides["categories"] = tuple(c.strip() for c in args.categories.split(",") if c.strip())
    if getattr(args, "shots", None) is not None and isinstance(args.shots, int):
        overrides["shots"] = args.shots
    if args.shot_seed is not None:
        overrides["shot_seed"] = args.shot_seed
    if args.window_sizes is not None:
        overrides["window_sizes"] = tuple(_int_list(args.window_sizes))
    if args.backbone is not None:
        overrides["backbone"] = args.backbone
    if args.backbone_factory is not None:
        overrides["backbone_factory"] = args.backbone_factory
    if args.checkpoint is not None:
        overrides["checkpoint"] = args.checkpoint
    if args.aupro_cap is not None:
        overrides["aupro_cap"] = args.aupro_cap
    if args.out is not None:
        overrides["out_dir"] = args.out
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.workers is not None:
        overrides["workers"] = args.workers
    try:
        return replace(config, **overrides)
    except TypeError as exc:
        raise ConfigurationError(str(exc)) from exc


def build_parser() -> _Parser:
    parser = _Parser(prog="vlmad", description=__doc__)
    sub = parser.add_subparsers(dest="verb", required=True)

    p_eval = sub.add_parser("eval", help="evaluate one method on a dataset")
    _add_common_flags(p_eval)

    p_shots = sub.add_parser("sweep-shots", help="zero/one/few-shot sweep (winclip)")
    _add_common_flags(p_shots, shots_as_list=True)

    p_windows = sub.add_parser("sweep-windows", help="window-size sweep (winclip)")
    _add_common_flags(p_windows)

    p_compare = sub.add_parser("compare", help="side-by-side tables and plots")
    p_compare.add_argument(
        "--reports",
        required=True,
        help="comma-separated name=report.json pairs, e.g. winclip=a.json,anomalyclip=b.json",
    )
    p_compare.add_argument("--out", required=True)

    p_fixture = sub.add_parser("make-fixture", help="write a synthetic toy dataset")
    p_fixture.add_argument("--out", required=True)
    p_fixture.add_argument("--seed", type=int, default=0)
    p_fixture.add_argument("--categories", default="blocks,panels")
    p_fixture.add_argument("--image-size", type=int, default=64)
    p_fixture.add_argument("--train-good", type=int, default=6)
    p_fixture.add_argument("--test-good", type=int, default=4)
    p_fixture.add_argument("--defect-count", type=int, default=4)
    p_fixture.add_argument("--defect-size", type=int, default=24)
    p_fixture.add_argument(
        "--defect-kinds", default="bright_square", help="comma list of bright_square/dark_square/stripes"
    )
    p_fixture.add_argument("--speckles", type=int, default=0)
    return parser


def _run(args: argparse.Namespace) -> int:
    if args.verb == "eval":
        artifacts = runner.run_eval(_build_config(args))
        print(artifacts.report_text_path.read_text(), end="")
        print(f"artifacts written to {artifacts.out_dir}")
        return 0
    if args.verb == "sweep-shots":
        config = _build_config(args)
        k_list = [0, 1, 4] if args.shots is None else _int_list(args.shots)
        runner.sweep_shots(replace(config, shots=0), k_list)
        print(f"shot sweep written to {config.out_dir}")
        return 0
    if args.verb == "sweep-windows":
        config = _build_config(args)
        runner.sweep_window_sizes(config, list(config.window_sizes))
        print(f"window sweep written to {config.out_dir}")
        return 0
    if args.verb == "compare":
        reports = {}
        for pair in args.reports.split(","):
            name, sep, path = pair.partition("=")
            if not sep:
                raise ConfigurationError(f"expected name=path, got {pair!r}")
            reports[name.strip()] = load_report(path.strip())
        table = runner.emit_comparison(reports, args.out)
        print(f"comparison written to {table}")
        return 0
    if args.verb == "make-fixture":
        kinds = [k.strip() for k in args.defect_kinds.split(",") if k.strip()]
        defects = tuple(
            DefectSpec(name=kind, kind=kind, count=args.defect_count, size=args.defect_size)
            for kind in kinds
        )
        spec = FixtureSpec(
            categories=tuple(c.strip() for c in args.categories.split(",") if c.strip()),
            image_size=(args.image_size, args.image_size),
            train_good=args.train_good,
            test_good=args.test_good,
            defects=defects,
            speckles=args.speckles,
        )
        root = make_fixture(Path(args.out), spec, seed=args.seed)
        print(f"fixture written to {root}")
        return 0
    raise ConfigurationError(f"unknown verb {args.verb!r}")


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return _run(args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1
    except (IngestionError, InputError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except VlmadError as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 3
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
