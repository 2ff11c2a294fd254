"""Command-line entry point.

Subcommands: validate, phantom, preprocess, infer, evaluate, rank,
turing-serve, turing-analyze. Exit code 0 means every subject succeeded;
1 flags partial failures (ids on stderr); 2 flags configuration errors.
"""

from __future__ import annotations

import argparse
import sys

from .config import ConfigValidationError, load_config
from .runner import (
    AlignmentError,
    make_phantom_dataset,
    run_evaluate,
    run_infer,
    run_preprocess,
    run_rank,
)
from .volume import Modality


def _report_exit(report) -> int:
    if report.failures:
        for sid, err in sorted(report.failures.items()):
            print(f"FAILED {sid}: {err}", file=sys.stderr)
        print(f"{len(report.failures)} subject(s) failed, "
              f"{len(report.succeeded)} succeeded", file=sys.stderr)
        return 1
    print(f"ok: {len(report.succeeded)} subject(s)")
    return 0


def _add_config_arg(p):
    p.add_argument("config", help="experiment config JSON")
    p.add_argument("--jobs", type=int, default=None, help="subject-level parallelism")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="i2ibench",
                                     description="3D image-to-image translation benchmark")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check an experiment config")
    p.add_argument("config")

    p = sub.add_parser("phantom", help="generate a seeded phantom dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--subjects", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--task", nargs=2, default=["MRI_T1w", "CT"],
                   metavar=("SOURCE", "TARGET"))
    p.add_argument("--dims", nargs=3, type=int, default=[112, 112, 112])
    p.add_argument("--spacing", nargs=3, type=float, default=[1.0, 1.0, 1.0])

    for name, help_text in (
        ("preprocess", "run the preprocessing pipeline over the manifest"),
        ("infer", "sliding-window inference on the test split"),
        ("evaluate", "metrics for inferred volumes"),
    ):
        _add_config_arg(sub.add_parser(name, help=help_text))

    p = sub.add_parser("rank", help="rank models from aggregate.json files")
    p.add_argument("results", nargs="+", help="experiment output dirs (or aggregate.json paths)")
    p.add_argument("--out", required=True)

    p = sub.add_parser("turing-serve", help="serve a reader study")
    p.add_argument("study", help="study config JSON")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--responses", default=None, help="responses CSV path")
    p.add_argument("--volumes-dir", default=None)
    p.add_argument("--client-dir", default=None, help="static client assets to serve at /")

    p = sub.add_parser("turing-analyze", help="summarize collected responses")
    p.add_argument("responses", help="responses CSV")
    p.add_argument("--study", required=True, help="study config JSON (answer key)")
    p.add_argument("--out", required=True)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "validate":
            load_config(args.config)
            print("config ok")
            return 0
        if args.command == "phantom":
            manifest = make_phantom_dataset(
                args.out, args.subjects, seed=args.seed,
                task=(Modality(args.task[0]), Modality(args.task[1])),
                dims=tuple(args.dims), spacing=tuple(args.spacing),
            )
            print(f"wrote {args.subjects} phantom subject(s); manifest at {manifest}")
            return 0
        if args.command in ("preprocess", "infer", "evaluate"):
            cfg = load_config(args.config)
            run = {"preprocess": run_preprocess, "infer": run_infer,
                   "evaluate": run_evaluate}[args.command]
            return _report_exit(run(cfg, jobs=args.jobs))
        if args.command == "rank":
            written = run_rank(args.results, args.out)
            for k, v in sorted(written.items()):
                print(f"{k}: {v}")
            return 0
        if args.command == "turing-serve":
            import uvicorn

            from .server import create_app

            app = create_app(args.study, responses_path=args.responses,
                             volumes_dir=args.volumes_dir, client_dir=args.client_dir)
            uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
            return 0
        if args.command == "turing-analyze":
            from .reports import write_turing_reports
            from .study import load_study, read_responses_csv

            study = load_study(args.study)
            responses = read_responses_csv(args.responses)
            write_turing_reports(responses, study, args.out)
            print(f"reports written to {args.out}")
            return 0
    except ConfigValidationError as exc:
        print(str(exc), file=sys.stderr)
        return 2
    except (AlignmentError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    raise AssertionError(f"unhandled command {args.command}")


if __name__ == "__main__":
    sys.exit(main())
