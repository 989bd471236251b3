"""Command line entry point: ``aiwash <subcommand> [options]``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 estimation
error. A failed estimation job does not stop the others; the worst stage
outcome decides the exit status.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .errors import AiwashError, ConfigError
from .pipeline import HYPOTHESES, Pipeline, RunConfig, write_synth_inputs
from .report import write_table

log = logging.getLogger("aiwash")


def _parser() -> argparse.ArgumentParser:
    # SUPPRESS lets the flags appear before or after the subcommand
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", metavar="PATH", help="YAML run configuration (default: synthetic data)")
    common.add_argument("--out", metavar="DIR", help="output directory (overrides config 'output')")
    common.add_argument("--seed", type=int, help="master seed (overrides config 'seed')")
    common.add_argument("--threads", type=int, help="worker threads")
    common.add_argument("--cache", metavar="DIR", help="stage cache directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="aiwash", description="AI-washing indices and panel estimation",
                                parents=[common])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="write a synthetic input set and a run config for it")
    sub.add_parser("score", parents=[common], help="score disclosure documents")
    sub.add_parser("index", parents=[common], help="build AWRS/MRMI/washing indices and descriptives")
    est = sub.add_parser("estimate", parents=[common], help="run selected hypotheses")
    est.add_argument("which", nargs="+", choices=HYPOTHESES)
    sub.add_parser("report", parents=[common], help="run every enabled stage and write the bundle")
    sub.add_parser("sweep", parents=[common], help="full report plus the threshold sweep")
    return p


def load_config(args) -> RunConfig:
    if args.config:
        cfg = RunConfig.load(args.config)
    else:
        cfg = RunConfig.from_dict({"synth": {}})
    if args.seed is not None:
        cfg.seed = int(args.seed)
        if cfg.synth is not None:
            cfg.synth = {**cfg.synth, "master_seed": int(args.seed)}
    if args.threads is not None:
        cfg.threads = int(args.threads)
    return cfg.validate()


def _out_dir(args, cfg: RunConfig) -> Path:
    return Path(args.out) if args.out else cfg.path(cfg.output)


def _run(args) -> int:
    cfg = load_config(args)
    out = _out_dir(args, cfg)

    if args.command == "synth":
        if cfg.synth is None:
            cfg.synth = {}
        files = write_synth_inputs(cfg, out)
        print(f"wrote synthetic inputs to {out} (config: {files['config']})")
        return 0

    pipe = Pipeline(cfg, threads=args.threads, cache_dir=args.cache, out_dir=out)
    if args.command == "score":
        try:
            txt = pipe.text()
        except AiwashError:
            return pipe._finish({}, {}).exit_code
        files = {}
        if txt["documents"] is not None:
            files["document_scores"] = write_table(txt["documents"], out / "scores" / "document_scores.csv")
            files["firm_quarter_text"] = write_table(txt["firm_quarter"], out / "scores" / "firm_quarter_text.csv")
        res = pipe._finish(files, {})
    elif args.command == "index":
        res = pipe.run(stages=("index", "report"))
    elif args.command == "estimate":
        res = pipe.run(which=tuple(args.which))
    else:
        res = pipe.run(sweep=args.command == "sweep")

    for s in res.stages:
        line = f"{s.name:<24} {s.status:<7} {s.seconds:8.3f}s"
        print(line + (f"  {s.error}" if s.error else ""))
    if res.bundle_dir is not None:
        print(f"bundle: {res.bundle_dir}")
    return res.exit_code


def main(argv=None) -> int:
    parser = _parser()
    args = parser.parse_args(argv)
    for k in ("config", "out", "seed", "threads", "cache"):
        setattr(args, k, getattr(args, k, None))
    args.verbose = getattr(args, "verbose", False)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _run(args)
    except AiwashError as exc:
        print(f"aiwash: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, ValueError) as exc:
        print(f"aiwash: error: {exc}", file=sys.stderr)
        return ConfigError.exit_code if isinstance(exc, ValueError) else 3


if __name__ == "__main__":
    sys.exit(main())
