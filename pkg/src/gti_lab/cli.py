"""Command-line entry point.

Exit codes: 0 success, 2 configuration or usage error, 3 missing stage input,
1 any other runtime failure. Logs are JSON lines on standard error; data goes
to files under the workdir only.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys

from . import pipeline
from .config import ConfigError, load_spec, validate

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG, EXIT_MISSING = 0, 1, 2, 3

COMMANDS = ("gen-data", "fit-rq", "assign-sids", "pretrain", "extend", "ground", "sft", "eval",
            "diagnose", "report", "run-all")


class JsonFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        body = {"level": record.levelname.lower(), "logger": record.name}
        msg = record.getMessage()
        try:
            parsed = json.loads(msg)
        except ValueError:
            parsed = None
        body.update(parsed if isinstance(parsed, dict) else {"message": msg})
        return json.dumps(body, sort_keys=True)


def _setup_logging(verbose: bool) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(JsonFormatter())
    root = logging.getLogger("gti_lab")
    root.handlers[:] = [handler]
    root.setLevel(logging.INFO if verbose else logging.WARNING)
    root.propagate = False


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gti-lab", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--spec", help="YAML experiment spec (defaults when omitted)")
    p.add_argument("--seed", type=int, help="run a single seed instead of the configured list")
    p.add_argument("--jobs", type=int, default=1, help="parallel seeds for run-all")
    p.add_argument("--out", help="workdir (overrides the config file and GTI_WORKDIR)")
    p.add_argument("--quiet", action="store_true", help="only log warnings and errors")
    return p


PER_SEED = {
    "pretrain": pipeline.pretrain_stage,
    "extend": pipeline.extend_stage,
    "ground": pipeline.ground_stage,
    "sft": pipeline.sft_stage,
    "eval": pipeline.eval_stage,
    "diagnose": pipeline.diagnose_stage,
}


def run(args) -> None:
    spec = load_spec(args.spec)
    if args.out:
        spec.workdir = args.out
    if args.seed is not None:
        spec = dataclasses.replace(spec, seeds=[args.seed])
    if args.jobs < 1:
        raise ConfigError("--jobs must be at least 1")
    validate(spec)
    wd = pipeline.Workdir(spec.workdir)
    cmd = args.command
    if cmd == "gen-data":
        pipeline.gen_data(spec, wd)
    elif cmd == "fit-rq":
        pipeline.fit_rq(spec, wd)
    elif cmd == "assign-sids":
        pipeline.assign_sids(spec, wd)
    elif cmd in PER_SEED:
        data = pipeline.load_prepared(spec, wd)
        for seed in spec.seeds:
            PER_SEED[cmd](spec, wd, data, seed)
    elif cmd == "report":
        pipeline.report_stage(spec, wd)
    elif cmd == "run-all":
        pipeline.run_all(spec, wd, args.jobs)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    _setup_logging(not args.quiet)
    log = logging.getLogger("gti_lab.cli")
    try:
        run(args)
    except ConfigError as exc:
        log.error(json.dumps({"event": "config-error", "error": str(exc)}))
        return EXIT_CONFIG
    except pipeline.MissingInput as exc:
        log.error(json.dumps({"event": "missing-input", "error": str(exc)}))
        return EXIT_MISSING
    except Exception as exc:  # noqa: BLE001 - top-level boundary
        log.error(json.dumps({"event": "failure", "error": f"{type(exc).__name__}: {exc}"}))
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
