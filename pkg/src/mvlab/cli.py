"""Command line entry point.

    lab <experiment> [--config PATH] [--seed S] [--workers W] [--out DIR] [--check] [--plot]
    lab check DIR_OR_MANIFEST ...
    lab schema

Without ``--config`` the experiment runs its acceptance protocol. A manifest
written by an earlier run is accepted as a config and reproduces that run.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .experiments import (CRITERIA, EXPERIMENTS, ConfigError, check_acceptance, config_schema, default_config,
                          load_config, load_manifests, run_experiment)

EXIT_OK, EXIT_FAILED_CHECK, EXIT_CONFIG = 0, 1, 2


def _run_parser(experiment: str) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog=f"lab {experiment}", description=f"run the {experiment} campaign")
    p.add_argument("--config", help="YAML or JSON config, or a manifest.json from an earlier run")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--workers", type=int, help="worker processes (default: $MVLAB_WORKERS or CPU count)")
    p.add_argument("--out", help="output directory (default: the config's out field)")
    p.add_argument("--check", action="store_true", help="exit nonzero if any acceptance check fails")
    p.add_argument("--plot", action="store_true", help="also render PNG figures next to the CSV files")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _print_report(report: dict):
    for name in CRITERIA:
        entry = report[name]
        print(f"{name}: {entry['status'].upper()}" + (f" ({entry['source']})" if entry["source"] else ""))


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    usage = f"usage: lab {{{','.join(EXPERIMENTS)},check,schema}} ..."
    if not argv or argv[0] in ("-h", "--help"):
        print(usage)
        print(__doc__)
        return EXIT_OK if argv else EXIT_CONFIG
    cmd, rest = argv[0], argv[1:]
    if cmd == "schema":
        print(json.dumps(config_schema(), indent=2))
        return EXIT_OK
    if cmd == "check":
        p = argparse.ArgumentParser(prog="lab check")
        p.add_argument("paths", nargs="+")
        p.add_argument("--json", action="store_true", help="print the machine-readable report")
        args = p.parse_args(rest)
        report = check_acceptance(load_manifests(args.paths))
        if args.json:
            print(json.dumps(report, indent=2))
        else:
            _print_report(report)
        return EXIT_OK if all(r["status"] == "pass" for r in report.values()) else EXIT_FAILED_CHECK
    if cmd not in EXPERIMENTS:
        print(f"unknown experiment {cmd!r}\n{usage}", file=sys.stderr)
        return EXIT_CONFIG
    args = _run_parser(cmd).parse_args(rest)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.config:
            cfg = load_config(args.config, experiment=cmd, seed=args.seed)
        else:
            cfg = default_config(cmd, seed=args.seed)
    except (ConfigError, OSError) as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    manifest = run_experiment(cfg, workers=args.workers, out=args.out)
    print(f"wrote {manifest['directory']} ({', '.join(manifest['files'])})")
    for name, chk in manifest["checks"].items():
        print(f"{name}: {chk['status'].upper()}")
    if args.plot:
        from .plotting import plot_experiment

        for path in plot_experiment(manifest["directory"]):
            print(f"plot {path}")
    if args.check and any(c["status"] != "pass" for c in manifest["checks"].values()):
        return EXIT_FAILED_CHECK
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
