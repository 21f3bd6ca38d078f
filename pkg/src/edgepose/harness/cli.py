"""Command line: ``edgepose run`` simulates a scenario, ``edgepose report`` tabulates results.

Exit codes: 0 success, 2 configuration error, 3 partial run (a node failed).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from edgepose.errors import ConfigError
from edgepose.harness import report as rep
from edgepose.harness.config import ScenarioConfig
from edgepose.harness.runner import run_scenario

EXIT_OK, EXIT_CONFIG, EXIT_PARTIAL = 0, 2, 3

log = logging.getLogger("edgepose")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="edgepose", description="Multi-camera pose fusion simulator")
    sub = p.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run a scenario")
    run.add_argument("--config", required=True)
    run.add_argument("--feedback", choices=("on", "off", "both"), default=None)
    run.add_argument("--seed", type=int, default=None)
    run.add_argument("--out", default=None)
    run.add_argument("--transport", choices=("loopback", "socket"), default=None)
    run.add_argument("-v", "--verbose", action="store_true")
    r = sub.add_parser("report", help="tabulate the metrics of a previous run")
    r.add_argument("--in", dest="in_dir", required=True)
    r.add_argument("--format", choices=("csv", "json"), default="csv")
    r.add_argument("--out", default=None)
    return p


def _cmd_run(args) -> int:
    cfg = ScenarioConfig.load(args.config)
    if args.seed is not None:
        cfg = cfg.with_overrides(seed=args.seed)
    out = Path(args.out or cfg.out or f"out/{cfg.name}")
    mode = args.feedback or ("on" if cfg.feedback else "off")
    labels = ["on", "off"] if mode == "both" else [mode]
    partial = False
    for label in labels:
        res = run_scenario(cfg, feedback=(label == "on"), transport=args.transport)
        d = out / f"fb_{label}"
        d.mkdir(parents=True, exist_ok=True)
        rep.write_json(res.report, d / "metrics.json")
        rep.write_series_csv(res.report, d / "series.csv")
        (d / "skeletons.jsonl").write_bytes(b"".join(res.skeleton_lines))
        (d / "timing.json").write_text(json.dumps(res.timing, indent=1) + "\n")
        m = res.report.to_dict()
        print(
            f"fb_{label}: MPJPE {m['mpjpe_mm']['avg']} mm, JDR {m['jdr_pct']['avg']} %, "
            f"PCP {m['pcp_pct']['avg']} %, frames {m['frames']} -> {d}"
        )
        for e in res.report.errors:
            log.error(e)
        partial |= res.report.partial
    return EXIT_PARTIAL if partial else EXIT_OK


def _cmd_report(args) -> int:
    src = Path(args.in_dir)
    found = sorted(src.glob("fb_*/metrics.json")) or sorted(src.glob("metrics.json"))
    if not found:
        raise ConfigError(f"no metrics.json under {src}")
    reports = {p.parent.name if p.parent != src else "run": rep.read_json(p) for p in found}
    for path in rep.emit_report(reports, Path(args.out) if args.out else src, args.format):
        print(path)
    return EXIT_OK


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _cmd_run(args) if args.command == "run" else _cmd_report(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
