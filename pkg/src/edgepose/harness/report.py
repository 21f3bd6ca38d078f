"""Report emission: per-metric CSV tables, a JSON document and a per-frame series CSV."""

from __future__ import annotations

import csv
import json
from pathlib import Path

from edgepose.harness.metrics import CLASS_COLUMNS
from edgepose.harness.runner import MetricsReport

HEADER = list(CLASS_COLUMNS)
CLASS_METRICS = ("mpjpe_mm", "jdr_pct", "reproj_px")
SERIES_COLUMNS = ["frame", "t_s", "jdr_pct", "mpjpe_mm", "persons_out", "emit_us"]


def _cell(v):
    return "" if v is None else repr(float(v)) if isinstance(v, float) else str(v)


def write_json(report: MetricsReport, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True) + "\n")
    return path


def read_json(path) -> MetricsReport:
    return MetricsReport.from_dict(json.loads(Path(path).read_text()))


def write_class_csv(rows: dict[str, dict], path) -> Path:
    """One row per label (e.g. "fb_on"), columns fixed to the joint classes plus avg."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run"] + HEADER)
        for label, values in rows.items():
            w.writerow([label] + [_cell(values.get(c)) for c in HEADER])
    return path


def write_pcp_csv(rows: dict[str, dict], path) -> Path:
    path = Path(path)
    limbs = []
    for values in rows.values():
        limbs = [k for k in values if k != "avg"]
        break
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run"] + limbs + ["avg"])
        for label, values in rows.items():
            w.writerow([label] + [_cell(values.get(k)) for k in limbs + ["avg"]])
    return path


def write_series_csv(report: MetricsReport, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SERIES_COLUMNS)
        for row in report.to_dict()["series"]:
            w.writerow([_cell(row.get(c)) for c in SERIES_COLUMNS])
    return path


def emit_report(reports: dict[str, MetricsReport], out_dir, fmt: str = "csv") -> list[Path]:
    """Write the given labelled reports as CSV tables or one JSON file each."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    if fmt == "json":
        for label, rep in reports.items():
            written.append(write_json(rep, out_dir / f"report_{label}.json"))
        return written
    if fmt != "csv":
        raise ValueError(f"unknown report format {fmt!r}")
    dicts = {label: rep.to_dict() for label, rep in reports.items()}
    for metric in CLASS_METRICS:
        written.append(write_class_csv({k: d[metric] for k, d in dicts.items()}, out_dir / f"{metric}.csv"))
    written.append(write_pcp_csv({k: d["pcp_pct"] for k, d in dicts.items()}, out_dir / "pcp_pct.csv"))
    for label, rep in reports.items():
        written.append(write_series_csv(rep, out_dir / f"series_{label}.csv"))
    return written
