"""Report files: a fixed-header CSV of check records, a hierarchical text
summary embedding the resolved configuration, and a separate timings file.

Timings are wall-clock and therefore not reproducible; they live in their
own file so that the report files proper are bit-identical across reruns
with the same config and master seed.
"""

from __future__ import annotations

import csv
import io
from pathlib import Path

from . import __version__
from .harness import DualityCheckResult

RECORD_HEADER = [
    "experiment",
    "check",
    "kind",
    "lhs_mean",
    "lhs_se",
    "lhs_n",
    "lhs_aborts",
    "rhs_mean",
    "rhs_se",
    "rhs_n",
    "rhs_aborts",
    "z",
    "threshold",
    "verdict",
]


def fmt(x) -> str:
    if isinstance(x, float):
        return repr(x)
    return str(x)


def check_record(experiment: str, kind: str, res: DualityCheckResult) -> list[str]:
    return [
        experiment,
        res.name,
        kind,
        fmt(res.lhs.mean),
        fmt(res.lhs.std_error),
        str(res.lhs.replica_count),
        str(res.lhs.abort_count),
        fmt(res.rhs.mean),
        fmt(res.rhs.std_error),
        str(res.rhs.replica_count),
        str(res.rhs.abort_count),
        fmt(res.z_score),
        fmt(res.threshold),
        "pass" if res.passed else "FAIL",
    ]


def write_records(path: Path, rows: list[list[str]]) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(RECORD_HEADER)
    writer.writerows(rows)
    path.write_text(buf.getvalue())


def summary_tree(node, indent: int = 0) -> str:
    """Render a nested dict/list tree as indented key: value lines."""
    lines = []
    pad = "  " * indent
    if isinstance(node, dict):
        for key, val in node.items():
            if isinstance(val, (dict, list)):
                lines.append(f"{pad}{key}:")
                lines.append(summary_tree(val, indent + 1))
            else:
                lines.append(f"{pad}{key}: {fmt(val)}")
    elif isinstance(node, list):
        for val in node:
            if isinstance(val, (dict, list)):
                lines.append(f"{pad}-")
                lines.append(summary_tree(val, indent + 1))
            else:
                lines.append(f"{pad}- {fmt(val)}")
    else:
        lines.append(f"{pad}{fmt(node)}")
    return "\n".join(lines)


def write_summary(path: Path, config_tree: dict, body: dict) -> None:
    tree = {
        "fvduality": {"version": __version__},
        "config": config_tree,
        "results": body,
    }
    path.write_text(summary_tree(tree) + "\n")


def write_timings(path: Path, timings: dict[str, float]) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["step", "seconds"])
    for name, secs in timings.items():
        writer.writerow([name, f"{secs:.3f}"])
    path.write_text(buf.getvalue())
