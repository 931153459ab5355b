"""CSV serialization of run reports (RFC 4180 quoting via the csv module)."""

from __future__ import annotations

import csv
import io
from pathlib import Path


def _fmt(value):
    if isinstance(value, float):
        return repr(value)
    return value


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def write_csv(path, header, rows) -> None:
    Path(path).write_text(csv_text(header, rows), encoding="utf-8")


def write_report(report, out_dir, stem: str, timing: bool = True) -> list:
    """Write ``<stem>_epochs.csv``, ``<stem>_summary.csv`` and ``<stem>_confusion.csv``."""
    out_dir = Path(out_dir)
    paths = [out_dir / f"{stem}_epochs.csv", out_dir / f"{stem}_summary.csv"]
    write_csv(
        paths[0],
        ["epoch", "loss_total", "loss_ce", "loss_distill"],
        [(e.epoch, float(e.total), float(e.ce), float(e.distill)) for e in report.epochs],
    )
    summary = [
        ("name", report.name),
        ("status", report.status),
        ("error", report.error),
        ("oa", float(report.oa)),
        ("macc", float(report.macc)),
        ("absent_classes", " ".join(str(c) for c in report.absent_classes)),
        ("wall_time_s", float(report.wall_time) if timing else 0.0),
    ]
    write_csv(paths[1], ["key", "value"], summary)
    if report.confusion is not None:
        conf = report.confusion
        paths.append(out_dir / f"{stem}_confusion.csv")
        write_csv(
            paths[2],
            ["true_class"] + [f"pred_{j}" for j in range(conf.shape[1])],
            [[i] + [int(v) for v in row] for i, row in enumerate(conf)],
        )
    return paths
