"""Trace logging for experiment runs: one CSV per barrier weight plus a summary."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import IO, Optional

from .engine import IterationRecord

TRACE_COLUMNS = [
    "k",
    "sum_f",
    "sum_F",
    "sum_phi",
    "rel_obj_err",
    "feas_in_err",
    "feas_eq_err",
    "num_leaders",
    "residual_sum",
    "wallclock_ms",
]


def format_float(value: Optional[float]) -> str:
    """17 significant digits, empty for missing values."""
    if value is None:
        return ""
    return f"{value:.17g}"


def trace_filename(c: float) -> str:
    return f"trace_c{float(c)!r}.csv"


def relative_error(sum_f: float, f_star: Optional[float]) -> Optional[float]:
    if f_star is None:
        return None
    scale = abs(f_star) if f_star != 0 else 1.0
    return (sum_f - f_star) / scale


@dataclass
class TraceSummary:
    """Outcome of the run at one barrier weight."""

    c: float
    trace_file: str
    iterations: int = 0
    final_sum_f: float = 0.0
    final_sum_phi: float = 0.0
    final_rel_obj_err: Optional[float] = None
    max_feas_eq_err: float = 0.0
    max_feas_in_err: float = 0.0
    stopped_by: str = "max_iters"
    total_messages: int = 0
    mean_update_size: float = 0.0
    leader_counts: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        """Convert to dictionary for JSON serialization."""
        return {
            "c": self.c,
            "trace_file": self.trace_file,
            "iterations": self.iterations,
            "final_sum_f": self.final_sum_f,
            "final_sum_phi": self.final_sum_phi,
            "final_rel_obj_err": self.final_rel_obj_err,
            "max_feas_eq_err": self.max_feas_eq_err,
            "max_feas_in_err": self.max_feas_in_err,
            "stopped_by": self.stopped_by,
            "total_messages": self.total_messages,
            "mean_update_size": self.mean_update_size,
            "leader_counts": self.leader_counts,
        }


class TraceLogger:
    """Writes iteration records of one experiment to an output directory."""

    def __init__(self, out_dir: Path, config: Optional[dict] = None):
        """Initialize the trace logger.

        Args:
            out_dir: Directory receiving the CSV traces and ``summary.json``.
            config: Configuration snapshot saved with the summary.
        """
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.config = config or {}
        self.start_time = datetime.now().isoformat()
        self.f_star: Optional[float] = None
        self.summaries: list[TraceSummary] = []

        self._file: Optional[IO[str]] = None
        self._writer = None
        self._current: Optional[TraceSummary] = None

    def begin(self, c: float) -> Path:
        """Open the trace file for barrier weight ``c``."""
        self.end()
        path = self.out_dir / trace_filename(c)
        self._file = open(path, "w", newline="", encoding="utf-8")
        self._writer = csv.writer(self._file, lineterminator="\n")
        self._writer.writerow(TRACE_COLUMNS)
        self._current = TraceSummary(c=c, trace_file=path.name)
        return path

    def log_record(self, record: IterationRecord) -> None:
        """Append one row to the open trace."""
        if self._writer is None or self._current is None:
            raise RuntimeError("begin() must be called before log_record()")
        rel = relative_error(record.sum_f, self.f_star)
        self._writer.writerow(
            [
                record.k,
                format_float(record.sum_f),
                format_float(record.sum_F),
                format_float(record.sum_phi),
                format_float(rel),
                format_float(record.feas_in_err),
                format_float(record.feas_eq_err),
                record.num_leaders,
                format_float(record.residual_sum),
                f"{record.wallclock_ms:.3f}",
            ]
        )
        summary = self._current
        summary.iterations = record.k
        summary.final_sum_f = record.sum_f
        summary.final_sum_phi = record.sum_phi
        summary.final_rel_obj_err = rel
        summary.max_feas_eq_err = max(summary.max_feas_eq_err, record.feas_eq_err)
        summary.max_feas_in_err = max(summary.max_feas_in_err, record.feas_in_err)

    def end(
        self,
        stopped_by: Optional[str] = None,
        total_messages: int = 0,
        mean_update_size: float = 0.0,
        leader_counts: Optional[list[int]] = None,
    ) -> Optional[TraceSummary]:
        """Close the open trace and keep its summary."""
        if self._file is None:
            return None
        self._file.close()
        summary = self._current
        if stopped_by is not None:
            summary.stopped_by = stopped_by
        summary.total_messages = total_messages
        summary.mean_update_size = mean_update_size
        summary.leader_counts = list(leader_counts or [])
        self.summaries.append(summary)
        self._file = None
        self._writer = None
        self._current = None
        self._save_summary()
        return summary

    def _save_summary(self) -> None:
        data = {
            "start_time": self.start_time,
            "f_star": self.f_star,
            "config": self.config,
            "runs": [summary.to_dict() for summary in self.summaries],
        }
        with open(self.out_dir / "summary.json", "w", encoding="utf-8") as f:
            json.dump(data, f, indent=2)

    def finalize(self) -> list[TraceSummary]:
        """Close any open trace and write the final summary."""
        self.end()
        self._save_summary()
        return self.summaries


def load_trace(path: Path) -> list[dict[str, str]]:
    """Read a trace CSV back as rows of strings."""
    with open(path, newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))
