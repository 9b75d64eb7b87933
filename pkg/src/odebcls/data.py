"""Observed time series and their CSV layout (``t,<state1>,...,<stateS>``)."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

__all__ = ["TimeSeriesData", "DataFileError", "read_csv", "write_csv", "format_csv"]


class DataFileError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class TimeSeriesData:
    """Observations of every state at common times ``t_0 < ... < t_n``.

    ``values`` has shape ``(n + 1, s)``; column ``q`` holds state ``q``.
    """

    times: np.ndarray
    values: np.ndarray
    state_names: tuple[str, ...]

    def __post_init__(self):
        times = np.array(self.times, dtype=float)
        values = np.array(self.values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        if times.ndim != 1 or values.shape[0] != times.shape[0]:
            raise ValueError(f"times {times.shape} and values {values.shape} do not align")
        if values.shape[1] != len(self.state_names):
            raise ValueError(
                f"{values.shape[1]} value columns for {len(self.state_names)} state names"
            )
        if times.size > 1 and np.any(np.diff(times) <= 0):
            raise ValueError("times must be strictly increasing")
        if not (np.all(np.isfinite(times)) and np.all(np.isfinite(values))):
            raise ValueError("time series contains missing or non-finite values")
        times.setflags(write=False)
        values.setflags(write=False)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "state_names", tuple(self.state_names))

    @property
    def n(self) -> int:
        """Number of intervals (observations minus one)."""
        return self.times.size - 1

    def column(self, name_or_index) -> np.ndarray:
        if isinstance(name_or_index, str):
            name_or_index = self.state_names.index(name_or_index)
        return self.values[:, name_or_index]

    def with_values(self, values: np.ndarray) -> "TimeSeriesData":
        return TimeSeriesData(self.times, values, self.state_names)


def format_csv(data: TimeSeriesData) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["t", *data.state_names])
    for t, row in zip(data.times, data.values):
        writer.writerow([repr(float(t)), *(repr(float(v)) for v in row)])
    return buf.getvalue()


def write_csv(data: TimeSeriesData, path: str | Path) -> None:
    Path(path).write_text(format_csv(data))


def read_csv(path: str | Path, state_names: Sequence[str] | None = None) -> TimeSeriesData:
    """Read ``t,<state...>`` CSV; columns are matched to ``state_names`` by header."""
    path = Path(path)
    if not path.exists():
        raise DataFileError(f"data file not found: {path}")
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    rows = [r for r in rows if r and any(c.strip() for c in r)]
    if not rows:
        raise DataFileError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if header[0] != "t":
        raise DataFileError(f"{path} line 1: first column must be 't', got {header[0]!r}")
    names = list(state_names) if state_names is not None else header[1:]
    missing = [n for n in names if n not in header[1:]]
    if missing:
        raise DataFileError(f"{path} line 1: missing column(s) {', '.join(missing)}")
    cols = [0] + [header.index(n) for n in names]
    table = []
    for lineno, row in enumerate(rows[1:], start=2):
        try:
            table.append([float(row[c]) for c in cols])
        except (ValueError, IndexError):
            raise DataFileError(f"{path} line {lineno}: cannot parse {','.join(row)!r}") from None
    arr = np.array(table, dtype=float)
    try:
        return TimeSeriesData(arr[:, 0], arr[:, 1:], tuple(names))
    except ValueError as exc:
        raise DataFileError(f"{path}: {exc}") from None
