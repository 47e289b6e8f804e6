"""Per-step simulation logs and their CSV export."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

TRAJECTORY_SCHEMA = "adaptno-trajectory/1"
BASE_COLUMNS = ("t", "norm_u", "norm_m", "U")


@dataclass
class TrajectoryLog:
    """Column-oriented record of a run.

    ``rows`` holds the scalar columns written to CSV (always starting with
    t, norm_u, norm_m, U).  ``snapshots`` holds arrays captured at a stride
    (estimates, states); ``timings`` holds wall-clock data, kept apart so the
    CSV stays bit-reproducible.
    """

    columns: tuple[str, ...] = BASE_COLUMNS
    rows: list[tuple[float, ...]] = field(default_factory=list)
    snapshots: list[dict[str, np.ndarray]] = field(default_factory=list)
    timings: list[float] = field(default_factory=list)
    final: dict[str, np.ndarray] = field(default_factory=dict)

    def append(self, **values):
        try:
            self.rows.append(tuple(float(values[c]) for c in self.columns))
        except KeyError as exc:
            raise KeyError(f"log row is missing column {exc}") from None

    def column(self, name) -> np.ndarray:
        k = self.columns.index(name)
        return np.array([r[k] for r in self.rows])

    def __len__(self):
        return len(self.rows)

    def to_csv(self, path):
        path = Path(path)
        with path.open("w", newline="") as fh:
            fh.write(f"# schema: {TRAJECTORY_SCHEMA}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.columns)
            for r in self.rows:
                w.writerow([repr(v) for v in r])

    def timings_to_csv(self, path):
        with Path(path).open("w", newline="") as fh:
            fh.write("# schema: adaptno-timing/1\n")
            fh.write("step,kernel_ms\n")
            for k, ms in enumerate(self.timings):
                fh.write(f"{k},{ms!r}\n")


def read_csv(path) -> dict[str, np.ndarray]:
    """Load any CSV written by this package into named columns."""
    with Path(path).open() as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    reader = csv.reader(lines)
    header = next(reader)
    data = [[float(v) for v in row] for row in reader]
    arr = np.array(data, dtype=np.float64).reshape(len(data), len(header))
    return {name: arr[:, k] for k, name in enumerate(header)}
