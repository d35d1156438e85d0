"""Evaluation metrics and the metrics record stream."""

import csv
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

__all__ = [
    "MetricsRecord",
    "accuracy",
    "test_error",
    "write_metrics_csv",
    "read_metrics_csv",
    "MetricsWriter",
]


def accuracy(predictions, truth):
    """Fraction of exactly matching class indices."""
    p = np.asarray(predictions)
    t = np.asarray(truth)
    if p.shape != t.shape:
        raise ValueError(f"prediction shape {p.shape} does not match truth {t.shape}")
    if p.size == 0:
        raise ValueError("no predictions")
    return float(np.count_nonzero(p == t)) / p.size


def test_error(pred, truth):
    """Mean over samples of the squared l2 norm of ``pred - truth``.

    The first axis indexes samples; all remaining axes form the vector.
    """
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(truth, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"prediction shape {p.shape} does not match truth {t.shape}")
    if p.shape[0] == 0:
        raise ValueError("no predictions")
    r = (p - t).reshape(p.shape[0], -1)
    return float(np.mean(np.sum(r * r, axis=1)))


test_error.__test__ = False  # not a pytest test despite the name


@dataclass(frozen=True)
class MetricsRecord:
    """One row of the metrics stream.

    ``step`` counts epochs for supervised runs and assimilated samples for
    online runs.  ``metric`` names what the two values measure:
    ``'accuracy'`` or ``'mse'``.
    """

    step: int
    train_metric: float
    test_metric: float
    wall_time: float
    ensemble_size: int
    metric: str = "accuracy"

    def __post_init__(self):
        for name in ("train_metric", "test_metric", "wall_time"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        if self.metric == "accuracy":
            for name in ("train_metric", "test_metric"):
                if not 0.0 <= getattr(self, name) <= 1.0:
                    raise ValueError(f"{name} accuracy outside [0, 1]")
        elif self.metric != "mse":
            raise ValueError(f"unknown metric {self.metric!r}")


_COLUMNS = [f.name for f in fields(MetricsRecord)]


def _row(rec):
    d = asdict(rec)
    # repr keeps floats exact through a text round trip.
    return [repr(float(d[c])) if isinstance(d[c], float) else str(d[c]) for c in _COLUMNS]


def write_metrics_csv(path, records):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(_COLUMNS)
        for rec in records:
            w.writerow(_row(rec))


def read_metrics_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != _COLUMNS:
        raise ValueError(f"{path}: header does not match {_COLUMNS}")
    out = []
    for row in rows[1:]:
        d = dict(zip(_COLUMNS, row))
        out.append(
            MetricsRecord(
                step=int(d["step"]),
                train_metric=float(d["train_metric"]),
                test_metric=float(d["test_metric"]),
                wall_time=float(d["wall_time"]),
                ensemble_size=int(d["ensemble_size"]),
                metric=d["metric"],
            )
        )
    return out


class MetricsWriter:
    """Append records to a CSV file as they arrive, flushing each row."""

    def __init__(self, path):
        self.path = Path(path)
        self._fh = open(self.path, "w", newline="")
        self._w = csv.writer(self._fh, lineterminator="\n")
        self._w.writerow(_COLUMNS)
        self._fh.flush()

    def write(self, rec):
        self._w.writerow(_row(rec))
        self._fh.flush()

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
