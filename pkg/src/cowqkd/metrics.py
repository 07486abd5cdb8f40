"""Prediction error metrics.

ME, MAE and MRE are computed on raw SKR values (bits/s); MSE is computed on
min-max scaled values so that links of different rates are comparable.
MRE is signed: mean((pred - meas) / meas).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Union

import numpy as np

CSV_HEADER = ("link", "model", "n", "me", "mae", "mre", "mse")


class ZeroMeasurementError(ValueError):
    """MRE is undefined because a measured value is zero."""


@dataclass(frozen=True)
class ErrorReport:
    me: float
    mae: float
    mre: float | None
    mse: float
    n: int
    mre_error: str | None = None

    def csv_row(self, link: str = "", model: str = "") -> str:
        mre = "" if self.mre is None else repr(self.mre)
        return f"{link},{model},{self.n},{self.me!r},{self.mae!r},{mre},{self.mse!r}"


def _vector(x, name: str) -> np.ndarray:
    a = np.asarray(x, dtype=float).ravel()
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite values")
    return a


def compute(measured_raw, predicted_raw, measured_scaled, predicted_scaled) -> ErrorReport:
    """All four metrics. A zero measurement drops MRE and records why."""
    mr, pr = _vector(measured_raw, "measured_raw"), _vector(predicted_raw, "predicted_raw")
    ms, ps = _vector(measured_scaled, "measured_scaled"), _vector(predicted_scaled, "predicted_scaled")
    n = len(mr)
    if n == 0:
        raise ValueError("need at least one sample")
    if not len(pr) == len(ms) == len(ps) == n:
        raise ValueError("inputs differ in length")
    err = pr - mr
    mre, why = None, None
    if np.any(mr == 0):
        why = str(ZeroMeasurementError(f"{int(np.sum(mr == 0))} measured value(s) are zero; MRE omitted"))
    else:
        mre = math.fsum(err / mr) / n
    d = ms - ps
    return ErrorReport(
        me=math.fsum(err) / n,
        mae=math.fsum(np.abs(err)) / n,
        mre=mre,
        mse=math.fsum(d * d) / n,
        n=n,
        mre_error=why,
    )


def write_reports(rows: Iterable[tuple[str, str, ErrorReport]], path: Union[str, Path, None] = None) -> str:
    """CSV text with one row per (link, model); written to ``path`` if given."""
    text = ",".join(CSV_HEADER) + "\n" + "".join(r.csv_row(link, model) + "\n" for link, model, r in rows)
    if path is not None:
        Path(path).write_text(text)
    return text
