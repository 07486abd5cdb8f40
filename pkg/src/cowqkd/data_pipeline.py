"""Monitoring-data preprocessing: CSV ingestion, cleaning, tumbling-window
averaging, alignment of parameters, lag features, correlations and scaling.

Timestamps are kept as ``datetime64[us]`` in UTC throughout.
"""
from __future__ import annotations

import csv
import logging
import math
import re
import warnings
from dataclasses import dataclass, field
from datetime import timedelta
from pathlib import Path
from typing import Iterable, Mapping, Sequence, Union

import numpy as np

log = logging.getLogger(__name__)

PARAMETERS = ("skr", "qber", "visibility", "laserpower")
FRAME_ORDER = ("qber", "visibility", "laserpower", "link_loss", "skr")

_LINE_RE = re.compile(
    r"^(\d{4}-\d{2}-\d{2}) (\d{2}:\d{2}:\d{2}(?:\.\d{1,6})?)\+00:00,(.*)$"
)


class CsvParseError(ValueError):
    def __init__(self, path, line_no: int, message: str):
        self.path = str(path)
        self.line_no = line_no
        super().__init__(f"{path}:{line_no}: {message}")


class EmptyInputError(ValueError):
    pass


class ConstantColumnError(ValueError):
    pass


@dataclass(frozen=True)
class TimeSeries:
    """Samples of one monitored parameter, sorted by timestamp."""

    name: str
    timestamps: np.ndarray
    values: np.ndarray

    def __post_init__(self) -> None:
        ts = np.asarray(self.timestamps, dtype="datetime64[us]")
        vals = np.asarray(self.values, dtype=float)
        if ts.shape != vals.shape or ts.ndim != 1:
            raise ValueError("timestamps and values must be 1-d and of equal length")
        if len(ts) > 1 and np.any(np.diff(ts.astype(np.int64)) <= 0):
            raise ValueError("timestamps must be strictly increasing")
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "values", vals)

    def __len__(self) -> int:
        return len(self.values)

    def __eq__(self, other) -> bool:
        if not isinstance(other, TimeSeries):
            return NotImplemented
        return (
            self.name == other.name
            and np.array_equal(self.timestamps, other.timestamps)
            and np.array_equal(self.values, other.values, equal_nan=True)
        )

    def __hash__(self):  # pragma: no cover - arrays are unhashable by intent
        raise TypeError("TimeSeries is not hashable")


def parse_duration(text: Union[str, float, int, timedelta]) -> timedelta:
    """'10m', '10min', '600s', '2h', '14d' or a number of seconds."""
    if isinstance(text, timedelta):
        return text
    if isinstance(text, (int, float)):
        return timedelta(seconds=float(text))
    m = re.fullmatch(r"\s*([0-9]*\.?[0-9]+)\s*(us|ms|s|sec|m|min|h|d)?\s*", text)
    if not m:
        raise ValueError(f"cannot parse duration {text!r}")
    value, unit = float(m.group(1)), m.group(2) or "s"
    scale = {"us": 1e-6, "ms": 1e-3, "s": 1, "sec": 1, "m": 60, "min": 60, "h": 3600, "d": 86400}
    return timedelta(seconds=value * scale[unit])


def _to_us(d: timedelta) -> int:
    return d // timedelta(microseconds=1)


def format_timestamp(ts: np.datetime64) -> str:
    """Input-format timestamp, e.g. '2023-11-29 18:57:02.113707+00:00'."""
    return str(np.datetime_as_string(ts, unit="us")).replace("T", " ") + "+00:00"


def format_rfc3339(ts: np.datetime64) -> str:
    s = str(np.datetime_as_string(ts, unit="us"))
    if s.endswith(".000000"):
        s = s[:-7]
    return s + "Z"


def parse_rfc3339(text: str) -> np.datetime64:
    text = text.strip()
    for suffix in ("Z", "+00:00"):
        if text.endswith(suffix):
            text = text[: -len(suffix)]
            break
    else:
        raise ValueError(f"timestamp {text!r} is not UTC")
    return np.datetime64(text.replace(" ", "T"), "us")


# ---------------------------------------------------------------------------
# ingestion and cleaning


def ingest_csv(path: Union[str, Path], name: str | None = None) -> TimeSeries:
    """Read one ``<timestamp>,<value>`` monitoring file (no header).

    Rows are sorted by time; for repeated timestamps the last row in file
    order wins. Blank lines are skipped. Unparseable values other than
    empty/'nan' raise :class:`CsvParseError`.
    """
    path = Path(path)
    name = name or path.stem
    stamps: list[np.datetime64] = []
    values: list[float] = []
    with open(path, encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            m = _LINE_RE.match(line)
            if not m:
                raise CsvParseError(path, line_no, f"malformed line {line!r}")
            try:
                ts = np.datetime64(f"{m.group(1)}T{m.group(2)}", "us")
            except ValueError as exc:
                raise CsvParseError(path, line_no, str(exc)) from None
            field_ = m.group(3).strip()
            if field_ == "" or field_.lower() == "nan":
                value = math.nan
            else:
                try:
                    value = float(field_)
                except ValueError:
                    raise CsvParseError(path, line_no, f"bad value {field_!r}") from None
            stamps.append(ts)
            values.append(value)
    if not stamps:
        raise EmptyInputError(f"{path}: no samples")
    ts = np.array(stamps, dtype="datetime64[us]")
    vals = np.array(values, dtype=float)
    order = np.argsort(ts, kind="stable")
    ts, vals = ts[order], vals[order]
    # keep the last of each run of equal timestamps
    keep = np.ones(len(ts), dtype=bool)
    keep[:-1] = ts[1:] != ts[:-1]
    return TimeSeries(name, ts[keep], vals[keep])


def write_series_csv(series: TimeSeries, path: Union[str, Path]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ts, v in zip(series.timestamps, series.values):
            fh.write(f"{format_timestamp(ts)},{float(v)!r}\n")


@dataclass(frozen=True)
class CleaningRules:
    drop_nonfinite: bool = True
    valid_ranges: Mapping[str, tuple[float, float]] = field(
        default_factory=lambda: {"visibility": (0.0, 1.0)}
    )


@dataclass(frozen=True)
class CleaningReport:
    name: str
    nonfinite: int = 0
    out_of_range: int = 0

    @property
    def dropped(self) -> int:
        return self.nonfinite + self.out_of_range


def clean_with_report(
    series: TimeSeries, rules: CleaningRules = CleaningRules()
) -> tuple[TimeSeries, CleaningReport]:
    v = series.values
    bad_nonfinite = ~np.isfinite(v) if rules.drop_nonfinite else np.zeros(len(v), bool)
    bad_range = np.zeros(len(v), dtype=bool)
    bounds = rules.valid_ranges.get(series.name)
    if bounds is not None:
        lo, hi = bounds
        with np.errstate(invalid="ignore"):
            bad_range = ~bad_nonfinite & ((v < lo) | (v > hi))
    keep = ~(bad_nonfinite | bad_range)
    report = CleaningReport(series.name, int(bad_nonfinite.sum()), int(bad_range.sum()))
    if len(v) and not keep.any():
        warnings.warn(f"cleaning removed every sample of {series.name!r}", stacklevel=2)
    return TimeSeries(series.name, series.timestamps[keep], v[keep]), report


def clean(series: TimeSeries, rules: CleaningRules = CleaningRules()) -> TimeSeries:
    """Drop NaN/Inf samples and values outside the per-parameter valid range."""
    return clean_with_report(series, rules)[0]


# ---------------------------------------------------------------------------
# averaging and alignment


def temporal_average(series: TimeSeries, window: Union[str, float, timedelta] = "10m") -> TimeSeries:
    """Tumbling-window means on windows aligned to the Unix epoch.

    Each output sample is stamped at its window start; windows without
    samples are omitted.
    """
    w = parse_duration(window)
    if not timedelta(seconds=1) <= w <= timedelta(hours=24):
        raise ValueError("averaging window must lie between 1 s and 24 h")
    if len(series) == 0:
        return series
    w_us = _to_us(w)
    t_us = series.timestamps.astype(np.int64)
    keys = t_us // w_us
    starts = np.flatnonzero(np.r_[True, keys[1:] != keys[:-1]])
    sums = np.add.reduceat(series.values, starts)
    counts = np.diff(np.r_[starts, len(keys)])
    stamps = (keys[starts] * w_us).astype("datetime64[us]")
    return TimeSeries(series.name, stamps, sums / counts)


@dataclass(frozen=True)
class FeatureFrame:
    """Aligned samples on a common time grid, one named vector per column."""

    timestamps: np.ndarray
    columns: Mapping[str, np.ndarray]
    scaler_state: Mapping[str, tuple[float, float]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        ts = np.asarray(self.timestamps, dtype="datetime64[us]")
        cols = {k: np.asarray(v, dtype=float) for k, v in self.columns.items()}
        for k, v in cols.items():
            if v.shape != ts.shape:
                raise ValueError(f"column {k!r} has {len(v)} rows, expected {len(ts)}")
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "columns", cols)
        object.__setattr__(self, "scaler_state", dict(self.scaler_state))

    def __len__(self) -> int:
        return len(self.timestamps)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.columns[name]

    def __contains__(self, name: str) -> bool:
        return name in self.columns

    @property
    def names(self) -> list[str]:
        return list(self.columns)

    def rows(self, index) -> "FeatureFrame":
        return FeatureFrame(
            self.timestamps[index],
            {k: v[index] for k, v in self.columns.items()},
            self.scaler_state,
        )

    def select(self, names: Iterable[str]) -> "FeatureFrame":
        return FeatureFrame(self.timestamps, {k: self.columns[k] for k in names}, self.scaler_state)

    def drop(self, names: Iterable[str]) -> "FeatureFrame":
        names = set(names)
        return self.select([k for k in self.columns if k not in names])

    def with_column(self, name: str, values) -> "FeatureFrame":
        cols = dict(self.columns)
        cols[name] = np.broadcast_to(np.asarray(values, dtype=float), self.timestamps.shape).copy()
        return FeatureFrame(self.timestamps, cols, self.scaler_state)

    def equals(self, other: "FeatureFrame") -> bool:
        return (
            np.array_equal(self.timestamps, other.timestamps)
            and self.names == other.names
            and all(np.array_equal(self[k], other[k]) for k in self.names)
        )


def align(series_list: Sequence[TimeSeries]) -> FeatureFrame:
    """Inner join of several series on their (window) timestamps."""
    if not series_list:
        raise ValueError("nothing to align")
    common = series_list[0].timestamps
    for s in series_list[1:]:
        common = np.intersect1d(common, s.timestamps, assume_unique=True)
    if len(common) == 0:
        raise EmptyInputError("series share no timestamps")
    cols = {}
    for s in series_list:
        idx = np.searchsorted(s.timestamps, common)
        cols[s.name] = s.values[idx]
    return FeatureFrame(common, cols)


def add_lags(frame: FeatureFrame, column: str, lags: Sequence[int]) -> FeatureFrame:
    """Add ``{column}_lag{k}`` holding the value k rows earlier.

    Lags count grid steps, so on a 10-minute grid lag 1 is the value ten
    minutes before. The first max(lags) rows have no history and are dropped.
    """
    lags = sorted(set(int(k) for k in lags))
    if not lags:
        return frame
    if lags[0] <= 0:
        raise ValueError("lags must be positive")
    if column not in frame:
        raise KeyError(column)
    kmax = lags[-1]
    n = len(frame)
    if n <= kmax:
        raise ValueError(f"frame has {n} rows, need more than {kmax} for lag {kmax}")
    out = frame.rows(slice(kmax, None))
    src = frame[column]
    for k in lags:
        out = out.with_column(f"{column}_lag{k}", src[kmax - k : n - k])
    return out


def lag_columns(column: str, lags: Sequence[int]) -> list[str]:
    return [f"{column}_lag{k}" for k in sorted(set(lags))]


# ---------------------------------------------------------------------------
# correlation


@dataclass(frozen=True)
class CorrelationMatrix:
    labels: list[str]
    values: np.ndarray
    undefined: frozenset = frozenset()

    def __getitem__(self, pair: tuple[str, str]) -> float:
        i, j = self.labels.index(pair[0]), self.labels.index(pair[1])
        return float(self.values[i, j])

    def to_csv(self, path: Union[str, Path, None] = None) -> str:
        lines = ["," + ",".join(self.labels)]
        for lab, row in zip(self.labels, self.values):
            lines.append(lab + "," + ",".join(f"{x:.6f}" for x in row))
        text = "\n".join(lines) + "\n"
        if path is not None:
            Path(path).write_text(text)
        return text


def pearson_matrix(frame: FeatureFrame, columns: Sequence[str] | None = None) -> CorrelationMatrix:
    """Pairwise Pearson coefficients.

    A constant column has no defined correlation; its off-diagonal entries
    are reported as 0, listed in ``undefined``, and a warning is emitted.
    """
    columns = list(columns or frame.names)
    if len(frame) < 2:
        raise ValueError("correlation needs at least two rows")
    X = np.column_stack([frame[c] for c in columns])
    Xc = X - X.mean(axis=0)
    norms = np.sqrt((Xc**2).sum(axis=0))
    const = norms == 0
    safe = np.where(const, 1.0, norms)
    Z = Xc / safe
    R = np.clip(Z.T @ Z, -1.0, 1.0)
    R = (R + R.T) / 2
    undefined = set()
    for i, c in enumerate(columns):
        if const[i]:
            warnings.warn(f"column {c!r} is constant; its correlations are undefined", stacklevel=2)
            for j, d in enumerate(columns):
                if j != i:
                    undefined.add((c, d))
                    undefined.add((d, c))
    np.fill_diagonal(R, 1.0)
    return CorrelationMatrix(columns, R, frozenset(undefined))


# ---------------------------------------------------------------------------
# min-max scaling


def fit_minmax_state(
    frame: FeatureFrame, columns: Sequence[str], allow_constant: bool = False
) -> dict[str, tuple[float, float]]:
    """Per-column (min, max). With ``allow_constant`` a constant column gets a
    unit range so it maps to 0, otherwise it is an error."""
    state = {}
    for c in columns:
        x = frame[c]
        lo, hi = float(np.min(x)), float(np.max(x))
        if not hi > lo:
            if not allow_constant:
                raise ConstantColumnError(f"column {c!r} is constant; cannot min-max scale")
            hi = lo + 1.0
        state[c] = (lo, hi)
    return state


def minmax_fit_transform(frame: FeatureFrame, columns: Sequence[str]) -> FeatureFrame:
    """Scale ``columns`` into [0, 1] and record (min, max) per column."""
    state = {**frame.scaler_state, **fit_minmax_state(frame, columns)}
    return minmax_transform(FeatureFrame(frame.timestamps, frame.columns, state), columns)


def minmax_transform(
    frame: FeatureFrame,
    columns: Sequence[str],
    state: Mapping[str, tuple[float, float]] | None = None,
) -> FeatureFrame:
    """Apply stored scalers; values outside the fitted range are not clamped."""
    state = dict(frame.scaler_state if state is None else state)
    cols = dict(frame.columns)
    for c in columns:
        lo, hi = state[c]
        cols[c] = (cols[c] - lo) / (hi - lo)
    return FeatureFrame(frame.timestamps, cols, {**frame.scaler_state, **state})


def minmax_inverse(
    frame: FeatureFrame,
    columns: Sequence[str],
    state: Mapping[str, tuple[float, float]] | None = None,
) -> FeatureFrame:
    state = dict(frame.scaler_state if state is None else state)
    cols = dict(frame.columns)
    for c in columns:
        lo, hi = state[c]
        cols[c] = cols[c] * (hi - lo) + lo
    return FeatureFrame(frame.timestamps, cols, frame.scaler_state)


# ---------------------------------------------------------------------------
# frame files


def write_frame_csv(frame: FeatureFrame, path: Union[str, Path]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["timestamp", *frame.names])
        cols = [frame[c] for c in frame.names]
        for i, ts in enumerate(frame.timestamps):
            w.writerow([format_rfc3339(ts), *(repr(float(c[i])) for c in cols)])


def read_frame_csv(path: Union[str, Path]) -> FeatureFrame:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:1] != ["timestamp"]:
        raise CsvParseError(path, 1, "missing 'timestamp' header")
    names = rows[0][1:]
    stamps, data = [], []
    for line_no, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(names) + 1:
            raise CsvParseError(path, line_no, f"expected {len(names) + 1} fields, got {len(row)}")
        try:
            stamps.append(parse_rfc3339(row[0]))
            data.append([float(x) for x in row[1:]])
        except ValueError as exc:
            raise CsvParseError(path, line_no, str(exc)) from None
    arr = np.array(data, dtype=float).reshape(len(data), len(names))
    return FeatureFrame(
        np.array(stamps, dtype="datetime64[us]"), {n: arr[:, i] for i, n in enumerate(names)}
    )


# ---------------------------------------------------------------------------
# whole preprocessing chain


@dataclass
class PrepReport:
    cleaning: list[CleaningReport]
    raw_counts: dict[str, int]
    averaged_counts: dict[str, int]
    rows: int


def load_link_dir(directory: Union[str, Path]) -> dict[str, TimeSeries]:
    directory = Path(directory)
    found = {}
    for name in PARAMETERS:
        p = directory / f"{name}.csv"
        if p.exists():
            found[name] = ingest_csv(p, name)
    if not found:
        raise EmptyInputError(f"{directory}: none of {', '.join(PARAMETERS)} found")
    return found


def prepare(
    series: Mapping[str, TimeSeries],
    window: Union[str, float, timedelta] = "10m",
    lags: Sequence[int] = (1, 2, 3),
    lag_column: str = "skr",
    rules: CleaningRules = CleaningRules(),
    link_loss: float | None = None,
) -> tuple[FeatureFrame, PrepReport]:
    """Clean, average, align and lag a set of per-parameter series."""
    reports, averaged = [], []
    for name in PARAMETERS:
        if name not in series:
            continue
        s, rep = clean_with_report(series[name], rules)
        reports.append(rep)
        log.info("%s: dropped %d non-finite, %d out of range", name, rep.nonfinite, rep.out_of_range)
        if len(s):
            averaged.append(temporal_average(s, window))
    frame = align(averaged)
    if link_loss is not None:
        frame = frame.with_column("link_loss", link_loss)
    order = [c for c in FRAME_ORDER if c in frame] + [c for c in frame.names if c not in FRAME_ORDER]
    frame = frame.select(order)
    if lags:
        frame = add_lags(frame, lag_column, lags)
    report = PrepReport(
        cleaning=reports,
        raw_counts={k: len(v) for k, v in series.items()},
        averaged_counts={s.name: len(s) for s in averaged},
        rows=len(frame),
    )
    return frame, report
