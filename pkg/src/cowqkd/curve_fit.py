"""Least-squares fit of COW parameters to a measured SKR series.

The objective is the sum of squared differences between the modeled and
the measured SKR, evaluated on the measured QBER and visibility of each
sample. The SKR is clamped at zero, so the objective has kinks; the fit
therefore uses a derivative-free Nelder-Mead simplex, run in coordinates
normalized to the unit box and projected back onto it after every move.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence, Union

import numpy as np

from .cow_model import T_B_DEFAULT, ChannelObservables, CowParameters, ModelDomainError, secret_key_rate
from .data_pipeline import FeatureFrame, TimeSeries, format_rfc3339

FITTABLE = ("alpha", "eta", "t_B")

#: test ranges of the reference parameter table; t_B capped at 1 (no gain)
DEFAULT_BOUNDS: dict[str, tuple[float, float]] = {
    "alpha": (0.15, 0.25),
    "eta": (0.02, 0.1),
    "t_B": (0.5 * T_B_DEFAULT, min(2 * T_B_DEFAULT, 1.0)),
}


@dataclass(frozen=True)
class FitSpec:
    free_params: tuple[str, ...]
    bounds: Mapping[str, tuple[float, float]] = field(default_factory=dict)
    initial: Mapping[str, float] = field(default_factory=dict)
    max_iter: int = 2000
    tol: float = 1e-9
    use_measured_qber: bool = True

    def __post_init__(self) -> None:
        free = tuple(self.free_params)
        if not free:
            raise ValueError("at least one free parameter is required")
        unknown = set(free) - set(FITTABLE)
        if unknown:
            raise ValueError(f"cannot fit {sorted(unknown)}; choose from {FITTABLE}")
        if len(set(free)) != len(free):
            raise ValueError("free parameters repeat")
        bounds = {p: tuple(self.bounds.get(p, DEFAULT_BOUNDS[p])) for p in free}
        for p, (lo, hi) in bounds.items():
            if not lo < hi:
                raise ValueError(f"{p}: empty bounds ({lo}, {hi})")
            if p in self.initial and not lo <= self.initial[p] <= hi:
                raise ValueError(f"{p}: initial value {self.initial[p]} outside bounds")
        object.__setattr__(self, "free_params", free)
        object.__setattr__(self, "bounds", bounds)
        object.__setattr__(self, "initial", dict(self.initial))


@dataclass
class FitResult:
    fitted: dict[str, float]
    params: CowParameters
    residual_rms: float
    initial_rms: float
    iterations: int
    converged: bool
    calculated: np.ndarray
    timestamps: np.ndarray
    measured: np.ndarray
    objective_history: list[float] = field(default_factory=list)

    def to_text(self) -> str:
        lines = [f"converged = {str(self.converged).lower()}", f"iterations = {self.iterations}",
                 f"residual_rms = {self.residual_rms!r}", f"initial_rms = {self.initial_rms!r}"]
        lines += [f"fitted.{k} = {v!r}" for k, v in self.fitted.items()]
        lines += [f"params.{k} = {v!r}" for k, v in self.params.as_dict().items()]
        return "\n".join(lines) + "\n"

    def write(self, path: Union[str, Path], residual_path: Union[str, Path, None] = None) -> None:
        Path(path).write_text(self.to_text())
        if residual_path is not None:
            with open(residual_path, "w") as fh:
                fh.write("timestamp,measured,calculated,residual\n")
                for ts, m, c in zip(self.timestamps, self.measured, self.calculated):
                    fh.write(f"{format_rfc3339(ts)},{float(m)!r},{float(c)!r},{float(c - m)!r}\n")


def model_skr(frame: FeatureFrame, params: CowParameters, use_measured_qber: bool = True) -> np.ndarray:
    qber = np.clip(frame["qber"], 0.0, 1.0) if "qber" in frame else np.zeros(len(frame))
    obs = ChannelObservables(qber, np.clip(frame["visibility"], 0.0, 1.0))
    return np.asarray(secret_key_rate(params, obs, use_measured_qber).skr, dtype=float)


def residual_series(frame: FeatureFrame, params: CowParameters, use_measured_qber: bool = True) -> TimeSeries:
    """Model minus measured SKR per sample, bits/s."""
    return TimeSeries("skr_residual", frame.timestamps, model_skr(frame, params, use_measured_qber) - frame["skr"])


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class SimplexResult:
    x: np.ndarray
    fun: float
    iterations: int
    converged: bool
    history: list[float]


def nelder_mead_box(
    f: Callable[[np.ndarray], float],
    x0: np.ndarray,
    *,
    step: float = 0.1,
    tol: float = 1e-9,
    max_iter: int = 2000,
) -> SimplexResult:
    """Nelder-Mead on the unit box; every trial point is clipped into [0, 1]^n.

    ``history`` holds the best objective after each iteration and never
    increases. Convergence means the simplex diameter fell below ``tol``.
    """
    x0 = np.clip(np.asarray(x0, dtype=float), 0.0, 1.0)
    n = len(x0)
    simplex = [x0]
    for i in range(n):
        v = x0.copy()
        v[i] = v[i] + step if v[i] + step <= 1.0 else v[i] - step
        simplex.append(np.clip(v, 0.0, 1.0))
    simplex = np.array(simplex)
    fs = np.array([f(v) for v in simplex])
    history = []
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        order = np.argsort(fs, kind="stable")
        simplex, fs = simplex[order], fs[order]
        centroid = simplex[:-1].mean(axis=0)
        worst = simplex[-1]

        xr = np.clip(centroid + (centroid - worst), 0, 1)
        fr = f(xr)
        if fr < fs[0]:
            xe = np.clip(centroid + 2 * (centroid - worst), 0, 1)
            fe = f(xe)
            simplex[-1], fs[-1] = (xe, fe) if fe < fr else (xr, fr)
        elif fr < fs[-2]:
            simplex[-1], fs[-1] = xr, fr
        else:
            if fr < fs[-1]:
                xc = np.clip(centroid + 0.5 * (xr - centroid), 0, 1)
            else:
                xc = np.clip(centroid + 0.5 * (worst - centroid), 0, 1)
            fc = f(xc)
            if fc < min(fr, fs[-1]):
                simplex[-1], fs[-1] = xc, fc
            else:
                simplex[1:] = simplex[0] + 0.5 * (simplex[1:] - simplex[0])
                fs[1:] = [f(v) for v in simplex[1:]]
        history.append(float(np.min(fs)))
        diameter = np.max(np.abs(simplex - simplex[np.argmin(fs)]))
        if diameter < tol:
            converged = True
            break
    best = int(np.argmin(fs))
    return SimplexResult(simplex[best].copy(), float(fs[best]), it, converged, history)


# ---------------------------------------------------------------------------
# fitting


def fit(frame: FeatureFrame, base: CowParameters, spec: FitSpec, restarts: int = 2) -> FitResult:
    """Fit ``spec.free_params`` so the modeled SKR matches ``frame['skr']``.

    Samples with a measured SKR of zero (outages) are left out of the
    objective. Parameter combinations outside the model's domain score
    +inf. After convergence the simplex is rebuilt around the best point
    up to ``restarts`` times to guard against early collapse.
    """
    if len(frame) == 0:
        raise ValueError("cannot fit an empty frame")
    for col in ("skr", "visibility"):
        if col not in frame:
            raise KeyError(f"frame lacks required column {col!r}")
    use = frame["skr"] > 0
    if not use.any():
        raise ValueError("frame has no samples with positive SKR")
    sub = frame.rows(use)
    measured = sub["skr"]

    names = spec.free_params
    lo = np.array([spec.bounds[p][0] for p in names])
    hi = np.array([spec.bounds[p][1] for p in names])
    start = np.array([spec.initial.get(p, getattr(base, p)) for p in names], dtype=float)
    start = np.clip(start, lo, hi)

    def params_at(z: np.ndarray) -> CowParameters:
        vals = lo + np.clip(z, 0, 1) * (hi - lo)
        return base.replace(**{p: float(v) for p, v in zip(names, vals)})

    def sse(z: np.ndarray) -> float:
        try:
            r = model_skr(sub, params_at(z), spec.use_measured_qber) - measured
        except ModelDomainError:
            return np.inf
        return float(r @ r)

    z0 = (start - lo) / (hi - lo)
    f0 = sse(z0)
    res = nelder_mead_box(sse, z0, tol=spec.tol, max_iter=spec.max_iter)
    iterations, history = res.iterations, list(res.history)
    for _ in range(restarts):
        if not res.converged:
            break
        again = nelder_mead_box(sse, res.x, step=0.05, tol=spec.tol, max_iter=spec.max_iter)
        iterations += again.iterations
        history += [min(h, res.fun) for h in again.history]
        if again.fun >= res.fun:
            break
        res = again
    # keep the starting point if nothing beat it
    if f0 <= res.fun:
        z_best, f_best = z0, f0
    else:
        z_best, f_best = res.x, res.fun
    fitted = params_at(z_best)
    n = len(measured)
    return FitResult(
        fitted={p: getattr(fitted, p) for p in names},
        params=fitted,
        residual_rms=float(np.sqrt(f_best / n)),
        initial_rms=float(np.sqrt(f0 / n)),
        iterations=iterations,
        converged=res.converged,
        calculated=model_skr(frame, fitted, spec.use_measured_qber),
        timestamps=frame.timestamps,
        measured=frame["skr"],
        objective_history=history,
    )


def fit_nested(
    frame: FeatureFrame,
    base: CowParameters,
    sequence: Sequence[Sequence[str]] = (("alpha",), ("alpha", "eta"), ("alpha", "eta", "t_B")),
    **spec_kwargs,
) -> list[FitResult]:
    """Fit growing parameter subsets, each started from the previous optimum."""
    results: list[FitResult] = []
    current = base
    for free in sequence:
        spec = FitSpec(tuple(free), **spec_kwargs)
        initial = {p: getattr(current, p) for p in free}
        spec = dataclasses.replace(spec, initial={
            p: float(np.clip(v, *spec.bounds[p])) for p, v in initial.items()
        })
        r = fit(frame, current, spec)
        results.append(r)
        current = r.params
    return results
