"""Closed-form physical-layer model of a Coherent One-Way (COW) QKD link.

All functions are pure. Parameters are scalars held in a frozen
:class:`CowParameters`; the observables (visibility, QBER) may be scalars or
numpy arrays, in which case the results broadcast per sample.
"""
from __future__ import annotations

import dataclasses
import math
import warnings
from dataclasses import dataclass
from typing import Literal, Union

import numpy as np

ArrayLike = Union[float, np.ndarray]

#: Bob's component transmission, 2.65 dB of loss expressed linearly.
T_B_DEFAULT = 10 ** (-2.65 / 10)

# relative slack on the mu/t <= 2 validity limit, absorbs rounding of 2*t/t
_MU_T_SLACK = 1e-12


class ModelDomainError(ValueError):
    """An input lies outside the domain where the model is defined."""


class DegenerateModelError(ValueError):
    """All click probabilities vanish, so a ratio in the model is 0/0."""


class NoConvergenceError(RuntimeError):
    pass


class MuBracketWarning(UserWarning):
    """solve_mu found no sign change and returned the best bracket endpoint."""


def db_to_linear(loss_db: float) -> float:
    return 10 ** (-loss_db / 10)


def linear_to_db(transmission: float) -> float:
    return -10 * math.log10(transmission)


@dataclass(frozen=True)
class CowParameters:
    """Physical parameter vector of one COW link.

    Defaults are the nominal values of the reference parameter table
    (attenuation 0.21 dB/km, 40 km channel, 1.25 GHz repetition rate, ...).
    ``t_B`` is linear; use :func:`db_to_linear` for values quoted in dB.
    ``detector_in_p_mu=False`` drops the detector efficiency from the click
    probability (model variant for sensitivity studies).
    """

    alpha: float = 0.21
    eta: float = 0.07
    eta_ec: float = 1.0
    p_dc: float = 5e-6
    L_s: float = 10.0
    t_B: float = T_B_DEFAULT
    tau_dead: float = 10e-6
    nu: float = 1.25e9
    mu: float = 0.5
    L: float = 40.0
    p_ap: float = 0.0
    detector_in_p_mu: bool = True

    def __post_init__(self) -> None:
        checks = [
            ("alpha", self.alpha > 0),
            ("eta", 0 < self.eta <= 1),
            ("eta_ec", self.eta_ec >= 1),
            ("p_dc", 0 <= self.p_dc < 1),
            ("L_s", self.L_s > 0),
            ("t_B", 0 < self.t_B <= 1),
            ("tau_dead", self.tau_dead >= 0),
            ("nu", self.nu > 0),
            ("mu", self.mu > 0),
            ("L", self.L >= 0),
            ("p_ap", 0 <= self.p_ap < 1),
        ]
        for name, ok in checks:
            value = getattr(self, name)
            if not ok or not math.isfinite(value):
                raise ModelDomainError(f"invalid {name}={value!r}")

    @classmethod
    def at_upper_bound(cls, **kwargs) -> "CowParameters":
        """Parameters with the mean photon number set to the channel transmittance."""
        kwargs.pop("mu", None)
        base = cls(**kwargs)
        return base.replace(mu=transmittance(base.alpha, base.L))

    def replace(self, **changes) -> "CowParameters":
        return dataclasses.replace(self, **changes)

    @property
    def t(self) -> float:
        return transmittance(self.alpha, self.L)

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class ChannelObservables:
    qber: ArrayLike
    visibility: ArrayLike

    def __post_init__(self) -> None:
        for name in ("qber", "visibility"):
            v = np.asarray(getattr(self, name), dtype=float)
            if np.any(~np.isfinite(v)) or np.any(v < 0) or np.any(v > 1):
                raise ModelDomainError(f"{name} must lie in [0, 1]")


@dataclass(frozen=True)
class SkrBreakdown:
    t: float
    p_mu: float
    eta_dead: float
    eta_duty: float
    r_sift: float
    qber: ArrayLike
    i_ab: ArrayLike
    i_ae: ArrayLike
    skr_raw: ArrayLike
    skr: ArrayLike


def _out(x: np.ndarray):
    # 0-d arrays come back as numpy scalars (float subclasses)
    return x[()] if isinstance(x, np.ndarray) and x.ndim == 0 else x


def transmittance(alpha: float, L: float) -> float:
    if not alpha > 0:
        raise ModelDomainError(f"attenuation must be positive, got {alpha!r}")
    if L < 0:
        raise ModelDomainError(f"length must be non-negative, got {L!r}")
    return 10 ** (-alpha * L / 10)


def binary_entropy(p: ArrayLike) -> ArrayLike:
    """Shannon entropy of a Bernoulli(p) variable in bits, H(0) = H(1) = 0."""
    p = np.asarray(p, dtype=float)
    if np.any(np.isnan(p)) or np.any(p < 0) or np.any(p > 1):
        raise ModelDomainError("binary entropy argument must lie in [0, 1]")
    inner = (p > 0) & (p < 1)
    q = np.where(inner, p, 0.5)
    h = -q * np.log2(q) - (1 - q) * np.log2(1 - q)
    return _out(np.where(inner, h, 0.0))


def _click_probability(mu: float, t: float, t_B: float, eta: float) -> float:
    return -math.expm1(-mu * t * t_B * eta)


def detection_probability(params: CowParameters) -> float:
    """Probability that a pulse produces a click at Bob, 1 - exp(-mu t t_B eta)."""
    eta = params.eta if params.detector_in_p_mu else 1.0
    return _click_probability(params.mu, params.t, params.t_B, eta)


def dead_duty_factors(params: CowParameters, p_mu: float) -> tuple[float, float]:
    clicks = p_mu + 2 * params.p_dc + params.p_ap
    eta_dead = 1 / (1 + clicks * params.nu * params.tau_dead)
    eta_duty = params.L_s / (params.L + 2 * params.L_s)
    return eta_dead, eta_duty


def sifted_rate(params: CowParameters) -> float:
    """Detection rate after key sifting in bits/s (beta fixed to 1)."""
    p_mu = detection_probability(params)
    eta_dead, eta_duty = dead_duty_factors(params, p_mu)
    return 0.5 * (p_mu + 2 * params.p_dc + params.p_ap) * params.nu * eta_duty * eta_dead


def model_qber(params: CowParameters, visibility: ArrayLike) -> ArrayLike:
    """QBER implied by the visibility and the noise click probabilities."""
    v = np.asarray(visibility, dtype=float)
    if np.any(v < 0) or np.any(v > 1):
        raise ModelDomainError("visibility must lie in [0, 1]")
    p_mu = detection_probability(params)
    noise = 2 * params.p_dc + params.p_ap
    denom = 2 * (p_mu + noise)
    if denom == 0:
        raise DegenerateModelError("no clicks: p_mu, p_dc and p_ap are all zero")
    return _out(np.clip(((1 - v) * p_mu + noise) / denom, 0.0, 0.5))


def mutual_info_ab(qber: ArrayLike, eta_ec: float) -> ArrayLike:
    """1 - eta_ec * H2(qber). Not clamped: negative for large error rates."""
    return _out(1 - eta_ec * np.asarray(binary_entropy(qber)))


def mutual_info_ae(params: CowParameters, visibility: ArrayLike) -> ArrayLike:
    t = params.t
    ratio = params.mu / t
    if ratio > 2 * (1 + _MU_T_SLACK):
        raise ModelDomainError(
            f"mu/t = {ratio:.4g} exceeds 2; the eavesdropper bound is undefined here"
        )
    v = np.asarray(visibility, dtype=float)
    gap = 2 - ratio
    # at mu/t == 2 the P-dependent term carries a zero prefactor, so D is moot
    d = np.clip((1 - v) / gap, 0.0, 1.0) if gap > 0 else np.ones_like(v)
    p = 0.5 + np.sqrt(d * (1 - d))
    half = ratio / 2
    numerator = (1 - half) * (1 - np.asarray(binary_entropy(np.clip(p, 0, 1)))) + half
    denominator = 1 + 2 * params.p_dc / (params.mu * t * params.eta)
    return _out(numerator / denominator)


def secret_key_rate(
    params: CowParameters,
    obs: ChannelObservables,
    use_measured_qber: bool = True,
) -> SkrBreakdown:
    """Secret key rate R_sift * (I_ab - I_ae), clamped at zero.

    With ``use_measured_qber`` the observed QBER enters I_ab; otherwise the
    QBER is derived from the visibility via :func:`model_qber`.
    """
    t = params.t
    p_mu = detection_probability(params)
    eta_dead, eta_duty = dead_duty_factors(params, p_mu)
    r_sift = sifted_rate(params)
    qber = obs.qber if use_measured_qber else model_qber(params, obs.visibility)
    i_ab = mutual_info_ab(qber, params.eta_ec)
    i_ae = mutual_info_ae(params, obs.visibility)
    raw = r_sift * (np.asarray(i_ab) - np.asarray(i_ae))
    return SkrBreakdown(
        t=t,
        p_mu=p_mu,
        eta_dead=eta_dead,
        eta_duty=eta_duty,
        r_sift=r_sift,
        qber=qber,
        i_ab=i_ab,
        i_ae=i_ae,
        skr_raw=_out(raw),
        skr=_out(np.maximum(raw, 0.0)),
    )


def skr_value(
    params: CowParameters, visibility: ArrayLike, qber: ArrayLike | None = None
) -> ArrayLike:
    """Clamped SKR; modeled QBER is used when ``qber`` is None."""
    if qber is None:
        obs = ChannelObservables(qber=0.0, visibility=visibility)
        return secret_key_rate(params, obs, use_measured_qber=False).skr
    return secret_key_rate(params, ChannelObservables(qber, visibility)).skr


# ---------------------------------------------------------------------------
# mean photon number inversion


MU_FLOOR = 1e-4


def mu_bracket(params: CowParameters) -> tuple[float, float]:
    t = params.t
    return MU_FLOOR, min(2 * t, 1.0)


def _raw_skr(params, obs, use_measured_qber, mu):
    return float(secret_key_rate(params.replace(mu=mu), obs, use_measured_qber).skr_raw)


def skr_peak_mu(
    params: CowParameters, obs: ChannelObservables, use_measured_qber: bool = True
) -> float:
    """Mean photon number maximizing the unclamped SKR on the solver bracket."""
    lo, hi = mu_bracket(params)
    f = lambda u: _raw_skr(params, obs, use_measured_qber, math.exp(u))  # noqa: E731
    grid = np.linspace(math.log(lo), math.log(hi), 257)
    vals = [f(u) for u in grid]
    k = int(np.argmax(vals))
    a, b = grid[max(k - 1, 0)], grid[min(k + 1, len(grid) - 1)]
    invphi = (math.sqrt(5) - 1) / 2
    c, d = b - invphi * (b - a), a + invphi * (b - a)
    fc, fd = f(c), f(d)
    while b - a > 1e-13:
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
    return math.exp((a + b) / 2)


def solve_mu(
    params: CowParameters,
    obs: ChannelObservables,
    target_skr: float,
    *,
    branch: Literal["low", "high"] = "low",
    use_measured_qber: bool = True,
    tol: float = 1e-6,
    max_iter: int = 200,
) -> float:
    """Mean photon number at which the SKR equals ``target_skr``.

    The SKR rises with mu from zero, peaks, then falls back to zero before
    mu reaches 2t, so most targets have two preimages. ``branch`` picks the
    one below ("low") or above ("high") the peak. Bisection runs in log-mu
    on the chosen monotone branch. The current ``params.mu`` is ignored.

    When the residual does not change sign on the branch, the endpoint with
    the smallest |residual| is returned and a :class:`MuBracketWarning` is
    emitted.
    """
    if target_skr < 0:
        raise ValueError("target SKR must be non-negative")
    if branch not in ("low", "high"):
        raise ValueError(f"unknown branch {branch!r}")
    lo, hi = mu_bracket(params)
    peak = skr_peak_mu(params, obs, use_measured_qber)
    a, b = (lo, peak) if branch == "low" else (peak, hi)

    def resid(mu):
        return _raw_skr(params, obs, use_measured_qber, mu) - target_skr

    ra, rb = resid(a), resid(b)
    if ra == 0:
        return a
    if rb == 0:
        return b
    if np.sign(ra) == np.sign(rb):
        best = a if abs(ra) <= abs(rb) else b
        warnings.warn(
            f"SKR - target has no sign change on [{a:.4g}, {b:.4g}]; "
            f"returning endpoint mu={best:.6g}",
            MuBracketWarning,
            stacklevel=2,
        )
        return best

    la, lb = math.log(a), math.log(b)
    scale = max(abs(target_skr), 1e-300)
    for _ in range(max_iter):
        lm = 0.5 * (la + lb)
        if lm in (la, lb):
            break
        rm = resid(math.exp(lm))
        if rm == 0:
            return math.exp(lm)
        if np.sign(rm) == np.sign(ra):
            la, ra = lm, rm
        else:
            lb, rb = lm, rm
        if lb - la <= 1e-15:
            break
    mu = math.exp(0.5 * (la + lb))
    if abs(resid(mu)) > tol * scale and lb - la > 1e-15:
        raise NoConvergenceError(
            f"solve_mu did not converge after {max_iter} iterations"
        )
    return mu
