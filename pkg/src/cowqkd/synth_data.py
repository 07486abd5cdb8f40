"""Synthetic per-link monitoring data built on the closed-form COW model.

Each link emits four series (visibility, QBER, laser power, SKR) in the same
CSV format the monitoring system exports. Visibility is a mean-reverting
AR(1) process; the SKR follows the model evaluated on the instantaneous
observables, perturbed by white relative noise and a slow multiplicative
drift that the observables do not explain.

Randomness comes from a ``SeedSequence`` keyed by ``(seed, link_id)``, so
links can be generated in any order or in parallel with identical output.
"""
from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from .cow_model import ChannelObservables, CowParameters, model_qber, secret_key_rate
from .data_pipeline import TimeSeries, parse_duration, write_series_csv

#: air-line distances of the five links of the reference network, km
LINK_DISTANCES_KM = {1: 46.0, 2: 57.0, 3: 42.0, 4: 43.0, 5: 50.0}

DEFAULT_START = datetime(2023, 11, 29, tzinfo=timezone.utc)


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSpec:
    visibility_mean: float = 0.98
    visibility_ar1: float = 0.99
    visibility_sigma: float = 0.005
    qber_jitter_sigma: float = 0.001
    skr_relative_noise: float = 0.05
    skr_drift_ar1: float = 0.998
    skr_drift_sigma: float = 0.004
    laserpower_relative_jitter: float = 0.002
    dropout_probability: float = 0.0002
    dropout_length: int = 120
    seed: int = 20231129

    def __post_init__(self) -> None:
        checks = {
            "visibility_mean": 0 < self.visibility_mean < 1,
            "visibility_ar1": 0 <= self.visibility_ar1 < 1,
            "visibility_sigma": self.visibility_sigma >= 0,
            "qber_jitter_sigma": self.qber_jitter_sigma >= 0,
            "skr_relative_noise": self.skr_relative_noise >= 0,
            "skr_drift_ar1": 0 <= self.skr_drift_ar1 < 1,
            "skr_drift_sigma": self.skr_drift_sigma >= 0,
            "laserpower_relative_jitter": self.laserpower_relative_jitter >= 0,
            "dropout_probability": 0 <= self.dropout_probability < 1,
            "dropout_length": self.dropout_length >= 1,
            "seed": 0 <= int(self.seed) < 2**64,
        }
        bad = [k for k, ok in checks.items() if not ok]
        if bad:
            raise ScenarioError(f"invalid noise settings: {', '.join(bad)}")

    @classmethod
    def noiseless(cls, **kwargs) -> "NoiseSpec":
        """No fluctuation at all: visibility pinned to its mean, no dropouts."""
        quiet = dict(
            visibility_ar1=0.0,
            visibility_sigma=0.0,
            qber_jitter_sigma=0.0,
            skr_relative_noise=0.0,
            skr_drift_sigma=0.0,
            laserpower_relative_jitter=0.0,
            dropout_probability=0.0,
        )
        quiet.update(kwargs)
        return cls(**quiet)


@dataclass(frozen=True)
class LinkConfig:
    link_id: int
    distance_km: float
    params: CowParameters
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    link_loss: float | None = None

    def __post_init__(self) -> None:
        if not self.distance_km > 0:
            raise ScenarioError(f"link {self.link_id}: distance must be positive")

    @property
    def loss(self) -> float:
        """Link-loss feature; the distance in km unless set explicitly."""
        return self.distance_km if self.link_loss is None else self.link_loss


def link_loss_db(params: CowParameters, insertion_loss_db: float = 0.0) -> float:
    return params.alpha * params.L + insertion_loss_db


def default_link(link_id: int, distance_km: float | None = None, noise: NoiseSpec | None = None, **param_overrides) -> LinkConfig:
    """Link at the reference parameters with mu set to the channel transmittance."""
    distance = LINK_DISTANCES_KM[link_id] if distance_km is None else distance_km
    params = CowParameters.at_upper_bound(L=distance, **param_overrides)
    return LinkConfig(link_id, distance, params, noise or NoiseSpec())


def default_scenario() -> list[LinkConfig]:
    # link 4 performs above the nominal estimate, emulated by a better detector
    return [default_link(i, eta=0.085) if i == 4 else default_link(i) for i in sorted(LINK_DISTANCES_KM)]


def _ar1(rng: np.random.Generator, n: int, mean: float, phi: float, sigma: float, x0: float) -> np.ndarray:
    eps = rng.standard_normal(n) * sigma
    x = np.empty(n)
    prev = x0
    for i in range(n):
        prev = mean + phi * (prev - mean) + eps[i]
        x[i] = prev
    return x


def generate_link(
    config: LinkConfig,
    start: Union[datetime, np.datetime64] = DEFAULT_START,
    duration: Union[str, float, timedelta] = "1d",
    sample_period: Union[str, float, timedelta] = "60s",
) -> dict[str, TimeSeries]:
    """Four monitoring series for one link, deterministic given the seed."""
    duration, period = parse_duration(duration), parse_duration(sample_period)
    if period <= timedelta(0) or duration < period:
        raise ScenarioError("duration must be at least one sample period")
    n = int(duration // period)
    noise, params = config.noise, config.params

    seeds = np.random.SeedSequence([int(noise.seed), int(config.link_id)]).spawn(6)
    rng_vis, rng_qber, rng_white, rng_drift, rng_laser, rng_drop = (np.random.default_rng(s) for s in seeds)

    vis = _ar1(rng_vis, n, noise.visibility_mean, noise.visibility_ar1, noise.visibility_sigma, noise.visibility_mean)
    vis = np.clip(vis, 1e-6, 1.0)

    qber = model_qber(params, vis) + noise.qber_jitter_sigma * rng_qber.standard_normal(n)
    qber = np.clip(qber, 0.0, 0.5)

    skr = np.asarray(secret_key_rate(params, ChannelObservables(qber, vis), use_measured_qber=True).skr, dtype=float)
    white = noise.skr_relative_noise * rng_white.standard_normal(n)
    drift = _ar1(rng_drift, n, 0.0, noise.skr_drift_ar1, noise.skr_drift_sigma, 0.0)
    if noise.skr_relative_noise or noise.skr_drift_sigma:
        skr = np.maximum(skr * (1 + white + drift), 0.0)

    laser = params.mu * (1 + noise.laserpower_relative_jitter * rng_laser.standard_normal(n))

    keep = np.ones(n, dtype=bool)
    if noise.dropout_probability > 0:
        for s in np.flatnonzero(rng_drop.random(n) < noise.dropout_probability):
            keep[s : s + noise.dropout_length] = False

    t0 = np.datetime64(start.astimezone(timezone.utc).replace(tzinfo=None) if isinstance(start, datetime) else start, "us")
    step = np.timedelta64(period // timedelta(microseconds=1), "us")
    ts = (t0 + np.arange(n) * step)[keep]
    return {
        "visibility": TimeSeries("visibility", ts, vis[keep]),
        "qber": TimeSeries("qber", ts, qber[keep]),
        "laserpower": TimeSeries("laserpower", ts, laser[keep]),
        "skr": TimeSeries("skr", ts, skr[keep]),
    }


# ---------------------------------------------------------------------------
# scenarios and their config files


@dataclass(frozen=True)
class Scenario:
    links: Sequence[LinkConfig]
    start: datetime = DEFAULT_START
    duration: timedelta = timedelta(days=14)
    sample_period: timedelta = timedelta(seconds=60)

    def with_seed(self, seed: int) -> "Scenario":
        links = [dataclasses.replace(c, noise=dataclasses.replace(c.noise, seed=seed)) for c in self.links]
        return dataclasses.replace(self, links=links)


def write_link_meta(config: LinkConfig, path: Path) -> None:
    cp = configparser.ConfigParser()
    cp["link"] = {
        "link_id": str(config.link_id),
        "distance_km": repr(config.distance_km),
        "link_loss": repr(config.loss),
    }
    cp["params"] = {k: repr(v) for k, v in config.params.as_dict().items()}
    with open(path, "w") as fh:
        cp.write(fh)


_ALL_PARAMS = {f.name.lower(): f.name for f in dataclasses.fields(CowParameters)}


def read_link_meta(path: Union[str, Path]) -> dict:
    cp = configparser.ConfigParser()
    if not cp.read(path):
        raise FileNotFoundError(path)
    out = {"link_id": cp.getint("link", "link_id"), "distance_km": cp.getfloat("link", "distance_km"),
           "link_loss": cp.getfloat("link", "link_loss")}
    if cp.has_section("params"):
        kw = {}
        for k, v in cp["params"].items():
            if k == "detector_in_p_mu":
                kw[k] = v == "True"
            elif k in _ALL_PARAMS:
                kw[_ALL_PARAMS[k]] = float(v)
            else:
                raise ScenarioError(f"{path}: unknown parameter {k!r}")
        out["params"] = CowParameters(**kw)
    return out


def generate_scenario(
    configs: Sequence[LinkConfig],
    out_dir: Union[str, Path],
    start: datetime = DEFAULT_START,
    duration: Union[str, timedelta] = timedelta(days=14),
    sample_period: Union[str, timedelta] = timedelta(seconds=60),
) -> dict[int, dict[str, int]]:
    """Write ``link<id>/{skr,qber,visibility,laserpower}.csv`` plus ``link.ini``.

    Returns per-link sample counts.
    """
    if not configs:
        raise ScenarioError("scenario has no links")
    ids = [c.link_id for c in configs]
    if len(set(ids)) != len(ids):
        raise ScenarioError("link ids must be unique")
    out_dir = Path(out_dir)
    counts = {}
    for cfg in configs:
        d = out_dir / f"link{cfg.link_id}"
        d.mkdir(parents=True, exist_ok=True)
        data = generate_link(cfg, start, duration, sample_period)
        for name, s in data.items():
            write_series_csv(s, d / f"{name}.csv")
        write_link_meta(cfg, d / "link.ini")
        counts[cfg.link_id] = {k: len(v) for k, v in data.items()}
    return counts


_NOISE_DOC = {
    "visibility_mean": "long-run mean of the visibility AR(1) process, in (0, 1)",
    "visibility_ar1": "per-sample autoregression coefficient of visibility, in [0, 1)",
    "visibility_sigma": "innovation standard deviation of visibility, >= 0",
    "qber_jitter_sigma": "std of Gaussian noise added to the modeled QBER, >= 0",
    "skr_relative_noise": "std of white multiplicative SKR noise, >= 0",
    "skr_drift_ar1": "autoregression coefficient of the slow SKR gain drift, in [0, 1)",
    "skr_drift_sigma": "innovation std of the slow SKR gain drift, >= 0",
    "laserpower_relative_jitter": "std of relative laser-power jitter around mu, >= 0",
    "dropout_probability": "per-sample probability that an outage starts, in [0, 1)",
    "dropout_length": "outage length in samples, >= 1",
    "seed": "64-bit RNG seed; streams are keyed by (seed, link_id)",
}


def default_scenario_text() -> str:
    """Commented INI text describing the default five-link scenario."""
    noise = NoiseSpec()
    buf = io.StringIO()
    buf.write("# Synthetic monitoring scenario.\n")
    buf.write("# [scenario] sets the time grid; [noise] applies to every link;\n")
    buf.write("# each [linkN] section may override distance_km, link_loss,\n")
    buf.write("# any CowParameters field (alpha, eta, eta_ec, p_dc, L_s, t_B,\n")
    buf.write("# t_B_db, tau_dead, nu, mu, p_ap) or any [noise] key.\n")
    buf.write("# mu defaults to the channel transmittance of the link.\n\n")
    buf.write("[scenario]\n")
    buf.write("start = 2023-11-29 00:00:00+00:00\nduration = 14d\nsample_period = 60s\n\n")
    buf.write("[noise]\n")
    for f in dataclasses.fields(NoiseSpec):
        buf.write(f"# {_NOISE_DOC[f.name]}\n{f.name} = {getattr(noise, f.name)}\n")
    for c in default_scenario():
        buf.write(f"\n[link{c.link_id}]\ndistance_km = {c.distance_km:g}\n")
        if c.params.eta != CowParameters().eta:
            buf.write(f"eta = {c.params.eta}\n")
    return buf.getvalue()


_PARAM_FIELDS = {
    f.name.lower(): f.name for f in dataclasses.fields(CowParameters) if f.name not in ("L", "detector_in_p_mu")
}
_NOISE_FIELDS = {f.name for f in dataclasses.fields(NoiseSpec)}


def _noise_from(section, base: dict) -> dict:
    out = dict(base)
    for k, v in section.items():
        if k in _NOISE_FIELDS:
            out[k] = int(v) if k in ("seed", "dropout_length") else float(v)
    return out


def load_scenario(source: Union[str, Path]) -> Scenario:
    """Parse a scenario INI file (see :func:`default_scenario_text`)."""
    cp = configparser.ConfigParser()
    try:
        with open(source) as fh:
            cp.read_file(fh)
    except configparser.Error as exc:
        raise ScenarioError(f"{source}: {exc}") from None
    return _scenario_from_parser(cp, str(source))


def parse_scenario_text(text: str) -> Scenario:
    cp = configparser.ConfigParser()
    cp.read_string(text)
    return _scenario_from_parser(cp, "<string>")


def _scenario_from_parser(cp: configparser.ConfigParser, where: str) -> Scenario:
    sc = cp["scenario"] if cp.has_section("scenario") else {}
    try:
        start = datetime.fromisoformat(sc.get("start", "2023-11-29 00:00:00+00:00"))
        duration = parse_duration(sc.get("duration", "14d"))
        period = parse_duration(sc.get("sample_period", "60s"))
        noise_base = _noise_from(cp["noise"] if cp.has_section("noise") else {}, {})
        links = []
        for name in cp.sections():
            if not name.startswith("link"):
                continue
            sec = cp[name]
            link_id = int(name[4:])
            distance = float(sec.get("distance_km", LINK_DISTANCES_KM.get(link_id, 0.0)))
            # configparser lower-cases keys
            kw = {_PARAM_FIELDS[k]: float(v) for k, v in sec.items() if k in _PARAM_FIELDS}
            if "t_b_db" in sec:
                kw["t_B"] = 10 ** (-float(sec["t_b_db"]) / 10)
            mu = kw.pop("mu", None)
            params = CowParameters.at_upper_bound(L=distance, **kw)
            if mu is not None:
                params = params.replace(mu=mu)
            noise = NoiseSpec(**_noise_from(sec, noise_base))
            loss = float(sec["link_loss"]) if "link_loss" in sec else None
            links.append(LinkConfig(link_id, distance, params, noise, loss))
    except (ValueError, KeyError, TypeError) as exc:
        raise ScenarioError(f"{where}: {exc}") from None
    if not links:
        raise ScenarioError(f"{where}: no [linkN] sections")
    return Scenario(links, start, duration, period)
