"""Multi-input feedforward network predicting the scaled SKR.

Every input branch (QBER, visibility, link loss, SKR history, ...) runs
through its own small ReLU stack; the branch outputs are concatenated and
fed through a ReLU trunk ending in one linear unit. Training uses Adam on
the mean squared error, a learning rate that decays by 1 % per epoch after
a warm phase, and early stopping on the validation loss with the best
weights restored.

All parameters live in one flat float64 vector; the per-layer weight and
bias arrays are views into it, which keeps the Adam update vectorized and
makes the model file a single contiguous block.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence, Union

import numpy as np

from .data_pipeline import FeatureFrame, TimeSeries, fit_minmax_state, lag_columns

FORMAT_MAGIC = b"COWMLP\x00\x01"
FORMAT_VERSION = 1


class ModelFileError(ValueError):
    """The model file is truncated, corrupted or of an unknown version."""


class ScalerMismatchError(KeyError):
    pass


class InsufficientDataError(ValueError):
    pass


# ---------------------------------------------------------------------------
# topology


@dataclass(frozen=True)
class Branch:
    name: str
    columns: tuple[str, ...]

    @property
    def width(self) -> int:
        return len(self.columns)


def history_branch(lags: Sequence[int] = (1, 2, 3), column: str = "skr") -> Branch:
    return Branch("history", tuple(lag_columns(column, lags)))


SCALAR_INPUTS = ("qber", "visibility", "link_loss", "laserpower")


@dataclass(frozen=True)
class MlpTopology:
    branches: tuple[Branch, ...] = (
        Branch("qber", ("qber",)),
        Branch("visibility", ("visibility",)),
        Branch("link_loss", ("link_loss",)),
        history_branch(),
    )
    branch_hidden: tuple[int, ...] = (64, 16)
    trunk: tuple[int, ...] = (64, 128, 32, 8)
    target: str = "skr"

    def __post_init__(self) -> None:
        if not self.branches:
            raise ValueError("need at least one input branch")
        if any(b.width <= 0 for b in self.branches):
            raise ValueError("branch widths must be positive")
        if not self.branch_hidden:
            raise ValueError("branches need at least one hidden layer")
        if any(w <= 0 for w in (*self.branch_hidden, *self.trunk)):
            raise ValueError("layer widths must be positive")
        names = [b.name for b in self.branches]
        if len(set(names)) != len(names):
            raise ValueError("branch names must be unique")
        object.__setattr__(self, "branches", tuple(self.branches))

    @classmethod
    def from_inputs(cls, inputs: Sequence[str], lags: Sequence[int] = (1, 2, 3), **kwargs) -> "MlpTopology":
        """Topology with one scalar branch per named input; 'history' adds the lag vector."""
        branches = []
        for name in inputs:
            if name == "history":
                branches.append(history_branch(lags))
            elif name in SCALAR_INPUTS:
                branches.append(Branch(name, (name,)))
            else:
                raise ValueError(f"unknown input {name!r}")
        return cls(tuple(branches), **kwargs)

    @property
    def input_columns(self) -> list[str]:
        return [c for b in self.branches for c in b.columns]

    def layer_shapes(self) -> list[tuple[str, int, int]]:
        shapes = []
        for b in self.branches:
            fan_in = b.width
            for i, w in enumerate(self.branch_hidden):
                shapes.append((f"{b.name}.{i}", fan_in, w))
                fan_in = w
        fan_in = len(self.branches) * self.branch_hidden[-1]
        for i, w in enumerate(self.trunk):
            shapes.append((f"trunk.{i}", fan_in, w))
            fan_in = w
        shapes.append(("out", fan_in, 1))
        return shapes

    def to_json(self) -> dict:
        return {
            "branches": [{"name": b.name, "columns": list(b.columns)} for b in self.branches],
            "branch_hidden": list(self.branch_hidden),
            "trunk": list(self.trunk),
            "target": self.target,
        }

    @classmethod
    def from_json(cls, d: Mapping) -> "MlpTopology":
        return cls(
            tuple(Branch(b["name"], tuple(b["columns"])) for b in d["branches"]),
            tuple(d["branch_hidden"]),
            tuple(d["trunk"]),
            d["target"],
        )


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 8
    initial_lr: float = 0.001
    lr_decay: float = 0.99
    decay_after_epoch: int = 15
    early_stop_patience: int = 15
    train_fraction: float = 0.8
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.batch_size < 1 or self.early_stop_patience < 1:
            raise ValueError("epochs, batch_size and patience must be positive")
        if not 0 < self.train_fraction < 1:
            raise ValueError("train_fraction must lie in (0, 1)")
        if not self.initial_lr > 0 or not 0 < self.lr_decay <= 1:
            raise ValueError("invalid learning-rate settings")


def learning_rate(epoch: int, cfg: TrainConfig) -> float:
    """Learning rate for 1-based ``epoch``."""
    if epoch <= cfg.decay_after_epoch:
        return cfg.initial_lr
    return cfg.initial_lr * cfg.lr_decay ** (epoch - cfg.decay_after_epoch)


# ---------------------------------------------------------------------------
# model state


@dataclass
class MlpModel:
    topology: MlpTopology
    theta: np.ndarray
    scaler_state: dict[str, tuple[float, float]] = field(default_factory=dict)
    adam_m: np.ndarray | None = None
    adam_v: np.ndarray | None = None
    adam_step: int = 0
    history: list[dict] = field(default_factory=list)

    def __post_init__(self) -> None:
        self._shapes = self.topology.layer_shapes()
        size = sum(i * o + o for _, i, o in self._shapes)
        self.theta = np.ascontiguousarray(self.theta, dtype=np.float64)
        if self.theta.shape != (size,):
            raise ValueError(f"parameter vector has shape {self.theta.shape}, topology needs ({size},)")
        if self.adam_m is None:
            self.adam_m = np.zeros_like(self.theta)
        if self.adam_v is None:
            self.adam_v = np.zeros_like(self.theta)

    @property
    def n_params(self) -> int:
        return self.theta.size

    def layers(self, vec: np.ndarray | None = None) -> dict[str, tuple[np.ndarray, np.ndarray]]:
        """Views (W, b) into ``vec`` (default: the weights) for every layer."""
        vec = self.theta if vec is None else vec
        out, k = {}, 0
        for name, fan_in, fan_out in self._shapes:
            W = vec[k : k + fan_in * fan_out].reshape(fan_in, fan_out)
            k += fan_in * fan_out
            b = vec[k : k + fan_out]
            k += fan_out
            out[name] = (W, b)
        return out

    def copy(self) -> "MlpModel":
        return MlpModel(
            self.topology,
            self.theta.copy(),
            dict(self.scaler_state),
            self.adam_m.copy(),
            self.adam_v.copy(),
            self.adam_step,
            [dict(h) for h in self.history],
        )


def glorot_limit(fan_in: int, fan_out: int) -> float:
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def init(topology: MlpTopology, seed: int = 0) -> MlpModel:
    """Glorot-uniform weights and zero biases, reproducible from ``seed``."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0]))
    shapes = topology.layer_shapes()
    parts = []
    for _, fan_in, fan_out in shapes:
        lim = glorot_limit(fan_in, fan_out)
        parts.append(rng.uniform(-lim, lim, size=fan_in * fan_out))
        parts.append(np.zeros(fan_out))
    return MlpModel(topology, np.concatenate(parts))


# ---------------------------------------------------------------------------
# forward and backward passes


def _relu(x):
    return np.maximum(x, 0.0)


def _forward(model: MlpModel, inputs: Mapping[str, np.ndarray], keep: bool = False):
    topo = model.topology
    L = model.layers()
    cache = []
    outs = []
    for br in topo.branches:
        h = inputs[br.name]
        for i in range(len(topo.branch_hidden)):
            W, b = L[f"{br.name}.{i}"]
            z = h @ W + b
            if keep:
                cache.append((f"{br.name}.{i}", h, z))
            h = _relu(z)
        outs.append(h)
    h = np.concatenate(outs, axis=1)
    for i in range(len(topo.trunk)):
        W, b = L[f"trunk.{i}"]
        z = h @ W + b
        if keep:
            cache.append((f"trunk.{i}", h, z))
        h = _relu(z)
    W, b = L["out"]
    if keep:
        cache.append(("out", h, None))
    return (h @ W + b)[:, 0], cache


def _as_batch(model: MlpModel, inputs: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    out = {}
    for br in model.topology.branches:
        if br.name not in inputs:
            raise ValueError(f"missing input for branch {br.name!r}")
        x = np.asarray(inputs[br.name], dtype=float)
        if x.ndim <= 1:
            x = x.reshape(-1, br.width) if br.width > 1 or x.ndim == 1 else x.reshape(1, 1)
        if x.ndim != 2 or x.shape[1] != br.width:
            raise ValueError(f"branch {br.name!r} expects width {br.width}, got shape {x.shape}")
        out[br.name] = x
    n = {v.shape[0] for v in out.values()}
    if len(n) != 1:
        raise ValueError("branch inputs have different batch sizes")
    return out


def forward(model: MlpModel, inputs: Mapping[str, np.ndarray]) -> np.ndarray:
    """Predictions (scaled units) for a batch; one row per sample.

    A single sample may be given as scalars plus a 1-d history vector.
    """
    pred, _ = _forward(model, _as_batch(model, inputs))
    return pred


def mse_loss(pred: np.ndarray, target: np.ndarray) -> float:
    d = np.asarray(pred, dtype=float) - np.asarray(target, dtype=float)
    return float(np.mean(d * d))


def loss_and_gradient(
    model: MlpModel, inputs: Mapping[str, np.ndarray], target: np.ndarray
) -> tuple[float, np.ndarray]:
    """Mean squared error of a batch and its exact gradient w.r.t. ``theta``."""
    batch = _as_batch(model, inputs)
    target = np.asarray(target, dtype=float)
    if target.size == 0:
        raise ValueError("empty batch")
    pred, cache = _forward(model, batch, keep=True)
    diff = pred - target
    loss = float(np.mean(diff * diff))
    grad = np.zeros_like(model.theta)
    G = model.layers(grad)
    L = model.layers()
    topo = model.topology

    delta = (2.0 / len(diff)) * diff[:, None]
    name, h, _ = cache[-1]
    G["out"][0][...] = h.T @ delta
    G["out"][1][...] = delta.sum(axis=0)
    back = delta @ L["out"][0].T

    idx = len(cache) - 2
    for i in reversed(range(len(topo.trunk))):
        name, h, z = cache[idx]
        idx -= 1
        dz = back * (z > 0)
        G[name][0][...] = h.T @ dz
        G[name][1][...] = dz.sum(axis=0)
        back = dz @ L[name][0].T

    width = topo.branch_hidden[-1]
    for j in reversed(range(len(topo.branches))):
        piece = back[:, j * width : (j + 1) * width]
        for i in reversed(range(len(topo.branch_hidden))):
            name, h, z = cache[idx]
            idx -= 1
            dz = piece * (z > 0)
            G[name][0][...] = h.T @ dz
            G[name][1][...] = dz.sum(axis=0)
            piece = dz @ L[name][0].T
    return loss, grad


def adam_step(model: MlpModel, grad: np.ndarray, lr: float, cfg: TrainConfig) -> None:
    model.adam_step += 1
    t = model.adam_step
    m, v = model.adam_m, model.adam_v
    m *= cfg.beta1
    m += (1 - cfg.beta1) * grad
    v *= cfg.beta2
    v += (1 - cfg.beta2) * grad * grad
    m_hat = m / (1 - cfg.beta1**t)
    v_hat = v / (1 - cfg.beta2**t)
    model.theta -= lr * m_hat / (np.sqrt(v_hat) + cfg.epsilon)


# ---------------------------------------------------------------------------
# data handling


def required_columns(topology: MlpTopology) -> list[str]:
    return [*topology.input_columns, topology.target]


def fit_scaler(frames: Sequence[FeatureFrame], topology: MlpTopology) -> dict[str, tuple[float, float]]:
    cols = required_columns(topology)
    merged = concat_frames(frames, cols)
    return fit_minmax_state(merged, cols, allow_constant=True)


def concat_frames(frames: Sequence[FeatureFrame], columns: Sequence[str]) -> FeatureFrame:
    for f in frames:
        missing = [c for c in columns if c not in f]
        if missing:
            raise ScalerMismatchError(f"frame lacks columns {missing}")
    # timestamps of different links may coincide; keep them only for bookkeeping
    ts = np.concatenate([f.timestamps for f in frames])
    return FeatureFrame(ts, {c: np.concatenate([f[c] for f in frames]) for c in columns})


def scaled_arrays(
    frame: FeatureFrame, topology: MlpTopology, scaler: Mapping[str, tuple[float, float]]
) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Branch inputs and target of ``frame`` in scaled units."""
    missing = [c for c in required_columns(topology) if c not in scaler]
    if missing:
        raise ScalerMismatchError(f"no scaler for {missing}")

    def scale(c):
        if c not in frame:
            raise ScalerMismatchError(f"frame lacks column {c!r}")
        lo, hi = scaler[c]
        return (frame[c] - lo) / (hi - lo)

    inputs = {b.name: np.column_stack([scale(c) for c in b.columns]) for b in topology.branches}
    return inputs, scale(topology.target)


def split_frame(frame: FeatureFrame, train_fraction: float = 0.8) -> tuple[FeatureFrame, FeatureFrame]:
    """Chronological split: the first ``train_fraction`` of rows train."""
    n_train = int(round(len(frame) * train_fraction))
    return frame.rows(slice(0, n_train)), frame.rows(slice(n_train, None))


# ---------------------------------------------------------------------------
# training


def _take(inputs, idx):
    return {k: v[idx] for k, v in inputs.items()}


def train(
    model: MlpModel,
    frames: Union[FeatureFrame, Sequence[FeatureFrame]],
    cfg: TrainConfig = TrainConfig(),
    validation: Union[FeatureFrame, Sequence[FeatureFrame], None] = None,
) -> MlpModel:
    """Train on ``frames`` and return a new model holding the best weights.

    Each frame is split chronologically into train/validation parts unless
    ``validation`` is given explicitly. The scaler is fitted on the
    training rows only. Validation loss drives early stopping; the returned
    weights are those of the epoch with the lowest validation loss.
    """
    frames = [frames] if isinstance(frames, FeatureFrame) else list(frames)
    topo = model.topology
    if validation is None:
        parts = [split_frame(f, cfg.train_fraction) for f in frames]
        train_frames = [p[0] for p in parts]
        val_frames = [p[1] for p in parts if len(p[1])]
    else:
        train_frames = frames
        val_frames = [validation] if isinstance(validation, FeatureFrame) else list(validation)
    n_rows = sum(len(f) for f in train_frames) + sum(len(f) for f in val_frames)
    if n_rows < 2 * cfg.batch_size or not val_frames:
        raise InsufficientDataError(f"{n_rows} rows; need at least {2 * cfg.batch_size} and a validation split")

    model = model.copy()
    model.scaler_state = fit_scaler(train_frames, topo)
    cols = required_columns(topo)
    X, y = scaled_arrays(concat_frames(train_frames, cols), topo, model.scaler_state)
    Xv, yv = scaled_arrays(concat_frames(val_frames, cols), topo, model.scaler_state)
    n = len(y)

    rng = np.random.default_rng(np.random.SeedSequence([int(cfg.seed), 1]))
    best_val, best_theta, best_epoch, waited = np.inf, model.theta.copy(), 0, 0
    for epoch in range(1, cfg.epochs + 1):
        lr = learning_rate(epoch, cfg)
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            _, g = loss_and_gradient(model, _take(X, idx), y[idx])
            adam_step(model, g, lr, cfg)
        train_loss = mse_loss(forward(model, X), y)
        val_loss = mse_loss(forward(model, Xv), yv)
        model.history.append({"epoch": epoch, "lr": lr, "train_loss": train_loss, "val_loss": val_loss})
        if val_loss < best_val:
            best_val, best_theta, best_epoch, waited = val_loss, model.theta.copy(), epoch, 0
        else:
            waited += 1
            if waited >= cfg.early_stop_patience:
                break
    model.theta[...] = best_theta
    model.history.append({"epoch": best_epoch, "restored": True, "val_loss": best_val})
    return model


def training_history(model: MlpModel) -> list[dict]:
    return [h for h in model.history if not h.get("restored")]


# ---------------------------------------------------------------------------
# prediction


def predict_scaled(model: MlpModel, frame: FeatureFrame) -> np.ndarray:
    X, _ = _inputs_only(model, frame)
    return forward(model, X)


def _inputs_only(model, frame):
    topo = model.topology
    scaler = model.scaler_state
    inputs = {}
    for b in topo.branches:
        cols = []
        for c in b.columns:
            if c not in scaler:
                raise ScalerMismatchError(f"model has no scaler for {c!r}")
            if c not in frame:
                raise ScalerMismatchError(f"frame lacks column {c!r}")
            lo, hi = scaler[c]
            cols.append((frame[c] - lo) / (hi - lo))
        inputs[b.name] = np.column_stack(cols)
    return inputs, None


def inverse_target(model: MlpModel, scaled: np.ndarray) -> np.ndarray:
    lo, hi = model.scaler_state[model.topology.target]
    return np.asarray(scaled) * (hi - lo) + lo


def scale_target(model: MlpModel, raw: np.ndarray) -> np.ndarray:
    lo, hi = model.scaler_state[model.topology.target]
    return (np.asarray(raw, dtype=float) - lo) / (hi - lo)


def predict_frame(model: MlpModel, frame: FeatureFrame) -> TimeSeries:
    """Predicted SKR in bits/s, one sample per frame row."""
    return TimeSeries(model.topology.target, frame.timestamps, inverse_target(model, predict_scaled(model, frame)))


# ---------------------------------------------------------------------------
# model files
#
# layout (all integers little-endian):
#   8 bytes   magic b"COWMLP\0\1"
#   8 bytes   uint64 header length H
#   H bytes   UTF-8 JSON header: version, topology, scaler, history,
#             adam_step, payload length and SHA-256 of the payload
#   payload   theta, adam_m, adam_v as consecutive '<f8' arrays


def save(model: MlpModel, path: Union[str, Path]) -> None:
    payload = b"".join(a.astype("<f8").tobytes() for a in (model.theta, model.adam_m, model.adam_v))
    header = {
        "format_version": FORMAT_VERSION,
        "topology": model.topology.to_json(),
        "scaler_state": {k: list(v) for k, v in model.scaler_state.items()},
        "history": model.history,
        "adam_step": model.adam_step,
        "n_params": model.n_params,
        "payload_bytes": len(payload),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(FORMAT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(payload)


def load(path: Union[str, Path]) -> MlpModel:
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:8] != FORMAT_MAGIC:
        raise ModelFileError(f"{path}: not a model file")
    (hlen,) = struct.unpack("<Q", data[8:16])
    if len(data) < 16 + hlen:
        raise ModelFileError(f"{path}: truncated header")
    try:
        header = json.loads(data[16 : 16 + hlen])
    except ValueError:
        raise ModelFileError(f"{path}: corrupt header") from None
    if header.get("format_version") != FORMAT_VERSION:
        raise ModelFileError(f"{path}: unsupported version {header.get('format_version')!r}")
    payload = data[16 + hlen :]
    if len(payload) != header["payload_bytes"]:
        raise ModelFileError(f"{path}: payload has {len(payload)} bytes, expected {header['payload_bytes']}")
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise ModelFileError(f"{path}: payload checksum mismatch")
    n = header["n_params"]
    arrays = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(3, n)
    return MlpModel(
        MlpTopology.from_json(header["topology"]),
        arrays[0].copy(),
        {k: (float(v[0]), float(v[1])) for k, v in header["scaler_state"].items()},
        arrays[1].copy(),
        arrays[2].copy(),
        int(header["adam_step"]),
        header["history"],
    )
