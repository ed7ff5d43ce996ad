"""Differentiable maps with exact Jacobians.

An oracle exposes ``input_dim``, ``output_dim``, ``eval(x)`` and
``jacobian(x)``.  Both methods accept a single point ``(n,)`` or a batch
``(N, n)`` and return ``(m,)`` / ``(m, n)`` or ``(N, m)`` / ``(N, m, n)``.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np

log = logging.getLogger(__name__)

MINKOWSKI = np.diag([1.0, -1.0, -1.0, -1.0])
MODEL_FORMAT_VERSION = 1


class DiffOracle(Protocol):
    input_dim: int
    output_dim: int

    def eval(self, x) -> np.ndarray: ...

    def jacobian(self, x) -> np.ndarray: ...


class TrainingDivergedError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


def _batched(x, n: int):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = x[None] if single else x
    if xb.ndim != 2 or xb.shape[1] != n:
        raise ValueError(f"expected input of dimension {n}, got shape {x.shape}")
    return xb, single


# ---------------------------------------------------------------- MLP

_ACTIVATIONS = ("tanh", "relu")


@dataclass
class MlpModel:
    layer_dims: list[int]
    activation: str
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    seed: int | None = None

    def __post_init__(self):
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if len(self.layer_dims) < 2 or len(self.weights) != len(self.layer_dims) - 1:
            raise ValueError("layer_dims and weights do not agree")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            shape = (self.layer_dims[i + 1], self.layer_dims[i])
            if w.shape != shape or b.shape != (shape[0],):
                raise ValueError(f"layer {i}: weight {w.shape}/bias {b.shape}, expected {shape}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {i} has non-finite parameters")

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def output_dim(self) -> int:
        return self.layer_dims[-1]

    @classmethod
    def init(cls, layer_dims, activation: str = "tanh", seed: int = 0) -> "MlpModel":
        """Uniform ``±1/sqrt(fan_in)`` initialization."""
        rng = np.random.default_rng(seed)
        ws, bs = [], []
        for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            ws.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
            bs.append(rng.uniform(-bound, bound, size=fan_out))
        return cls(list(layer_dims), activation, ws, bs, seed)

    def _act(self, z):
        return np.tanh(z) if self.activation == "tanh" else np.maximum(z, 0.0)

    def _dact(self, z, h):
        # relu: subgradient 0 at exactly-zero pre-activation
        return 1.0 - h * h if self.activation == "tanh" else (z > 0).astype(np.float64)

    def _forward(self, xb):
        pre, post = [], [xb]
        h = xb
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w.T + b
            h = z if i == last else self._act(z)
            pre.append(z)
            post.append(h)
        return pre, post

    def eval(self, x) -> np.ndarray:
        xb, single = _batched(x, self.input_dim)
        out = self._forward(xb)[1][-1]
        return out[0] if single else out

    def jacobian(self, x) -> np.ndarray:
        """Exact Jacobian by reverse accumulation, one seed per output."""
        xb, single = _batched(x, self.input_dim)
        pre, post = self._forward(xb)
        g = np.broadcast_to(self.weights[-1], (len(xb),) + self.weights[-1].shape)
        for i in range(len(self.weights) - 2, -1, -1):
            g = g * self._dact(pre[i], post[i + 1])[:, None, :]
            g = g @ self.weights[i]
        return g[0] if single else np.ascontiguousarray(g)

    def parameters(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out


def mlp_forward(model: MlpModel, x) -> np.ndarray:
    return model.eval(x)


def mlp_jacobian(model: MlpModel, x) -> np.ndarray:
    return model.jacobian(x)


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 64
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    seed: int = 0
    lr_schedule: str = "constant"
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or not self.learning_rate > 0:
            raise ValueError("epochs >= 0, batch_size >= 1 and learning_rate > 0 required")
        if self.optimizer != "adam":
            raise ValueError(f"unsupported optimizer {self.optimizer!r}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")
        self.betas = tuple(self.betas)

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "optimizer": self.optimizer,
            "seed": self.seed,
            "lr_schedule": self.lr_schedule,
            "betas": list(self.betas),
            "eps": self.eps,
        }


def _mse(model: MlpModel, x, y, chunk: int = 8192) -> float:
    total = 0.0
    for s in range(0, len(x), chunk):
        r = model.eval(x[s:s + chunk]) - y[s:s + chunk]
        total += float(np.sum(r * r))
    return total / y.size


def train_mlp(inputs, outputs, config: TrainConfig, layer_dims, activation: str = "tanh"):
    """Fit an MLP to ``(inputs, outputs)`` with minibatch Adam on MSE.

    Returns ``(model, final_loss)`` where the loss is the full-data MSE of
    the returned model.  Deterministic for a given ``config.seed``.
    """
    x = np.asarray(inputs, dtype=np.float64)
    y = np.asarray(outputs, dtype=np.float64)
    if len(x) == 0 or len(x) != len(y):
        raise ValueError("training data must be non-empty with matching row counts")
    if x.shape[1] != layer_dims[0] or y.shape[1] != layer_dims[-1]:
        raise ValueError(
            f"data dims ({x.shape[1]} -> {y.shape[1]}) do not match architecture {layer_dims}"
        )
    model = MlpModel.init(layer_dims, activation, seed=config.seed)
    rng = np.random.default_rng([config.seed, 1])
    params = model.parameters()
    m1 = [np.zeros_like(p) for p in params]
    m2 = [np.zeros_like(p) for p in params]
    b1, b2 = config.betas
    n_layers = len(model.weights)
    steps_per_epoch = -(-len(x) // config.batch_size)
    total_steps = config.epochs * steps_per_epoch
    step = 0

    for epoch in range(config.epochs):
        perm = rng.permutation(len(x))
        for s in range(0, len(x), config.batch_size):
            idx = perm[s:s + config.batch_size]
            xb, yb = x[idx], y[idx]
            pre, post = model._forward(xb)
            delta = 2.0 * (post[-1] - yb) / yb.size
            grads = [None] * (2 * n_layers)
            for i in range(n_layers - 1, -1, -1):
                grads[2 * i] = delta.T @ post[i]
                grads[2 * i + 1] = delta.sum(axis=0)
                if i > 0:
                    delta = (delta @ model.weights[i]) * model._dact(pre[i - 1], post[i])
            step += 1
            lr = config.learning_rate
            if config.lr_schedule == "cosine":
                lr *= 0.5 * (1.0 + np.cos(np.pi * (step - 1) / total_steps))
            c1 = 1.0 - b1 ** step
            c2 = 1.0 - b2 ** step
            for p, g, a, v in zip(params, grads, m1, m2):
                a *= b1
                a += (1.0 - b1) * g
                v *= b2
                v += (1.0 - b2) * g * g
                p -= lr * (a / c1) / (np.sqrt(v / c2) + config.eps)
        loss = _mse(model, x, y)
        if not np.isfinite(loss):
            raise TrainingDivergedError(f"loss became {loss} at epoch {epoch + 1}")
        log.info("epoch %d/%d mse %.3e", epoch + 1, config.epochs, loss)

    return model, _mse(model, x, y)


# ---------------------------------------------------------------- checkpoints

def save_model(model: MlpModel, path) -> Path:
    """Write ``<stem>.json`` manifest and ``<stem>.bin`` little-endian float64 blob."""
    path = Path(path)
    if path.suffix != ".json":
        path = path.with_suffix(".json")
    blob = path.with_suffix(".bin")
    flat = np.concatenate([p.reshape(-1) for p in model.parameters()])
    blob.write_bytes(flat.astype("<f8").tobytes())
    manifest = {
        "version": MODEL_FORMAT_VERSION,
        "layer_dims": list(model.layer_dims),
        "activation": model.activation,
        "seed": model.seed,
        "n_params": int(flat.size),
        "blob": blob.name,
    }
    path.write_text(json.dumps(manifest, indent=2))
    return path


def load_model(path) -> MlpModel:
    path = Path(path)
    if path.suffix != ".json":
        path = path.with_suffix(".json")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"corrupt model manifest {path}: {exc}") from exc
    if manifest.get("version") != MODEL_FORMAT_VERSION:
        raise CheckpointError(f"unsupported model format version {manifest.get('version')!r}")
    dims = [int(d) for d in manifest["layer_dims"]]
    expected = sum(o * i + o for i, o in zip(dims[:-1], dims[1:]))
    raw = (path.parent / manifest["blob"]).read_bytes()
    if len(raw) != 8 * expected:
        raise CheckpointError(
            f"model blob has {len(raw)} bytes, expected {8 * expected} for layers {dims}"
        )
    flat = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    ws, bs, pos = [], [], 0
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        ws.append(flat[pos:pos + fan_in * fan_out].reshape(fan_out, fan_in).copy())
        pos += fan_in * fan_out
        bs.append(flat[pos:pos + fan_out].copy())
        pos += fan_out
    return MlpModel(dims, manifest["activation"], ws, bs, manifest.get("seed"))


# ---------------------------------------------------------------- analytic maps

@dataclass
class SqNorm:
    """``f(x) = |x|^2``."""

    input_dim: int = 2
    output_dim: int = field(default=1, init=False)

    def eval(self, x):
        xb, single = _batched(x, self.input_dim)
        out = np.sum(xb * xb, axis=1, keepdims=True)
        return out[0] if single else out

    def jacobian(self, x):
        xb, single = _batched(x, self.input_dim)
        out = 2.0 * xb[:, None, :]
        return out[0] if single else out


@dataclass
class Linear:
    """``f(x) = R x``."""

    matrix: np.ndarray

    def __post_init__(self):
        self.matrix = np.atleast_2d(np.asarray(self.matrix, dtype=np.float64))

    @property
    def input_dim(self):
        return self.matrix.shape[1]

    @property
    def output_dim(self):
        return self.matrix.shape[0]

    def eval(self, x):
        xb, single = _batched(x, self.input_dim)
        out = xb @ self.matrix.T
        return out[0] if single else out

    def jacobian(self, x):
        xb, single = _batched(x, self.input_dim)
        out = np.broadcast_to(self.matrix, (len(xb),) + self.matrix.shape).copy()
        return out[0] if single else out


@dataclass
class MinkowskiBilinear:
    """``f(p, q) = p^T η q`` on two concatenated four-vectors."""

    input_dim: int = field(default=8, init=False)
    output_dim: int = field(default=1, init=False)

    def eval(self, x):
        xb, single = _batched(x, 8)
        p, q = xb[:, :4], xb[:, 4:]
        out = np.einsum("bi,ij,bj->b", p, MINKOWSKI, q)[:, None]
        return out[0] if single else out

    def jacobian(self, x):
        xb, single = _batched(x, 8)
        p, q = xb[:, :4], xb[:, 4:]
        out = np.concatenate([q @ MINKOWSKI, p @ MINKOWSKI], axis=1)[:, None, :]
        return out[0] if single else out


def inertia_matrix(positions) -> np.ndarray:
    """``sum_i (x_i.x_i I - x_i x_i^T)`` for unit masses; positions ``(..., k, 3)``."""
    x = np.asarray(positions, dtype=np.float64)
    sq = np.sum(x * x, axis=(-1, -2))
    outer = np.einsum("...ka,...kb->...ab", x, x)
    return sq[..., None, None] * np.eye(3) - outer


@dataclass
class Inertia:
    """Moment of inertia of unit-mass particles, flattened row-major to 9 outputs."""

    n_particles: int = 3
    output_dim: int = field(default=9, init=False)

    @property
    def input_dim(self):
        return 3 * self.n_particles

    def eval(self, x):
        xb, single = _batched(x, self.input_dim)
        m = inertia_matrix(xb.reshape(len(xb), self.n_particles, 3)).reshape(len(xb), 9)
        return m[0] if single else m

    def jacobian(self, x):
        xb, single = _batched(x, self.input_dim)
        pts = xb.reshape(len(xb), self.n_particles, 3)
        eye = np.eye(3)
        # dM_ab / dx_kc = 2 x_kc δ_ab - δ_ac x_kb - x_ka δ_bc
        jac = (
            2.0 * np.einsum("ab,nkc->nabkc", eye, pts)
            - np.einsum("ac,nkb->nabkc", eye, pts)
            - np.einsum("bc,nka->nabkc", eye, pts)
        ).reshape(len(xb), 9, self.input_dim)
        return jac[0] if single else jac


ANALYTIC_KINDS = ("sq_norm", "linear", "minkowski_bilinear", "inertia")


def analytic_oracle(kind: str, **kwargs):
    if kind == "sq_norm":
        return SqNorm(**kwargs)
    if kind == "linear":
        return Linear(**kwargs)
    if kind == "minkowski_bilinear":
        return MinkowskiBilinear()
    if kind == "inertia":
        return Inertia(**kwargs)
    raise ValueError(f"unknown analytic oracle {kind!r}; expected one of {ANALYTIC_KINDS}")
