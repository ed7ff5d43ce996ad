"""Synthetic tasks with known symmetry, and dataset persistence.

On disk a dataset is a JSON manifest plus a raw blob of little-endian
float64: all inputs row-major, then all outputs row-major.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .oracles import MINKOWSKI, inertia_matrix
from .spaces import (
    INVARIANT_OUTPUT,
    SHARED_INPUT_CHANNELS,
    SHARED_IO,
    Channels,
    SpaceSpec,
    TensorFactors,
)

FORMAT_VERSION = 1
ROT90 = np.array([[0.0, -1.0], [1.0, 0.0]])


class DatasetFormatError(ValueError):
    pass


@dataclass
class Dataset:
    inputs: np.ndarray
    outputs: np.ndarray
    space_spec: SpaceSpec | None = None
    provenance: dict = field(default_factory=dict)
    name: str = "dataset"

    def __post_init__(self):
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=np.float64))
        self.outputs = np.atleast_2d(np.asarray(self.outputs, dtype=np.float64))
        if len(self.inputs) < 1 or len(self.inputs) != len(self.outputs):
            raise ValueError(
                f"need N >= 1 rows with matching counts, got {len(self.inputs)} / {len(self.outputs)}"
            )
        if not (np.all(np.isfinite(self.inputs)) and np.all(np.isfinite(self.outputs))):
            raise ValueError("dataset contains non-finite entries")

    def __len__(self):
        return len(self.inputs)

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[1]

    @property
    def output_dim(self) -> int:
        return self.outputs.shape[1]

    def subset(self, n: int) -> "Dataset":
        prov = dict(self.provenance, subset=int(n))
        return Dataset(self.inputs[:n], self.outputs[:n], self.space_spec, prov, self.name)


# ---------------------------------------------------------------- specs

def two_body_spec() -> SpaceSpec:
    return SpaceSpec(Channels(2, 2, 2, 2), Channels(2, 2, 2, 2), frozenset({SHARED_IO}))


def inertia_spec(tensor_output: bool = True, n_particles: int = 3) -> SpaceSpec:
    out = TensorFactors(3, 3) if tensor_output else Channels(9)
    return SpaceSpec(Channels(*[3] * n_particles), out, frozenset({SHARED_INPUT_CHANNELS}))


def lorentz_spec() -> SpaceSpec:
    return SpaceSpec(
        Channels(4, 4), Channels(1), frozenset({SHARED_INPUT_CHANNELS, INVARIANT_OUTPUT})
    )


# ---------------------------------------------------------------- two-body

@dataclass
class TwoBodyConfig:
    n_trajectories: int = 90
    steps_per_trajectory: int = 200
    dt: float = 0.01
    substeps: int = 10
    G: float = 1.0
    m1: float = 1.0
    m2: float = 1.0
    radius_range: tuple = (0.5, 1.5)
    velocity_noise: float = 0.1
    seed: int = 0

    def __post_init__(self):
        self.radius_range = tuple(self.radius_range)
        if self.n_trajectories < 1 or self.steps_per_trajectory < 1 or self.substeps < 1:
            raise ValueError("trajectory counts must be positive")
        if not (self.dt > 0 and self.G > 0 and self.m1 > 0 and self.m2 > 0):
            raise ValueError("dt, G and masses must be positive")
        if self.m1 != self.m2:
            raise ValueError("the two-body task uses equal masses")
        lo, hi = self.radius_range
        if not 0 < lo <= hi:
            raise ValueError(f"bad radius_range {self.radius_range}")

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["radius_range"] = list(self.radius_range)
        return d


def _accel(q, G, m1, m2):
    """Momentum derivatives for positions ``q`` of shape ``(T, 2, 2)``."""
    r = q[:, 0] - q[:, 1]
    d = np.sqrt(np.sum(r * r, axis=1))
    f1 = -G * m1 * m2 * r / d[:, None] ** 3
    return np.stack([f1, -f1], axis=1), d


def two_body_energy(q, p, G=1.0, m1=1.0, m2=1.0):
    q = np.asarray(q)
    p = np.asarray(p)
    kin = np.sum(p[..., 0, :] ** 2, axis=-1) / (2 * m1) + np.sum(p[..., 1, :] ** 2, axis=-1) / (2 * m2)
    sep = np.sqrt(np.sum((q[..., 0, :] - q[..., 1, :]) ** 2, axis=-1))
    return kin - G * m1 * m2 / sep


def leapfrog(q, p, n_steps: int, dt: float, G=1.0, m1=1.0, m2=1.0):
    """Kick-drift-kick integration of a batch of two-body states.

    ``q`` and ``p`` have shape ``(T, 2, 2)`` (batch, body, xy).  Returns the
    final state and the minimum separation seen.
    """
    q = np.array(q, dtype=np.float64)
    p = np.array(p, dtype=np.float64)
    inv_m = np.array([1.0 / m1, 1.0 / m2])[None, :, None]
    f, d = _accel(q, G, m1, m2)
    dmin = d.copy()
    for _ in range(n_steps):
        p += 0.5 * dt * f
        q += dt * p * inv_m
        f, d = _accel(q, G, m1, m2)
        p += 0.5 * dt * f
        dmin = np.minimum(dmin, d)
    return q, p, dmin


def _initial_states(rng, k: int, cfg: TwoBodyConfig):
    r = rng.uniform(*cfg.radius_range, size=k)
    theta = rng.uniform(0.0, 2 * np.pi, size=k)
    spin = rng.choice([-1.0, 1.0], size=k)
    noise = 1.0 + rng.uniform(-cfg.velocity_noise, cfg.velocity_noise, size=k)
    mtot = cfg.m1 + cfg.m2
    u = np.stack([np.cos(theta), np.sin(theta)], axis=1)
    perp = spin[:, None] * np.stack([-np.sin(theta), np.cos(theta)], axis=1)
    # centre of mass at the origin
    q1 = (cfg.m2 / mtot) * r[:, None] * u
    q2 = -(cfg.m1 / mtot) * r[:, None] * u
    v_rel = noise * np.sqrt(cfg.G * mtot / r)
    # zero total momentum: p1 = -p2 = reduced mass * relative velocity
    p1 = (cfg.m1 * cfg.m2 / mtot) * v_rel[:, None] * perp
    q = np.stack([q1, q2], axis=1)
    p = np.stack([p1, -p1], axis=1)
    return q, p


def _pack_state(q, p):
    return np.concatenate([q[:, 0], p[:, 0], q[:, 1], p[:, 1]], axis=1)


def two_body_trajectories(cfg: TwoBodyConfig):
    """States of shape ``(n_trajectories, steps + 1, 8)`` ordered ``(q1, p1, q2, p2)``."""
    rng = np.random.default_rng(cfg.seed)
    k = cfg.n_trajectories
    q, p = _initial_states(rng, k, cfg)
    for _ in range(100):
        states = np.empty((k, cfg.steps_per_trajectory + 1, 8))
        states[:, 0] = _pack_state(q, p)
        e0 = two_body_energy(q, p, cfg.G, cfg.m1, cfg.m2)
        drift = np.zeros(k)
        dmin = np.full(k, np.inf)
        qt, pt = q, p
        for t in range(cfg.steps_per_trajectory):
            qt, pt, dm = leapfrog(qt, pt, cfg.substeps, cfg.dt, cfg.G, cfg.m1, cfg.m2)
            dmin = np.minimum(dmin, dm)
            states[:, t + 1] = _pack_state(qt, pt)
            e = two_body_energy(qt, pt, cfg.G, cfg.m1, cfg.m2)
            drift = np.maximum(drift, np.abs(e - e0) / np.abs(e0))
        collided = dmin < 1e-3
        if not np.any(collided):
            break
        qn, pn = _initial_states(rng, int(collided.sum()), cfg)
        q = q.copy()
        p = p.copy()
        q[collided] = qn
        p[collided] = pn
    else:
        raise RuntimeError("could not sample collision-free trajectories")
    if np.max(drift) > 0.01:
        raise ValueError(
            f"energy drift {np.max(drift):.3%} exceeds 1%; reduce dt (currently {cfg.dt})"
        )
    return states


def gen_two_body(cfg: TwoBodyConfig | None = None) -> Dataset:
    """Pairs ``(state_t, state_{t+1})``; one step spans ``substeps`` leapfrog steps."""
    cfg = cfg or TwoBodyConfig()
    states = two_body_trajectories(cfg)
    x = states[:, :-1].reshape(-1, 8)
    y = states[:, 1:].reshape(-1, 8)
    prov = {"generator": "two_body", "config": cfg.to_dict(), "seed": cfg.seed}
    return Dataset(x, y, two_body_spec(), prov, "two_body")


def shuffle_non_uniform(d: Dataset) -> Dataset:
    """Rotate by 90 degrees every row whose ``q1`` lies in quadrant I or III.

    All four 2-D channels of both input and output are rotated, so the
    underlying map is unchanged while the input distribution loses its
    rotational uniformity.
    """
    if d.input_dim != 8 or d.output_dim != 8:
        raise ValueError("shuffle_non_uniform expects two-body data (8 -> 8)")
    x = d.inputs.copy()
    y = d.outputs.copy()
    mask = x[:, 0] * x[:, 1] > 0
    for arr in (x, y):
        ch = arr[mask].reshape(-1, 4, 2)
        arr[mask] = (ch @ ROT90.T).reshape(-1, 8)
    prov = dict(d.provenance, shuffle_non_uniform=True, rotated_rows=int(mask.sum()))
    return Dataset(x, y, d.space_spec, prov, d.name + "_nonuniform")


# ---------------------------------------------------------------- inertia, lorentz

def gen_inertia(n_particles: int = 3, n_samples: int = 100_000, seed: int = 0,
                tensor_output: bool = True) -> Dataset:
    if n_particles < 1 or n_samples < 1:
        raise ValueError("n_particles and n_samples must be positive")
    rng = np.random.default_rng(seed)
    pos = rng.standard_normal((n_samples, n_particles, 3))
    m = inertia_matrix(pos).reshape(n_samples, 9)
    prov = {
        "generator": "inertia",
        "config": {"n_particles": n_particles, "n_samples": n_samples},
        "seed": seed,
    }
    return Dataset(pos.reshape(n_samples, -1), m, inertia_spec(tensor_output, n_particles),
                   prov, "inertia")


def gen_lorentz_pair(n_samples: int = 2000, seed: int = 0) -> Dataset:
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n_samples, 8))
    y = np.tanh(np.einsum("bi,ij,bj->b", x[:, :4], MINKOWSKI, x[:, 4:]))[:, None]
    prov = {"generator": "lorentz_pair", "config": {"n_samples": n_samples}, "seed": seed}
    return Dataset(x, y, lorentz_spec(), prov, "lorentz_pair")


# ---------------------------------------------------------------- persistence

def save_dataset(d: Dataset, path) -> Path:
    path = Path(path)
    if path.suffix != ".json":
        path = path.with_suffix(".json")
    blob = path.with_suffix(".bin")
    payload = np.concatenate([d.inputs.reshape(-1), d.outputs.reshape(-1)])
    blob.write_bytes(payload.astype("<f8").tobytes())
    manifest = {
        "version": FORMAT_VERSION,
        "name": d.name,
        "n": len(d),
        "input_dim": d.input_dim,
        "output_dim": d.output_dim,
        "space_spec": None if d.space_spec is None else d.space_spec.to_dict(),
        "provenance": d.provenance,
        "blob": blob.name,
    }
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def load_dataset(path) -> Dataset:
    path = Path(path)
    if path.suffix != ".json":
        path = path.with_suffix(".json")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"corrupt dataset header {path}: {exc}") from exc
    if not isinstance(manifest, dict):
        raise DatasetFormatError(f"corrupt dataset header {path}: not an object")
    if manifest.get("version") != FORMAT_VERSION:
        raise DatasetFormatError(
            f"dataset format version {manifest.get('version')!r} not supported (expected {FORMAT_VERSION})"
        )
    try:
        n, ni, no = int(manifest["n"]), int(manifest["input_dim"]), int(manifest["output_dim"])
        blob = path.parent / manifest["blob"]
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetFormatError(f"corrupt dataset header {path}: {exc}") from exc
    spec = manifest.get("space_spec")
    spec = None if spec is None else SpaceSpec.from_dict(spec)
    raw = blob.read_bytes()
    expected = 8 * n * (ni + no)
    if len(raw) != expected:
        raise DatasetFormatError(
            f"dataset blob {blob.name}: expected {expected} bytes, got {len(raw)}"
        )
    flat = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    x = flat[: n * ni].reshape(n, ni)
    y = flat[n * ni:].reshape(n, no)
    return Dataset(x, y, spec, manifest.get("provenance", {}), manifest.get("name", path.stem))
