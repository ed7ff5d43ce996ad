"""Quality measures for discovered algebras and known ground truths."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .datasets import inertia_spec, leapfrog, lorentz_spec, two_body_spec
from .discovery import LieBasisSet, equivariance_defect
from .linalg import kron_sum, mat_exp, solve_normal_equations, sym_eig
from .oracles import MINKOWSKI, Inertia, MinkowskiBilinear, SqNorm
from .spaces import INVARIANT_OUTPUT, Channels, SpaceSpec, UnknownLayout, layout_unknowns


class RankDeficiencyWarning(RuntimeWarning):
    pass


def space_error(V, V_star) -> float:
    """``min_X |V X - V*|_F^2 + min_Y |V* Y - V|_F^2``.

    Zero exactly when both column sets span the same subspace.  Both
    problems are solved through their normal equations; a rank-deficient
    side falls back to the minimum-norm solution and emits a
    :class:`RankDeficiencyWarning`.
    """
    V = np.asarray(V, dtype=np.float64)
    W = np.asarray(V_star, dtype=np.float64)
    if V.ndim == 1:
        V = V[:, None]
    if W.ndim == 1:
        W = W[:, None]
    if V.shape[0] != W.shape[0]:
        raise ValueError(f"ambient dims differ: {V.shape[0]} vs {W.shape[0]}")
    total = 0.0
    for a, b in ((V, W), (W, V)):
        if a.shape[1] == 0:
            total += float(np.sum(b * b))
            continue
        sol = solve_normal_equations(a, b)
        if sol.rank_deficient:
            warnings.warn("space_error: basis is rank deficient", RankDeficiencyWarning, stacklevel=2)
        total += sol.residual
    return total


def orthogonality_error(V) -> float:
    """Sum of ``|<v_i, v_j>|`` over column pairs ``i < j``."""
    V = np.asarray(V, dtype=np.float64)
    if V.ndim == 1 or V.shape[1] <= 1:
        return 0.0
    g = np.abs(V.T @ V)
    return float(np.sum(np.triu(g, k=1)))


class ResidualStats(NamedTuple):
    mean: float
    max: float
    count: int

    def to_dict(self) -> dict:
        return {"mean": self.mean, "max": self.max, "count": self.count}


def group_action(layout: UnknownLayout, mats: dict[str, np.ndarray]):
    """``(ρ_X(g), ρ_Y(g))`` for ``g = exp`` of the given algebra element."""
    return mat_exp(layout.input_action(mats)), mat_exp(layout.output_action(mats))


def equivariance_residual(oracle, basis: LieBasisSet, inputs, alpha_scale: float = 0.3,
                          n_points: int = 100, n_group_samples: int = 10, seed: int = 0,
                          eps: float = 1e-8) -> ResidualStats:
    """Relative finite-transformation defect ``|ρ_Y f(x) - f(ρ_X x)| / (|f(x)| + eps)``.

    Coefficients are drawn uniformly from ``[-alpha_scale, alpha_scale]^D``
    and paired with every one of ``n_points`` inputs drawn from ``inputs``.
    No check is made that transformed inputs stay in the training domain.
    """
    inputs = np.asarray(getattr(inputs, "inputs", inputs), dtype=np.float64)
    rng = np.random.default_rng(seed)
    k = min(n_points, len(inputs))
    xs = inputs[rng.choice(len(inputs), size=k, replace=False)]
    fx = oracle.eval(xs)
    norms = np.linalg.norm(fx, axis=1)
    res = []
    for _ in range(n_group_samples):
        if basis.D == 0:
            break
        alpha = rng.uniform(-alpha_scale, alpha_scale, size=basis.D)
        gx, gy = group_action(basis.layout, basis.combine(alpha))
        lhs = fx @ gy.T
        rhs = oracle.eval(xs @ gx.T)
        res.append(np.linalg.norm(lhs - rhs, axis=1) / (norms + eps))
    if not res:
        return ResidualStats(0.0, 0.0, 0)
    r = np.concatenate(res)
    return ResidualStats(float(np.mean(r)), float(np.max(r)), int(r.size))


# ---------------------------------------------------------------- ground truth

@dataclass
class GroundTruthBasis:
    name: str
    layout: UnknownLayout
    vectors: np.ndarray
    labels: list = field(default_factory=list)

    @property
    def D(self) -> int:
        return self.vectors.shape[1]


ROT2 = np.array([[0.0, -1.0], [1.0, 0.0]])
SO3 = [
    np.array([[0.0, 1.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 0.0, 0.0]]),
    np.array([[0.0, 0.0, 1.0], [0.0, 0.0, 0.0], [-1.0, 0.0, 0.0]]),
    np.array([[0.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, -1.0, 0.0]]),
]
TASKS = ("two_body", "inertia", "inertia_vector", "lorentz", "sq_norm")


def _normalized(cols) -> np.ndarray:
    v = np.column_stack(cols)
    return v / np.linalg.norm(v, axis=0)


def _check_constraints(layout, vectors, oracle, rng, tol=1e-10, n=20):
    xs = rng.standard_normal((n, oracle.input_dim))
    ys, jacs = oracle.eval(xs), oracle.jacobian(xs)
    for i in range(vectors.shape[1]):
        for x, y, j in zip(xs, ys, jacs):
            d = equivariance_defect(layout, vectors[:, i], x, y, j)
            if np.max(np.abs(d)) > tol * max(1.0, np.max(np.abs(y))):
                raise AssertionError(f"ground-truth vector {i} violates the constraint ({np.max(np.abs(d)):.2e})")


def so13_basis() -> np.ndarray:
    """Orthonormal basis of ``{A : ηA + A^T η = 0}`` as vectors of length 16.

    Solved by brute force: the linear map ``A -> ηA + A^T η`` is probed on
    all 16 unit matrices and its null space read off an eigendecomposition.
    """
    cols = []
    for k in range(16):
        a = np.zeros(16)
        a[k] = 1.0
        a = a.reshape(4, 4)
        cols.append((MINKOWSKI @ a + a.T @ MINKOWSKI).reshape(-1))
    m = np.column_stack(cols)
    w, q = sym_eig(m.T @ m)
    null = q[:, w < 1e-10 * w[0]]
    return null


def ground_truth_library(task: str) -> GroundTruthBasis:
    """Known Lie algebra of each built-in task, in that task's unknown layout.

    Every basis is checked against an exact oracle before being returned.
    """
    rng = np.random.default_rng(1234)
    if task == "two_body":
        layout = layout_unknowns(two_body_spec())
        vecs = _normalized([layout.pack({f"x{i}": ROT2 for i in range(4)})])
        # finite rotation must commute with the leapfrog flow
        q = rng.uniform(-1, 1, (8, 2, 2))
        q[:, 1] = -q[:, 0]
        p = rng.uniform(-0.5, 0.5, (8, 2, 2))
        p[:, 1] = -p[:, 0]
        g = mat_exp(0.7 * ROT2)
        qa, pa, _ = leapfrog(q @ g.T, p @ g.T, 5, 0.01)
        qb, pb, _ = leapfrog(q, p, 5, 0.01)
        if max(np.max(np.abs(qa - qb @ g.T)), np.max(np.abs(pa - pb @ g.T))) > 1e-10:
            raise AssertionError("two-body rotation check failed")
        return GroundTruthBasis(task, layout, vecs, ["rotation"])
    if task == "inertia":
        layout = layout_unknowns(inertia_spec(True))
        eye = np.eye(3)
        cols = [layout.pack({"x0": a, "y0": a, "y1": a}) for a in SO3]
        cols.append(layout.pack({"x0": eye, "y0": eye, "y1": eye}))
        cols.append(layout.pack({"x0": np.zeros((3, 3)), "y0": eye, "y1": -eye}))
        vecs = _normalized(cols)
        _check_constraints(layout, vecs, Inertia(), rng)
        return GroundTruthBasis(task, layout, vecs,
                                ["rotation_xy", "rotation_xz", "rotation_yz", "scaling", "trivial"])
    if task == "inertia_vector":
        layout = layout_unknowns(inertia_spec(False))
        eye = np.eye(3)
        cols = [layout.pack({"x0": a, "y0": kron_sum(a, a)}) for a in SO3]
        cols.append(layout.pack({"x0": eye, "y0": kron_sum(eye, eye)}))
        vecs = _normalized(cols)
        _check_constraints(layout, vecs, Inertia(), rng)
        return GroundTruthBasis(task, layout, vecs,
                                ["rotation_xy", "rotation_xz", "rotation_yz", "scaling"])
    if task == "lorentz":
        layout = layout_unknowns(lorentz_spec())
        vecs = so13_basis()
        _check_constraints(layout, vecs, MinkowskiBilinear(), rng)
        return GroundTruthBasis(task, layout, vecs, [f"so13_{i}" for i in range(vecs.shape[1])])
    if task == "sq_norm":
        layout = layout_unknowns(
            SpaceSpec(Channels(2), Channels(1), frozenset({INVARIANT_OUTPUT}))
        )
        vecs = _normalized([layout.pack({"x0": ROT2})])
        _check_constraints(layout, vecs, SqNorm(), rng)
        return GroundTruthBasis(task, layout, vecs, ["rotation"])
    raise ValueError(f"unknown ground-truth task {task!r}; expected one of {TASKS}")
