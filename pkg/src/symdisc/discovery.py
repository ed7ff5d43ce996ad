"""Linear-algebraic recovery of Lie algebra representations.

For every data point ``x`` with value ``y = f(x)`` and Jacobian ``J``, the
infinitesimal equivariance condition

    dρ_Y(A) y - J dρ_X(A) x = 0

is linear in the representation matrices.  Stacking one block of rows per
point gives a coefficient matrix ``C`` whose null space holds the Lie
algebra.  ``C`` itself is never formed: ``C.T @ C`` is accumulated point by
point and eigendecomposed, giving the singular values and right singular
vectors of ``C``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .linalg import sym_eig
from .spaces import (
    CHANNELS,
    INVARIANT_OUTPUT,
    SpaceSpec,
    UnknownLayout,
    layout_unknowns,
)

THRESHOLD = "threshold"
GAP = "gap"


def _slot_cols(layout: UnknownLayout, fid: str):
    s = layout.slot_of(fid)
    if s is None:
        return None
    return slice(s.offset, s.offset + s.size)


def constraint_rows(layout: UnknownLayout, xs, ys, jacs) -> np.ndarray:
    """Block rows of the coefficient matrix for a batch of points.

    ``xs`` is ``(B, n)``, ``ys`` is ``(B, m)``, ``jacs`` is ``(B, m, n)``;
    the result is ``(B, m, P)``.  Factors sharing a slot add their
    contributions into the same columns.
    """
    spec = layout.spec
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    jacs = np.asarray(jacs, dtype=np.float64)
    b, n = xs.shape
    m = ys.shape[1]
    if n != spec.input_dim or m != spec.output_dim or jacs.shape != (b, m, n):
        raise ValueError(
            f"shape mismatch: x {xs.shape}, y {ys.shape}, jac {jacs.shape} "
            f"for spec ({spec.input_dim} -> {spec.output_dim})"
        )
    rows = np.zeros((b, m, layout.total_dim))

    inp = spec.input
    if inp.kind == CHANNELS:
        for j, sl in enumerate(inp.slices()):
            cols = _slot_cols(layout, f"x{j}")
            d = sl.stop - sl.start
            block = np.einsum("bra,bc->brac", jacs[:, :, sl], xs[:, sl])
            rows[:, :, cols] -= block.reshape(b, m, d * d)
    else:
        n1, n2 = inp.dims
        x3 = xs.reshape(b, n1, n2)
        j4 = jacs.reshape(b, m, n1, n2)
        # column sums for the left factor, row sums for the right factor
        c1 = np.einsum("brak,bck->brac", j4, x3).reshape(b, m, n1 * n1)
        c2 = np.einsum("brka,bkc->brac", j4, x3).reshape(b, m, n2 * n2)
        rows[:, :, _slot_cols(layout, "x0")] -= c1
        rows[:, :, _slot_cols(layout, "x1")] -= c2

    if INVARIANT_OUTPUT not in spec.constraints:
        out = spec.output
        if out.kind == CHANNELS:
            for i, sl in enumerate(out.slices()):
                cols = _slot_cols(layout, f"y{i}")
                d = sl.stop - sl.start
                block = np.einsum("ae,bc->baec", np.eye(d), ys[:, sl])
                rows[:, sl, cols] += block.reshape(b, d, d * d)
        else:
            m1, m2 = out.dims
            y3 = ys.reshape(b, m1, m2)
            c1 = np.einsum("ad,bec->bacde", np.eye(m1), y3).reshape(b, m, m1 * m1)
            c2 = np.einsum("ce,bad->baced", np.eye(m2), y3).reshape(b, m, m2 * m2)
            rows[:, :, _slot_cols(layout, "y0")] += c1
            rows[:, :, _slot_cols(layout, "y1")] += c2
    return rows


def equivariance_defect(layout: UnknownLayout, v, x, y, jac) -> np.ndarray:
    """``dρ_Y y - J dρ_X x`` for the representation encoded by ``v``."""
    mats = layout.unpack(v)
    dx = layout.input_action(mats)
    dy = layout.output_action(mats)
    return dy @ np.asarray(y, dtype=np.float64) - np.asarray(jac) @ (dx @ np.asarray(x))


def explicit_coefficient_matrix(layout: UnknownLayout, xs, ys, jacs) -> np.ndarray:
    """Stack ``C`` column by column by probing unit vectors of unknowns.

    Independent of the Kronecker assembly in :func:`constraint_rows`; it
    evaluates :func:`equivariance_defect` directly, so it is only meant for
    small cross-checks.
    """
    p = layout.total_dim
    blocks = []
    for x, y, jac in zip(np.asarray(xs), np.asarray(ys), np.asarray(jacs)):
        block = np.empty((len(y), p))
        for k in range(p):
            e = np.zeros(p)
            e[k] = 1.0
            block[:, k] = equivariance_defect(layout, e, x, y, jac)
        blocks.append(block)
    return np.vstack(blocks)


class Spectrum(NamedTuple):
    singular_values: np.ndarray
    eigenvectors: np.ndarray


class GramAccumulator:
    """Running ``C.T @ C`` over streamed points.

    Single writer.  Independent accumulators over disjoint shards can be
    combined with ``+`` (or :meth:`merge`), which is exact up to summation
    order.
    """

    def __init__(self, spec: SpaceSpec | UnknownLayout):
        self.layout = spec if isinstance(spec, UnknownLayout) else layout_unknowns(spec)
        p = self.layout.total_dim
        self.gram = np.zeros((p, p))
        self.points_seen = 0

    @property
    def spec(self) -> SpaceSpec:
        return self.layout.spec

    def add_points(self, xs, ys, jacs) -> None:
        xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
        ys = np.atleast_2d(np.asarray(ys, dtype=np.float64))
        jacs = np.asarray(jacs, dtype=np.float64)
        if jacs.ndim == 2:
            jacs = jacs[None]
        bad = ~np.all(np.isfinite(jacs.reshape(len(jacs), -1)), axis=1)
        bad |= ~np.all(np.isfinite(xs), axis=1) | ~np.all(np.isfinite(ys), axis=1)
        if np.any(bad):
            idx = self.points_seen + int(np.argmax(bad))
            raise ValueError(f"non-finite value or Jacobian at point {idx}")
        rows = constraint_rows(self.layout, xs, ys, jacs)
        flat = rows.reshape(-1, self.layout.total_dim)
        self.gram += flat.T @ flat
        self.points_seen += len(xs)

    def accumulate_point(self, x, y, jac) -> None:
        self.add_points(np.asarray(x)[None], np.asarray(y)[None], np.asarray(jac)[None])

    def accumulate_dataset(self, oracle, inputs, batch_size: int = 2048) -> None:
        """Accumulate every row of ``inputs`` using the oracle's value and Jacobian."""
        inputs = np.asarray(getattr(inputs, "inputs", inputs), dtype=np.float64)
        for start in range(0, len(inputs), batch_size):
            xb = inputs[start:start + batch_size]
            try:
                self.add_points(xb, oracle.eval(xb), oracle.jacobian(xb))
            except ValueError as exc:
                raise ValueError(f"rows {start}..{start + len(xb) - 1}: {exc}") from exc

    def merge(self, other: "GramAccumulator") -> "GramAccumulator":
        if other.layout != self.layout:
            raise ValueError("cannot merge accumulators with different layouts")
        out = GramAccumulator(self.layout)
        out.gram = self.gram + other.gram
        out.points_seen = self.points_seen + other.points_seen
        return out

    __add__ = merge

    def finalize(self) -> Spectrum:
        """Singular values (descending) and right singular vectors of ``C``."""
        if self.points_seen == 0:
            raise ValueError("no points accumulated")
        s = 0.5 * (self.gram + self.gram.T)
        w, q = sym_eig(s)
        sv = np.sqrt(np.clip(w, 0.0, None))
        return Spectrum(sv, q)


@dataclass
class DimensionChoice:
    threshold: int
    gap: int
    policy: str
    tau: float
    degenerate: bool = False

    @property
    def chosen(self) -> int:
        return self.threshold if self.policy == THRESHOLD else self.gap

    def to_dict(self) -> dict:
        return {
            "threshold": self.threshold,
            "gap": self.gap,
            "policy": self.policy,
            "tau": self.tau,
            "chosen": self.chosen,
            "degenerate": self.degenerate,
        }


def select_dimension(singular_values, policy: str = THRESHOLD, tau: float = 1e-3) -> DimensionChoice:
    """Count the near-zero singular values under both selection rules.

    ``threshold``: values below ``tau * max``.  ``gap``: split at the
    widest drop of ``log10`` over the smallest half of the spectrum.
    """
    if policy not in (THRESHOLD, GAP):
        raise ValueError(f"unknown policy {policy!r}")
    sv = np.asarray(singular_values, dtype=np.float64)
    p = len(sv)
    if p == 0 or np.any(sv < 0) or np.any(np.diff(sv) > 0):
        raise ValueError("spectrum must be non-empty, non-negative and descending")
    smax = float(sv[0])
    if smax == 0.0:
        return DimensionChoice(p, p, policy, tau, degenerate=True)
    n_thr = int(np.count_nonzero(sv < tau * smax))
    logs = np.log10(sv + np.finfo(float).eps * smax)
    best_d, best_gap = 0, -math.inf
    for d in range(1, (p + 1) // 2 + 1):
        if d >= p:
            break
        g = logs[p - d - 1] - logs[p - d]
        if g > best_gap:
            best_d, best_gap = d, g
    return DimensionChoice(n_thr, best_d, policy, tau)


@dataclass
class LieBasisSet:
    """Discovered algebra: ``vectors[:, i]`` is basis ``i`` in layout form.

    Bases are ordered from the smallest singular value upward; each vector
    has unit norm and its largest-magnitude entry positive.
    """

    layout: UnknownLayout
    singular_values: np.ndarray
    vectors: np.ndarray
    matrices: list = field(default_factory=list)

    @property
    def D(self) -> int:
        return self.vectors.shape[1]

    def combine(self, alpha) -> dict[str, np.ndarray]:
        """Per-factor matrices of ``sum_i alpha_i dρ(A_i)``."""
        alpha = np.asarray(alpha, dtype=np.float64).reshape(-1)
        return self.layout.unpack(self.vectors @ alpha)

    def to_dict(self) -> dict:
        return {
            "D": self.D,
            "layout": self.layout.describe(),
            "vectors": self.vectors.T.tolist(),
            "bases": [{k: m.tolist() for k, m in mats.items()} for mats in self.matrices],
        }


def _fix_sign(v: np.ndarray) -> np.ndarray:
    k = int(np.argmax(np.abs(v)))
    return -v if v[k] < 0 else v


def extract_bases(spectrum: Spectrum, layout: UnknownLayout, D: int) -> LieBasisSet:
    sv, q = spectrum
    p = layout.total_dim
    if not 0 <= D <= p:
        raise ValueError(f"D={D} outside [0, {p}]")
    cols = []
    for k in range(p - 1, p - 1 - D, -1):
        v = q[:, k] / np.linalg.norm(q[:, k])
        cols.append(_fix_sign(v))
    vectors = np.column_stack(cols) if cols else np.zeros((p, 0))
    mats = [layout.unpack(vectors[:, i]) for i in range(D)]
    return LieBasisSet(layout, np.asarray(sv), vectors, mats)


def discover(oracle, inputs, spec: SpaceSpec, policy: str = THRESHOLD, tau: float = 1e-3,
             batch_size: int = 2048):
    """Full pipeline: accumulate, eigendecompose, select ``D``, extract bases.

    Returns ``(basis_set, fragment)`` where ``fragment`` is a plain dict for
    reports.
    """
    acc = GramAccumulator(spec)
    acc.accumulate_dataset(oracle, inputs, batch_size=batch_size)
    spectrum = acc.finalize()
    choice = select_dimension(spectrum.singular_values, policy, tau)
    basis = extract_bases(spectrum, acc.layout, choice.chosen)
    fragment = {
        "points_seen": acc.points_seen,
        "unknowns": acc.layout.total_dim,
        "layout": acc.layout.describe(),
        "singular_values": spectrum.singular_values.tolist(),
        "dimension": choice.to_dict(),
        "degenerate": choice.degenerate,
    }
    return basis, fragment
