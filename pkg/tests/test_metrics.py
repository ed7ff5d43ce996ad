import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from symdisc.datasets import inertia_spec
from symdisc.discovery import LieBasisSet
from symdisc.linalg import kron
from symdisc.metrics import (
    ROT2,
    RankDeficiencyWarning,
    equivariance_residual,
    ground_truth_library,
    group_action,
    orthogonality_error,
    so13_basis,
    space_error,
)
from symdisc.oracles import MINKOWSKI, Inertia, MinkowskiBilinear, SqNorm
from symdisc.spaces import INVARIANT_OUTPUT, Channels, SpaceSpec, layout_unknowns


def basis_set(layout, vectors):
    vectors = np.asarray(vectors, dtype=np.float64)
    mats = [layout.unpack(vectors[:, i]) for i in range(vectors.shape[1])]
    return LieBasisSet(layout, np.zeros(layout.total_dim), vectors, mats)


def orthonormal(rng, p, d):
    q, _ = np.linalg.qr(rng.standard_normal((p, d)))
    return q


def test_space_error_worked_values():
    e1, e2 = np.array([[1.0], [0.0]]), np.array([[0.0], [1.0]])
    assert space_error(e1, e2) == pytest.approx(2.0, abs=1e-15)
    v = orthonormal(np.random.default_rng(0), 6, 3)
    assert space_error(v, v) <= 1e-24
    # a 45 degree rotation inside a 2-D subspace of R^4
    w = orthonormal(np.random.default_rng(1), 4, 2)
    c = np.sqrt(0.5)
    assert space_error(w, w @ np.array([[c, -c], [c, c]])) <= 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 10), st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**32 - 1))
def test_space_error_symmetric_and_span_invariant(p, d1, d2, seed):
    rng = np.random.default_rng(seed)
    d1, d2 = min(d1, p), min(d2, p)
    v, w = orthonormal(rng, p, d1), orthonormal(rng, p, d2)
    assert abs(space_error(v, w) - space_error(w, v)) <= 1e-12
    q = orthonormal(rng, d1, d1)
    assert space_error(v, v @ q) <= 1e-10
    assert space_error(v, w) >= 0


def test_space_error_rank_deficient_warns():
    v = np.array([[1.0, 1.0], [0.0, 0.0], [0.0, 0.0]])
    with pytest.warns(RankDeficiencyWarning):
        e = space_error(v, np.array([[1.0], [0.0], [0.0]]))
    assert e <= 1e-20
    with pytest.raises(ValueError):
        space_error(np.ones((3, 1)), np.ones((4, 1)))


def test_space_error_against_empty_basis():
    v = orthonormal(np.random.default_rng(0), 5, 2)
    assert space_error(np.zeros((5, 0)), v) == pytest.approx(2.0)


def test_orthogonality_error():
    e1 = np.array([1.0, 0.0, 0.0])
    assert orthogonality_error(np.column_stack([e1, e1])) == 1.0
    assert orthogonality_error(e1[:, None]) == 0.0
    assert orthogonality_error(np.eye(4)) == 0.0
    v = np.column_stack([e1, [0.6, 0.8, 0.0], [0.0, -0.6, 0.8]])
    assert orthogonality_error(v) == pytest.approx(0.6 + 0.0 + 0.48)


@pytest.mark.parametrize("task,dim", [("two_body", 1), ("inertia", 5), ("inertia_vector", 4),
                                      ("lorentz", 6), ("sq_norm", 1)])
def test_ground_truth_library(task, dim):
    gt = ground_truth_library(task)
    assert gt.D == dim and len(gt.labels) == dim
    assert gt.vectors.shape == (gt.layout.total_dim, dim)
    assert np.allclose(np.linalg.norm(gt.vectors, axis=0), 1.0)


def test_ground_truth_contents():
    gt = ground_truth_library("two_body")
    mats = gt.layout.unpack(gt.vectors[:, 0])
    for fid in ("x0", "x1", "x2", "x3", "y0", "y3"):
        assert np.allclose(mats[fid], ROT2 / 4.0 * np.sqrt(2.0))
    inertia = ground_truth_library("inertia")
    mats = inertia.layout.unpack(inertia.vectors[:, 4])
    assert np.array_equal(mats["x0"], np.zeros((3, 3)))
    assert np.allclose(mats["y0"], -mats["y1"])
    with pytest.raises(ValueError):
        ground_truth_library("top_quark")


def test_so13_basis_brute_force():
    v = so13_basis()
    assert v.shape == (16, 6)
    for i in range(6):
        a = v[:, i].reshape(4, 4)
        assert np.max(np.abs(MINKOWSKI @ a + a.T @ MINKOWSKI)) <= 1e-12
    assert np.allclose(v.T @ v, np.eye(6), atol=1e-12)


def test_residual_zero_at_identity():
    layout = layout_unknowns(inertia_spec(True))
    rng = np.random.default_rng(0)
    bs = basis_set(layout, orthonormal(rng, 27, 3))
    xs = rng.standard_normal((50, 9))
    stats = equivariance_residual(Inertia(), bs, xs, alpha_scale=0.0, n_points=50)
    assert stats.mean == 0.0 and stats.max == 0.0 and stats.count == 500


@pytest.mark.parametrize("scale", [0.05, 0.3, 0.5])
def test_exact_symmetries_have_tiny_residual(scale):
    rng = np.random.default_rng(1)
    gt = ground_truth_library("inertia")
    stats = equivariance_residual(Inertia(), basis_set(gt.layout, gt.vectors),
                                  rng.standard_normal((100, 9)), alpha_scale=scale)
    assert stats.max <= 1e-9
    gt = ground_truth_library("lorentz")
    stats = equivariance_residual(MinkowskiBilinear(), basis_set(gt.layout, gt.vectors),
                                  rng.standard_normal((100, 8)), alpha_scale=scale)
    assert stats.max <= 1e-9


def test_inertia_rotation_residual():
    gt = ground_truth_library("inertia")
    rot = basis_set(gt.layout, gt.vectors[:, :3])
    stats = equivariance_residual(Inertia(), rot, np.random.default_rng(2).standard_normal((100, 9)),
                                  alpha_scale=0.3)
    assert stats.max <= 1e-10


def test_wrong_basis_is_detected():
    layout = layout_unknowns(SpaceSpec(Channels(2), Channels(1), frozenset({INVARIANT_OUTPUT})))
    sym = np.array([[0.0, 1.0], [1.0, 0.0]])
    v = layout.pack({"x0": sym})
    bs = basis_set(layout, (v / np.linalg.norm(v))[:, None])
    stats = equivariance_residual(SqNorm(), bs, np.random.default_rng(3).standard_normal((100, 2)),
                                  alpha_scale=0.3)
    assert stats.mean >= 0.1
    good = ground_truth_library("sq_norm")
    stats = equivariance_residual(SqNorm(), basis_set(good.layout, good.vectors),
                                  np.random.default_rng(3).standard_normal((100, 2)), alpha_scale=0.3)
    assert stats.max <= 1e-12


def test_tensor_group_action_matches_conjugation():
    gt = ground_truth_library("inertia")
    mats = gt.layout.unpack(0.4 * gt.vectors[:, 0])
    gx, gy = group_action(gt.layout, mats)
    r = gx[:3, :3]
    assert np.allclose(r @ r.T, np.eye(3), atol=1e-12)
    assert np.allclose(gy, kron(r, r), atol=1e-12)
