"""End-to-end acceptance checks, one test per criterion.

Every test prints a single ``criterion N: PASS|FAIL`` line with the measured
numbers before asserting, so ``pytest -v -s`` (or the captured output of a
failing run) shows the full scorecard.  Criteria 3 to 5 train full-size
networks and take several minutes on one CPU core.
"""
import shutil

import numpy as np
import pytest

from symdisc.datasets import gen_inertia, inertia_spec, lorentz_spec
from symdisc.discovery import (
    GramAccumulator,
    constraint_rows,
    discover,
    explicit_coefficient_matrix,
    extract_bases,
)
from symdisc.experiments import (
    ExperimentConfig,
    basis_from_report,
    heldout_inputs,
    load_oracle,
    run_experiment,
    run_stage,
)
from symdisc.datasets import load_dataset
from symdisc.metrics import (
    equivariance_residual,
    ground_truth_library,
    orthogonality_error,
    space_error,
)
from symdisc.oracles import Inertia, MinkowskiBilinear, SqNorm
from symdisc.spaces import (
    INVARIANT_OUTPUT,
    SHARED_INPUT_CHANNELS,
    SHARED_IO,
    Channels,
    SpaceSpec,
    TensorFactors,
    layout_unknowns,
)

ELIGIBLE = {}  # bases that met their discovery criterion, for the residual check


def emit(capsys, n, ok, detail):
    with capsys.disabled():
        print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'} | {detail}")


# ---------------------------------------------------------------- shared runs

@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    return {"root": tmp_path_factory.mktemp("acceptance")}


def _run(runs, preset, seed=0, tag=None):
    key = tag or f"{preset}_{seed}"
    if key not in runs:
        cfg = ExperimentConfig.preset_config(preset, seed=seed, out_dir=str(runs["root"] / key))
        runs[key] = (cfg, run_experiment(cfg))
    return runs[key]


def _inertia_pair(runs):
    """Tensor run via its preset, then the vector spec on the same data and network."""
    if "inertia_vector" not in runs:
        tcfg, trep = _run(runs, "inertia_tensor")
        vdir = runs["root"] / "inertia_vector"
        vdir.mkdir()
        for name in ("dataset.json", "dataset.bin", "model.json", "model.bin"):
            shutil.copy(runs["root"] / "inertia_tensor_0" / name, vdir / name)
        vcfg = ExperimentConfig.preset_config("inertia_vector_ablation", out_dir=str(vdir))
        report = None
        for stage in ("discover", "eval", "validate"):
            _, report = run_stage(vcfg, stage, report=report)
        runs["inertia_vector"] = (vcfg, report)
    return runs["inertia_tensor_0"], runs["inertia_vector"]


# ---------------------------------------------------------------- 1

VARIANTS = {
    "single-channel": lambda r: SpaceSpec(Channels(r.integers(1, 5)), Channels(r.integers(1, 5))),
    "multi-channel": lambda r: SpaceSpec(Channels(*r.integers(1, 5, 2)), Channels(*r.integers(1, 5, 3))),
    "tensor": lambda r: SpaceSpec(TensorFactors(*r.integers(1, 5, 2)), TensorFactors(*r.integers(1, 5, 2))),
    "invariant/tied": lambda r: SpaceSpec(Channels(*[r.integers(1, 5)] * 2), Channels(1),
                                          frozenset({SHARED_INPUT_CHANNELS, INVARIANT_OUTPUT})),
    "shared-io": lambda r: SpaceSpec(Channels(2, 3), Channels(2, 3), frozenset({SHARED_IO})),
}


def test_criterion_1_gram_matches_explicit_svd(capsys):
    worst = {}
    for name, make in VARIANTS.items():
        rng = np.random.default_rng(len(name))
        worst[name] = 0.0
        for _ in range(25):
            spec = make(rng)
            layout = layout_unknowns(spec)
            n = int(rng.integers(1, 21))
            xs = rng.standard_normal((n, spec.input_dim))
            ys = rng.standard_normal((n, spec.output_dim))
            jacs = rng.standard_normal((n, spec.output_dim, spec.input_dim))
            c = explicit_coefficient_matrix(layout, xs, ys, jacs)
            acc = GramAccumulator(spec)
            acc.add_points(xs, ys, jacs)
            sv = acc.finalize().singular_values
            ref = np.zeros(layout.total_dim)
            s = np.linalg.svd(c, compute_uv=False)[:layout.total_dim]
            ref[:len(s)] = s
            err = np.max(np.abs(sv - ref)) / ref[0]
            worst[name] = max(worst[name], err)
            assert np.allclose(constraint_rows(layout, xs, ys, jacs).reshape(c.shape), c, atol=1e-12)
    ok = max(worst.values()) <= 1e-7
    emit(capsys, 1, ok, "max rel error " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items()))
    assert ok


# ---------------------------------------------------------------- 2

_EXACT = {}


def _exact_cases():
    if not _EXACT:
        rng = np.random.default_rng(0)
        cases = [
            ("a", "sq_norm", SqNorm(), rng.standard_normal((200, 2)),
             SpaceSpec(Channels(2), Channels(1), frozenset({INVARIANT_OUTPUT})), "sq_norm", 1, 1e-8),
            ("b", "minkowski", MinkowskiBilinear(), rng.standard_normal((2000, 8)), lorentz_spec(),
             "lorentz", 6, 1e-6),
            ("c", "inertia", Inertia(), gen_inertia(3, 1000, seed=0).inputs, inertia_spec(True),
             "inertia", 5, 1e-6),
        ]
        for key, label, oracle, xs, spec, task, want_d, tol in cases:
            basis, _ = discover(oracle, xs, spec)
            err = space_error(basis.vectors, ground_truth_library(task).vectors)
            good = basis.D == want_d and err <= tol
            _EXACT[key] = (label, good, f"({key}) {label} D={basis.D} (want {want_d}) "
                                        f"E_space={err:.1e} (<= {tol:g})")
            if good:
                ELIGIBLE[f"2{key}"] = ("analytic", oracle, basis, xs)
    return _EXACT


def test_criterion_2_exact_oracles(capsys):
    cases = _exact_cases()
    ok = all(c[1] for c in cases.values())
    emit(capsys, 2, ok, "; ".join(c[2] for c in cases.values()))
    assert ok


# ---------------------------------------------------------------- 3, 4

def _two_body_summary(report):
    disc = report["discovery"]
    sv = np.asarray(disc["singular_values"])
    gap_metrics = report["metrics"]["by_policy"]["gap"]
    return disc["dimension"], sv[-1] / sv[0], gap_metrics


def test_criterion_3_two_body(capsys, runs):
    cfg, report = _run(runs, "two_body")
    dims, ratio, gap = _two_body_summary(report)
    count_ok = dims["threshold"] == 1
    space_ok = gap["D"] == 1 and gap["E_space"] <= 0.15
    orth_ok = gap["E_orth"] == 0.0
    ok = count_ok and space_ok and orth_ok
    emit(capsys, 3, ok,
         f"count below 1e-3*σ_max = {dims['threshold']} (want 1), σ_min/σ_max = {ratio:.2e}; "
         f"gap-policy D={gap['D']}, E_space={gap['E_space']:.2e} (<= 0.15), E_orth={gap['E_orth']}; "
         f"train loss {report['training']['final_loss']:.2e}")
    assert count_ok, "singular value count below tau differs from 1"
    assert space_ok and orth_ok


def test_criterion_4_two_body_nonuniform(capsys, runs):
    cfg, report = _run(runs, "two_body_nonuniform")
    dims, ratio, gap = _two_body_summary(report)
    ok = gap["D"] == 1 and gap["E_space"] <= 0.3
    emit(capsys, 4, ok, f"gap-policy D={gap['D']}, E_space={gap['E_space']:.2e} (<= 0.3); "
                        f"threshold count {dims['threshold']}, σ_min/σ_max = {ratio:.2e}")
    assert ok


# ---------------------------------------------------------------- 5

def test_criterion_5_inertia_tensor_vs_vector(capsys, runs):
    (tcfg, trep), (vcfg, vrep) = _inertia_pair(runs)
    t_count = trep["discovery"]["near_zero_count"]
    v_count = vrep["discovery"]["near_zero_count"]
    t_err = trep["metrics"]["E_space"]
    v_err = vrep["metrics"]["E_space"]
    sv = np.asarray(trep["discovery"]["singular_values"])
    # diagnostic only: how good the five smallest directions are
    oracle = load_oracle(tcfg)
    inputs = load_dataset(runs["root"] / "inertia_tensor_0" / "dataset.json").inputs[:10_000]
    acc = GramAccumulator(tcfg.spec())
    acc.accumulate_dataset(oracle, inputs)
    tail5 = extract_bases(acc.finalize(), acc.layout, 5).vectors
    tail5_err = space_error(tail5, ground_truth_library("inertia").vectors)

    tensor_ok = t_count == 5 and t_err <= 1e-2
    vector_ok = v_count >= 20 and v_err >= 1
    ordering_ok = t_count < v_count and t_err < v_err
    ok = tensor_ok and vector_ok and ordering_ok
    emit(capsys, 5, ok,
         f"tensor: near-zero {t_count} (want 5), E_space {t_err:.2e} (<= 1e-2), "
         f"σ[-6:]/σ_max = {np.array2string(sv[-6:] / sv[0], precision=2)}, "
         f"five smallest directions E_space {tail5_err:.2e}; "
         f"vector: near-zero {v_count} (>= 20), E_space {v_err:.2f} (>= 1)")
    assert vector_ok and ordering_ok
    assert tensor_ok, "tensor spec did not isolate five near-zero singular values"


# ---------------------------------------------------------------- 6

def _central_diff(f, x, h=1e-5):
    cols = []
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = h
        cols.append((f(x + e) - f(x - e)) / (2 * h))
    return np.stack(cols, axis=-1)


def _fd_error(model, xs):
    worst = 0.0
    for x in xs:
        fd = _central_diff(model.eval, x)
        floor = 1e-6 * (1.0 + np.max(np.abs(fd)))
        worst = max(worst, float(np.max(np.abs(model.jacobian(x) - fd) / (np.abs(fd) + floor))))
    return worst


def _kink_free(model, candidates, n=20, margin=1e-3):
    out = []
    for x in candidates:
        pre, _ = model._forward(x[None])
        if model.activation == "tanh" or min(np.min(np.abs(z)) for z in pre[:-1]) > margin:
            out.append(x)
        if len(out) == n:
            break
    return out


def test_criterion_6_jacobians(capsys, runs):
    parts, ok = [], True
    for preset in ("two_body", "inertia_tensor"):
        cfg, _ = _run(runs, preset)
        model = load_oracle(cfg)
        xs = heldout_inputs(cfg)
        pts = _kink_free(model, xs[np.random.default_rng(0).permutation(len(xs))])
        err = _fd_error(model, pts)
        ok &= len(pts) == 20 and err <= 1e-4
        parts.append(f"{model.layer_dims} {model.activation}: {len(pts)} points, max rel error {err:.1e}")
    emit(capsys, 6, ok, "; ".join(parts))
    assert ok


# ---------------------------------------------------------------- 7

def test_criterion_7_group_action_loop_closure(capsys, runs):
    # recompute eligibility so this test does not depend on the others having run
    _exact_cases()
    tb, nu = _run(runs, "two_body"), _run(runs, "two_body_nonuniform")
    (tcfg, trep), _ = _inertia_pair(runs)
    for key, (cfg, report), bound in (("3", tb, 0.15), ("4", nu, 0.3)):
        gap = report["metrics"]["by_policy"]["gap"]
        if gap["D"] == 1 and gap["E_space"] <= bound:
            ELIGIBLE[key] = ("trained", cfg, report)
    if trep["discovery"]["near_zero_count"] == 5 and trep["metrics"]["E_space"] <= 1e-2:
        ELIGIBLE["5"] = ("trained", tcfg, trep)
    parts, ok = [], True
    for key, entry in sorted(ELIGIBLE.items()):
        if entry[0] == "analytic":
            _, oracle, basis, xs = entry
            bound = 1e-8
        else:
            _, cfg, report = entry
            oracle = load_oracle(cfg)
            basis = basis_from_report(cfg, report)
            xs = heldout_inputs(cfg)
            bound = 0.05
        stats = equivariance_residual(oracle, basis, xs, alpha_scale=0.3, n_points=100)
        zero = equivariance_residual(oracle, basis, xs, alpha_scale=0.0, n_points=100)
        good = stats.mean <= bound and zero.max == 0.0
        ok &= good
        parts.append(f"[{key}] mean {stats.mean:.1e} (<= {bound:g}), at α=0 {zero.max:g}")
    ok &= len(ELIGIBLE) > 0
    emit(capsys, 7, ok, "; ".join(parts) or "no eligible bases")
    assert ok


# ---------------------------------------------------------------- 8

def test_criterion_8_metric_truths(capsys):
    rng = np.random.default_rng(0)
    v, _ = np.linalg.qr(rng.standard_normal((10, 3)))
    q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
    same = space_error(v, v)
    rotated = space_error(v, v @ q)
    basis, _ = discover(Inertia(), gen_inertia(3, 500, seed=1).inputs, inertia_spec(True))
    orth = orthogonality_error(basis.vectors)
    e1 = np.array([1.0, 0.0, 0.0])
    dup = orthogonality_error(np.column_stack([e1, e1]))
    ok = same <= 1e-24 and rotated <= 1e-10 and orth <= 1e-9 and dup == 1.0
    emit(capsys, 8, ok, f"E_space(V,V)={same:.1e}, E_space(V,VQ)={rotated:.1e}, "
                        f"E_orth(discovered)={orth:.1e}, E_orth([e1,e1])={dup}")
    assert ok


# ---------------------------------------------------------------- 9

def test_criterion_9_determinism_and_merge(capsys, runs):
    cfg, _ = _run(runs, "two_body")
    _, _ = _run(runs, "two_body", tag="two_body_0_repeat")
    a = (runs["root"] / "two_body_0" / "report.json").read_bytes()
    b = (runs["root"] / "two_body_0_repeat" / "report.json").read_bytes()
    identical = a == b

    oracle = load_oracle(cfg)
    xs = load_dataset(runs["root"] / "two_body_0" / "dataset.json").inputs
    single = GramAccumulator(cfg.spec())
    single.accumulate_dataset(oracle, xs)
    shards = [GramAccumulator(cfg.spec()) for _ in range(4)]
    for acc, part in zip(shards, np.array_split(xs, 4)):
        acc.accumulate_dataset(oracle, part)
    merged = shards[0] + shards[1] + shards[2] + shards[3]
    diff = np.max(np.abs(merged.gram - single.gram)) / np.max(np.abs(single.gram))
    ok = identical and diff <= 1e-12
    emit(capsys, 9, ok, f"report.json byte-identical: {identical}; sharded vs single-pass Gram "
                        f"rel diff {diff:.1e}")
    assert ok
