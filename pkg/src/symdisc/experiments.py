"""Experiment pipeline: generate, train, discover, evaluate, validate.

Each stage reads the artifacts of the previous ones from the output
directory and merges its section into ``report.json``, so running the
stages one by one from the command line gives the same report as
:func:`run_experiment`.  Wall-clock timings go to ``timings.json`` so the
report itself is byte-for-byte reproducible.
"""
from __future__ import annotations

import copy
import json
import logging
import time
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .datasets import (
    Dataset,
    TwoBodyConfig,
    gen_inertia,
    gen_lorentz_pair,
    gen_two_body,
    inertia_spec,
    load_dataset,
    lorentz_spec,
    save_dataset,
    shuffle_non_uniform,
    two_body_spec,
)
from .discovery import GAP, THRESHOLD, GramAccumulator, LieBasisSet, discover, extract_bases
from .metrics import equivariance_residual, ground_truth_library, orthogonality_error, space_error
from .oracles import TrainConfig, analytic_oracle, load_model, save_model, train_mlp
from .spaces import SpaceSpec, layout_unknowns

log = logging.getLogger(__name__)

SCHEMA_VERSION = "1.0"
STAGES = ("gen", "train", "discover", "eval", "validate")
PRESETS = ("two_body", "two_body_nonuniform", "inertia_tensor", "inertia_vector_ablation",
           "lorentz_invariant", "custom")
_SECTIONS = ("data", "model", "train", "space_spec", "discovery", "validation", "ground_truth")
HELDOUT_SEED_OFFSET = 10_000


class ConfigError(ValueError):
    pass


class ReportVersionError(ValueError):
    pass


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it and ``cause`` holds the original error."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


# ---------------------------------------------------------------- configs

def _two_body_preset(non_uniform: bool) -> dict:
    data = {"generator": "two_body", "non_uniform": non_uniform}
    data.update(TwoBodyConfig().to_dict())
    data.pop("seed")
    return {
        "data": data,
        "model": {"kind": "mlp", "layer_dims": [8, 384, 384, 8], "activation": "tanh"},
        "train": {"epochs": 10, "batch_size": 32, "learning_rate": 3e-3, "lr_schedule": "cosine"},
        "space_spec": two_body_spec().to_dict(),
        # the learned flow map leaves spurious directions well above 1e-3 * σ_max,
        # so the threshold rule selects nothing; the gap rule isolates the rotation
        "discovery": {"policy": GAP, "tau": 1e-3, "subset_fraction": 1.0, "batch_size": 2048},
        "validation": {"alpha_scale": 0.3, "n_points": 100, "n_group_samples": 10},
        "ground_truth": "two_body",
    }


def _inertia_preset(tensor_output: bool) -> dict:
    return {
        "data": {"generator": "inertia", "n_particles": 3, "n_samples": 100_000,
                 "tensor_output": tensor_output},
        "model": {"kind": "mlp", "layer_dims": [9, 384, 384, 9], "activation": "relu"},
        "train": {"epochs": 100, "batch_size": 128, "learning_rate": 1e-3, "lr_schedule": "cosine"},
        "space_spec": inertia_spec(tensor_output).to_dict(),
        "discovery": {"policy": THRESHOLD, "tau": 1e-3, "subset_fraction": 0.1, "batch_size": 2048},
        "validation": {"alpha_scale": 0.3, "n_points": 100, "n_group_samples": 10},
        "ground_truth": "inertia" if tensor_output else "inertia_vector",
    }


def _lorentz_preset() -> dict:
    return {
        "data": {"generator": "lorentz_pair", "n_samples": 2000},
        "model": {"kind": "analytic", "name": "minkowski_bilinear"},
        "train": None,
        "space_spec": lorentz_spec().to_dict(),
        "discovery": {"policy": THRESHOLD, "tau": 1e-3, "subset_fraction": 1.0, "batch_size": 2048},
        "validation": {"alpha_scale": 0.3, "n_points": 100, "n_group_samples": 10},
        "ground_truth": "lorentz",
    }


def preset_dict(name: str) -> dict:
    if name == "two_body":
        d = _two_body_preset(False)
    elif name == "two_body_nonuniform":
        d = _two_body_preset(True)
    elif name == "inertia_tensor":
        d = _inertia_preset(True)
    elif name == "inertia_vector_ablation":
        d = _inertia_preset(False)
    elif name == "lorentz_invariant":
        d = _lorentz_preset()
    else:
        raise ConfigError(f"unknown preset {name!r}; expected one of {PRESETS[:-1]}")
    d["preset"] = name
    return d


def _deep_merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass
class ExperimentConfig:
    preset: str
    data: dict
    model: dict
    train: dict | None
    space_spec: dict
    discovery: dict
    validation: dict
    ground_truth: str | None = None
    seed: int = 0
    out_dir: str = "out"

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}; expected one of {PRESETS}")
        try:
            self.spec()
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad space_spec: {exc}") from exc
        if self.model.get("kind") not in ("mlp", "analytic"):
            raise ConfigError("model.kind must be 'mlp' or 'analytic'")
        if self.model["kind"] == "mlp" and not self.train:
            raise ConfigError("an mlp model needs a train section")
        if self.discovery.get("policy", THRESHOLD) not in (THRESHOLD, GAP):
            raise ConfigError(f"unknown policy {self.discovery.get('policy')!r}")
        frac = self.discovery.get("subset_fraction", 1.0)
        if not 0 < frac <= 1:
            raise ConfigError("discovery.subset_fraction must lie in (0, 1]")
        self.seed = int(self.seed)

    def spec(self) -> SpaceSpec:
        return SpaceSpec.from_dict(self.space_spec)

    def train_config(self) -> TrainConfig:
        return TrainConfig(seed=self.seed, **self.train)

    def to_dict(self, include_out: bool = True) -> dict:
        d = {k: copy.deepcopy(getattr(self, k)) for k in _SECTIONS}
        d["preset"] = self.preset
        d["seed"] = self.seed
        if include_out:
            d["out_dir"] = self.out_dir
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        preset = d.get("preset", "custom")
        if preset == "custom":
            missing = [k for k in _SECTIONS if k not in d]
            if missing:
                raise ConfigError(f"custom config is missing {missing}")
            merged = d
        else:
            merged = _deep_merge(preset_dict(preset), d)
        unknown = set(merged) - set(_SECTIONS) - {"preset", "seed", "out_dir"}
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        merged["preset"] = preset
        return cls(**merged)

    @classmethod
    def preset_config(cls, name: str, seed: int = 0, out_dir: str = "out", **overrides):
        return cls.from_dict(dict(overrides, preset=name, seed=seed, out_dir=out_dir))


def load_config(path) -> ExperimentConfig:
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(d, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    return ExperimentConfig.from_dict(d)


# ---------------------------------------------------------------- reports

def _dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n"


def save_report(report: dict, out_dir) -> Path:
    path = Path(out_dir) / "report.json"
    path.write_text(_dumps(report))
    return path


def load_report(path) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / "report.json"
    report = json.loads(path.read_text())
    version = str(report.get("schema_version", ""))
    major = version.split(".")[0]
    if major != SCHEMA_VERSION.split(".")[0]:
        raise ReportVersionError(f"report schema version {version!r} not supported (expected {SCHEMA_VERSION})")
    return report


def _new_report(cfg: ExperimentConfig) -> dict:
    return {"schema_version": SCHEMA_VERSION, "config": cfg.to_dict(include_out=False)}


def _existing_report(cfg: ExperimentConfig) -> dict:
    path = Path(cfg.out_dir) / "report.json"
    if path.exists():
        report = load_report(path)
        report["config"] = cfg.to_dict(include_out=False)
        return report
    return _new_report(cfg)


# ---------------------------------------------------------------- stages

def _generate(data: dict, seed: int) -> Dataset:
    params = dict(data)
    gen = params.pop("generator")
    if gen == "two_body":
        non_uniform = params.pop("non_uniform", False)
        d = gen_two_body(TwoBodyConfig(seed=seed, **params))
        return shuffle_non_uniform(d) if non_uniform else d
    if gen == "inertia":
        return gen_inertia(params["n_particles"], params["n_samples"], seed, params["tensor_output"])
    if gen == "lorentz_pair":
        return gen_lorentz_pair(params["n_samples"], seed)
    raise ConfigError(f"unknown data generator {gen!r}")


def heldout_inputs(cfg: ExperimentConfig) -> np.ndarray:
    """Fresh inputs from the same generator under an offset seed."""
    data = dict(cfg.data)
    if data["generator"] == "two_body":
        data["n_trajectories"] = min(5, data.get("n_trajectories", 5))
    elif "n_samples" in data:
        data["n_samples"] = min(1000, data["n_samples"])
    return _generate(data, cfg.seed + HELDOUT_SEED_OFFSET).inputs


def stage_gen(cfg: ExperimentConfig, report: dict) -> Dataset:
    d = _generate(cfg.data, cfg.seed)
    save_dataset(d, Path(cfg.out_dir) / "dataset.json")
    report["dataset"] = {"name": d.name, "n": len(d), "input_dim": d.input_dim,
                         "output_dim": d.output_dim}
    return d


def _dataset_path(cfg: ExperimentConfig) -> Path:
    path = Path(cfg.out_dir) / "dataset.json"
    if not path.exists():
        raise FileNotFoundError(f"dataset not found: {path}")
    return path


def stage_train(cfg: ExperimentConfig, report: dict, dataset: Dataset | None = None):
    if cfg.model["kind"] == "analytic":
        oracle = analytic_oracle(cfg.model["name"])
        report["training"] = {"skipped": True, "oracle": cfg.model["name"]}
        return oracle
    if dataset is None:
        dataset = load_dataset(_dataset_path(cfg))
    tc = cfg.train_config()
    model, loss = train_mlp(dataset.inputs, dataset.outputs, tc, cfg.model["layer_dims"],
                            cfg.model["activation"])
    save_model(model, Path(cfg.out_dir) / "model.json")
    var = float(np.mean(np.var(dataset.outputs, axis=0)))
    report["training"] = {"skipped": False, "final_loss": loss, "output_variance": var,
                          "relative_loss": loss / var if var > 0 else None,
                          "config": tc.to_dict()}
    return model


def load_oracle(cfg: ExperimentConfig):
    if cfg.model["kind"] == "analytic":
        return analytic_oracle(cfg.model["name"])
    path = Path(cfg.out_dir) / "model.json"
    if not path.exists():
        raise FileNotFoundError(f"model checkpoint not found: {path}")
    return load_model(path)


def _discovery_inputs(cfg: ExperimentConfig, dataset: Dataset) -> np.ndarray:
    frac = cfg.discovery.get("subset_fraction", 1.0)
    n = max(1, int(round(frac * len(dataset))))
    return dataset.inputs[:n]


def stage_discover(cfg: ExperimentConfig, report: dict, oracle=None, dataset: Dataset | None = None):
    if dataset is None:
        dataset = load_dataset(_dataset_path(cfg))
    if oracle is None:
        oracle = load_oracle(cfg)
    basis, frag = discover(oracle, _discovery_inputs(cfg, dataset), cfg.spec(),
                           policy=cfg.discovery.get("policy", THRESHOLD),
                           tau=cfg.discovery.get("tau", 1e-3),
                           batch_size=cfg.discovery.get("batch_size", 2048))
    frag["near_zero_count"] = frag["dimension"]["threshold"]
    frag["basis"] = basis.to_dict()
    report["discovery"] = frag
    _write_csvs(Path(cfg.out_dir), basis)
    return basis


def _write_csvs(out: Path, basis: LieBasisSet) -> None:
    sv = basis.singular_values
    lines = ["index,singular_value"] + [f"{i},{s!r}" for i, s in enumerate(sv.tolist())]
    (out / "spectrum.csv").write_text("\n".join(lines) + "\n")
    for old in out.glob("basis_*.csv"):
        old.unlink()
    for i, mats in enumerate(basis.matrices):
        for fid, m in mats.items():
            rows = [",".join(repr(float(v)) for v in row) for row in np.atleast_2d(m)]
            (out / f"basis_{i}_{fid}.csv").write_text("\n".join(rows) + "\n")


def basis_from_report(cfg: ExperimentConfig, report: dict, D: int | None = None) -> LieBasisSet:
    """Rebuild a basis set from a report; ``D`` picks a different count of tail vectors.

    The report only stores the chosen vectors, so a larger ``D`` is not
    available from it.
    """
    disc = report.get("discovery")
    if disc is None:
        raise FileNotFoundError("report has no discovery section; run discover first")
    layout = layout_unknowns(cfg.spec())
    vecs = np.asarray(disc["basis"]["vectors"], dtype=np.float64).reshape(-1, layout.total_dim).T
    if D is not None:
        if D > vecs.shape[1]:
            raise ValueError(f"report holds {vecs.shape[1]} vectors, asked for {D}")
        vecs = vecs[:, :D]
    mats = [layout.unpack(vecs[:, i]) for i in range(vecs.shape[1])]
    return LieBasisSet(layout, np.asarray(disc["singular_values"]), vecs, mats)


def _tail_vectors(cfg: ExperimentConfig, oracle, dataset: Dataset, D: int) -> np.ndarray:
    acc = GramAccumulator(cfg.spec())
    acc.accumulate_dataset(oracle, _discovery_inputs(cfg, dataset),
                           batch_size=cfg.discovery.get("batch_size", 2048))
    return extract_bases(acc.finalize(), acc.layout, D).vectors


def _subspace_metrics(V: np.ndarray, truth) -> dict:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        e_space = space_error(V, truth.vectors) if truth is not None else None
    return {"D": int(V.shape[1]), "E_space": e_space, "E_orth": orthogonality_error(V)}


def stage_eval(cfg: ExperimentConfig, report: dict, basis: LieBasisSet | None = None,
               oracle=None, dataset: Dataset | None = None) -> dict:
    """Space and orthogonality errors of the chosen basis and of each policy's basis."""
    if basis is None:
        basis = basis_from_report(cfg, report)
    truth = ground_truth_library(cfg.ground_truth) if cfg.ground_truth else None
    out = _subspace_metrics(basis.vectors, truth)
    out["ground_truth"] = cfg.ground_truth
    out["ground_truth_dim"] = truth.D if truth is not None else None
    dims = report["discovery"]["dimension"]
    by_policy = {}
    for pol in (THRESHOLD, GAP):
        D = dims[pol]
        if D == basis.D:
            V = basis.vectors
        elif D < basis.D:
            V = basis.vectors[:, :D]
        else:
            if dataset is None:
                dataset = load_dataset(_dataset_path(cfg))
            if oracle is None:
                oracle = load_oracle(cfg)
            V = _tail_vectors(cfg, oracle, dataset, D)
        by_policy[pol] = _subspace_metrics(V, truth)
    out["by_policy"] = by_policy
    report["metrics"] = out
    return out


def stage_validate(cfg: ExperimentConfig, report: dict, basis: LieBasisSet | None = None,
                   oracle=None) -> dict:
    if basis is None:
        basis = basis_from_report(cfg, report)
    if oracle is None:
        oracle = load_oracle(cfg)
    v = cfg.validation
    xs = heldout_inputs(cfg)
    stats = equivariance_residual(oracle, basis, xs, alpha_scale=v["alpha_scale"],
                                  n_points=v["n_points"], n_group_samples=v["n_group_samples"],
                                  seed=cfg.seed)
    zero = equivariance_residual(oracle, basis, xs, alpha_scale=0.0, n_points=v["n_points"],
                                 n_group_samples=1, seed=cfg.seed)
    out = {"alpha_scale": v["alpha_scale"], "residual": stats.to_dict(),
           "identity_residual": zero.to_dict()}
    report["validation"] = out
    return out


def _mark_failed(out: Path, stage: str, exc: BaseException) -> None:
    try:
        (out / "FAILED").write_text(f"stage: {stage}\nerror: {type(exc).__name__}: {exc}\n")
    except OSError:
        pass


def run_stage(cfg: ExperimentConfig, stage: str, **kw):
    """Run one stage against the artifacts in ``cfg.out_dir`` and update the report."""
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}")
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report = kw.pop("report", None)
    if report is None:
        report = _new_report(cfg) if stage == "gen" else _existing_report(cfg)
    fn = {"gen": stage_gen, "train": stage_train, "discover": stage_discover,
          "eval": stage_eval, "validate": stage_validate}[stage]
    t0 = time.perf_counter()
    try:
        result = fn(cfg, report, **kw)
    except Exception as exc:
        _mark_failed(out, stage, exc)
        raise StageError(stage, exc) from exc
    _record_timing(out, stage, time.perf_counter() - t0)
    save_report(report, out)
    return result, report


def _record_timing(out: Path, stage: str, seconds: float) -> None:
    path = out / "timings.json"
    timings = json.loads(path.read_text()) if path.exists() else {}
    timings[stage] = seconds
    path.write_text(_dumps(timings))


def run_experiment(config: ExperimentConfig) -> dict:
    """Execute every stage in process and return the final report."""
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for stale in ("FAILED", "timings.json"):
        if (out / stale).exists():
            (out / stale).unlink()
    report = _new_report(config)
    dataset, _ = run_stage(config, "gen", report=report)
    oracle, _ = run_stage(config, "train", report=report, dataset=dataset)
    basis, _ = run_stage(config, "discover", report=report, oracle=oracle, dataset=dataset)
    run_stage(config, "eval", report=report, basis=basis, oracle=oracle, dataset=dataset)
    run_stage(config, "validate", report=report, basis=basis, oracle=oracle)
    log.info("report written to %s", out / "report.json")
    return report


# ---------------------------------------------------------------- sweeps

def _summary(values: list[float]) -> dict:
    if not values:
        return {"mean": None, "min": None, "max": None}
    a = np.asarray(values, dtype=np.float64)
    return {"mean": float(a.mean()), "min": float(a.min()), "max": float(a.max())}


def run_sweep(config: ExperimentConfig, seeds) -> dict:
    """Run ``config`` once per seed under ``<out>/seed_<s>`` and aggregate the errors."""
    seeds = [int(s) for s in seeds]
    if not seeds:
        raise ConfigError("run_sweep needs at least one seed")
    root = Path(config.out_dir)
    root.mkdir(parents=True, exist_ok=True)
    entries, failures = [], 0
    for s in seeds:
        d = config.to_dict()
        d.update(seed=s, out_dir=str(root / f"seed_{s}"))
        cfg = ExperimentConfig.from_dict(d)
        try:
            rep = run_experiment(cfg)
        except (StageError, OSError) as exc:
            failures += 1
            log.warning("seed %d failed: %s", s, exc)
            entries.append({"seed": s, "status": "failed", "error": str(exc)})
            continue
        m = rep["metrics"]
        entries.append({"seed": s, "status": "ok", "E_space": m["E_space"], "E_orth": m["E_orth"],
                        "D": rep["discovery"]["dimension"]})
    ok = [e for e in entries if e["status"] == "ok"]
    agg = {
        "schema_version": SCHEMA_VERSION,
        "preset": config.preset,
        "seeds": seeds,
        "entries": entries,
        "n_ok": len(ok),
        "warnings": failures,
        "E_space": _summary([e["E_space"] for e in ok if e["E_space"] is not None]),
        "E_orth": _summary([e["E_orth"] for e in ok]),
    }
    (root / "aggregate.json").write_text(_dumps(agg))
    if failures:
        warnings.warn(f"{failures} of {len(seeds)} seeds failed", RuntimeWarning, stacklevel=2)
    return agg
