"""
Seeded experiment runner: configuration, dataset generation and
persistence, algorithm dispatch and CSV emission.

Config files are flat ``section.key = value`` lines with sections
``model``, ``algorithm``, ``run`` and ``output``. ``#`` starts a comment,
values are parsed as int, float, ``true``/``false`` or a bare string. The
only environment override is ``OUTPUT_DIR``, which replaces ``output.dir``.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
import subprocess
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import __version__
from .diagnostics import ChainDiagnostics, count_unique_rows, log_relative_mse
from .engine import SmcmcConfig, SmcmcFilter
from .kalman import kalman_filter
from .kernels import (
    HMCKernel,
    MALAKernel,
    MHMCKernel,
    SimplifiedSmMALAKernel,
    SmMALAKernel,
    StepSizeAdapter,
    default_step_size,
)
from .models import (
    GaussianModelParams,
    LinearGaussianModel,
    PoissonObsParams,
    SensorGrid,
    default_ghcount_model,
)
from .smc import ParticleSet, block_sir_step, resample_move_step, sir_step

log = logging.getLogger(__name__)

ALGORITHMS = {
    "sir": "bootstrap SIR with systematic resampling at weight ESS < threshold*N",
    "block_sir": "block SIR with independent per-block resampling",
    "sir_rm": "SIR followed by K manifold HMC moves per particle",
    "smcmc_prior": "SMCMC with the composite prior-based kernel",
    "smcmc_optimal": "SMCMC with the exact independent kernel (gaussian only)",
    "smala": "SMCMC with pre-conditioned MALA (preconditioner = transition covariance)",
    "smmala": "SMCMC with manifold MALA",
    "simplified_smmala": "SMCMC with simplified manifold MALA",
    "shmc": "SMCMC with HMC, identity mass matrix",
    "smhmc": "SMCMC with manifold HMC and the generalized leapfrog",
}
MODEL_TYPES = ("gaussian", "gh_poisson")
GRADIENT_ALGOS = ("smala", "smmala", "simplified_smmala", "shmc", "smhmc")

STEP_COLUMNS = [
    "run", "n", "algo", "mse", "log_rel_mse", "ess_min", "ess_med", "ess_mean", "ess_max",
    "accept_joint", "accept_refine", "accept_kernel", "unique_ancestors", "wall_ms",
]
EXTRA_STEP_COLUMNS = ["build", "weight_ess", "parent_indices"]
SUMMARY_COLUMNS = [
    "run", "algo", "model", "d", "N", "T", "mse", "log_rel_mse", "ess_min", "ess_med", "ess_mean",
    "ess_max", "accept_joint", "accept_refine", "accept_kernel", "unique_ancestors_min",
    "wall_ms_per_step", "kalman_mse", "kalman_var", "build",
]


class ConfigError(ValueError):
    pass


# Configuration.


@dataclass
class ModelBlock:
    type: str = "gaussian"
    d: int = 16
    alpha: float = 0.9
    sigma_y2: float = 2.0
    alpha0: float = 3.0
    alpha1: float = 0.01
    beta: float = 20.0
    nu: float = 7.0
    gamma: float = 0.3
    m1: float = 1.0
    m2: float = 1.0 / 3.0
    grid: str = ""  # optional sensor CSV (k,sx,sy); default is a square grid


@dataclass
class AlgorithmBlock:
    name: str = "smhmc"
    N: int = 200
    burn_in_fraction: float = 0.1
    eps: float = 0.0  # 0 selects the dimension-scaled default
    n_leapfrog: int = 0  # 0 selects 20 (HMC) or 10 (manifold HMC)
    n_fixed_point: int = 2
    jitter: float = 0.2
    K: int = 1
    pilot: int = 20
    block_size: int = 4
    threshold: float = 0.5
    ancestor_mode: str = "uniform"
    within_block: str = "prior"
    adapt: bool = True


@dataclass
class RunBlock:
    T: int = 10
    n_runs: int = 1
    seed: int = 0
    data_seed: int = -1  # -1 reuses ``seed``
    timing: bool = True
    workers: int = 1


@dataclass
class OutputBlock:
    dir: str = "results"
    per_dimension: bool = False


@dataclass
class ExperimentConfig:
    model: ModelBlock = field(default_factory=ModelBlock)
    algorithm: AlgorithmBlock = field(default_factory=AlgorithmBlock)
    run: RunBlock = field(default_factory=RunBlock)
    output: OutputBlock = field(default_factory=OutputBlock)

    def validate(self) -> "ExperimentConfig":
        m, a = self.model, self.algorithm
        if m.type not in MODEL_TYPES:
            raise ConfigError(f"model.type must be one of {MODEL_TYPES}, got {m.type!r}")
        if a.name not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {a.name!r}; see list-algos")
        if a.name == "smcmc_optimal" and m.type != "gaussian":
            raise ConfigError("smcmc_optimal requires model.type = gaussian")
        if m.d < 1 or a.N < 1 or self.run.T < 1 or self.run.n_runs < 0:
            raise ConfigError("d, N and T must be positive and n_runs non-negative")
        if a.name in ("sir", "block_sir", "sir_rm") and a.N < 2:
            raise ConfigError("particle filters need N >= 2")
        if not m.grid and math.isqrt(m.d) ** 2 != m.d:
            raise ConfigError(f"model.d = {m.d} is not a perfect square; give model.grid")
        SmcmcConfig(a.N, a.burn_in_fraction, a.ancestor_mode, a.block_size, a.within_block)
        return self

    @property
    def data_seed(self) -> int:
        return self.run.seed if self.run.data_seed < 0 else self.run.data_seed


def _parse_value(raw: str):
    s = raw.strip()
    low = s.lower()
    if low in ("true", "false"):
        return low == "true"
    for conv in (int, float):
        try:
            return conv(s)
        except ValueError:
            pass
    return s


def parse_config(text: str) -> ExperimentConfig:
    cfg = ExperimentConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'section.key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        if key.count(".") != 1:
            raise ConfigError(f"line {lineno}: key {key!r} must be 'section.key'")
        section, name = key.split(".")
        block = getattr(cfg, section, None)
        if block is None or section not in ("model", "algorithm", "run", "output"):
            raise ConfigError(f"line {lineno}: unknown section {section!r}")
        types = {f.name: f.type for f in fields(block)}
        if name not in types:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        v = _parse_value(value)
        t = types[name]
        if t in ("float", float) and isinstance(v, int) and not isinstance(v, bool):
            v = float(v)
        elif t in ("str", str):
            v = value
        elif t in ("int", int) and not (isinstance(v, int) and not isinstance(v, bool)):
            raise ConfigError(f"line {lineno}: {key} expects an integer, got {value!r}")
        elif t in ("bool", bool) and not isinstance(v, bool):
            raise ConfigError(f"line {lineno}: {key} expects true/false, got {value!r}")
        elif t in ("float", float) and not isinstance(v, float):
            raise ConfigError(f"line {lineno}: {key} expects a number, got {value!r}")
        setattr(block, name, v)
    if os.environ.get("OUTPUT_DIR"):
        cfg.output.dir = os.environ["OUTPUT_DIR"]
    return cfg.validate()


def load_config(path) -> ExperimentConfig:
    return parse_config(Path(path).read_text())


def format_config(cfg: ExperimentConfig) -> str:
    lines = []
    for section in ("model", "algorithm", "run", "output"):
        for k, v in asdict(getattr(cfg, section)).items():
            v = str(v).lower() if isinstance(v, bool) else repr(v) if isinstance(v, float) else v
            lines.append(f"{section}.{k} = {v}")
    return "\n".join(lines) + "\n"


# Models and datasets.


def build_model(mb: ModelBlock):
    grid = SensorGrid.from_csv(mb.grid) if mb.grid else SensorGrid.square(mb.d)
    if grid.dim != mb.d:
        raise ConfigError(f"grid has {grid.dim} sensors but model.d = {mb.d}")
    if mb.type == "gaussian":
        return LinearGaussianModel(GaussianModelParams(mb.alpha, mb.sigma_y2, mb.alpha0, mb.alpha1, mb.beta), grid)
    return default_ghcount_model(
        grid, mb.nu, mb.gamma, mb.alpha, mb.alpha0, mb.alpha1, mb.beta, PoissonObsParams(mb.m1, mb.m2)
    )


def model_fingerprint(mb: ModelBlock) -> str:
    blob = json.dumps(asdict(mb), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class Dataset:
    x: np.ndarray  # (T, d) latent states
    y: np.ndarray  # (T, d) observations
    seed: int
    fingerprint: str

    @property
    def T(self) -> int:
        return self.x.shape[0]


def generate_dataset(cfg: ExperimentConfig, seed: Optional[int] = None) -> Dataset:
    """Forward-simulate T steps from the zero anchor with ``default_rng(seed)``."""
    seed = cfg.data_seed if seed is None else seed
    model = build_model(cfg.model)
    rng = np.random.default_rng(seed)
    T, d = cfg.run.T, model.dim
    xs, ys = np.empty((T, d)), np.empty((T, model.obs_dim))
    x = model.initial_state()
    for n in range(T):
        x = model.sample_transition(x, rng)
        xs[n] = x
        ys[n] = model.sample_observation(x, rng)
    return Dataset(xs, ys, seed, model_fingerprint(cfg.model))


def save_dataset(ds: Dataset, path) -> None:
    """CSV with header ``n,kind,k,value`` plus a JSON sidecar with seed and fingerprint."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["n", "kind", "k", "value"])
        for n in range(ds.T):
            for kind, arr in (("x", ds.x), ("y", ds.y)):
                for k, v in enumerate(arr[n]):
                    w.writerow([n + 1, kind, k, repr(float(v))])
    meta = {"seed": ds.seed, "fingerprint": ds.fingerprint, "T": ds.T, "d": int(ds.x.shape[1])}
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_dataset(path) -> Dataset:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    T, d = meta["T"], meta["d"]
    x, y = np.full((T, d), np.nan), np.full((T, d), np.nan)
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            arr = x if row["kind"] == "x" else y
            arr[int(row["n"]) - 1, int(row["k"])] = float(row["value"])
    if np.isnan(x).any() or np.isnan(y).any():
        raise ValueError(f"{path}: incomplete dataset")
    return Dataset(x, y, meta["seed"], meta["fingerprint"])


# Algorithm dispatch.


def make_gradient_kernel(ab: AlgorithmBlock, model):
    d = model.dim
    if ab.name == "smala":
        eps = ab.eps or default_step_size("mala", d)
        return MALAKernel(eps, precond_cov=model.transition_covariance())
    if ab.name == "smmala":
        return SmMALAKernel(ab.eps or default_step_size("smmala", d))
    if ab.name == "simplified_smmala":
        return SimplifiedSmMALAKernel(ab.eps or default_step_size("simplified_smmala", d))
    if ab.name == "shmc":
        return HMCKernel(ab.eps or default_step_size("hmc", d), ab.n_leapfrog or 20, jitter=ab.jitter)
    if ab.name in ("smhmc", "sir_rm"):
        return MHMCKernel(ab.eps or default_step_size("mhmc", d), ab.n_leapfrog or 10, ab.n_fixed_point, ab.jitter)
    raise ConfigError(f"{ab.name} has no gradient kernel")


class SmcRunner:
    """SIR, block SIR and resample-move behind the per-step runner interface."""

    def __init__(self, ab: AlgorithmBlock, model):
        self.ab, self.model = ab, model
        if ab.name == "sir_rm":
            self.kernel = make_gradient_kernel(ab, model)
            self.adapter = StepSizeAdapter(self.kernel.eps, self.kernel.band)

    def init(self):
        return ParticleSet.from_anchor(self.model.initial_state(), self.ab.N)

    def step(self, ps: ParticleSet, y, rng) -> Tuple[ParticleSet, np.ndarray, ChainDiagnostics]:
        t0 = time.perf_counter()
        ab = self.ab
        if ab.name == "sir":
            out = sir_step(ps, y, self.model, rng, ab.threshold)
        elif ab.name == "block_sir":
            out = block_sir_step(ps, y, self.model, ab.block_size, rng)
        else:
            out = resample_move_step(ps, y, self.model, self.kernel, ab.K, rng, self.adapter if ab.adapt else None, ab.pilot)
        est = out.mean()
        diag = ChainDiagnostics(
            accept_kernel=out.info.get("move_accept", float("nan")),
            weight_ess=out.ess,
            unique_ancestors=count_unique_rows(out.states),
            parent_indices=int(np.unique(out.parents).size) if out.parents is not None else 0,
            wall_s=time.perf_counter() - t0,
            eps=self.kernel.eps if ab.name == "sir_rm" else float("nan"),
        )
        return out, est, diag


class SmcmcRunner:
    def __init__(self, ab: AlgorithmBlock, model):
        cfg = SmcmcConfig(
            N=ab.N, burn_in_fraction=ab.burn_in_fraction, ancestor_mode=ab.ancestor_mode,
            block_size=ab.block_size, within_block=ab.within_block, adapt=ab.adapt,
        )
        if ab.name == "smcmc_prior":
            kernel = "prior"
        elif ab.name == "smcmc_optimal":
            kernel = "optimal"
        else:
            kernel = make_gradient_kernel(ab, model)
        self.filter = SmcmcFilter(model, cfg, kernel)

    def init(self):
        return self.filter.initial_bank()

    def step(self, bank, y, rng):
        bank, diag = self.filter.step(bank, y, rng)
        return bank, bank.states.mean(axis=0), diag


def make_runner(ab: AlgorithmBlock, model):
    if ab.name in ("sir", "block_sir", "sir_rm"):
        return SmcRunner(ab, model)
    return SmcmcRunner(ab, model)


def step_rng(master: int, run: int, n: int) -> np.random.Generator:
    """Independent stream keyed by (master seed, run, time step)."""
    return np.random.default_rng(np.random.SeedSequence([master, run, n]))


# Running.


_BUILD: Optional[str] = None


def build_fingerprint() -> str:
    """``git describe`` of the source tree when available, otherwise the package version."""
    global _BUILD
    if _BUILD is None:
        try:
            out = subprocess.run(
                ["git", "describe", "--always", "--dirty"], cwd=Path(__file__).parent,
                capture_output=True, text=True, timeout=5,
            )
            desc = out.stdout.strip()
        except (OSError, subprocess.SubprocessError):
            desc = ""
        _BUILD = f"smcmc-{__version__}" + (f"-g{desc}" if desc else "")
    return _BUILD


@dataclass
class Oracle:
    means: np.ndarray
    variances: np.ndarray  # (T, d) diagonals of the posterior covariances


def kalman_oracle(cfg: ExperimentConfig, ds: Dataset) -> Optional[Oracle]:
    if cfg.model.type != "gaussian":
        return None
    model = build_model(cfg.model)
    means, covs = kalman_filter(ds.y, model.params, model.Sigma)
    return Oracle(means, np.diagonal(covs, axis1=1, axis2=2).copy())


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v)) if np.isfinite(v) else ("nan" if np.isnan(v) else repr(float(v)))
    return str(v)


@dataclass
class RunResult:
    run: int
    steps: List[dict]
    summary: Optional[dict]
    estimates: Optional[np.ndarray]
    variances: Optional[np.ndarray]
    failure: Optional[dict] = None


def execute_run(cfg: ExperimentConfig, ds: Dataset, oracle: Optional[Oracle], run: int) -> RunResult:
    """
    One independent run. Any exception aborts the run and is returned as a
    failure record instead of raising.
    """
    model = build_model(cfg.model)
    ab = cfg.algorithm
    build = build_fingerprint()
    steps: List[dict] = []
    est = np.empty_like(ds.x)
    var = np.empty_like(ds.x)
    n = 0
    try:
        runner = make_runner(ab, model)
        state = runner.init()
        for n in range(ds.T):
            state, est[n], diag = runner.step(state, ds.y[n], step_rng(cfg.run.seed, run, n + 1))
            var[n] = state.variance() if isinstance(state, ParticleSet) else state.states.var(axis=0, ddof=1)
            ess = diag.ess_stats()
            steps.append({
                "run": run, "n": n + 1, "algo": ab.name,
                "mse": float(np.mean((est[n] - ds.x[n]) ** 2)),
                "log_rel_mse": (
                    log_relative_mse(est[n], oracle.means[n], oracle.variances[n]) if oracle else float("nan")
                ),
                "ess_min": ess[0], "ess_med": ess[1], "ess_mean": ess[2], "ess_max": ess[3],
                "accept_joint": diag.accept_joint, "accept_refine": diag.accept_refine,
                "accept_kernel": diag.accept_kernel, "unique_ancestors": diag.unique_ancestors,
                "wall_ms": diag.wall_s * 1e3 if cfg.run.timing else 0.0,
                "build": build, "weight_ess": diag.weight_ess, "parent_indices": diag.parent_indices,
            })
    except Exception as exc:  # noqa: BLE001 - a failing run must not stop the others
        log.error("run %d failed at step %d: %s", run, n + 1, exc)
        failure = {
            "run": run, "n": n + 1, "algo": ab.name, "error": type(exc).__name__,
            "message": str(exc).replace("\n", " "), "traceback": traceback.format_exc(limit=3).replace("\n", " | "),
        }
        return RunResult(run, steps, None, None, None, failure)
    summary = summarize_run(cfg, ds, oracle, run, steps, est)
    return RunResult(run, steps, summary, est, var)


def _nanmean(values) -> float:
    a = np.asarray(values, dtype=float)
    if a.size == 0 or np.all(np.isnan(a)):
        return float("nan")
    return float(np.nanmean(a))


def summarize_run(cfg, ds, oracle, run, steps, est) -> dict:
    col = lambda k: [s[k] for s in steps]  # noqa: E731
    out = {
        "run": run, "algo": cfg.algorithm.name, "model": cfg.model.type, "d": cfg.model.d,
        "N": cfg.algorithm.N, "T": ds.T,
        "mse": float(np.mean((est - ds.x) ** 2)),
        "log_rel_mse": log_relative_mse(est, oracle.means, oracle.variances) if oracle else float("nan"),
        "unique_ancestors_min": min(col("unique_ancestors")),
        "wall_ms_per_step": _nanmean(col("wall_ms")),
        "kalman_mse": float(np.mean((oracle.means - ds.x) ** 2)) if oracle else float("nan"),
        "kalman_var": float(np.mean(oracle.variances)) if oracle else float("nan"),
        "build": build_fingerprint(),
    }
    for k in ("ess_min", "ess_med", "ess_mean", "ess_max", "accept_joint", "accept_refine", "accept_kernel"):
        out[k] = _nanmean(col(k))
    return out


def _write_csv(path: Path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in columns])


def _run_job(args):
    cfg, ds, oracle, run = args
    return execute_run(cfg, ds, oracle, run)


def run_experiment(cfg: ExperimentConfig, out_dir=None, dataset: Optional[Dataset] = None, workers: Optional[int] = None):
    """
    Run ``cfg.run.n_runs`` independent runs on one dataset and write
    ``steps.csv``, ``summary.csv``, ``failures.csv``, the dataset and the
    resolved config into ``out_dir``. Results do not depend on ``workers``.

    Returns:
        list of :class:`RunResult` in run order
    """
    out = Path(out_dir or cfg.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    ds = dataset if dataset is not None else generate_dataset(cfg)
    if ds.x.shape[1] != cfg.model.d:
        raise ConfigError("dataset dimension does not match model.d")
    oracle = kalman_oracle(cfg, ds)
    save_dataset(ds, out / "dataset.csv")
    (out / "config.txt").write_text(format_config(cfg))
    jobs = [(cfg, ds, oracle, r) for r in range(1, cfg.run.n_runs + 1)]
    workers = workers or cfg.run.workers
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_job, jobs))
    else:
        results = [_run_job(j) for j in jobs]
    _write_csv(out / "steps.csv", STEP_COLUMNS + EXTRA_STEP_COLUMNS, [s for r in results for s in r.steps])
    _write_csv(out / "summary.csv", SUMMARY_COLUMNS, [r.summary for r in results if r.summary])
    fail_cols = ["run", "n", "algo", "error", "message", "traceback"]
    _write_csv(out / "failures.csv", fail_cols, [r.failure for r in results if r.failure])
    if cfg.output.per_dimension:
        rows = []
        for r in results:
            if r.estimates is None:
                continue
            for n in range(ds.T):
                for k in range(ds.x.shape[1]):
                    rows.append({"run": r.run, "n": n + 1, "k": k, "mean": r.estimates[n, k], "var": r.variances[n, k],
                                 "truth": ds.x[n, k]})
        _write_csv(out / "posterior.csv", ["run", "n", "k", "mean", "var", "truth"], rows)
    return results


def config_for(model_type: str, d: int, algo: str, **overrides) -> ExperimentConfig:
    """Convenience constructor; ``overrides`` are ``section_key=value`` pairs."""
    cfg = ExperimentConfig(ModelBlock(type=model_type, d=d), AlgorithmBlock(name=algo))
    for key, v in overrides.items():
        section, name = key.split("_", 1)
        setattr(getattr(cfg, section), name, v)
    return cfg.validate()


def with_algorithm(cfg: ExperimentConfig, **changes) -> ExperimentConfig:
    return replace(cfg, algorithm=replace(cfg.algorithm, **changes)).validate()


def summary_means(results: List[RunResult]) -> Dict[str, float]:
    rows = [r.summary for r in results if r.summary]
    if not rows:
        return {}
    return {k: _nanmean([r[k] for r in rows]) for k in rows[0] if isinstance(rows[0][k], (int, float))}
