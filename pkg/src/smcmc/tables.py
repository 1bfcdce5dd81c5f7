"""Down-scaled reproductions of the benchmark tables."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .experiment import _fmt, config_for, run_experiment

MSE_COLUMNS = ["value", "se", "wall_s_per_step"]
ESS_COLUMNS = ["ess_min", "ess_med", "ess_mean", "ess_max", "wall_s_per_step", "ess_per_s"]


@dataclass
class TableSpec:
    model: str
    dims: Tuple[int, ...]
    N: int
    metric: str  # "log_rel_mse", "mse" or "ess"
    rows: List[Tuple[str, str, dict]]
    reference: Dict[Tuple[str, int], float] = field(default_factory=dict)
    tolerance: Dict[Tuple[str, int], str] = field(default_factory=dict)


def _ref(rows, dims, values):
    return {(r, d): v for r, vals in zip(rows, values) for d, v in zip(dims, vals)}


_RM = [("SIR-RM1", "sir_rm", {"K": 1}), ("SIR-RM2", "sir_rm", {"K": 2}), ("SIR-RM3", "sir_rm", {"K": 3})]

TABLES: Dict[str, TableSpec] = {
    "mse_gaussian": TableSpec(
        "gaussian", (144, 400), 200, "log_rel_mse",
        [("SmHMC", "smhmc", {})] + _RM,
        _ref(["SmHMC", "SIR-RM1", "SIR-RM2", "SIR-RM3"], (144, 400),
             [(0.20, 0.21), (0.71, 1.34), (0.28, 0.62), (0.25, 0.26)]),
        {("SmHMC", 144): "[0.05, 0.45]; below SIR-RM1 and SIR-RM2"},
    ),
    "ess_gaussian": TableSpec(
        "gaussian", (144,), 500, "ess",
        [("SMCMC-Prior", "smcmc_prior", {}), ("SmMALA", "smmala", {}), ("SHMC", "shmc", {}), ("SmHMC", "smhmc", {})],
        _ref(["SMCMC-Prior", "SmMALA", "SHMC", "SmHMC"], (144,), [(9,), (48,), (80,), (130,)]),
        {("SmHMC", 144): "mean ESS >= 5x SMCMC-Prior"},
    ),
    "mse_poisson": TableSpec(
        "gh_poisson", (144, 400, 1024), 200, "mse",
        [("SIR", "sir", {})] + _RM + [
            ("Block SIR", "block_sir", {}), ("SMCMC-Prior", "smcmc_prior", {}),
            ("Simplified SmMALA", "simplified_smmala", {}), ("SmMALA", "smmala", {}),
            ("SHMC", "shmc", {}), ("SmHMC", "smhmc", {}),
        ],
        _ref(
            ["SIR", "SIR-RM1", "SIR-RM2", "SIR-RM3", "Block SIR", "SMCMC-Prior", "Simplified SmMALA", "SmMALA",
             "SHMC", "SmHMC"],
            (144, 400, 1024),
            [(4.95, 8.87, 12.17), (0.88, 1.13, 2.74), (0.66, 0.82, 1.62), (0.65, 0.68, 1.36), (1.29, 1.48, 1.55),
             (1.68, 3.35, 5.23), (0.61, 0.79, 0.91), (0.60, 0.76, 0.88), (0.63, 0.69, 0.77), (0.55, 0.58, 0.65)],
        ),
        {("SmHMC", 144): "[0.35, 0.80]; SmHMC <= SmMALA <= SMCMC-Prior <= SIR"},
    ),
    "ess_poisson": TableSpec(
        "gh_poisson", (144, 400), 200, "ess",
        [("SMCMC-Prior", "smcmc_prior", {}), ("Simplified SmMALA", "simplified_smmala", {}),
         ("SmMALA", "smmala", {}), ("SHMC", "shmc", {}), ("SmHMC", "smhmc", {})],
        _ref(["SMCMC-Prior", "Simplified SmMALA", "SmMALA", "SHMC", "SmHMC"], (144, 400),
             [(9, 6), (14, 11), (18, 12), (33, 20), (97, 94)]),
        {("SmHMC", 144): "mean ESS >= 5x SMCMC-Prior"},
    ),
}


def runs_for_scale(scale: float) -> int:
    """``scale`` is the number of runs per cell (rounded, at least 1); 0 means a dry run."""
    if scale < 0 or not math.isfinite(scale):
        raise ValueError("scale must be a finite non-negative number")
    return 0 if scale == 0 else max(1, int(round(scale)))


def table_columns(spec: TableSpec) -> List[str]:
    metric = MSE_COLUMNS if spec.metric != "ess" else ESS_COLUMNS
    return ["table", "row", "algo", "d", "N", "T", "runs", "failed"] + metric + ["reference", "tolerance"]


def reproduce_table(
    table_id: str,
    scale: float,
    out_dir,
    seed: int = 0,
    dims: Optional[Sequence[int]] = None,
    T: int = 10,
    workers: int = 1,
) -> Path:
    """
    Run every (row, dimension) cell of ``table_id`` with ``scale`` runs on a
    shared dataset per dimension and write ``<out_dir>/<table_id>.csv``.
    A dry run writes one line per planned cell with empty values.
    """
    if table_id not in TABLES:
        raise KeyError(f"unknown table {table_id!r}; choose from {sorted(TABLES)}")
    spec = TABLES[table_id]
    n_runs = runs_for_scale(scale)
    dims = tuple(dims) if dims else spec.dims
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cols = table_columns(spec)
    rows = []
    for d in dims:
        for label, algo, extra in spec.rows:
            row = {c: "" for c in cols}
            row.update(table=table_id, row=label, algo=algo, d=d, N=spec.N, T=T, runs=n_runs,
                       reference=spec.reference.get((label, d), ""), tolerance=spec.tolerance.get((label, d), ""))
            if n_runs:
                overrides = {f"algorithm_{k}": v for k, v in extra.items()}
                cfg = config_for(spec.model, d, algo, algorithm_N=spec.N, run_T=T, run_n_runs=n_runs,
                                 run_seed=seed, run_workers=workers, **overrides)
                cell_dir = out / table_id / f"{label.replace(' ', '_')}_d{d}"
                results = run_experiment(cfg, cell_dir)
                row.update(_aggregate(spec, results))
            rows.append(row)
    path = out / f"{table_id}.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([r[c] if isinstance(r[c], str) else _fmt(r[c]) for c in cols])
    return path


def _aggregate(spec: TableSpec, results) -> dict:
    ok = [r.summary for r in results if r.summary]
    out = {"failed": len(results) - len(ok)}
    if not ok:
        return out
    wall = float(np.mean([s["wall_ms_per_step"] for s in ok])) / 1e3
    out["wall_s_per_step"] = wall
    if spec.metric == "ess":
        for k in ("ess_min", "ess_med", "ess_mean", "ess_max"):
            out[k] = float(np.mean([s[k] for s in ok]))
        out["ess_per_s"] = out["ess_mean"] / wall if wall > 0 else float("nan")
    else:
        v = np.array([s[spec.metric] for s in ok])
        out["value"] = float(v.mean())
        out["se"] = float(v.std(ddof=1) / np.sqrt(v.size)) if v.size > 1 else float("nan")
    return out
