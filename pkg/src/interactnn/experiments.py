"""Rate sweeps, recovery sweeps and lower-bound verification runs."""

from __future__ import annotations

import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .lowerbound import (
    assemble_alternative,
    dense_params,
    packing_distance,
    random_codewords,
    relative_discrepancy,
    sparse_family,
    sparse_params,
    vg_codebook,
)
from .model import Bi, StructuredModel, Uni, all_keys, mc_l2_error
from .pipeline import run_pipeline
from .synthdata import Dataset, DgpConfig, make_truth, sample_dataset, split_dataset
from .train import OptConfig, estimate_sigma, fit_erm, plan_highdim, plan_lowdim

RATE_COLUMNS = ("n", "d", "seed", "mc_l2_error", "stderr", "train_loss", "wall_time")


def fit_loglog_slope(ns: Sequence[float], errors: Sequence[float]) -> tuple[float, float]:
    """Least-squares slope of ``log error`` on ``log n`` and its standard error."""
    x = np.log(np.asarray(ns, dtype=float))
    y = np.log(np.asarray(errors, dtype=float))
    if np.unique(x).size < 3:
        raise ValueError("a slope needs at least three distinct sample sizes")
    xc = x - x.mean()
    sxx = float(xc @ xc)
    slope = float(xc @ (y - y.mean()) / sxx)
    resid = y - y.mean() - slope * xc
    dof = x.size - 2
    se = math.sqrt(float(resid @ resid) / dof / sxx) if dof > 0 else 0.0
    return slope, se


def theoretical_slopes(beta1: float, beta2: float, interactions: bool) -> dict:
    out = {"additive": -2 * beta1 / (2 * beta1 + 1)}
    if interactions:
        out["interaction"] = -beta2 / (beta2 + 1)
    return out


@dataclass
class RateRow:
    n: int
    d: int
    seed: int
    mc_l2_error: float
    stderr: float
    train_loss: float
    wall_time: float

    def __post_init__(self):
        if self.mc_l2_error < 0:
            raise ValueError("errors are nonnegative")


@dataclass
class RateTable:
    rows: list[RateRow]
    failures: list[dict] = field(default_factory=list)
    beta1: float = 2.0
    beta2: float = 2.0
    interactions: bool = False

    def medians(self) -> dict[int, float]:
        out = {}
        for n in sorted({r.n for r in self.rows}):
            out[n] = float(np.median([r.mc_l2_error for r in self.rows if r.n == n]))
        return out

    def slope(self) -> tuple[float, float]:
        med = self.medians()
        return fit_loglog_slope(list(med), list(med.values()))

    def strictly_decreasing(self) -> bool:
        vals = list(self.medians().values())
        return all(b < a for a, b in zip(vals, vals[1:]))

    def summary(self) -> dict:
        med = self.medians()
        try:
            slope, se = self.slope()
        except ValueError:
            slope, se = None, None
        return {
            "medians": {str(n): v for n, v in med.items()},
            "slope": slope,
            "slope_stderr": se,
            "strictly_decreasing": self.strictly_decreasing(),
            "theoretical_slopes": theoretical_slopes(self.beta1, self.beta2, self.interactions),
            "failures": self.failures,
        }


Estimator = Callable[[Dataset, DgpConfig, OptConfig], tuple[StructuredModel, float]]


@dataclass
class RateSpec:
    """One rate experiment: a DGP template, an n grid, seeds and an optimizer budget."""

    dgp: DgpConfig
    n_grid: Sequence[int]
    seeds: Sequence[int]
    opt: OptConfig
    additive: bool = True
    n_mc: int = 100_000
    mc_seed: int = 12345

    def keys(self):
        return all_keys(self.dgp.d, (1,) if self.additive else (1, 2))


def default_estimator(spec: RateSpec) -> Estimator:
    def estimate(ds: Dataset, cfg: DgpConfig, opt: OptConfig):
        plan = plan_lowdim(ds.n, cfg.d, cfg.beta1, cfg.beta2, cfg.B)
        fit = fit_erm(ds, plan, spec.keys(), opt)
        return fit.model, fit.loss
    return estimate


def _rate_cell(spec: RateSpec, n: int, seed: int, estimator: Estimator | None) -> RateRow:
    t0 = time.perf_counter()
    cfg = replace(spec.dgp, n=n, seed=seed)
    truth = make_truth(cfg)
    ds = sample_dataset(truth, cfg)
    est = estimator or default_estimator(spec)
    model, loss = est(ds, cfg, replace(spec.opt, seed=seed))
    err, se = mc_l2_error(model, truth, spec.n_mc, seed=spec.mc_seed)
    return RateRow(n, cfg.d, seed, err, se, float(loss), time.perf_counter() - t0)


def _safe_cell(args):
    spec, n, seed, estimator = args
    try:
        return _rate_cell(spec, n, seed, estimator), None
    except Exception as exc:  # a failed cell is recorded, the sweep goes on
        return None, {"n": n, "seed": seed, "error": f"{type(exc).__name__}: {exc}"}


def run_rates(spec: RateSpec, estimator: Estimator | None = None, threads: int = 1) -> RateTable:
    """Every ``(n, seed)`` cell is independent; results are reduced in grid order."""
    cells = [(spec, int(n), int(s), estimator) for n in spec.n_grid for s in spec.seeds]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_safe_cell, cells))
    else:
        results = [_safe_cell(c) for c in cells]
    rows = [r for r, _ in results if r is not None]
    fails = [f for _, f in results if f is not None]
    return RateTable(rows, fails, spec.dgp.beta1, spec.dgp.beta2, not spec.additive)


# --------------------------------------------------------------------------
# Support recovery


@dataclass
class RecoverySpec:
    dgp: DgpConfig
    seeds: Sequence[int]
    opt: OptConfig
    refit_opt: OptConfig
    C3: float = 0.5
    C4: float = 0.5
    c1: float = 1.0
    c2: float = 1.0
    rsc: bool = True


def recovery_plan(spec: RecoverySpec, ds: Dataset):
    first, _ = split_dataset(ds)
    cfg = spec.dgp
    return plan_highdim(first.n, cfg.d, cfg.beta1, cfg.beta2, estimate_sigma(first),
                        spec.C3, spec.C4, spec.c1, spec.c2, cfg.B, rsc=spec.rsc)


def run_recovery_seed(spec: RecoverySpec, seed: int) -> dict:
    cfg = replace(spec.dgp, seed=seed)
    truth = make_truth(cfg)
    ds = sample_dataset(truth, cfg)
    plan = recovery_plan(spec, ds)
    S1 = [Uni(j) for j in cfg.S1]
    S2 = [Bi(k, l) for k, l in cfg.S2]
    res = run_pipeline(ds, plan, replace(spec.opt, seed=seed), replace(spec.refit_opt, seed=seed), (S1, S2))
    norms = {str(k): v for k, v in sorted(res.active.norms.items())}
    true_norms = {str(k): norms[str(k)] for k in S1 + S2}
    return {
        "seed": seed,
        "plan": plan.to_dict(),
        "thresholds": list(plan.thresholds),
        "S1_hat": [str(k) for k in sorted(res.active.S1)],
        "S2_hat": [str(k) for k in sorted(res.active.S2)],
        "true_component_norms": true_norms,
        "max_null_norm_uni": max((v for k, v in res.active.norms.items() if k.order == 1 and k not in S1), default=0.0),
        "max_null_norm_bi": max((v for k, v in res.active.norms.items() if k.order == 2 and k not in S2), default=0.0),
        "metrics": res.metrics.to_dict(),
        "intercept_only": res.intercept_only,
    }


def run_recovery(spec: RecoverySpec, threads: int = 1) -> list[dict]:
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(run_recovery_seed, [spec] * len(spec.seeds), spec.seeds))
    return [run_recovery_seed(spec, s) for s in spec.seeds]


# --------------------------------------------------------------------------
# Lower-bound verification


@dataclass
class LowerBoundSpec:
    pairs: int = 50
    d_max: int = 4
    m_max: int = 6
    beta1: float = 2.0
    beta2: float = 2.0
    codebook_lengths: Sequence[int] = (8, 16, 24)
    sparse_n: int = 2048
    sparse_d: int = 50
    sparse_s1: int = 3
    sparse_s2: int = 2
    sparse_members: int = 12
    tol: float = 1e-6
    seed: int = 0


def run_lowerbound(spec: LowerBoundSpec) -> dict:
    """Distance oracle on random codeword pairs, codebook stats and the sparse sandwich."""
    rng = np.random.default_rng(spec.seed)
    worst = 0.0
    pairs = []
    for _ in range(spec.pairs):
        d = int(rng.integers(2, spec.d_max + 1))
        base = dense_params(64, d, spec.beta1, spec.beta2)
        p = replace(base, m1=int(rng.integers(1, spec.m_max + 1)), m2=int(rng.integers(1, spec.m_max + 1)))
        f = assemble_alternative(*random_codewords(p, rng), p)
        g = assemble_alternative(*random_codewords(p, rng), p)
        closed, quad = packing_distance(f, g, p)
        rel = relative_discrepancy(closed, quad)
        worst = max(worst, rel)
        pairs.append({"d": d, "m1": p.m1, "m2": p.m2, "closed": closed, "quadrature": quad, "rel": rel})
    books = [vg_codebook(M, seed=spec.seed).stats() for M in spec.codebook_lengths]
    sp = sparse_params(spec.sparse_n, spec.sparse_d, spec.sparse_s1, spec.sparse_s2, spec.beta1, spec.beta2)
    fam = sparse_family(sp, spec.sparse_members, spec.seed)
    models = fam.models()
    d2 = [packing_distance(a, b, sp)[1] for i, a in enumerate(models) for b in models[i + 1:]]
    delta_sq = sp.delta_sq()
    sandwich = {
        "members": len(models),
        "lower": 4 * delta_sq,
        "upper": 128 * delta_sq,
        "min_d2": min(d2, default=None),
        "max_d2": max(d2, default=None),
        "holds": all(4 * delta_sq <= v <= 128 * delta_sq for v in d2),
    }
    codebooks_ok = all(b["min_dist_achieved"] >= b["min_dist_required"] and b["complete"] for b in books)
    return {
        "max_rel_discrepancy": worst,
        "tol": spec.tol,
        "pairs": pairs,
        "codebooks": books,
        "sparse_sandwich": sandwich,
        "passed": worst < spec.tol and codebooks_ok and sandwich["holds"],
    }
