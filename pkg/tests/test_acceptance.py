"""Acceptance criteria 1 to 10, one test each, with one PASS/FAIL line per criterion.

The rate and recovery criteria run the shipped configs through the CLI, so they
double as end-to-end checks and take most of the suite's runtime.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
from builders import fd_gradients, random_model, random_net

from interactnn.cli import dgp_from, load_config, main
from interactnn.experiments import LowerBoundSpec, run_lowerbound
from interactnn.lowerbound import (
    assemble_alternative,
    dense_params,
    quadrature_distance_terms,
    random_codewords,
    vg_codebook,
)
from interactnn.model import anova_project, identifiability_defects
from interactnn.nn import squared_loss_backward
from interactnn.pipeline import run_pipeline
from interactnn.synthdata import Dataset, DgpConfig, make_dataset, make_truth, signal_strength, split_dataset
from interactnn.train import OptConfig, fit_erm, fit_penalized, penalized_objective, plan_highdim, plan_lowdim

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


@pytest.fixture
def report(capsys):
    def emit(k: int, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\nCRITERION {k}: {'PASS' if ok else 'FAIL'} | {detail}")
    return emit


def run_cli(*argv) -> int:
    return main([str(a) for a in argv])


def test_criterion_01_gradient_exactness(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(100):
        din = int(rng.integers(1, 3))
        sizes = [din] + [int(w) for w in rng.integers(2, 7, size=int(rng.integers(1, 4)))] + [1]
        net = random_net(rng, sizes)
        X = rng.random((int(rng.integers(4, 33)), din))
        y = rng.normal(size=X.shape[0])
        _, tape = squared_loss_backward(net, X, y)
        for a, b in zip(tape.gradients(), fd_gradients(net, X, y)):
            worst = max(worst, float(np.max(np.abs(a - b) / np.maximum(1e-6, np.abs(a) + np.abs(b)))))
    dt = time.perf_counter() - t0
    ok = worst < 1e-4 and dt < 30
    report(1, ok, f"max relative error {worst:.2e} (< 1e-4), {dt:.1f} s (< 30 s)")
    assert ok


def test_criterion_02_anova_projection(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    uni = bi = ev = idem = 0.0
    for _ in range(20):
        m = random_model(rng)
        p, rep = anova_project(m)
        X = rng.random((1000, m.d))
        q, _ = anova_project(p)
        uni, bi = max(uni, rep.max_uni_defect), max(bi, rep.max_bi_defect)
        ev = max(ev, float(np.max(np.abs(p.predict(X) - m.predict(X)))))
        idem = max(idem, float(np.max(np.abs(q.predict(X) - p.predict(X)))))
        q_rep = identifiability_defects(q)
        idem = max(idem, q_rep.max_uni_defect, q_rep.max_bi_defect)
    dt = time.perf_counter() - t0
    ok = uni < 1e-9 and bi < 1e-6 and ev < 1e-8 and idem < 1e-8 and dt < 60
    report(2, ok, f"uni defect {uni:.1e}, bi defect {bi:.1e}, eval drift {ev:.1e}, "
                  f"reprojection drift {idem:.1e}, {dt:.1f} s")
    assert ok


def test_criterion_03_packing_distance(report):
    t0 = time.perf_counter()
    res = run_lowerbound(LowerBoundSpec(pairs=50, codebook_lengths=(8,), sparse_members=2))
    rng = np.random.default_rng(3)
    p = dense_params(64, 3, 2.0, 2.0)
    f = assemble_alternative(*random_codewords(p, rng), p)
    g = assemble_alternative(*random_codewords(p, rng), p)
    terms = quadrature_distance_terms(f, g, p)
    t3 = abs(terms.T3) / terms.total
    dt = time.perf_counter() - t0
    ok = res["max_rel_discrepancy"] < 1e-6 and t3 < 1e-8 and dt < 120
    report(3, ok, f"max relative discrepancy {res['max_rel_discrepancy']:.1e} over {len(res['pairs'])} pairs, "
                  f"|T3|/d^2 {t3:.1e}, {dt:.1f} s")
    assert ok


def test_criterion_04_varshamov_gilbert(report):
    t0 = time.perf_counter()
    parts, ok = [], True
    for M in (8, 16, 24):
        book = vg_codebook(M)
        dist, need = book.min_pairwise_distance(), math.ceil(M / 8)
        ok &= dist >= need and book.size >= 2 ** (M // 8)
        parts.append(f"M={M}: {book.size} words, min distance {dist} >= {need}")
    dt = time.perf_counter() - t0
    ok &= dt < 30
    report(4, ok, "; ".join(parts) + f", {dt:.1f} s")
    assert ok


def _rates(tmp_path, name, min_slope, limit, k, report):
    out = tmp_path / name
    t0 = time.perf_counter()
    code = run_cli("rates", "--config", CONFIGS / f"{name}.toml", "--deterministic", "--out-dir", out)
    dt = time.perf_counter() - t0
    summary = json.loads((out / "summary.json").read_text())
    med = [summary["medians"][n] for n in sorted(summary["medians"], key=int)]
    ok = (code == 0 and not summary["failures"] and summary["strictly_decreasing"]
          and summary["slope"] <= min_slope and dt < limit)
    report(k, ok, f"medians {', '.join(f'{v:.4f}' for v in med)}; slope {summary['slope']:.3f} "
                  f"+/- {summary['slope_stderr']:.3f} (<= {min_slope}); {dt / 60:.1f} min (< {limit / 60:.0f})")
    assert ok


def test_criterion_05_additive_rate(tmp_path, report):
    _rates(tmp_path, "rates_additive", -0.4, 15 * 60, 5, report)


def test_criterion_06_interaction_rate(tmp_path, report):
    _rates(tmp_path, "rates_interaction", -0.3, 15 * 60, 6, report)


def test_criterion_07_support_recovery(tmp_path, report):
    cfg_path = CONFIGS / "recovery.toml"
    dgp = dgp_from(load_config(cfg_path), None)
    out = tmp_path / "recovery"
    t0 = time.perf_counter()
    code = run_cli("pipeline", "--config", cfg_path, "--deterministic", "--out-dir", out)
    dt = time.perf_counter() - t0
    records = json.loads((out / "records.json").read_text())
    contain = sizes = 0
    ratio1, ratio2, per_order = [], [], []
    for rec in records:
        t1, t2 = rec["thresholds"]
        norms = signal_strength(make_truth(replace(dgp, seed=rec["seed"])))
        ratio1.append(norms["min_uni"] / t1)
        ratio2.append(norms["min_bi"] / t1)
        per_order.append(norms["min_bi"] / t2)
        contain += rec["metrics"]["contains"]
        sizes += len(rec["S1_hat"]) <= 4 * dgp.s1 and len(rec["S2_hat"]) <= 4 * dgp.s2
    signal_ok = min(ratio1 + ratio2) >= 5
    ok = code == 0 and len(records) == 10 and signal_ok and contain >= 8 and sizes >= 8 and dt < 20 * 60
    report(7, ok, f"containment {contain}/10, size bound {sizes}/10, signal / (c1 lam1) >= "
                  f"{min(ratio1):.1f} (uni) {min(ratio2):.1f} (bi), bivariate signal / (c2 lam2) >= "
                  f"{min(per_order):.2f}, {dt / 60:.1f} min (< 20)")
    assert ok


def test_criterion_08_objective_oracle(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(8)
    worst = 0.0
    for i in range(10):
        d = int(rng.integers(2, 5))
        S1 = sorted(rng.choice(d, size=int(rng.integers(0, d + 1)), replace=False).tolist())
        cfg = DgpConfig(int(rng.integers(60, 200)), d, S1=S1, S2=[(0, 1)] if rng.random() < 0.5 else [],
                        sigma=0.3, seed=i)
        ds = make_dataset(cfg)
        plan = replace(plan_highdim(ds.n, d, 2.0, 2.0, 1.0), lam1=float(rng.uniform(0.01, 0.3)),
                       lam2=float(rng.uniform(0.01, 0.3)))
        dtype = "float32" if i % 2 else "float64"
        fit = fit_penalized(ds, plan, OptConfig(steps=50, restarts=2, seed=i, dtype=dtype))
        want = penalized_objective(fit.model, ds.X, ds.y, plan.lam1, plan.lam2)
        worst = max(worst, abs(fit.objective - want))
    dt = time.perf_counter() - t0
    ok = worst < 1e-10 and dt < 60
    report(8, ok, f"max |returned - recomputed| {worst:.1e} (< 1e-10) on 10 instances, {dt:.1f} s")
    assert ok


def test_criterion_09_degenerate_cases(report):
    ds = make_dataset(DgpConfig(200, 4, S1=[0, 1], S2=[(2, 3)], sigma=0.2, seed=9))
    base = plan_highdim(ds.n // 2, 4, 2.0, 2.0, 1.0)
    probe = fit_penalized(split_dataset(ds)[0], base, OptConfig(steps=50, restarts=1))
    lam = 2 * max(probe.norms.values()) + 1.0
    res = run_pipeline(ds, replace(base, lam1=lam, lam2=lam), OptConfig(steps=50, restarts=1))
    ybar = float(np.mean(split_dataset(ds)[1].y))
    gap = float(np.max(np.abs(res.model.predict(ds.X) - ybar)))
    case_a = res.intercept_only and res.model.keys() == [] and gap < 1e-12

    X = np.random.default_rng(9).random((64, 2))
    const = Dataset(X, np.full(64, 1.7))
    fit = fit_erm(const, plan_lowdim(64, 2, 2.0, 2.0), opt=OptConfig(steps=2000, restarts=1))
    mu_err = abs(anova_project(fit.model)[0].intercept - 1.7)
    case_b = fit.loss < 1e-6 and mu_err < 1e-2

    empty = make_truth(DgpConfig(10, 5, intercept=0.37))
    Xe = np.random.default_rng(0).random((1000, 5))
    case_c = empty.keys() == [] and bool(np.all(empty.predict(Xe) == 0.37))
    ok = case_a and case_b and case_c
    report(9, ok, f"intercept-only under strong penalty {case_a} (gap {gap:.1e}); constant truth {case_b} "
                  f"(loss {fit.loss:.1e}, |mu - c| {mu_err:.1e}); empty support exact {case_c}")
    assert ok


def _tree(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file() and p.name != "timing.json"}


def test_criterion_10_determinism(tmp_path, report):
    gen = tmp_path / "gen"
    gen_cfg = tmp_path / "gen.toml"
    gen_cfg.write_text("schema_version = 1\n[dgp]\nn = 400\nd = 6\nS1 = [0, 3]\nS2 = [[1, 4]]\n"
                       "sigma = 0.3\nseed = 10\n")
    assert run_cli("gen", "--config", gen_cfg, "--out-dir", gen) == 0
    cfg = tmp_path / "pipe.toml"
    cfg.write_text("schema_version = 1\n[opt]\nsteps = 200\nrestarts = 2\n[refit_opt]\nsteps = 200\n"
                   "restarts = 1\n[plan]\nC3 = 0.5\nC4 = 0.5\n")
    trees = []
    for name in ("first", "second"):
        out = tmp_path / name
        assert run_cli("pipeline", "--config", cfg, "--data", gen / "data.csv", "--deterministic",
                       "--out-dir", out) == 0
        trees.append(_tree(out))
    same = trees[0] == trees[1]
    ok = same and "record.json" in trees[0]
    report(10, ok, f"{len(trees[0])} primary files compared, byte-identical {same}")
    assert ok
