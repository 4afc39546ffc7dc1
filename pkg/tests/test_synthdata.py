from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from interactnn.model import Bi, Uni, anova_project, bi_marginals, identifiability_defects
from interactnn.quadrature import cell_rule, integrate_1d
from interactnn.synthdata import (
    AmplitudeBudgetError,
    Dataset,
    DgpConfig,
    dataset_from_bytes,
    dataset_to_bytes,
    dataset_to_csv,
    make_dataset,
    make_truth,
    read_csv,
    sample_dataset,
    signal_strength,
    split_dataset,
    write_csv,
)


def cfg(**kw) -> DgpConfig:
    base = dict(n=200, d=4, S1=[0, 2], S2=[(1, 3)], sigma=0.2, seed=3)
    base.update(kw)
    return DgpConfig(**base)


def test_config_validation():
    with pytest.raises(ValueError):
        cfg(S1=[5])
    with pytest.raises(ValueError):
        cfg(S2=[(2, 1)])
    with pytest.raises(ValueError):
        cfg(sigma=-1.0)
    with pytest.raises(ValueError):
        cfg(family="splines")


def test_empty_support_is_constant():
    truth = make_truth(cfg(S1=[], S2=[], intercept=0.7))
    X = np.random.default_rng(0).random((30, 4))
    assert np.all(truth.predict(X) == 0.7)


def test_harmonic_bivariate_marginals_vanish():
    truth = make_truth(cfg(S2=[(0, 1), (1, 3), (2, 3)], freqs=(1, 2, 3)))
    rule = truth.quadrature_rule()
    for comp in truth.bi.values():
        gx, gy = bi_marginals(comp, rule)
        assert max(np.max(np.abs(gx.values)), np.max(np.abs(gy.values))) < 1e-12


@pytest.mark.parametrize("family", ["harmonic", "bump", "mixed"])
def test_truth_is_identifiable(family):
    truth = make_truth(cfg(family=family))
    rep = identifiability_defects(truth)
    assert rep.max_uni_defect < 1e-10 and rep.max_bi_defect < 1e-8
    p, rep2 = anova_project(truth)
    assert rep2.max_uni_defect < 1e-10 and rep2.max_bi_defect < 1e-8
    X = np.random.default_rng(1).random((300, 4))
    assert np.max(np.abs(p.predict(X) - truth.predict(X))) < 1e-10


def test_bump_components_integrate_to_zero():
    truth = make_truth(cfg(family="bump", bump_cells=5))
    for comp in truth.uni.values():
        assert abs(integrate_1d(comp, cell_rule(5))) < 1e-10


def test_amplitude_budget():
    with pytest.raises(AmplitudeBudgetError):
        make_truth(cfg(amp1=(3.0, 3.0), B=2.0))


def test_signal_strength_report():
    s = signal_strength(make_truth(cfg(amp1=(1.0, 1.0), amp2=(2.0, 2.0))))
    assert s["min_uni"] == pytest.approx(1 / np.sqrt(2), rel=1e-10)
    assert s["min_bi"] == pytest.approx(1.0, rel=1e-10)


def test_noiseless_responses_are_exact():
    c = cfg(sigma=0.0)
    ds = make_dataset(c)
    assert np.array_equal(ds.y, ds.truth.predict(ds.X))


@pytest.mark.parametrize("noise", ["gaussian", "bounded"])
def test_noise_variance_concentrates(noise):
    n, sigma = 20_000, 0.5
    ds = make_dataset(DgpConfig(n, 3, sigma=sigma, noise=noise, seed=9))
    var = np.var(ds.y, ddof=1)
    assert abs(var - sigma**2) <= 3 * np.sqrt(2 / n) * sigma**2
    if noise == "bounded":
        assert np.max(np.abs(ds.y)) <= sigma * np.sqrt(3)


def test_beta_covariates_in_unit_cube():
    ds = make_dataset(cfg(covariates="beta", beta_ab=(0.5, 0.5)))
    assert ds.X.min() >= 0.0 and ds.X.max() <= 1.0


def test_same_seed_same_bytes(tmp_path):
    a, b = make_dataset(cfg()), make_dataset(cfg())
    assert dataset_to_bytes(a) == dataset_to_bytes(b)
    assert dataset_to_csv(a) == dataset_to_csv(b)
    assert dataset_to_bytes(a) != dataset_to_bytes(make_dataset(cfg(seed=4)))


def test_truth_and_noise_streams_are_independent():
    """Changing the sample size leaves the truth and the leading covariate rows alone."""
    a, b = make_dataset(cfg(n=50)), make_dataset(cfg(n=80))
    X = np.random.default_rng(0).random((20, 4))
    assert np.array_equal(a.truth.predict(X), b.truth.predict(X))


def test_split_sizes():
    for n, sizes in ((10, (5, 5)), (11, (6, 5))):
        ds = make_dataset(cfg(n=n))
        h1, h2 = split_dataset(ds)
        assert (h1.n, h2.n) == sizes
        assert np.array_equal(np.vstack([h1.X, h2.X]), ds.X)
    with pytest.raises(ValueError):
        split_dataset(make_dataset(cfg(n=1)))


@given(st.integers(2, 300))
def test_split_partitions_rows(n):
    X = np.linspace(0, 1, n)[:, None]
    ds = Dataset(X, np.arange(n, dtype=float))
    a, b = split_dataset(ds)
    assert a.n == (n + 1) // 2
    assert np.array_equal(np.concatenate([a.y, b.y]), ds.y)


def test_csv_round_trip(tmp_path):
    ds = make_dataset(cfg())
    write_csv(ds, tmp_path / "d.csv")
    back = read_csv(tmp_path / "d.csv")
    assert np.array_equal(back.X, ds.X) and np.array_equal(back.y, ds.y)
    assert (tmp_path / "d.csv").read_text().splitlines()[0] == "x1,x2,x3,x4,y"
    (tmp_path / "bad.csv").write_text("a,b\n1,2\n")
    with pytest.raises(ValueError):
        read_csv(tmp_path / "bad.csv")


def test_binary_round_trip():
    ds = make_dataset(cfg())
    back = dataset_from_bytes(dataset_to_bytes(ds))
    assert np.array_equal(back.X, ds.X) and np.array_equal(back.y, ds.y) and back.seed == ds.seed


def test_dataset_validation():
    with pytest.raises(ValueError):
        Dataset(np.full((3, 2), 2.0), np.zeros(3))
    with pytest.raises(ValueError):
        Dataset(np.zeros((3, 2)), np.array([0.0, np.nan, 1.0]))


def test_sample_dataset_checks_dimension():
    truth = make_truth(cfg())
    with pytest.raises(ValueError):
        sample_dataset(truth, cfg(d=5, S1=[], S2=[]))


def test_support_keys_match_config():
    truth = make_truth(cfg(S1=[1, 3], S2=[(0, 2)]))
    assert truth.keys() == sorted([Uni(1), Uni(3), Bi(0, 2)])
