from __future__ import annotations

import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from interactnn.lowerbound import (
    PackingParams,
    assemble_alternative,
    bump_bi,
    bump_uni,
    codebook,
    dense_params,
    hamming,
    holder_amplitude,
    kernel_derivative,
    kernel_sq_norm,
    packing_distance,
    quadrature_distance_terms,
    random_codewords,
    relative_discrepancy,
    sparse_family,
    sparse_params,
    vg_codebook,
)
from interactnn.model import Uni, identifiability_defects
from interactnn.quadrature import Quad2D, composite_rule, integrate_1d, integrate_2d, marginal_1d
from interactnn.terms import bump_kernel

# int_{-1/2}^{1/2} u^2 exp(-2/(1 - 4u^2)) du, Gauss-Legendre with 400 nodes, cross-checked by adaptive quadrature
K_SQ = 0.0019119026661217712


def params(d=3, m1=4, m2=3) -> PackingParams:
    return replace(dense_params(64, d, 2.0, 2.0), m1=m1, m2=m2)


def cell_rule(p: PackingParams, Q: int = 48):
    return composite_rule(np.linspace(0, 1, max(p.m1, p.m2) * 6 + 1), Q)


def test_kernel_norm_and_shape():
    assert kernel_sq_norm() == pytest.approx(K_SQ, rel=1e-12)
    u = np.linspace(-0.7, 0.7, 2001)
    k = bump_kernel(u)
    assert np.all(k[np.abs(u) >= 0.5] == 0.0)
    assert np.allclose(k, -bump_kernel(-u), atol=0, rtol=0)
    coarse, fine = kernel_derivative(u, 4, h=2e-3), kernel_derivative(u, 4, h=1e-3)
    assert np.all(np.isfinite(fine))
    assert np.max(np.abs(coarse - fine)) < 0.05 * np.max(np.abs(fine))


def test_holder_amplitude_is_positive_and_scales_with_budget():
    assert holder_amplitude(2.0, 2.0) == pytest.approx(2 * holder_amplitude(2.0, 1.0))
    assert holder_amplitude(1.5) > 0 and holder_amplitude(2.0, order=2) > holder_amplitude(2.0, order=1)


def test_uni_bump_identities():
    p = params(m1=5)
    rule = cell_rule(p)
    x = np.linspace(0, 1, 5001)
    for k in range(p.m1):
        phi = bump_uni(k, p)
        assert abs(integrate_1d(phi, rule)) < 1e-10
        assert integrate_1d(lambda t: phi(t) ** 2, rule) == pytest.approx(p.L1**2 * p.h1**5 * K_SQ, rel=1e-8)
        v = phi(x)
        assert np.all(v[(x < k / p.m1) | (x > (k + 1) / p.m1)] == 0.0)
        for j in range(k + 1, p.m1):
            assert np.all(v * bump_uni(j, p)(x) == 0.0)
    with pytest.raises(IndexError):
        bump_uni(p.m1, p)


def test_bi_bump_identities():
    p = params(m2=3)
    rule = cell_rule(p)
    rule2 = Quad2D.square(rule)
    for k, l in [(0, 0), (1, 2), (2, 1)]:
        phi = bump_bi(k, l, p)
        energy = integrate_2d(lambda z: phi(z) ** 2, rule2)
        assert energy == pytest.approx(p.L2**2 * p.h2**6 * K_SQ**2, rel=1e-8)
        for axis in ("x", "y"):
            assert np.max(np.abs(marginal_1d(phi, axis, rule, knots=rule.nodes).values)) < 1e-10
        other = bump_bi((k + 1) % 3, l, p)
        assert abs(integrate_2d(lambda z: phi(z) * other(z), rule2)) < 1e-14
    with pytest.raises(IndexError):
        bump_bi(0, 3, p)


def test_codebook_examples():
    book = vg_codebook(8, target=2)
    assert book.size == 2 and book.min_pairwise_distance() >= 1
    book16 = vg_codebook(16)
    assert book16.complete and book16.size >= 4 and book16.min_pairwise_distance() >= 2
    with pytest.raises(ValueError):
        vg_codebook(7)


@settings(max_examples=20)
@given(st.integers(8, 24), st.integers(2, 40), st.integers(0, 1000))
def test_codebook_is_always_valid(M, target, seed):
    book = vg_codebook(M, target, seed=seed, attempts=500)
    assert book.min_pairwise_distance() >= math.ceil(M / 8)
    assert len({w.tobytes() for w in book.words}) == book.size
    assert book.complete == (book.size >= target)


def test_unreachable_target_reports_partial_book():
    book = codebook(4, 3, 10, attempts=50)
    assert not book.complete and book.min_pairwise_distance() >= 3


def test_assemble_examples():
    p = params()
    zero = assemble_alternative(np.zeros(p.bits1), np.zeros(p.bits2), p)
    assert zero.keys() == [] and np.all(zero.predict(np.random.default_rng(0).random((50, 3))) == 0.0)
    w1 = np.zeros(p.bits1)
    w1[p.m1 + 2] = 1
    one = assemble_alternative(w1, np.zeros(p.bits2), p)
    assert one.keys() == [Uni(1)]
    norm = math.sqrt(integrate_1d(lambda t: one.components[Uni(1)](t) ** 2, cell_rule(p)))
    assert norm == pytest.approx(math.sqrt(p.uni_energy), rel=1e-8)
    with pytest.raises(ValueError):
        assemble_alternative(w1[:-1], np.zeros(p.bits2), p)


def test_assembled_alternatives_are_identifiable():
    p = params()
    rng = np.random.default_rng(1)
    m = assemble_alternative(*random_codewords(p, rng), p)
    rep = identifiability_defects(m)
    assert rep.max_uni_defect < 1e-9 and rep.max_bi_defect < 1e-9


def test_distance_one_bit_and_identity():
    p = params()
    rng = np.random.default_rng(2)
    w1, w2 = random_codewords(p, rng)
    f = assemble_alternative(w1, w2, p)
    assert packing_distance(f, f, p) == (0.0, 0.0)
    w1b = w1.copy()
    w1b[3] ^= 1
    closed, quad = packing_distance(f, assemble_alternative(w1b, w2, p), p)
    assert closed == pytest.approx(p.L1**2 * p.h1**5 * K_SQ, rel=1e-12)
    assert relative_discrepancy(closed, quad) < 1e-6


def test_mixed_cross_terms_vanish_on_three_features():
    p = params(d=3)
    rng = np.random.default_rng(3)
    f = assemble_alternative(*random_codewords(p, rng), p)
    g = assemble_alternative(*random_codewords(p, rng), p)
    terms = quadrature_distance_terms(f, g, p)
    assert abs(terms.T3) < 1e-8 * max(terms.total, 1e-300)
    w1, w2 = random_codewords(p, rng)
    both = assemble_alternative(w1, w2, p)
    d_uni = packing_distance(both, assemble_alternative(w1, np.zeros_like(w2), p), p)[1]
    d_bi = packing_distance(both, assemble_alternative(np.zeros_like(w1), w2, p), p)[1]
    d_all = packing_distance(both, assemble_alternative(np.zeros_like(w1), np.zeros_like(w2), p), p)[1]
    assert d_all == pytest.approx(d_uni + d_bi, rel=1e-8)


@settings(max_examples=15)
@given(st.integers(2, 4), st.integers(1, 6), st.integers(1, 6), st.integers(0, 10**6))
def test_distance_is_hamming_weighted(d, m1, m2, seed):
    p = params(d, m1, m2)
    rng = np.random.default_rng(seed)
    (a1, a2), (b1, b2) = random_codewords(p, rng), random_codewords(p, rng)
    closed, quad = packing_distance(assemble_alternative(a1, a2, p), assemble_alternative(b1, b2, p), p)
    assert closed == pytest.approx(p.uni_energy * hamming(a1, b1) + p.bi_energy * hamming(a2, b2), rel=1e-12)
    assert relative_discrepancy(closed, quad) < 1e-6


def test_dense_grid_counts():
    p = dense_params(4096, 3, 2.0, 2.0)
    assert p.m1 == math.floor(4096**0.2) == 5
    assert p.m2 == 4
    assert p.h1 == pytest.approx(0.2)


def test_sparse_family_sandwich_and_supports():
    p = sparse_params(2048, 50, 3, 2, 2.0, 2.0)
    fam = sparse_family(p, 8, seed=0)
    assert len(fam.members) == 8
    for mb in fam.members:
        assert np.count_nonzero(mb.u1) == 3 and np.count_nonzero(mb.u2) == 2
    models = fam.models()
    assert all(len(m.uni) == 3 and len(m.bi) == 2 for m in models)
    delta_sq = p.delta_sq()
    for i, a in enumerate(models):
        for b in models[i + 1:]:
            closed, quad = packing_distance(a, b, p)
            assert 4 * delta_sq <= quad <= 128 * delta_sq
            assert relative_discrepancy(closed, quad) < 1e-6
    with pytest.raises(ValueError):
        sparse_family(params(), 3)


def test_sparse_params_validation():
    with pytest.raises(ValueError):
        sparse_params(100, 3, 4, 0, 2.0, 2.0)
    p = sparse_params(2048, 50, 3, 2, 2.0, 2.0)
    assert p.regime == "sparse" and p.m1 >= 1 and p.m2 >= 1
