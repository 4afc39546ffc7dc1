"""Minimax lower-bound instances: grid bumps, binary packings, alternatives and distances.

Grid indices are 0-based: cell ``k`` is ``[k/m, (k+1)/m]`` with centre ``(k + 1/2)/m``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .model import ComponentKey, StructuredModel, Uni, all_keys
from .quadrature import Quad2D, composite_rule, integrate_1d, integrate_2d, marginal_1d
from .terms import BumpSumBi, BumpSumUni, Component, bump_kernel

KERNEL_NODES = 400


@lru_cache(maxsize=None)
def kernel_sq_norm() -> float:
    """``||K||_2^2`` by high-order Gauss-Legendre on the support (-1/2, 1/2)."""
    t, w = np.polynomial.legendre.leggauss(KERNEL_NODES)
    u, w = t / 2.0, w / 2.0
    return float(w @ bump_kernel(u) ** 2)


def kernel_derivative(u: np.ndarray, q: int, h: float = 1e-3) -> np.ndarray:
    """``q``-th central finite-difference derivative of the bump kernel."""
    coeffs = np.array([(-1) ** i * math.comb(q, i) for i in range(q + 1)], dtype=float)
    offsets = (q / 2.0 - np.arange(q + 1)) * h
    return sum(c * bump_kernel(u + o) for c, o in zip(coeffs, offsets)) / h**q


@lru_cache(maxsize=None)
def kernel_holder_constant(beta: float, n_grid: int = 1201) -> float:
    """Numerical Holder constant of ``K^(q)`` with exponent ``s`` where ``beta = q + s``.

    With ``s = 0`` the oscillation ``sup K^(q) - inf K^(q)`` is returned.
    """
    q = int(math.floor(beta))
    s = beta - q
    u = np.linspace(-0.5, 0.5, n_grid)
    g = kernel_derivative(u, q) if q > 0 else bump_kernel(u)
    if s == 0.0:
        return float(g.max() - g.min())
    diff = np.abs(g[:, None] - g[None, :])
    dist = np.abs(u[:, None] - u[None, :])
    np.fill_diagonal(dist, np.inf)
    return float(np.max(diff / dist**s))


def holder_amplitude(beta: float, budget: float = 1.0, order: int = 1) -> float:
    """Amplitude ``L`` giving ``L h^beta K(./h)`` a Holder-beta constant of ``budget``.

    The Holder constant of the rescaled bump does not depend on ``h``.  For the
    tensor bump the kernel in the other coordinate contributes its sup norm.
    """
    H = kernel_holder_constant(float(beta))
    if order == 2:
        H *= float(np.max(np.abs(bump_kernel(np.linspace(-0.5, 0.5, 2001)))))
    return budget / H


# --------------------------------------------------------------------------
# Parameters


@dataclass(frozen=True)
class PackingParams:
    d: int
    m1: int
    m2: int
    beta1: float
    beta2: float
    L1: float
    L2: float
    regime: str = "dense"
    s1: int = 0
    s2: int = 0

    def __post_init__(self):
        if self.m1 < 1 or self.m2 < 1:
            raise ValueError("grid counts must be at least 1")
        if self.regime not in ("dense", "sparse"):
            raise ValueError(f"unknown regime {self.regime!r}")

    @property
    def h1(self) -> float:
        return 1.0 / self.m1

    @property
    def h2(self) -> float:
        return 1.0 / self.m2

    @property
    def n_pairs(self) -> int:
        return self.d * (self.d - 1) // 2

    @property
    def bits1(self) -> int:
        return self.d * self.m1

    @property
    def bits2(self) -> int:
        return self.n_pairs * self.m2 * self.m2

    @property
    def scale1(self) -> float:
        return self.L1 * self.h1**self.beta1

    @property
    def scale2(self) -> float:
        return self.L2 * self.h2**self.beta2

    @property
    def uni_energy(self) -> float:
        """Squared L2 norm of one univariate bump."""
        return self.L1**2 * self.h1 ** (2 * self.beta1 + 1) * kernel_sq_norm()

    @property
    def bi_energy(self) -> float:
        """Squared L2 norm of one tensor bump."""
        return self.L2**2 * self.h2 ** (2 * self.beta2 + 2) * kernel_sq_norm() ** 2

    def delta_sq(self) -> float:
        """``delta^2`` of the sparse family (so that the lower bound reads ``4 delta^2``)."""
        K2 = kernel_sq_norm()
        four = (self.L1**2 * K2 / 16) * self.m1 ** (-2 * self.beta1) * self.s1
        four += (self.L2**2 * K2**2 / 16) * self.m2 ** (-2 * self.beta2) * self.s2
        return four / 4.0


def _floor(x: float) -> int:
    # exact powers such as 4096^(1/6) come out a hair below the integer
    return math.floor(x * (1 + 1e-12))


def dense_params(n: int, d: int, beta1: float, beta2: float, c0: float = 1.0,
                 budget: float = 1.0) -> PackingParams:
    """Grid counts ``floor(c0 n^(1/(2 beta1 + 1)))`` and ``floor(c0 n^(1/(2 beta2 + 2)))``.

    The pairwise exponent uses ``2 beta2 + 2``, the value that balances the
    tensor-bump energy ``h^(2 beta2 + 2)`` against the ``m^2`` bits per pair.
    """
    m1 = max(1, _floor(c0 * n ** (1.0 / (2 * beta1 + 1))))
    m2 = max(1, _floor(c0 * n ** (1.0 / (2 * beta2 + 2))))
    return PackingParams(d, m1, m2, beta1, beta2,
                         holder_amplitude(beta1, budget, 1), holder_amplitude(beta2, budget, 2))


def _sparse_m(n: int, beta: float, rate_exp: float, log_arg: float, c: float) -> int:
    log_term = 8.0 * math.log(log_arg) / n if log_arg > 1.0 else 0.0
    rhs = c * max(n ** (-2 * beta * rate_exp), log_term)
    return max(1, round(rhs ** (-1.0 / (2 * beta))))


def sparse_params(n: int, d: int, s1: int, s2: int, beta1: float, beta2: float,
                  c1: float = 1.0, c2: float = 1.0, budget: float = 1.0) -> PackingParams:
    """Grid counts solving the sparse-regime balance equations, rounded to the nearest integer.

    ``m1^(-2 beta1) = c1 max(n^(-2 beta1/(2 beta1 + 1)), 8 log(2d/s1 - 2)/n)`` and
    ``m2^(-2 beta2) = c2 max(n^(-2 beta2/(2 beta2 + 2)), 8 log(d(d-1)/s2 - 2)/n)``;
    a logarithm of an argument at most 1 is treated as zero.
    """
    if not (0 <= s1 <= d and 0 <= s2 <= d * (d - 1) // 2):
        raise ValueError("sparsity levels exceed the number of slots")
    m1 = _sparse_m(n, beta1, 1.0 / (2 * beta1 + 1), 2 * d / s1 - 2 if s1 else 0.0, c1)
    m2 = _sparse_m(n, beta2, 1.0 / (2 * beta2 + 2), d * (d - 1) / s2 - 2 if s2 else 0.0, c2)
    return PackingParams(d, m1, m2, beta1, beta2,
                         holder_amplitude(beta1, budget, 1), holder_amplitude(beta2, budget, 2),
                         "sparse", s1, s2)


# --------------------------------------------------------------------------
# Bumps


def bump_uni(k: int, p: PackingParams) -> Component:
    """``phi_k(x) = L1 h1^beta1 K((x - x_k)/h1)`` supported on cell ``k``."""
    if not 0 <= k < p.m1:
        raise IndexError(f"bump index {k} outside 0..{p.m1 - 1}")
    coef = np.zeros(p.m1)
    coef[k] = 1.0
    return Component(1, (BumpSumUni(coef, p.scale1),))


def bump_bi(k: int, l: int, p: PackingParams) -> Component:
    """``phi_kl(x, y) = L2 h2^beta2 K((x - x_k)/h2) K((y - x_l)/h2)``."""
    if not (0 <= k < p.m2 and 0 <= l < p.m2):
        raise IndexError(f"bump index ({k}, {l}) outside 0..{p.m2 - 1}")
    coef = np.zeros((p.m2, p.m2))
    coef[k, l] = 1.0
    return Component(2, (BumpSumBi(coef, p.scale2),))


# --------------------------------------------------------------------------
# Codebooks


@dataclass
class Codebook:
    M: int
    words: np.ndarray  # (count, M) uint8
    min_dist: int
    target: int | None = None
    complete: bool = True

    @property
    def size(self) -> int:
        return int(self.words.shape[0])

    def min_pairwise_distance(self) -> int:
        if self.size < 2:
            return self.M + 1
        W = self.words.astype(np.int32)
        D = (W[:, None, :] != W[None, :, :]).sum(-1)
        np.fill_diagonal(D, self.M + 1)
        return int(D.min())

    def stats(self) -> dict:
        return {"M": self.M, "size": self.size, "min_dist_required": self.min_dist,
                "min_dist_achieved": self.min_pairwise_distance(), "target": self.target,
                "complete": self.complete}


def hamming(a, b) -> int:
    return int(np.count_nonzero(np.asarray(a) != np.asarray(b)))


def _int_to_bits(v: int, M: int) -> np.ndarray:
    return np.array([(v >> (M - 1 - i)) & 1 for i in range(M)], dtype=np.uint8)


def _popcount(a: np.ndarray) -> np.ndarray:
    a = a.astype(np.uint64)
    out = np.zeros(a.shape, dtype=np.int64)
    while np.any(a):
        out += (a & np.uint64(1)).astype(np.int64)
        a = a >> np.uint64(1)
    return out


def codebook(M: int, min_dist: int, target: int, seed: int = 0, attempts: int = 20000,
             include_zero: bool = True) -> Codebook:
    """Greedy random codebook with pairwise Hamming distance at least ``min_dist``.

    Random words are accepted when far enough from all kept words.  When the
    target is not met and ``M <= 24`` a lexicographic greedy scan over all
    ``2^M`` words continues from the kept set.  The returned book is always
    valid; ``complete`` tells whether the target was reached.
    """
    if M < 1 or min_dist < 0 or target < 1:
        raise ValueError("invalid codebook request")
    rng = np.random.default_rng(seed)
    kept: list[np.ndarray] = [np.zeros(M, dtype=np.uint8)] if include_zero else []

    def far(w: np.ndarray) -> bool:
        return all(np.count_nonzero(w != k) >= min_dist for k in kept)

    tries = 0
    while len(kept) < target and tries < attempts:
        w = rng.integers(0, 2, M).astype(np.uint8)
        tries += 1
        if far(w):
            kept.append(w)
    if len(kept) < target and M <= 24:
        ints = [int("".join(map(str, k)), 2) for k in kept]
        chunk = 1 << min(M, 16)
        for start in range(0, 1 << M, chunk):
            cand = np.arange(start, min(start + chunk, 1 << M), dtype=np.uint64)
            ok = np.ones(cand.size, dtype=bool)
            for v in ints:
                ok &= _popcount(cand ^ np.uint64(v)) >= min_dist
            for c in cand[ok]:
                c = int(c)
                if all(bin(c ^ v).count("1") >= min_dist for v in ints):
                    ints.append(c)
                    if len(ints) >= target:
                        break
            if len(ints) >= target:
                break
        kept = [_int_to_bits(v, M) for v in ints]
    words = np.array(kept[:target], dtype=np.uint8).reshape(-1, M)
    return Codebook(M, words, min_dist, target, words.shape[0] >= target)


def vg_codebook(M: int, target: int | None = None, seed: int = 0, attempts: int = 20000) -> Codebook:
    """Codebook with distance ``ceil(M/8)`` and by default ``2^floor(M/8)`` words, zero word first."""
    if M < 8:
        raise ValueError("Varshamov-Gilbert packings need M >= 8")
    target = 2 ** (M // 8) if target is None else target
    return codebook(M, math.ceil(M / 8), target, seed, attempts)


def short_codebook(M: int, target: int | None = None, seed: int = 0) -> Codebook:
    """Like :func:`vg_codebook` but also valid for ``M < 8`` (distance at least 1)."""
    if M >= 8:
        return vg_codebook(M, target, seed)
    return codebook(M, max(1, math.ceil(M / 8)), 2 if target is None else target, seed)


# --------------------------------------------------------------------------
# Alternatives


def assemble_alternative(omega1, omega2, p: PackingParams) -> StructuredModel:
    """Structured model whose components are the bump sums selected by the codewords.

    ``omega1`` has ``d * m1`` bits (row ``j`` drives feature ``j``); ``omega2``
    has ``C(d, 2) * m2^2`` bits, one ``m2 x m2`` block per pair in the order of
    :func:`all_keys`.
    """
    w1 = np.asarray(omega1, dtype=float).ravel()
    w2 = np.asarray(omega2, dtype=float).ravel()
    if w1.size != p.bits1 or w2.size != p.bits2:
        raise ValueError(f"codeword lengths ({w1.size}, {w2.size}) do not match ({p.bits1}, {p.bits2})")
    comps: dict[ComponentKey, Component] = {}
    for j, row in enumerate(w1.reshape(p.d, p.m1)):
        if np.any(row):
            comps[Uni(j)] = Component(1, (BumpSumUni(row.copy(), p.scale1),))
    pairs = all_keys(p.d, orders=(2,))
    for key, block in zip(pairs, w2.reshape(p.n_pairs, p.m2, p.m2)):
        if np.any(block):
            comps[key] = Component(2, (BumpSumBi(block.copy(), p.scale2),))
    return StructuredModel(p.d, 0.0, comps)


@dataclass
class SparseMember:
    u1: np.ndarray  # (d,) codeword index per feature, 0 means the zero function
    u2: np.ndarray  # (C(d,2),) codeword index per pair
    omega1: np.ndarray
    omega2: np.ndarray


@dataclass
class SparseFamily:
    params: PackingParams
    book1: Codebook
    book2: Codebook
    members: list[SparseMember] = field(default_factory=list)

    def models(self) -> list[StructuredModel]:
        return [assemble_alternative(mb.omega1, mb.omega2, self.params) for mb in self.members]


def _slot_vector(n_slots: int, s: int, alphabet: int, rng) -> np.ndarray:
    u = np.zeros(n_slots, dtype=np.int64)
    if s:
        idx = rng.choice(n_slots, size=s, replace=False)
        u[idx] = rng.integers(1, alphabet + 1, size=s)
    return u


def sparse_family(p: PackingParams, n_members: int, seed: int = 0, attempts: int = 5000) -> SparseFamily:
    """Sparse alternatives with slot vectors pairwise at Hamming distance at least ``s/2``.

    Each active feature (pair) carries a nonzero word of a packing over its
    ``m1`` (``m2^2``) bits; the zero word stands for an inactive slot.  Slot
    vectors are drawn uniformly with exactly ``s`` active slots and kept when
    they differ from every kept vector in at least ``s/2`` slots per order.
    """
    if p.regime != "sparse":
        raise ValueError("sparse_family needs sparse-regime parameters")
    rng = np.random.default_rng(seed)
    book1 = short_codebook(p.m1, max(2, 2 ** (p.m1 // 8) + 1), seed)
    book2 = short_codebook(p.m2 * p.m2, max(2, 2 ** (p.m2 * p.m2 // 8) + 1), seed + 1)
    G1, G2 = book1.size - 1, book2.size - 1
    fam = SparseFamily(p, book1, book2)
    kept: list[tuple[np.ndarray, np.ndarray]] = []
    for _ in range(attempts):
        if len(kept) >= n_members:
            break
        u1 = _slot_vector(p.d, p.s1, G1, rng)
        u2 = _slot_vector(p.n_pairs, p.s2, G2, rng)
        if all(np.count_nonzero(u1 != a) >= p.s1 / 2 and np.count_nonzero(u2 != b) >= p.s2 / 2
               for a, b in kept):
            kept.append((u1, u2))
    for u1, u2 in kept:
        omega1 = book1.words[u1].reshape(-1)
        omega2 = book2.words[u2].reshape(-1)
        fam.members.append(SparseMember(u1, u2, omega1, omega2))
    return fam


# --------------------------------------------------------------------------
# Distances


def _bump_coef(comp: Component | None, order: int, m: int) -> np.ndarray:
    shape = (m,) if order == 1 else (m, m)
    out = np.zeros(shape)
    if comp is None:
        return out
    for t in comp.terms:
        if isinstance(t, (BumpSumUni, BumpSumBi)):
            out = out + t.coef
        else:
            raise TypeError("packing distances need bump-sum components")
    return out


def closed_form_distance(f: StructuredModel, g: StructuredModel, p: PackingParams) -> float:
    """``L1^2 h1^(2 beta1 + 1) ||K||^2 rho1 + L2^2 h2^(2 beta2 + 2) ||K||^4 rho2`` (squared distance)."""
    rho1 = rho2 = 0.0
    for key in set(f.components) | set(g.components):
        m = p.m1 if key.order == 1 else p.m2
        diff = _bump_coef(f.components.get(key), key.order, m) - _bump_coef(g.components.get(key), key.order, m)
        rho = float(np.sum(diff**2))
        if key.order == 1:
            rho1 += rho
        else:
            rho2 += rho
    return p.uni_energy * rho1 + p.bi_energy * rho2


@dataclass
class DistanceTerms:
    """Squared distance split into univariate, pairwise and mixed parts."""

    T1: float
    T2: float
    T3: float

    @property
    def total(self) -> float:
        return self.T1 + self.T2 + 2.0 * self.T3


def _diff_components(f: StructuredModel, g: StructuredModel) -> dict[ComponentKey, Component]:
    out = {}
    for key in set(f.components) | set(g.components):
        a = f.components.get(key, Component(key.order))
        b = g.components.get(key, Component(key.order)).scaled(-1.0)
        out[key] = Component(key.order, a.terms + b.terms, a.offset + b.offset)
    return out


def quadrature_distance_terms(f: StructuredModel, g: StructuredModel, p: PackingParams,
                              Q: int = 48) -> DistanceTerms:
    """``int_{[0,1]^d} (f - g)^2`` expanded over component pairs and evaluated by quadrature.

    Every cross product is integrated explicitly (through marginals where a
    coordinate is shared), so vanishing cross terms are verified, not assumed.
    ``Q`` nodes are placed in every cell of the merged bump grids.
    """
    diff = _diff_components(f, g)
    bps = sorted(set(np.linspace(0, 1, p.m1 + 1)) | set(np.linspace(0, 1, p.m2 + 1)))
    rule = composite_rule(bps, Q)
    rule2 = Quad2D.square(rule)
    uni = {k.idx[0]: c for k, c in diff.items() if k.order == 1}
    bi = {k.idx: c for k, c in diff.items() if k.order == 2}
    I1 = {j: integrate_1d(c, rule) for j, c in uni.items()}
    I2 = {kl: integrate_2d(c, rule2) for kl, c in bi.items()}
    mx = {kl: marginal_1d(c, "y", rule, knots=rule.nodes) for kl, c in bi.items()}  # function of x_k
    my = {kl: marginal_1d(c, "x", rule, knots=rule.nodes) for kl, c in bi.items()}  # function of x_l

    def marg(kl, j) -> np.ndarray:
        """Values on the rule nodes of the bivariate part integrated down to coordinate ``j``."""
        return (mx[kl] if kl[0] == j else my[kl]).values

    T1 = 0.0
    for a, ca in uni.items():
        for b, cb in uni.items():
            T1 += integrate_1d(lambda x: ca(x) ** 2, rule) if a == b else I1[a] * I1[b]
    T2 = 0.0
    for p1, c1 in bi.items():
        for p2, c2 in bi.items():
            shared = set(p1) & set(p2)
            if p1 == p2:
                T2 += integrate_2d(lambda z: c1(z) ** 2, rule2)
            elif shared:
                (j,) = shared
                T2 += float(rule.weights @ (marg(p1, j) * marg(p2, j)))
            else:
                T2 += I2[p1] * I2[p2]
    T3 = 0.0
    for j, cu in uni.items():
        uj = cu(rule.nodes)
        for kl in bi:
            if j in kl:
                T3 += float(rule.weights @ (uj * marg(kl, j)))
            else:
                T3 += I1[j] * I2[kl]
    return DistanceTerms(T1, T2, T3)


def packing_distance(f: StructuredModel, g: StructuredModel, p: PackingParams) -> tuple[float, float]:
    """``(closed form, quadrature)`` squared L2 distance between two assembled alternatives."""
    if f.d != p.d or g.d != p.d:
        raise ValueError("alternatives do not match the packing parameters")
    return closed_form_distance(f, g, p), quadrature_distance_terms(f, g, p).total


def random_codewords(p: PackingParams, rng: np.random.Generator, density: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    w1 = (rng.random(p.bits1) < density).astype(np.uint8)
    w2 = (rng.random(p.bits2) < density).astype(np.uint8)
    return w1, w2


def relative_discrepancy(closed: float, quad: float) -> float:
    if closed == 0.0:
        return abs(quad)
    return abs(closed - quad) / abs(closed)
