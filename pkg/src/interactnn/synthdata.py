"""Synthetic identifiable interaction models, covariates, noise and datasets."""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .model import Bi, ComponentKey, StructuredModel, Uni
from .nn import pack_arrays, unpack_arrays
from .quadrature import Quad2D, l2_norm_quad
from .terms import BumpSumBi, BumpSumUni, Component, HarmonicBi, HarmonicUni, bump_kernel

FAMILIES = ("harmonic", "bump", "mixed")
NOISE_LAWS = ("gaussian", "bounded")
COVARIATE_LAWS = ("uniform", "beta")
PROBE_POINTS = 101

# independent RNG streams derived from the one seed
_STREAM_TRUTH, _STREAM_X, _STREAM_NOISE = 0, 1, 2


class AmplitudeBudgetError(ValueError):
    """The generated truth can exceed the truncation bound."""


def stream(seed: int, which: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), which]))


@dataclass
class DgpConfig:
    n: int
    d: int
    S1: Sequence[int] = ()
    S2: Sequence[tuple[int, int]] = ()
    family: str = "harmonic"
    amp1: tuple[float, float] = (0.5, 1.0)
    amp2: tuple[float, float] = (0.5, 1.0)
    freqs: tuple[int, ...] = (1,)
    bump_cells: int = 4
    beta1: float = 2.0
    beta2: float = 2.0
    sigma: float = 0.0
    noise: str = "gaussian"
    covariates: str = "uniform"
    beta_ab: tuple[float, float] = (2.0, 2.0)
    intercept: float = 0.0
    B: float = 10.0
    seed: int = 0

    def __post_init__(self):
        self.S1 = tuple(int(j) for j in self.S1)
        self.S2 = tuple((int(k), int(l)) for k, l in self.S2)
        self.amp1 = tuple(self.amp1)
        self.amp2 = tuple(self.amp2)
        self.freqs = tuple(int(f) for f in self.freqs)
        self.beta_ab = tuple(self.beta_ab)
        self.validate()

    def validate(self) -> None:
        if self.n < 0 or self.d < 1:
            raise ValueError("need n >= 0 and d >= 1")
        if len(set(self.S1)) != len(self.S1) or any(not 0 <= j < self.d for j in self.S1):
            raise ValueError(f"S1 must hold distinct feature indices below d={self.d}")
        if len(set(self.S2)) != len(self.S2) or any(not 0 <= k < l < self.d for k, l in self.S2):
            raise ValueError("S2 pairs must be distinct, strictly ordered and within d")
        if self.sigma < 0:
            raise ValueError("noise level must be nonnegative")
        if self.family not in FAMILIES:
            raise ValueError(f"family must be one of {FAMILIES}")
        if self.noise not in NOISE_LAWS:
            raise ValueError(f"noise must be one of {NOISE_LAWS}")
        if self.covariates not in COVARIATE_LAWS:
            raise ValueError(f"covariates must be one of {COVARIATE_LAWS}")
        if self.B <= 0 or self.bump_cells < 1 or not self.freqs:
            raise ValueError("invalid B, bump_cells or freqs")

    @property
    def s1(self) -> int:
        return len(self.S1)

    @property
    def s2(self) -> int:
        return len(self.S2)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["S1"] = list(self.S1)
        out["S2"] = [list(p) for p in self.S2]
        return out


@dataclass(eq=False)
class Dataset:
    X: np.ndarray
    y: np.ndarray
    truth: StructuredModel | None = None
    seed: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        if self.X.ndim != 2 or self.y.shape != (self.X.shape[0],):
            raise ValueError("X must be (n, d) and y must be (n,)")
        if self.X.size and (self.X.min() < 0.0 or self.X.max() > 1.0):
            raise ValueError("covariates must lie in [0, 1]")
        if not np.all(np.isfinite(self.y)):
            raise ValueError("responses must be finite")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def subset(self, idx) -> Dataset:
        return Dataset(self.X[idx], self.y[idx], self.truth, self.seed, dict(self.meta))


# --------------------------------------------------------------------------
# Ground truth


_KMAX = float(np.max(np.abs(bump_kernel(np.linspace(-0.5, 0.5, 20001)))))


def _signed(rng: np.random.Generator, lo: float, hi: float) -> float:
    return float(rng.uniform(lo, hi) * rng.choice([-1.0, 1.0]))


def _harmonic_uni(rng, cfg: DgpConfig) -> Component:
    return Component(1, (HarmonicUni(_signed(rng, *cfg.amp1), int(rng.choice(cfg.freqs))),))


def _harmonic_bi(rng, cfg: DgpConfig) -> Component:
    p, q = (int(v) for v in rng.choice(cfg.freqs, 2))
    return Component(2, (HarmonicBi(_signed(rng, *cfg.amp2), p, q),))


def _bump_uni(rng, cfg: DgpConfig) -> Component:
    m = cfg.bump_cells
    coef = rng.choice([-1.0, 1.0], m)
    return Component(1, (BumpSumUni(coef, rng.uniform(*cfg.amp1) / _KMAX),))


def _bump_bi(rng, cfg: DgpConfig) -> Component:
    m = cfg.bump_cells
    coef = rng.choice([-1.0, 1.0], (m, m))
    return Component(2, (BumpSumBi(coef, rng.uniform(*cfg.amp2) / _KMAX**2),))


def _probe_sup(comp: Component) -> float:
    g = np.linspace(0.0, 1.0, PROBE_POINTS)
    if comp.order == 1:
        return float(np.max(np.abs(comp(g))))
    xx, yy = np.meshgrid(g, g, indexing="ij")
    return float(np.max(np.abs(comp(np.column_stack([xx.ravel(), yy.ravel()])))))


def make_truth(cfg: DgpConfig) -> StructuredModel:
    """Identifiable ground truth on the supports ``S1`` and ``S2``.

    Harmonic atoms are ``a cos(2 pi k x)`` and ``b cos(2 pi p x) cos(2 pi q y)``;
    bump atoms are signed sums of the odd grid bumps.  ``mixed`` uses harmonic
    univariate and bump bivariate parts.  Raises :class:`AmplitudeBudgetError`
    when ``|mu|`` plus the probed component sups exceeds ``B``.
    """
    rng = stream(cfg.seed, _STREAM_TRUTH)
    uni = _bump_uni if cfg.family == "bump" else _harmonic_uni
    bi = _harmonic_bi if cfg.family == "harmonic" else _bump_bi
    comps: dict[ComponentKey, Component] = {}
    for j in cfg.S1:
        comps[Uni(j)] = uni(rng, cfg)
    for k, l in cfg.S2:
        comps[Bi(k, l)] = bi(rng, cfg)
    total = abs(cfg.intercept) + sum(_probe_sup(c) for c in comps.values())
    if total > cfg.B:
        raise AmplitudeBudgetError(f"sup-norm bound {total:.4g} exceeds B={cfg.B}")
    return StructuredModel(cfg.d, float(cfg.intercept), comps, float(cfg.B))


def signal_strength(truth: StructuredModel) -> dict:
    """Quadrature L2 norms of all components plus the per-order minima."""
    rule = truth.quadrature_rule()
    rule2 = Quad2D.square(rule)
    norms = {str(k): l2_norm_quad(c, rule2 if k.order == 2 else rule)
             for k, c in sorted(truth.components.items())}
    uni = [v for k, v in norms.items() if k.startswith("u")]
    bi = [v for k, v in norms.items() if k.startswith("b")]
    return {"norms": norms, "min_uni": min(uni, default=None), "min_bi": min(bi, default=None)}


# --------------------------------------------------------------------------
# Sampling


def sample_covariates(rng: np.random.Generator, n: int, d: int, cfg: DgpConfig) -> np.ndarray:
    if cfg.covariates == "uniform":
        return rng.random((n, d))
    a, b = cfg.beta_ab
    return rng.beta(a, b, (n, d))


def sample_noise(rng: np.random.Generator, n: int, cfg: DgpConfig) -> np.ndarray:
    if cfg.sigma == 0.0:
        return np.zeros(n)
    if cfg.noise == "gaussian":
        return cfg.sigma * rng.standard_normal(n)
    r = cfg.sigma * np.sqrt(3.0)
    return rng.uniform(-r, r, n)


def sample_dataset(truth: StructuredModel, cfg: DgpConfig, n: int | None = None,
                   seed: int | None = None) -> Dataset:
    """``X`` from the covariate law and ``y = f0(X) + eps``; deterministic in ``seed``."""
    if truth.d != cfg.d:
        raise ValueError(f"truth has d={truth.d} but config has d={cfg.d}")
    n = cfg.n if n is None else n
    seed = cfg.seed if seed is None else seed
    X = sample_covariates(stream(seed, _STREAM_X), n, cfg.d, cfg)
    eps = sample_noise(stream(seed, _STREAM_NOISE), n, cfg)
    y = truth.predict(X) + eps if n else np.zeros(0)
    return Dataset(X, y, truth, seed)


def make_dataset(cfg: DgpConfig) -> Dataset:
    return sample_dataset(make_truth(cfg), cfg)


def split_dataset(ds: Dataset) -> tuple[Dataset, Dataset]:
    """Order-preserving halves of sizes ``ceil(n/2)`` and ``floor(n/2)``."""
    if ds.n < 2:
        raise ValueError("need at least two rows to split")
    h = (ds.n + 1) // 2
    return ds.subset(slice(0, h)), ds.subset(slice(h, ds.n))


# --------------------------------------------------------------------------
# I/O


def dataset_to_csv(ds: Dataset) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([f"x{j + 1}" for j in range(ds.d)] + ["y"])
    for row, yi in zip(ds.X, ds.y):
        w.writerow([repr(float(v)) for v in row] + [repr(float(yi))])
    return buf.getvalue()


def write_csv(ds: Dataset, path: str | Path) -> None:
    Path(path).write_text(dataset_to_csv(ds))


def read_csv(path: str | Path) -> Dataset:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path} is empty")
    header = rows[0]
    d = len(header) - 1
    if header != [f"x{j + 1}" for j in range(d)] + ["y"]:
        raise ValueError(f"unexpected CSV header {header}")
    data = np.array(rows[1:], dtype=float).reshape(-1, d + 1)
    return Dataset(data[:, :d], data[:, d])


def dataset_to_bytes(ds: Dataset) -> bytes:
    return pack_arrays({"kind": "dataset", "n": ds.n, "d": ds.d, "seed": ds.seed}, [ds.X, ds.y])


def dataset_from_bytes(blob: bytes) -> Dataset:
    head, flat = unpack_arrays(blob)
    n, d = head["n"], head["d"]
    return Dataset(flat[: n * d].reshape(n, d), flat[n * d :], seed=head.get("seed"))
