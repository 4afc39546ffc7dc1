"""Structured two-way interaction models and the ANOVA (debiasing) projection.

A model is ``clamp(mu + sum_j f_j(x_j) + sum_{k<l} f_kl(x_k, x_l), -B, B)``.
Feature indices are 0-based throughout the code.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np

from .nn import ShapeError, mlp_from_bytes, mlp_to_bytes, pack_arrays, unpack_arrays
from .quadrature import (
    DEFAULT_NODES,
    MARGINAL_GRID_SIZE,
    GridFunction,
    Quad1D,
    Quad2D,
    composite_rule,
    integrate_1d,
    integrate_2d,
    marginal_1d,
    marginal_knots,
)
from .terms import (
    BumpSumBi,
    BumpSumUni,
    Component,
    GridTerm,
    HarmonicBi,
    HarmonicUni,
    NetTerm,
    Term,
)

UNI_TOL = 1e-9
BI_TOL = 1e-6


@dataclass(frozen=True, order=True)
class ComponentKey:
    """``Uni(j)`` has ``idx == (j,)``; ``Bi(k, l)`` has ``idx == (k, l)`` with ``k < l``."""

    idx: tuple[int, ...]

    def __post_init__(self):
        if len(self.idx) not in (1, 2) or any(i < 0 for i in self.idx):
            raise ValueError(f"invalid component index {self.idx}")
        if len(self.idx) == 2 and not self.idx[0] < self.idx[1]:
            raise ValueError(f"pair keys must be strictly ordered, got {self.idx}")

    @property
    def order(self) -> int:
        return len(self.idx)

    def valid_for(self, d: int) -> bool:
        return all(i < d for i in self.idx)

    def __str__(self) -> str:
        return "u%d" % self.idx if self.order == 1 else "b%d_%d" % self.idx

    @classmethod
    def parse(cls, s: str) -> ComponentKey:
        if s.startswith("u"):
            return cls((int(s[1:]),))
        if s.startswith("b"):
            k, l = s[1:].split("_")
            return cls((int(k), int(l)))
        raise ValueError(f"cannot parse component key {s!r}")


def Uni(j: int) -> ComponentKey:
    return ComponentKey((int(j),))


def Bi(k: int, l: int) -> ComponentKey:
    return ComponentKey((int(k), int(l)))


def all_keys(d: int, orders: Iterable[int] = (1, 2)) -> list[ComponentKey]:
    orders = set(orders)
    keys = [Uni(j) for j in range(d)] if 1 in orders else []
    if 2 in orders:
        keys += [Bi(k, l) for k in range(d) for l in range(k + 1, d)]
    return keys


@dataclass(frozen=True, eq=False)
class StructuredModel:
    d: int
    intercept: float = 0.0
    components: Mapping[ComponentKey, Component] = field(default_factory=dict)
    B: float = np.inf

    def __post_init__(self):
        if self.B <= 0:
            raise ValueError("truncation bound B must be positive")
        for key, comp in self.components.items():
            if not key.valid_for(self.d):
                raise ValueError(f"component {key} invalid for d={self.d}")
            if comp.order != key.order:
                raise ValueError(f"component {key} has order {comp.order}")

    @property
    def uni(self) -> dict[ComponentKey, Component]:
        return {k: c for k, c in self.components.items() if k.order == 1}

    @property
    def bi(self) -> dict[ComponentKey, Component]:
        return {k: c for k, c in self.components.items() if k.order == 2}

    def keys(self) -> list[ComponentKey]:
        return sorted(self.components)

    def component_inputs(self, key: ComponentKey, X: np.ndarray) -> np.ndarray:
        return X[:, key.idx[0]] if key.order == 1 else X[:, list(key.idx)]

    def component_values(self, X) -> dict[ComponentKey, np.ndarray]:
        X = self._check_X(X)
        return {k: c(self.component_inputs(k, X)) for k, c in sorted(self.components.items())}

    def raw_predict(self, X) -> np.ndarray:
        """Structured sum without truncation."""
        X = self._check_X(X)
        out = np.full(X.shape[0], float(self.intercept))
        for k, c in sorted(self.components.items()):
            out += c(self.component_inputs(k, X))
        return out

    def predict(self, X) -> np.ndarray:
        return np.clip(self.raw_predict(X), -self.B, self.B)

    __call__ = predict

    def _check_X(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != self.d:
            raise ShapeError(f"expected {self.d} features, got {X.shape[1]}")
        return X

    def with_components(self, components: Mapping[ComponentKey, Component], intercept: float | None = None) -> StructuredModel:
        return replace(self, components=dict(components),
                       intercept=self.intercept if intercept is None else intercept)

    def quadrature_rule(self, Q: int = DEFAULT_NODES) -> Quad1D:
        """Composite Gauss-Legendre rule aligned with every term's breakpoints."""
        bps = {0.0, 1.0}
        for c in self.components.values():
            bps.update(c.breakpoints)
        return composite_rule(sorted(bps), Q)


def model_eval(m: StructuredModel, x) -> float:
    x = np.asarray(x, dtype=float)
    if x.shape != (m.d,):
        raise ShapeError(f"expected a vector of length {m.d}, got shape {x.shape}")
    return float(m.predict(x[None, :])[0])


# --------------------------------------------------------------------------
# Identifiability


@dataclass
class AnovaReport:
    uni_defects: dict[ComponentKey, float]
    bi_defects: dict[ComponentKey, float]
    intercept_shift: float

    @property
    def max_uni_defect(self) -> float:
        return max(self.uni_defects.values(), default=0.0)

    @property
    def max_bi_defect(self) -> float:
        return max(self.bi_defects.values(), default=0.0)

    def to_dict(self) -> dict:
        return {
            "uni_defects": {str(k): v for k, v in sorted(self.uni_defects.items())},
            "bi_defects": {str(k): v for k, v in sorted(self.bi_defects.items())},
            "intercept_shift": self.intercept_shift,
        }


def _resolve_rule(m: StructuredModel, rule: Quad1D | None) -> Quad1D:
    return m.quadrature_rule() if rule is None else rule


def bi_marginals(comp: Component, rule: Quad1D, grid_size: int = MARGINAL_GRID_SIZE) -> tuple[GridFunction, GridFunction]:
    """``(int f dy as a function of x, int f dx as a function of y)`` on the merged knots."""
    knots = marginal_knots(rule, grid_size)
    return (marginal_1d(comp, "y", rule, knots=knots), marginal_1d(comp, "x", rule, knots=knots))


def identifiability_defects(m: StructuredModel, rule: Quad1D | None = None) -> AnovaReport:
    """Integral defects of univariate parts and sup-over-grid marginal defects of bivariate parts.

    The grid is the uniform marginal grid merged with the rule's nodes.
    """
    rule = _resolve_rule(m, rule)
    uni = {k: abs(integrate_1d(c, rule)) for k, c in m.uni.items()}
    bi = {}
    for k, c in m.bi.items():
        gx, gy = bi_marginals(c, rule)
        bi[k] = float(max(np.max(np.abs(gx.values)), np.max(np.abs(gy.values))))
    return AnovaReport(uni, bi, 0.0)


def anova_project(m: StructuredModel, rule: Quad1D | None = None,
                  grid_size: int = MARGINAL_GRID_SIZE) -> tuple[StructuredModel, AnovaReport]:
    """Rewrite ``m`` into identifiable form without changing the function it computes.

    For every bivariate part ``phi`` with marginals ``g1(x) = int phi dy`` and
    ``g2(y) = int phi dx`` (grid interpolants) the part becomes
    ``phi - g1 - g2 + c`` with ``c`` the double integral of ``phi``; ``g1`` and
    ``g2`` are added to the matching univariate slots and ``c`` is taken from
    the intercept.  Each univariate part is then shifted to integrate to zero
    with the shift going into the intercept.  The interpolation knots include
    the rule's nodes, which makes the double integral the same whichever
    marginal it is computed from.
    """
    rule = _resolve_rule(m, rule)
    comps = dict(m.components)
    mu = float(m.intercept)
    for key in sorted(k for k in comps if k.order == 2):
        comp = comps[key]
        gx, gy = bi_marginals(comp, rule, grid_size)
        c = 0.5 * (integrate_1d(gx, rule) + integrate_1d(gy, rule))
        comps[key] = comp.with_grid(-gx, axis=0).with_grid(-gy, axis=1).shifted(c)
        mu -= c
        for axis, g in ((0, gx), (1, gy)):
            ukey = Uni(key.idx[axis])
            comps[ukey] = comps.get(ukey, Component(1)).with_grid(g)
    for key in sorted(k for k in comps if k.order == 1):
        I = integrate_1d(comps[key], rule)
        comps[key] = comps[key].shifted(-I)
        mu += I
    out = m.with_components(comps, intercept=mu)
    report = identifiability_defects(out, rule)
    report.intercept_shift = mu - float(m.intercept)
    return out, report


def is_projected(m: StructuredModel, rule: Quad1D | None = None,
                 uni_tol: float = UNI_TOL, bi_tol: float = BI_TOL) -> bool:
    rep = identifiability_defects(m, rule)
    return rep.max_uni_defect <= uni_tol and rep.max_bi_defect <= bi_tol


# --------------------------------------------------------------------------
# Error metrics


def _zero(order: int) -> Component:
    return Component(order)


def component_l2_errors(fit: StructuredModel, truth: StructuredModel, rule: Quad1D | None = None,
                        uni_tol: float = UNI_TOL, bi_tol: float = BI_TOL) -> dict[ComponentKey, float]:
    """Per-component ``L2([0,1]^k)`` distances; missing components count as zero."""
    if fit.d != truth.d:
        raise ShapeError("models have different dimensions")
    if rule is None:
        bps = {0.0, 1.0}
        for mod in (fit, truth):
            for c in mod.components.values():
                bps.update(c.breakpoints)
        rule = composite_rule(sorted(bps), DEFAULT_NODES)
    for name, mod in (("fit", fit), ("truth", truth)):
        if not is_projected(mod, None, uni_tol, bi_tol):
            raise ValueError(f"{name} model is not ANOVA-projected; call anova_project first")
    out = {}
    rule2 = Quad2D.square(rule)
    for key in sorted(set(fit.components) | set(truth.components)):
        a = fit.components.get(key, _zero(key.order))
        b = truth.components.get(key, _zero(key.order))
        if key.order == 1:
            val = integrate_1d(lambda x: (a(x) - b(x)) ** 2, rule)
        else:
            val = integrate_2d(lambda p: (a(p) - b(p)) ** 2, rule2)
        out[key] = float(np.sqrt(max(val, 0.0)))
    return out


def uniform_sampler(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    return rng.random((n, d))


def mc_l2_error(fit: StructuredModel, truth: StructuredModel, n_mc: int,
                sampler: Callable[[np.random.Generator, int, int], np.ndarray] = uniform_sampler,
                seed: int = 0) -> tuple[float, float]:
    """Monte Carlo ``E[(fit(X) - truth(X))^2]`` and its standard error."""
    if n_mc <= 0:
        raise ValueError("n_mc must be positive")
    rng = np.random.default_rng(seed)
    sq = np.empty(0)
    chunks = []
    left = n_mc
    while left > 0:
        b = min(left, 65536)
        X = sampler(rng, b, fit.d)
        chunks.append((fit.predict(X) - truth.predict(X)) ** 2)
        left -= b
    sq = np.concatenate(chunks)
    se = float(np.std(sq, ddof=1) / np.sqrt(n_mc)) if n_mc > 1 else 0.0
    return float(np.mean(sq)), se


# --------------------------------------------------------------------------
# Serialization: directory with manifest.json and one binary block per array


def _term_to_json(t: Term, blobs: dict[str, bytes], stem: str) -> dict:
    if isinstance(t, NetTerm):
        blobs[f"{stem}.net"] = mlp_to_bytes(t.net)
        return {"kind": "net", "file": f"{stem}.net", "bound": t.bound}
    if isinstance(t, GridTerm):
        g = t.grid
        arrays = [g.values] if g.knots is None else [g.values, g.knots]
        blobs[f"{stem}.grid"] = pack_arrays({"size": int(g.values.size), "knots": g.knots is not None}, arrays)
        return {"kind": "grid", "file": f"{stem}.grid", "axis": t.axis}
    if isinstance(t, HarmonicUni):
        return {"kind": "harmonic", "amp": t.amp, "freq": t.freq}
    if isinstance(t, HarmonicBi):
        return {"kind": "harmonic", "amp": t.amp, "p": t.p, "q": t.q}
    if isinstance(t, (BumpSumUni, BumpSumBi)):
        return {"kind": "bump", "scale": t.scale, "coef": np.asarray(t.coef).tolist()}
    raise TypeError(f"cannot serialize term {type(t).__name__}")


def _term_from_json(spec: dict, order: int, root: Path) -> Term:
    kind = spec["kind"]
    if kind == "net":
        return NetTerm(mlp_from_bytes((root / spec["file"]).read_bytes()), spec.get("bound"))
    if kind == "grid":
        head, flat = unpack_arrays((root / spec["file"]).read_bytes())
        n = head["size"]
        knots = flat[n:] if head.get("knots") else None
        return GridTerm(GridFunction(flat[:n], knots), spec["axis"], order)
    if kind == "harmonic":
        if order == 1:
            return HarmonicUni(spec["amp"], spec["freq"])
        return HarmonicBi(spec["amp"], spec["p"], spec["q"])
    if kind == "bump":
        coef = np.asarray(spec["coef"], dtype=float)
        return (BumpSumUni if order == 1 else BumpSumBi)(coef, spec["scale"])
    raise ValueError(f"unknown term kind {kind!r}")


def model_to_manifest(m: StructuredModel) -> tuple[dict, dict[str, bytes]]:
    blobs: dict[str, bytes] = {}
    comps = []
    for key, comp in sorted(m.components.items()):
        terms = [_term_to_json(t, blobs, f"{key}_{i}") for i, t in enumerate(comp.terms)]
        comps.append({"key": str(key), "offset": comp.offset, "terms": terms})
    manifest = {
        "format_version": 1,
        "d": m.d,
        "B": None if not np.isfinite(m.B) else m.B,
        "intercept": m.intercept,
        "components": comps,
    }
    return manifest, blobs


def save_model(m: StructuredModel, directory: str | Path) -> None:
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    manifest, blobs = model_to_manifest(m)
    for name, blob in blobs.items():
        (root / name).write_bytes(blob)
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def load_model(directory: str | Path) -> StructuredModel:
    root = Path(directory)
    man = json.loads((root / "manifest.json").read_text())
    comps = {}
    for spec in man["components"]:
        key = ComponentKey.parse(spec["key"])
        terms = tuple(_term_from_json(t, key.order, root) for t in spec["terms"])
        comps[key] = Component(key.order, terms, spec["offset"])
    B = man["B"] if man["B"] is not None else np.inf
    return StructuredModel(man["d"], man["intercept"], comps, B)
