"""Gauss-Legendre rules on [0, 1] and [0, 1]^2, marginals and L2 norms."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

DEFAULT_NODES = 64
MARGINAL_GRID_SIZE = 257


class QuadratureError(ArithmeticError):
    """An integrand produced a non-finite value on the quadrature nodes."""


@dataclass(frozen=True)
class Quad1D:
    """Nodes in (0, 1) with positive weights summing to one."""

    nodes: np.ndarray
    weights: np.ndarray

    @classmethod
    def gauss_legendre(cls, Q: int = DEFAULT_NODES) -> Quad1D:
        return composite_rule([0.0, 1.0], Q)

    def __len__(self) -> int:
        return self.nodes.size


def composite_rule(breakpoints: Sequence[float], Q: int = DEFAULT_NODES) -> Quad1D:
    """Gauss-Legendre with ``Q`` nodes on every cell between sorted ``breakpoints``.

    Cells must tile [0, 1]; aligning breakpoints with the kinks or supports of an
    integrand restores spectral accuracy on piecewise-smooth functions.
    """
    bp = np.unique(np.asarray(breakpoints, dtype=float))
    if bp[0] != 0.0 or bp[-1] != 1.0:
        raise ValueError("breakpoints must start at 0 and end at 1")
    t, w = np.polynomial.legendre.leggauss(Q)
    a, b = bp[:-1, None], bp[1:, None]
    nodes = (a + (b - a) * (t + 1.0) / 2.0).ravel()
    weights = ((b - a) * w / 2.0).ravel()
    return Quad1D(nodes, weights)


def cell_rule(m: int, Q: int = DEFAULT_NODES) -> Quad1D:
    """Composite rule on the uniform grid ``k / m``."""
    return composite_rule(np.linspace(0.0, 1.0, m + 1), Q)


@dataclass(frozen=True)
class Quad2D:
    """Tensor product ``x_rule`` by ``y_rule``."""

    x_rule: Quad1D
    y_rule: Quad1D

    @classmethod
    def gauss_legendre(cls, Q: int = DEFAULT_NODES) -> Quad2D:
        r = Quad1D.gauss_legendre(Q)
        return cls(r, r)

    @classmethod
    def square(cls, rule: Quad1D) -> Quad2D:
        return cls(rule, rule)

    def points(self) -> tuple[np.ndarray, np.ndarray]:
        """``(n, 2)`` node array in x-major order and matching weights."""
        xx, yy = np.meshgrid(self.x_rule.nodes, self.y_rule.nodes, indexing="ij")
        ww = np.outer(self.x_rule.weights, self.y_rule.weights)
        return np.column_stack([xx.ravel(), yy.ravel()]), ww.ravel()


def _finite(values: np.ndarray) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    if not np.all(np.isfinite(values)):
        raise QuadratureError("integrand is not finite on the quadrature nodes")
    return values


def integrate_1d(f: Callable[[np.ndarray], np.ndarray], rule: Quad1D | None = None) -> float:
    """``sum_i w_i f(x_i)``; ``f`` is called once on the node vector."""
    rule = rule or Quad1D.gauss_legendre()
    vals = _finite(np.broadcast_to(f(rule.nodes), rule.nodes.shape))
    return float(rule.weights @ vals)


def integrate_2d(f: Callable[[np.ndarray], np.ndarray], rule: Quad2D | None = None) -> float:
    """``f`` receives an ``(n, 2)`` array of points."""
    rule = rule or Quad2D.gauss_legendre()
    pts, w = rule.points()
    vals = _finite(np.broadcast_to(f(pts), (pts.shape[0],)))
    return float(w @ vals)


@dataclass(frozen=True, eq=False)
class GridFunction:
    """Piecewise-linear interpolant on [0, 1].

    Knots default to the uniform grid over ``values``; pass ``knots`` (sorted,
    starting at 0 and ending at 1) for a non-uniform grid.
    """

    values: np.ndarray
    knots: np.ndarray | None = None

    def __post_init__(self):
        if self.knots is not None and np.shape(self.knots) != np.shape(self.values):
            raise ValueError("knots and values must have the same shape")

    @property
    def grid(self) -> np.ndarray:
        if self.knots is not None:
            return self.knots
        return np.linspace(0.0, 1.0, self.values.size)

    def same_grid(self, other: GridFunction) -> bool:
        return self.values.shape == other.values.shape and np.array_equal(self.grid, other.grid)

    def __call__(self, x) -> np.ndarray:
        x = np.clip(np.asarray(x, dtype=float), 0.0, 1.0)
        if self.knots is not None:
            return np.interp(x, self.knots, self.values)
        m = self.values.size - 1
        t = x * m
        k = np.minimum(t.astype(np.int64), m - 1)
        frac = t - k
        return self.values[k] * (1.0 - frac) + self.values[k + 1] * frac

    def _check(self, other: GridFunction) -> None:
        if not self.same_grid(other):
            raise ValueError("grid functions live on different grids")

    def __add__(self, other: GridFunction) -> GridFunction:
        self._check(other)
        return GridFunction(self.values + other.values, self.knots)

    def __neg__(self) -> GridFunction:
        return GridFunction(-self.values, self.knots)


def marginal_knots(rule: Quad1D, grid_size: int = MARGINAL_GRID_SIZE) -> np.ndarray:
    """Uniform grid merged with the rule's nodes.

    Interpolants on these knots are exact at every quadrature node, so
    integrating a bivariate function x-first or y-first through stored marginals
    gives the same double sum.
    """
    return np.unique(np.concatenate([np.linspace(0.0, 1.0, grid_size), rule.nodes]))


def marginal_1d(f: Callable[[np.ndarray], np.ndarray], axis: int | str = "y",
                rule: Quad1D | None = None, grid_size: int = MARGINAL_GRID_SIZE,
                knots: np.ndarray | None = None) -> GridFunction:
    """Integrate a bivariate ``f`` over one axis; the result is a grid interpolant.

    ``axis`` names the variable integrated out: ``"y"`` (or 1) gives
    ``g(x) = int f(x, y) dy``, ``"x"`` (or 0) gives ``g(y) = int f(x, y) dx``.
    Without ``knots`` the grid is uniform with ``grid_size`` points.
    """
    rule = rule or Quad1D.gauss_legendre()
    ax = {"x": 0, "y": 1}.get(axis, axis)
    if ax not in (0, 1):
        raise ValueError(f"axis must be 'x' or 'y', got {axis!r}")
    grid = np.linspace(0.0, 1.0, grid_size) if knots is None else np.asarray(knots, dtype=float)
    G, T = np.meshgrid(grid, rule.nodes, indexing="ij")
    pts = np.column_stack([G.ravel(), T.ravel()]) if ax == 1 else np.column_stack([T.ravel(), G.ravel()])
    vals = _finite(np.asarray(f(pts), dtype=float)).reshape(grid.size, rule.nodes.size)
    return GridFunction(vals @ rule.weights, None if knots is None else grid)


def l2_norm_quad(f: Callable[[np.ndarray], np.ndarray], rule: Quad1D | Quad2D | None = None,
                 dim: int = 1) -> float:
    """``sqrt(int f^2)`` on [0, 1] (``dim=1``) or [0, 1]^2 (``dim=2`` or a Quad2D rule)."""
    if isinstance(rule, Quad2D) or (rule is None and dim == 2):
        return float(np.sqrt(integrate_2d(lambda p: np.asarray(f(p)) ** 2, rule)))
    return float(np.sqrt(integrate_1d(lambda x: np.asarray(f(x)) ** 2, rule)))


def empirical_norm(f: Callable[[np.ndarray], np.ndarray] | np.ndarray, X=None) -> float:
    """Root mean square of ``f`` over the rows of ``X``.

    ``f`` may also be a precomputed vector of values, in which case ``X`` is ignored.
    """
    if callable(f):
        X = np.asarray(X, dtype=float)
        if X.shape[0] == 0:
            raise ValueError("empirical norm of an empty sample")
        vals = np.asarray(f(X), dtype=float)
    else:
        vals = np.asarray(f, dtype=float)
    if vals.size == 0:
        raise ValueError("empirical norm of an empty sample")
    return float(np.sqrt(np.mean(vals**2)))
