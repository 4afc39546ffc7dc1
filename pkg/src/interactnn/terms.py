"""Building blocks of component functions.

A component of a structured model is a sum of terms plus a constant.  Terms
take ``(n,)`` inputs when univariate and ``(n, 2)`` inputs when bivariate.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import ClassVar

import numpy as np

from .nn import Mlp, forward_batch
from .quadrature import GridFunction


def bump_kernel(u) -> np.ndarray:
    """Odd C-infinity kernel ``u * exp(-1 / (1 - 4 u^2))`` supported on (-1/2, 1/2)."""
    u = np.asarray(u, dtype=float)
    out = np.zeros_like(u)
    inside = np.abs(u) < 0.5
    ui = u[inside]
    out[inside] = ui * np.exp(-1.0 / (1.0 - 4.0 * ui * ui))
    return out


class Term:
    order: ClassVar[int]
    kind: ClassVar[str]
    breakpoints: tuple[float, ...] = ()

    def __call__(self, Z: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def scaled(self, c: float) -> Term:
        raise NotImplementedError


@dataclass(frozen=True, eq=False)
class NetTerm(Term):
    """A subnet, optionally truncated to ``[-bound, bound]``."""

    net: Mlp
    bound: float | None = None
    kind: ClassVar[str] = "net"

    @property
    def order(self) -> int:  # type: ignore[override]
        return self.net.input_dim

    def __call__(self, Z):
        out = forward_batch(self.net, Z)
        if self.bound is not None:
            np.clip(out, -self.bound, self.bound, out=out)
        return out

    def scaled(self, c):
        if self.bound is not None:
            raise ValueError("cannot rescale a truncated subnet exactly")
        net = self.net.copy()
        net.weights[-1] *= c
        net.biases[-1] *= c
        return NetTerm(net)


@dataclass(frozen=True)
class HarmonicUni(Term):
    """``amp * cos(2 pi freq x)``."""

    amp: float
    freq: int = 1
    order: ClassVar[int] = 1
    kind: ClassVar[str] = "harmonic"

    def __call__(self, Z):
        return self.amp * np.cos(2.0 * np.pi * self.freq * np.asarray(Z, dtype=float))

    def scaled(self, c):
        return HarmonicUni(self.amp * c, self.freq)


@dataclass(frozen=True)
class HarmonicBi(Term):
    """``amp * cos(2 pi p x) cos(2 pi q y)``."""

    amp: float
    p: int = 1
    q: int = 1
    order: ClassVar[int] = 2
    kind: ClassVar[str] = "harmonic"

    def __call__(self, Z):
        Z = np.asarray(Z, dtype=float)
        return self.amp * np.cos(2.0 * np.pi * self.p * Z[:, 0]) * np.cos(2.0 * np.pi * self.q * Z[:, 1])

    def scaled(self, c):
        return HarmonicBi(self.amp * c, self.p, self.q)


@dataclass(frozen=True, eq=False)
class FuncTerm(Term):
    """Wraps an arbitrary vectorized callable; useful for closed-form test functions."""

    fn: object
    order_: int = 1
    kind: ClassVar[str] = "func"

    @property
    def order(self) -> int:  # type: ignore[override]
        return self.order_

    def __call__(self, Z):
        return np.asarray(self.fn(np.asarray(Z, dtype=float)), dtype=float)

    def scaled(self, c):
        fn = self.fn
        return FuncTerm(lambda Z: c * fn(Z), self.order_)


def _cell(x: np.ndarray, m: int) -> tuple[np.ndarray, np.ndarray]:
    k = np.clip(np.floor(x * m).astype(np.int64), 0, m - 1)
    return k, (x - (k + 0.5) / m) * m


@dataclass(frozen=True, eq=False)
class BumpSumUni(Term):
    """``sum_k coef[k] * scale * K((x - x_k) / h)`` with ``h = 1 / m``, ``x_k = (k + 1/2) h``."""

    coef: np.ndarray
    scale: float
    order: ClassVar[int] = 1
    kind: ClassVar[str] = "bump"

    @property
    def m(self) -> int:
        return self.coef.shape[0]

    @property
    def breakpoints(self):  # type: ignore[override]
        return tuple(np.linspace(0.0, 1.0, self.m + 1))

    def __call__(self, Z):
        x = np.asarray(Z, dtype=float)
        k, u = _cell(x, self.m)
        return self.coef[k] * self.scale * bump_kernel(u)

    def scaled(self, c):
        return BumpSumUni(self.coef * c, self.scale)


@dataclass(frozen=True, eq=False)
class BumpSumBi(Term):
    """Tensor bumps ``sum_{k,l} coef[k, l] * scale * K((x - x_k)/h) K((y - x_l)/h)``."""

    coef: np.ndarray
    scale: float
    order: ClassVar[int] = 2
    kind: ClassVar[str] = "bump"

    @property
    def m(self) -> int:
        return self.coef.shape[0]

    @property
    def breakpoints(self):  # type: ignore[override]
        return tuple(np.linspace(0.0, 1.0, self.m + 1))

    def __call__(self, Z):
        Z = np.asarray(Z, dtype=float)
        kx, ux = _cell(Z[:, 0], self.m)
        ky, uy = _cell(Z[:, 1], self.m)
        return self.coef[kx, ky] * self.scale * bump_kernel(ux) * bump_kernel(uy)

    def scaled(self, c):
        return BumpSumBi(self.coef * c, self.scale)


@dataclass(frozen=True, eq=False)
class GridTerm(Term):
    """Linear interpolant of grid values along one input axis.

    In a bivariate component ``axis`` selects the coordinate (0 for x, 1 for y).
    """

    grid: GridFunction
    axis: int = 0
    order_: int = 1
    kind: ClassVar[str] = "grid"

    @property
    def order(self) -> int:  # type: ignore[override]
        return self.order_

    def __call__(self, Z):
        Z = np.asarray(Z, dtype=float)
        return self.grid(Z if self.order_ == 1 else Z[:, self.axis])

    def scaled(self, c):
        return GridTerm(GridFunction(self.grid.values * c, self.grid.knots), self.axis, self.order_)


@dataclass(frozen=True, eq=False)
class Component:
    """Sum of terms plus a constant offset."""

    order: int
    terms: tuple[Term, ...] = field(default_factory=tuple)
    offset: float = 0.0

    def __call__(self, Z) -> np.ndarray:
        Z = np.asarray(Z, dtype=float)
        n = Z.shape[0]
        out = np.full(n, self.offset)
        for t in self.terms:
            out += t(Z)
        return out

    @property
    def breakpoints(self) -> tuple[float, ...]:
        bps: set[float] = set()
        for t in self.terms:
            bps.update(t.breakpoints)
        return tuple(sorted(bps))

    def shifted(self, c: float) -> Component:
        """Add the constant ``c``, folding it into the output bias of the leading subnet when possible."""
        if self.terms and isinstance(self.terms[0], NetTerm) and self.terms[0].bound is None:
            net = self.terms[0].net.copy()
            net.biases[-1] = net.biases[-1] + c
            return Component(self.order, (NetTerm(net),) + self.terms[1:], self.offset)
        return Component(self.order, self.terms, self.offset + c)

    def with_grid(self, g: GridFunction, axis: int = 0) -> Component:
        """Add a grid interpolant on ``axis``, merging with an existing one on the same grid."""
        terms = list(self.terms)
        for i, t in enumerate(terms):
            if isinstance(t, GridTerm) and t.axis == axis and t.grid.same_grid(g):
                terms[i] = GridTerm(t.grid + g, axis, self.order)
                break
        else:
            terms.append(GridTerm(GridFunction(np.array(g.values, dtype=float), g.knots), axis, self.order))
        return Component(self.order, tuple(terms), self.offset)

    def scaled(self, c: float) -> Component:
        return Component(self.order, tuple(t.scaled(c) for t in self.terms), self.offset * c)

    def nets(self) -> list[NetTerm]:
        return [t for t in self.terms if isinstance(t, NetTerm)]
