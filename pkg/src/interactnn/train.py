"""Hyperparameter plans and the two fitting procedures (plain ERM and group-sparse penalized)."""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .model import ComponentKey, StructuredModel, all_keys
from .nn import MlpBank, OptimState, TrainingDivergence, adam_update, mlp_init
from .synthdata import Dataset
from .terms import Component, NetTerm

REGIMES = ("low-dim", "high-dim-ERM-free", "high-dim-RSC")
SMOOTH_EPS = 1e-8
MAD_SCALE = 1.4826


# --------------------------------------------------------------------------
# Plans


def realized_width(N: int) -> int:
    """``ceil(N max(1, ln N))`` floored at 4."""
    return max(4, math.ceil(N * max(1.0, math.log(N))))


def complexity(N: int) -> float:
    """``V = N^2 (ln N)^3`` capped below by one."""
    return max(1.0, N * N * math.log(N) ** 3)


@dataclass(frozen=True)
class HyperPlan:
    regime: str
    n: int
    d: int
    N1: int
    N2: int
    depth1: int = 3
    depth2: int = 3
    lam1: float = 0.0
    lam2: float = 0.0
    V1: float = 1.0
    V2: float = 1.0
    c1: float = 1.0
    c2: float = 1.0
    C3: float = 0.5
    C4: float = 0.5
    sigma_hat: float = 0.0
    B: float = 10.0
    beta1: float = 2.0
    beta2: float = 2.0

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ValueError(f"regime must be one of {REGIMES}")
        if self.lam1 < 0 or self.lam2 < 0:
            raise ValueError("penalty levels must be nonnegative")

    @property
    def w1(self) -> int:
        return realized_width(self.N1)

    @property
    def w2(self) -> int:
        return realized_width(self.N2)

    def layer_sizes(self, order: int) -> tuple[int, ...]:
        w, L = (self.w1, self.depth1) if order == 1 else (self.w2, self.depth2)
        return (order,) + (w,) * L + (1,)

    @property
    def thresholds(self) -> tuple[float, float]:
        return self.c1 * self.lam1, self.c2 * self.lam2

    def to_dict(self) -> dict:
        out = asdict(self)
        out.update(w1=self.w1, w2=self.w2)
        return out


def plan_lowdim(n: int, d: int, beta1: float, beta2: float, B: float = 10.0, depth: int = 3) -> HyperPlan:
    """``N1 = n^(1/(2(2 beta1 + 1)))`` and ``N2 = n^(1/(2(beta2 + 1)))``, rounded, at least 2."""
    if n < 2 or beta1 <= 0 or beta2 <= 0:
        raise ValueError("need n >= 2 and positive smoothness")
    N1 = max(2, round(n ** (1.0 / (2 * (2 * beta1 + 1)))))
    N2 = max(2, round(n ** (1.0 / (2 * (beta2 + 1)))))
    return HyperPlan("low-dim", n, d, N1, N2, depth, depth, B=B, beta1=beta1, beta2=beta2,
                     V1=complexity(N1), V2=complexity(N2))


def penalty_levels(n: int, d: int, V1: float, V2: float, sigma_hat: float,
                   C3: float = 0.5, C4: float = 0.5) -> tuple[float, float]:
    """``C sigma sqrt(V ln n / n + k ln d / n)`` with ``k = 2`` (univariate) and ``k = 3`` (pairs)."""
    ln_n, ln_d = math.log(n), math.log(d)
    lam1 = C3 * sigma_hat * math.sqrt(V1 * ln_n / n + 2.0 * ln_d / n)
    lam2 = C4 * sigma_hat * math.sqrt(V2 * ln_n / n + 3.0 * ln_d / n)
    return lam1, lam2


def plan_highdim(n: int, d: int, beta1: float, beta2: float, sigma_hat: float,
                 C3: float = 0.5, C4: float = 0.5, c1: float = 1.0, c2: float = 1.0,
                 B: float = 10.0, depth: int = 3, rsc: bool = True) -> HyperPlan:
    """Widths and penalty levels for the sparse high-dimensional regime.

    With ``rsc`` the widths are ``n^(1/(2(1 + 2 beta1)))`` and ``n^(1/(2(1 + beta2)))``;
    without it they are ``n^(1/(2(1 + 4 beta1)))`` and ``n^(1/(2(1 + 2 beta2)))``.
    """
    if n < 2 or d < 1 or sigma_hat < 0:
        raise ValueError("need n >= 2, d >= 1 and sigma_hat >= 0")
    if rsc:
        N1 = max(2, round(n ** (1.0 / (2 * (1 + 2 * beta1)))))
        N2 = max(2, round(n ** (1.0 / (2 * (1 + beta2)))))
    else:
        N1 = max(2, round(n ** (1.0 / (2 * (1 + 4 * beta1)))))
        N2 = max(2, round(n ** (1.0 / (2 * (1 + 2 * beta2)))))
    V1, V2 = complexity(N1), complexity(N2)
    lam1, lam2 = penalty_levels(n, d, V1, V2, sigma_hat, C3, C4)
    return HyperPlan("high-dim-RSC" if rsc else "high-dim-ERM-free", n, d, N1, N2, depth, depth,
                     lam1, lam2, V1, V2, c1, c2, C3, C4, sigma_hat, B, beta1, beta2)


def hat_features(X: np.ndarray, knots: int = 6) -> np.ndarray:
    """Piecewise-linear hat basis per coordinate on ``knots`` equispaced knots."""
    t = np.linspace(0.0, 1.0, knots)
    width = t[1] - t[0]
    H = np.maximum(0.0, 1.0 - np.abs(X[:, :, None] - t[None, None, :]) / width)
    return H.reshape(X.shape[0], -1)


def estimate_sigma(ds: Dataset, alpha: float = 1.0, knots: int = 6) -> float:
    """Noise scale from the residual MAD (times 1.4826) of a pilot ridge fit on hat features."""
    F = hat_features(ds.X, knots)
    F = F - F.mean(axis=0)
    yc = ds.y - ds.y.mean()
    coef = np.linalg.solve(F.T @ F + alpha * np.eye(F.shape[1]), F.T @ yc)
    r = yc - F @ coef
    return float(MAD_SCALE * np.median(np.abs(r - np.median(r))))


# --------------------------------------------------------------------------
# Fitting


@dataclass
class OptConfig:
    steps: int = 5000
    lr: float = 1e-2
    restarts: int = 3
    seed: int = 0
    cosine: bool = True
    eps: float = SMOOTH_EPS
    spread_bias: bool = True
    output_scale: float | None = None
    dtype: str = "float64"
    additive_warmup: int = 0

    def __post_init__(self):
        if self.steps < 0 or self.restarts < 1 or self.lr <= 0:
            raise ValueError("invalid optimizer configuration")
        if self.additive_warmup < 0:
            raise ValueError("additive_warmup is a nonnegative step count")
        if self.dtype not in ("float64", "float32"):
            raise ValueError("dtype must be float64 or float32")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(eq=False)
class FitResult:
    model: StructuredModel
    trace: list[float]
    restarts: int
    norms: dict[ComponentKey, float]
    objective: float
    loss: float
    penalty: float
    init_objective: float
    restart_objectives: list[float] = field(default_factory=list)
    diverged: int = 0
    wall_time: float = 0.0
    penalized: bool = False

    def summary(self, timing: bool = True) -> dict:
        out = {
            "objective": self.objective,
            "loss": self.loss,
            "penalty": self.penalty,
            "init_objective": self.init_objective,
            "restarts": self.restarts,
            "restart_objectives": self.restart_objectives,
            "diverged": self.diverged,
            "penalized": self.penalized,
            "norms": {str(k): v for k, v in sorted(self.norms.items())},
        }
        if timing:
            out["wall_time"] = self.wall_time
        return out


class _Problem:
    """Structured network on a fixed design, evaluated with one bank per order."""

    def __init__(self, X: np.ndarray, y: np.ndarray, keys: Sequence[ComponentKey], plan: HyperPlan,
                 lam: tuple[float, float], clamp_components: bool, eps: float, dtype=np.float64):
        self.X, self.y, self.n = X, y, X.shape[0]
        self.dtype = np.dtype(dtype)
        self.keys = {o: sorted(k for k in keys if k.order == o) for o in (1, 2)}
        self.inputs = {o: np.ascontiguousarray(np.stack([X[:, list(k.idx)].T for k in ks]), dtype=self.dtype)
                       for o, ks in self.keys.items() if ks}
        self.plan, self.lam, self.eps = plan, lam, eps
        self.B = plan.B
        self.clamp = clamp_components

    def init(self, rng: np.random.Generator, spread_bias: bool,
             output_scale: float | None = None) -> tuple[np.ndarray, dict[int, MlpBank]]:
        total = sum(len(v) for v in self.keys.values())
        scale = 1.0 / math.sqrt(total) if output_scale is None else output_scale
        banks = {}
        for o, ks in self.keys.items():
            if not ks:
                continue
            nets = [mlp_init(self.plan.layer_sizes(o), int(rng.integers(2**63 - 1))) for _ in ks]
            bank = cast_bank(MlpBank.from_nets(nets), self.dtype)
            if spread_bias:
                self._spread(bank, self.inputs[o], rng)
            bank.weights[-1] *= scale
            banks[o] = bank
        return np.array([self.y.mean() if self.n else 0.0]), banks

    @staticmethod
    def _spread(bank: MlpBank, Xg: np.ndarray, rng: np.random.Generator, probes: int = 256) -> None:
        """Set each hidden bias at a random quantile of the unit's pre-activations on the data.

        Every hidden unit then starts active on a nonempty part of the sample,
        which avoids dead units and flat regions in narrow networks.
        """
        n = Xg.shape[2]
        if n == 0:
            return
        idx = np.linspace(0, n - 1, min(n, probes)).astype(np.int64)
        h = Xg[:, :, idx]
        for W, b in zip(bank.weights[:-1], bank.biases[:-1]):
            z = np.matmul(W, h)
            q = rng.uniform(0.1, 0.9, size=b.shape)
            zs = np.sort(z, axis=2)
            pos = np.minimum((q * (zs.shape[2] - 1)).astype(np.int64), zs.shape[2] - 1)
            b[:] = -np.take_along_axis(zs, pos[:, :, None], axis=2)[:, :, 0]
            h = np.maximum(z + b[:, :, None], 0.0)

    def frozen(self, banks: dict[int, MlpBank]) -> dict[int, tuple[np.ndarray, np.ndarray]]:
        """Clamped outputs and smoothed norms of banks held fixed during a phase."""
        out = {}
        for o, bank in banks.items():
            c, _ = bank.forward(self.inputs[o])
            if self.clamp:
                np.clip(c, -self.B, self.B, out=c)
            out[o] = (c.sum(axis=0), np.sqrt(np.mean(c * c, axis=1) + self.eps**2))
        return out

    def evaluate(self, mu: np.ndarray, banks: dict[int, MlpBank], grad: bool,
                 frozen: dict[int, tuple[np.ndarray, np.ndarray]] | None = None):
        """Loss, penalty, norms and gradients for ``mu`` and ``banks``.

        ``frozen`` holds precomputed ``(output sum, norms)`` of banks that are
        part of the model but receive no gradient.
        """
        frozen = frozen or {}
        comps, caches, masks = {}, {}, {}
        pred = np.full(self.n, mu[0])
        for total, _ in frozen.values():
            pred += total
        for o, bank in banks.items():
            out, cache = bank.forward(self.inputs[o])
            if self.clamp:
                masks[o] = np.abs(out) < self.B
                np.clip(out, -self.B, self.B, out=out)
            comps[o], caches[o] = out, cache
            pred += out.sum(axis=0)
        outer = np.abs(pred) < self.B
        np.clip(pred, -self.B, self.B, out=pred)
        r = self.y - pred
        loss = float(r @ r / self.n)
        norms = {o: np.sqrt(np.mean(c * c, axis=1) + self.eps**2) for o, c in comps.items()}
        norms.update({o: v for o, (_, v) in frozen.items()})
        penalty = sum(self.lam[o - 1] * float(v.sum()) for o, v in norms.items())
        if not grad:
            return loss, penalty, norms, None
        g_pred = -2.0 * r * outer / self.n
        grads = [np.array([g_pred.sum()])]
        for o, bank in banks.items():
            g = np.broadcast_to(g_pred, comps[o].shape)
            lam = self.lam[o - 1]
            if lam > 0:
                g = g + (lam / self.n) * comps[o] / norms[o][:, None]
            if self.clamp:
                g = g * masks[o]
            grads.extend(bank.backward(caches[o], np.ascontiguousarray(g, dtype=self.dtype)))
        return loss, penalty, norms, grads


def cast_bank(bank: MlpBank, dtype) -> MlpBank:
    return MlpBank(bank.layer_sizes, [W.astype(dtype) for W in bank.weights],
                   [b.astype(dtype) for b in bank.biases])


def _params(mu: np.ndarray, banks: dict[int, MlpBank]) -> list[np.ndarray]:
    out = [mu]
    for o in sorted(banks):
        out.extend(banks[o].parameters())
    return out


def _snapshot(mu, banks):
    return mu.copy(), {o: MlpBank(b.layer_sizes, [W.copy() for W in b.weights], [v.copy() for v in b.biases])
                       for o, b in banks.items()}


class _Tracker:
    """Best objective and snapshot across phases and restarts, plus the best-so-far trace."""

    def __init__(self):
        self.best = None
        self.trace: list[float] = []
        self.init_obj = math.inf

    def see(self, obj: float, mu, banks) -> None:
        if self.best is None or obj < self.best[0]:
            self.best = (obj, *_snapshot(mu, banks))
        self.trace.append(self.best[0])


def _descend(prob: _Problem, mu, banks, active: dict[int, MlpBank], steps: int, opt: OptConfig,
             tracker: _Tracker, first: bool) -> float:
    """Adam with cosine decay on ``mu`` and the ``active`` banks; the rest stay frozen."""
    frozen = prob.frozen({o: b for o, b in banks.items() if o not in active})
    params = _params(mu, active)
    state = OptimState.zeros_like(params, lr=opt.lr)
    run_best = math.inf
    for t in range(steps + 1):
        loss, pen, _, grads = prob.evaluate(mu, active, grad=t < steps, frozen=frozen)
        obj = loss + pen
        if not math.isfinite(obj):
            raise TrainingDivergence(f"non-finite objective at step {t}")
        if t == 0 and first:
            tracker.init_obj = obj
        run_best = min(run_best, obj)
        tracker.see(obj, mu, banks)
        if grads is None:
            break
        lr = opt.lr * 0.5 * (1.0 + math.cos(math.pi * t / steps)) if opt.cosine else opt.lr
        adam_update(params, grads, state, lr=lr)
    return run_best


def _optimize(prob: _Problem, opt: OptConfig) -> tuple:
    tracker = _Tracker()
    restart_objs: list[float] = []
    diverged = 0
    for r in range(opt.restarts):
        rng = np.random.default_rng(np.random.SeedSequence([opt.seed, r]))
        mu, banks = prob.init(rng, opt.spread_bias, opt.output_scale)
        run_best = math.inf
        try:
            if opt.additive_warmup > 0 and 1 in banks and len(banks) > 1:
                run_best = _descend(prob, mu, banks, {1: banks[1]}, opt.additive_warmup, opt, tracker, r == 0)
            run_best = min(run_best, _descend(prob, mu, banks, banks, opt.steps, opt, tracker,
                                              r == 0 and not opt.additive_warmup))
        except TrainingDivergence:
            diverged += 1
        restart_objs.append(run_best)
    if tracker.best is None:
        raise TrainingDivergence(f"all {opt.restarts} restarts diverged")
    return tracker.best, tracker.trace, restart_objs, tracker.init_obj, diverged


def _build_model(prob: _Problem, d: int, mu: np.ndarray, banks: dict[int, MlpBank]) -> StructuredModel:
    comps: dict[ComponentKey, Component] = {}
    bound = prob.B if prob.clamp else None
    for o, bank in banks.items():
        for key, net in zip(prob.keys[o], bank.to_nets()):
            comps[key] = Component(o, (NetTerm(net, bound),))
    return StructuredModel(d, float(mu[0]), comps, prob.B)


def _fit(ds: Dataset, plan: HyperPlan, keys, opt: OptConfig, lam, penalized: bool) -> FitResult:
    t0 = time.perf_counter()
    keys = sorted(keys)
    if any(not k.valid_for(ds.d) for k in keys):
        raise ValueError("component keys exceed the data dimension")
    prob = _Problem(ds.X, ds.y, keys, plan, lam, clamp_components=penalized, eps=opt.eps, dtype=opt.dtype)
    (obj, mu, banks), trace, restart_objs, init_obj, diverged = _optimize(prob, opt)
    if prob.dtype != np.float64:
        # reported objective, norms and the model are always double precision
        banks = {o: cast_bank(b, np.float64) for o, b in banks.items()}
        prob = _Problem(ds.X, ds.y, keys, plan, lam, clamp_components=penalized, eps=opt.eps)
    loss, pen, norms, _ = prob.evaluate(mu, banks, grad=False)
    model = _build_model(prob, ds.d, mu, banks)
    table = {}
    for o, ks in prob.keys.items():
        for key, v in zip(ks, norms.get(o, [])):
            table[key] = float(math.sqrt(max(v * v - opt.eps**2, 0.0)))
    return FitResult(model, trace, opt.restarts, table, loss + pen, loss, pen, init_obj,
                     restart_objs, diverged, time.perf_counter() - t0, penalized)


def fit_erm(ds: Dataset, plan: HyperPlan, keys: Sequence[ComponentKey] | None = None,
            opt: OptConfig | None = None) -> FitResult:
    """Joint least squares over all subnets and the intercept; output truncated at ``B``."""
    keys = all_keys(ds.d) if keys is None else list(keys)
    return _fit(ds, plan, keys, opt or OptConfig(), (0.0, 0.0), penalized=False)


def fit_penalized(ds: Dataset, plan: HyperPlan, opt: OptConfig | None = None,
                  keys: Sequence[ComponentKey] | None = None) -> FitResult:
    """Least squares plus ``lam1 sum ||phi_j||_{n,eps} + lam2 sum ||phi_kl||_{n,eps}``.

    Components are truncated at ``B`` before their norms are taken; the smoothed
    norm is ``sqrt(||phi||_n^2 + eps^2)``.
    """
    if plan.regime == "low-dim":
        raise ValueError("penalized fitting needs a high-dimensional plan")
    if plan.lam1 <= 0 or plan.lam2 <= 0:
        raise ValueError("penalized fitting needs positive penalty levels")
    keys = all_keys(ds.d) if keys is None else list(keys)
    return _fit(ds, plan, keys, opt or OptConfig(), (plan.lam1, plan.lam2), penalized=True)


def penalized_objective(model: StructuredModel, X, y, lam1: float, lam2: float,
                        eps: float = SMOOTH_EPS) -> float:
    """Loss plus smoothed group penalties recomputed from the model's own evaluation."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    r = y - model.predict(X)
    total = float(np.mean(r * r))
    for key, vals in model.component_values(X).items():
        lam = lam1 if key.order == 1 else lam2
        total += lam * math.sqrt(float(np.mean(vals * vals)) + eps * eps)
    return total


# --------------------------------------------------------------------------
# Restricted strong convexity diagnostic


@dataclass
class RscReport:
    support_sq: float
    total_sq: float
    kappa_sq: float
    cone_lhs: float
    cone_rhs: float

    @property
    def cone_residual(self) -> float:
        """``lhs - rhs`` of the cone condition; nonpositive means the direction is in the cone."""
        return self.cone_lhs - self.cone_rhs

    @property
    def in_cone(self) -> bool:
        return self.cone_residual <= 0.0

    def to_dict(self) -> dict:
        out = asdict(self)
        out.update(cone_residual=self.cone_residual, in_cone=self.in_cone)
        if math.isinf(self.kappa_sq):
            out["kappa_sq"] = "inf"
        return out


def rsc_diagnostic(fit: StructuredModel | FitResult, reference: StructuredModel, plan: HyperPlan, X,
                   support: Sequence[ComponentKey] | None = None,
                   rho: tuple[float, float] = (0.0, 0.0)) -> RscReport:
    """Evaluate both sides of the restricted-curvature inequality on the fitted direction.

    With ``delta = fit - reference`` (components only), ``kappa^2`` is the
    largest value with ``kappa^2 sum_{S} ||delta_k||_n^2 <= ||sum_k delta_k||_n^2``
    (``inf`` when the left sum vanishes).  The cone condition compares the
    off-support penalty mass with ``4 sum s rho^2 + 3 (on-support penalty mass)
    + sum s lam^2``.  This is a diagnostic, not a certificate.
    """
    model = fit.model if isinstance(fit, FitResult) else fit
    X = np.asarray(X, dtype=float)
    support = set(reference.components) if support is None else set(support)
    fv = model.component_values(X)
    rv = reference.component_values(X)
    n = X.shape[0]
    total = np.zeros(n)
    sup_sq = 0.0
    mass = {True: [0.0, 0.0], False: [0.0, 0.0]}
    for key in set(fv) | set(rv):
        delta = fv.get(key, np.zeros(n)) - rv.get(key, np.zeros(n))
        total += delta
        nrm_sq = float(np.mean(delta * delta))
        on = key in support
        if on:
            sup_sq += nrm_sq
        mass[on][key.order - 1] += math.sqrt(nrm_sq)
    total_sq = float(np.mean(total * total))
    kappa_sq = math.inf if sup_sq == 0.0 else total_sq / sup_sq
    s = [sum(1 for k in support if k.order == o) for o in (1, 2)]
    lam = (plan.lam1, plan.lam2)
    cone_lhs = lam[0] * mass[False][0] + lam[1] * mass[False][1]
    cone_rhs = (4.0 * (s[0] * rho[0] ** 2 + s[1] * rho[1] ** 2)
                + 3.0 * (lam[0] * mass[True][0] + lam[1] * mass[True][1])
                + s[0] * lam[0] ** 2 + s[1] * lam[1] ** 2)
    return RscReport(sup_sq, total_sq, kappa_sq, cone_lhs, cone_rhs)
