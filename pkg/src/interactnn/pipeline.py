"""Sample-split support recovery: penalized fit, hard thresholding, unpenalized refit."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .model import ComponentKey, StructuredModel, anova_project
from .synthdata import Dataset, split_dataset
from .train import FitResult, HyperPlan, OptConfig, fit_erm, fit_penalized


@dataclass
class ActiveSets:
    S1: frozenset[ComponentKey]
    S2: frozenset[ComponentKey]
    thresholds: tuple[float, float]
    norms: dict[ComponentKey, float]

    @property
    def keys(self) -> list[ComponentKey]:
        return sorted(self.S1 | self.S2)

    @property
    def empty(self) -> bool:
        return not self.S1 and not self.S2

    def to_dict(self) -> dict:
        return {
            "S1": [str(k) for k in sorted(self.S1)],
            "S2": [str(k) for k in sorted(self.S2)],
            "thresholds": list(self.thresholds),
            "norms": {str(k): v for k, v in sorted(self.norms.items())},
        }


def threshold_norms(norms: Mapping[ComponentKey, float], t1: float, t2: float) -> ActiveSets:
    """Keep keys whose norm is at least the threshold of their order (inclusive)."""
    S1 = frozenset(k for k, v in norms.items() if k.order == 1 and v >= t1)
    S2 = frozenset(k for k, v in norms.items() if k.order == 2 and v >= t2)
    return ActiveSets(S1, S2, (t1, t2), dict(norms))


def threshold_components(fit: FitResult, plan: HyperPlan) -> ActiveSets:
    """``S1 = {j : ||phi_j||_n >= c1 lam1}`` and the analogous pair set."""
    t1, t2 = plan.thresholds
    return threshold_norms(fit.norms, t1, t2)


@dataclass
class RecoveryMetrics:
    contains1: bool
    contains2: bool
    gamma1: int
    gamma2: int
    precision1: float
    recall1: float
    precision2: float
    recall2: float

    @property
    def contains(self) -> bool:
        return self.contains1 and self.contains2

    def to_dict(self) -> dict:
        return {**self.__dict__, "contains": self.contains}


def _pr(est: frozenset, true: frozenset) -> tuple[float, float]:
    hit = len(est & true)
    precision = hit / len(est) if est else 1.0
    recall = hit / len(true) if true else 1.0
    return precision, recall


def recovery_metrics(active: ActiveSets, S1: Iterable[ComponentKey], S2: Iterable[ComponentKey]) -> RecoveryMetrics:
    """Containment flags, false-positive counts and precision/recall per order.

    An empty estimate has precision 1 by convention; an empty truth has recall 1.
    """
    T1, T2 = frozenset(S1), frozenset(S2)
    p1, r1 = _pr(active.S1, T1)
    p2, r2 = _pr(active.S2, T2)
    return RecoveryMetrics(T1 <= active.S1, T2 <= active.S2, len(active.S1 - T1), len(active.S2 - T2),
                           p1, r1, p2, r2)


@dataclass(eq=False)
class PipelineResult:
    initial: FitResult
    active: ActiveSets
    final: FitResult | None
    model: StructuredModel
    intercept_only: bool
    metrics: RecoveryMetrics | None = None
    timing: dict = field(default_factory=dict)

    def record(self, plan: HyperPlan, timing: bool = True) -> dict:
        """JSON-ready run record; timing is left out when ``timing`` is false."""
        out = {
            "plan": plan.to_dict(),
            "thresholds": list(self.active.thresholds),
            "active_sets": self.active.to_dict(),
            "initial_fit": self.initial.summary(timing),
            "final_fit": None if self.final is None else self.final.summary(timing),
            "intercept_only": self.intercept_only,
            "final_intercept": self.model.intercept,
            "final_keys": [str(k) for k in self.model.keys()],
            "metrics": None if self.metrics is None else self.metrics.to_dict(),
        }
        if timing:
            out["timing"] = dict(self.timing)
        return out


def run_pipeline(ds: Dataset, plan: HyperPlan, opt: OptConfig | None = None,
                 refit_opt: OptConfig | None = None,
                 support: tuple[Iterable[ComponentKey], Iterable[ComponentKey]] | None = None) -> PipelineResult:
    """Split, penalized fit on the first half, threshold, refit on the second half.

    Norms for thresholding come from the first half.  The refit uses the
    widths of ``plan`` and only the selected keys; with nothing selected the
    final model is the mean response of the second half.  The final model is
    ANOVA-projected.
    """
    if ds.n < 4:
        raise ValueError("the pipeline needs at least four rows")
    opt = opt or OptConfig()
    refit_opt = refit_opt or opt
    t0 = time.perf_counter()
    first, second = split_dataset(ds)
    initial = fit_penalized(first, plan, opt)
    t1 = time.perf_counter()
    active = threshold_components(initial, plan)
    if active.empty:
        final = None
        model = StructuredModel(ds.d, float(np.mean(second.y)), {}, plan.B)
    else:
        final = fit_erm(second, plan, active.keys, refit_opt)
        model, _ = anova_project(final.model)
    t2 = time.perf_counter()
    metrics = recovery_metrics(active, *support) if support is not None else None
    return PipelineResult(initial, active, final, model, active.empty, metrics,
                          {"initial": t1 - t0, "refit": t2 - t1})
