"""Outer minimization of a dual bound over a parametric test-function
family, plus duality-gap reporting.

The objective (pathwise or pointwise dual bound at a fixed evaluation
point) is minimized with a derivative-free simplex search.  Every
candidate is evaluated with the same seed, so Monte-Carlo objectives are
deterministic functions of the parameters and the simplex bookkeeping
stays valid.  Candidates that fail the derivative validation, raise
non-finite errors, or produce boundary-attained (untrusted) suprema are
assigned objective +inf: an untrusted dual value is not an upper bound
and must never be reported as one.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .dual import PathwiseDPConfig, SpatialBox, dual_v1, dual_v2
from .errors import (
    AllCandidatesInvalid,
    BoundaryMaximum,
    DerivativeMismatch,
    DimensionMismatch,
    MismatchedProblem,
    NonFinite,
    StateBoxExit,
)
from .hjb_bench import supersolution_probe
from .model import ControlProblem, ParametricFamily, check_test_function, default_check_points
from .paths import TimeGrid
from .primal import KIND_DUAL_V1, KIND_DUAL_V2, BoundEstimate

# Standard simplex coefficients: reflection, expansion, contraction, shrink.
REFLECT = 1.0
EXPAND = 2.0
CONTRACT = 0.5
SHRINK = 0.5


@dataclass
class SearchConfig:
    """Estimator settings shared by all candidates of one search run."""

    time_grid: TimeGrid
    box: SpatialBox
    dp: Optional[PathwiseDPConfig] = None
    n_paths: int = 2000
    require_supersolution: bool = False
    supersolution_tol: float = 1e-6
    check_points: Optional[list] = None


@dataclass
class SearchEval:
    iteration: int
    params: tuple
    objective: float
    estimate: Optional[BoundEstimate]
    reason: str = ""  # why the candidate was rejected, when objective is +inf


@dataclass
class SearchTrace:
    """Evaluation-ordered record of one search run."""

    entries: list = field(default_factory=list)
    objective_kind: str = KIND_DUAL_V2
    seed: int = 0

    @property
    def best_index(self) -> int:
        objs = [e.objective for e in self.entries]
        return int(np.argmin(objs)) if objs else -1

    @property
    def best(self) -> SearchEval:
        return self.entries[self.best_index]

    def best_so_far(self) -> list:
        out = []
        cur = math.inf
        for e in self.entries:
            cur = min(cur, e.objective)
            out.append(cur)
        return out


def minimize_dual(problem: ControlProblem, family: ParametricFamily, objective: str,
                  t: float, x, budget: int, seed: int, config: SearchConfig,
                  problem_id: str = "") -> SearchTrace:
    """Simplex minimization of a dual bound over family parameters.

    ``budget`` caps the total number of objective evaluations; budget 0
    evaluates the initial parameter vector only.  The initial simplex is
    the initial point plus one per-parameter scale step along each axis.
    Raises AllCandidatesInvalid when every initial-simplex vertex is
    rejected.
    """
    if budget < 0:
        raise ValueError("budget must be >= 0")
    if objective not in (KIND_DUAL_V1, KIND_DUAL_V2):
        raise ValueError(f"objective must be {KIND_DUAL_V1!r} or {KIND_DUAL_V2!r}")

    x = np.asarray(x, float).reshape(problem.d)
    check_points = config.check_points
    if check_points is None:
        check_points = default_check_points(problem, config.box.lo, config.box.hi)
    trace = SearchTrace(objective_kind=objective, seed=int(seed))

    def evaluate(theta: np.ndarray) -> float:
        idx = len(trace.entries)
        est = None
        reason = ""
        obj = math.inf
        # Rejection by +inf *is* the handling of warning-grade conditions
        # here; the flags stay visible on the traced estimates.
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", BoundaryMaximum)
            warnings.simplefilter("ignore", StateBoxExit)
            try:
                h = family.build(np.asarray(theta, float))
                check_test_function(h, problem, check_points)
                if config.require_supersolution:
                    ok, _ = supersolution_probe(
                        problem, h, config.box,
                        config.time_grid.left_nodes()[:: max(1, config.time_grid.n_steps // 8)],
                        tol=config.supersolution_tol,
                    )
                    if not ok:
                        raise DerivativeMismatch("candidate is not a supersolution")
                if objective == KIND_DUAL_V2:
                    est = dual_v2(problem, h, t, x, config.box, config.time_grid,
                                  problem_id=problem_id)
                else:
                    if config.dp is None:
                        raise ValueError("SearchConfig.dp is required for dual_v1 objectives")
                    est = dual_v1(problem, h, t, x, config.n_paths, config.time_grid,
                                  config.dp, seed, problem_id=problem_id)
                if est.boundary_attained:
                    reason = "boundary maximum"
                else:
                    obj = est.value
            except (DerivativeMismatch, DimensionMismatch, NonFinite, ValueError) as exc:
                reason = f"{type(exc).__name__}: {exc}"
        trace.entries.append(SearchEval(iteration=idx, params=tuple(np.asarray(theta, float)),
                                        objective=obj, estimate=est, reason=reason))
        return obj

    theta0 = np.asarray(family.initial, float)
    evaluate(theta0)
    if budget == 0:
        return trace

    k = family.dim
    simplex = [theta0]
    for i in range(k):
        step = np.zeros(k)
        step[i] = family.scales[i]
        simplex.append(theta0 + step)
    values = [trace.entries[0].objective]
    for vertex in simplex[1:]:
        if len(trace.entries) >= budget:
            break
        values.append(evaluate(vertex))
    if len(values) == len(simplex) and all(not math.isfinite(v) for v in values):
        raise AllCandidatesInvalid(
            "every vertex of the initial simplex was rejected or untrusted"
        )
    if len(values) < len(simplex):
        return trace

    simplex = [np.asarray(v, float) for v in simplex]
    while len(trace.entries) < budget:
        order = np.argsort(values, kind="stable")
        simplex = [simplex[i] for i in order]
        values = [values[i] for i in order]
        spread = abs(values[-1] - values[0]) if math.isfinite(values[-1]) else math.inf
        if spread < 1e-14 and max(np.max(np.abs(s - simplex[0])) for s in simplex) < 1e-14:
            break
        centroid = np.mean(simplex[:-1], axis=0)
        worst = simplex[-1]

        reflected = centroid + REFLECT * (centroid - worst)
        f_r = evaluate(reflected)
        if f_r < values[0]:
            if len(trace.entries) < budget:
                expanded = centroid + EXPAND * (centroid - worst)
                f_e = evaluate(expanded)
                if f_e < f_r:
                    simplex[-1], values[-1] = expanded, f_e
                    continue
            simplex[-1], values[-1] = reflected, f_r
            continue
        if f_r < values[-2]:
            simplex[-1], values[-1] = reflected, f_r
            continue
        if len(trace.entries) >= budget:
            break
        if f_r < values[-1]:
            contracted = centroid + CONTRACT * (reflected - centroid)
        else:
            contracted = centroid - CONTRACT * (centroid - worst)
        f_c = evaluate(contracted)
        if f_c < min(f_r, values[-1]):
            simplex[-1], values[-1] = contracted, f_c
            continue
        # Shrink toward the best vertex.
        for i in range(1, len(simplex)):
            if len(trace.entries) >= budget:
                break
            simplex[i] = simplex[0] + SHRINK * (simplex[i] - simplex[0])
            values[i] = evaluate(simplex[i])
    return trace


@dataclass
class GapReport:
    """Primal/dual sandwich summary for one problem and evaluation point.

    ``failed`` marks a weak-duality violation beyond noise (gap below
    minus three combined standard errors), which indicates a
    discretization or implementation bug rather than a tight pair.
    """

    primal: BoundEstimate
    dual: BoundEstimate
    gap: float
    combined_std_error: float
    relative_gap: float
    boundary_attained: bool
    clamp_fraction: float
    failed: bool

    def to_dict(self) -> dict:
        return {
            "primal": self.primal.to_dict(),
            "dual": self.dual.to_dict(),
            "gap": self.gap,
            "combined_std_error": self.combined_std_error,
            "relative_gap": self.relative_gap,
            "boundary_attained": self.boundary_attained,
            "clamp_fraction": self.clamp_fraction,
            "failed": self.failed,
        }


def gap_report(primal: BoundEstimate, dual: BoundEstimate) -> GapReport:
    """Duality gap with combined uncertainty and propagated trust flags."""
    if primal.problem_id != dual.problem_id:
        raise MismatchedProblem(
            f"estimates refer to different problems: "
            f"{primal.problem_id!r} vs {dual.problem_id!r}"
        )
    if primal.t is not None and dual.t is not None:
        same_t = abs(primal.t - dual.t) <= 1e-12
        same_x = primal.x == dual.x
        if not (same_t and same_x):
            raise MismatchedProblem(
                f"estimates refer to different evaluation points: "
                f"({primal.t}, {primal.x}) vs ({dual.t}, {dual.x})"
            )
    gap = dual.value - primal.value
    combined = math.sqrt(primal.std_error**2 + dual.std_error**2)
    scale = max(abs(primal.value), abs(dual.value), 1e-12)
    return GapReport(
        primal=primal, dual=dual, gap=gap, combined_std_error=combined,
        relative_gap=gap / scale,
        boundary_attained=dual.boundary_attained,
        clamp_fraction=dual.clamp_fraction,
        failed=gap < -3.0 * combined,
    )
