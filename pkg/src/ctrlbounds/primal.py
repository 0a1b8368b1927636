"""Monte-Carlo estimation of the expected reward of a feedback policy.

The policy value J(t, x, policy) = E[ integral of l ds + g(X_T) ] is a
lower bound for the value function for any policy, forming the primal
side of the primal/dual sandwich.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .model import ControlProblem, Policy
from .paths import TimeGrid, mean_and_std_error, simulate_batch

KIND_PRIMAL = "primal"
KIND_DUAL_V1 = "dual_v1"
KIND_DUAL_V2 = "dual_v2"
KIND_ORACLE = "oracle"


@dataclass
class BoundEstimate:
    """A bound value with its uncertainty and full provenance metadata.

    ``std_error`` is sample standard deviation / sqrt(n_paths) for
    Monte-Carlo kinds and exactly 0 for deterministic kinds (dual_v2,
    oracle).  Trust flags: ``boundary_attained`` marks a spatial sup
    that sat on the search-box edge (the bound may be an underestimate
    of the true supremum over all of space), ``clamp_fraction`` the
    share of pathwise-solver transitions clamped to the state box.
    """

    value: float
    std_error: float
    n_paths: int
    kind: str
    dt: float
    n_steps: int
    seed: Optional[int] = None
    problem_id: str = ""
    h_id: str = ""
    policy_id: str = ""
    t: Optional[float] = None
    x: Optional[tuple] = None
    boundary_attained: bool = False
    clamp_fraction: float = 0.0
    terminal_gap: Optional[float] = None

    def to_dict(self) -> dict:
        return {
            "value": self.value,
            "std_error": self.std_error,
            "n_paths": self.n_paths,
            "kind": self.kind,
            "dt": self.dt,
            "n_steps": self.n_steps,
            "seed": self.seed,
            "problem_id": self.problem_id,
            "h_id": self.h_id,
            "policy_id": self.policy_id,
            "t": self.t,
            "x": list(self.x) if self.x is not None else None,
            "boundary_attained": self.boundary_attained,
            "clamp_fraction": self.clamp_fraction,
            "terminal_gap": self.terminal_gap,
        }


def primal_path_values(problem: ControlProblem, policy: Policy, t: float, x,
                       n_paths: int, grid: TimeGrid, seed: int) -> np.ndarray:
    """Per-path reward realizations (running reward plus terminal reward),
    ordered by stream id.  Exposed separately so paired common-random-number
    comparisons can work on the raw samples."""
    _check_grid(problem, grid, t)
    batch = simulate_batch(problem, policy, grid, x, n_paths, seed)
    return batch.running_reward + batch.terminal_value


def primal_bound(problem: ControlProblem, policy: Policy, t: float, x,
                 n_paths: int, grid: TimeGrid, seed: int,
                 problem_id: str = "", policy_id: str = "") -> BoundEstimate:
    """Monte-Carlo estimate of J(t, x, policy); deterministic in seed."""
    if n_paths < 2:
        raise ValueError("n_paths must be >= 2")
    values = primal_path_values(problem, policy, t, x, n_paths, grid, seed)
    mean, se = mean_and_std_error(values)
    return BoundEstimate(
        value=mean, std_error=se, n_paths=n_paths, kind=KIND_PRIMAL,
        dt=grid.dt, n_steps=grid.n_steps, seed=int(seed),
        problem_id=problem_id, policy_id=policy_id or policy.label,
        t=float(t), x=tuple(np.asarray(x, float).reshape(problem.d)),
    )


def _check_grid(problem: ControlProblem, grid: TimeGrid, t: float):
    if abs(grid.t_start - t) > 1e-12 or abs(grid.t_end - problem.T) > 1e-12:
        raise ValueError(
            f"time grid [{grid.t_start}, {grid.t_end}] must span [t={t}, T={problem.T}]"
        )
