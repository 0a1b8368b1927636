"""Brownian path generation and Euler-Maruyama integration of the
controlled state equation, including accumulation of the penalty term.

The penalty accumulated along a trajectory is the left-point Ito sum

    M = sum_k  (dx h(t_k, X_k))^T sigma(t_k, X_k, u_k) dW_k,

i.e. the discretization of the stochastic integral of the gradient of a
test function against the driving noise.  It is mean zero by
construction, which the test suite checks statistically.

Noise streams: path ``stream_id`` under ``seed`` is generated by a
counter-based Philox generator keyed on (seed, stream_id), so any path
can be regenerated bit-for-bit in isolation and estimators consume
exactly the same increments regardless of batch or worker layout.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import NonFinite
from .model import ControlProblem, Policy, TestFunction

WORKERS_ENV_VAR = "CTRLBOUNDS_WORKERS"
_CHUNK = 4096  # paths per batch chunk; fixed so results never depend on worker count

_MASK64 = (1 << 64) - 1


def worker_count() -> int:
    """Worker-count override from the environment, default machine parallelism."""
    raw = os.environ.get(WORKERS_ENV_VAR, "").strip()
    if raw:
        n = int(raw)
        if n < 1:
            raise ValueError(f"{WORKERS_ENV_VAR} must be >= 1, got {n}")
        return n
    return os.cpu_count() or 1


def path_rng(seed: int, stream_id: int) -> np.random.Generator:
    """The generator that owns the noise of path ``stream_id`` under ``seed``."""
    key = ((int(seed) & _MASK64) << 64) | (int(stream_id) & _MASK64)
    return np.random.Generator(np.random.Philox(key=key))


@dataclass(frozen=True)
class TimeGrid:
    """Uniform time grid on [t_start, t_end] with n_steps steps."""

    t_start: float
    t_end: float
    n_steps: int

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        if not self.t_end > self.t_start:
            raise ValueError("t_end must exceed t_start")

    @property
    def dt(self) -> float:
        return (self.t_end - self.t_start) / self.n_steps

    def nodes(self) -> np.ndarray:
        return np.linspace(self.t_start, self.t_end, self.n_steps + 1)

    def left_nodes(self) -> np.ndarray:
        return self.nodes()[:-1]


@dataclass(frozen=True)
class BrownianPath:
    """Discretized noise: n_steps x m increments, each N(0, dt)."""

    grid: TimeGrid
    increments: np.ndarray
    seed: int
    stream_id: int


def sample_brownian(grid: TimeGrid, m: int, seed: int, stream_id: int = 0) -> BrownianPath:
    """Draw the Brownian increments of one path, deterministic in
    (seed, stream_id)."""
    if m < 1:
        raise ValueError("m must be >= 1")
    rng = path_rng(seed, stream_id)
    inc = rng.normal(0.0, np.sqrt(grid.dt), (grid.n_steps, m))
    inc.flags.writeable = False
    return BrownianPath(grid=grid, increments=inc, seed=int(seed), stream_id=int(stream_id))


@dataclass
class TrajectoryRecord:
    """One controlled trajectory with its reward and penalty accumulators."""

    states: np.ndarray       # (n_steps+1, d)
    controls: np.ndarray     # (n_steps, control_dim)
    running_reward: float
    penalty: float

    @property
    def terminal_state(self) -> np.ndarray:
        return self.states[-1]


def integrate(problem: ControlProblem, policy: Policy, path: BrownianPath,
              x0, h: TestFunction | None = None) -> TrajectoryRecord:
    """Euler-Maruyama integration of one path under a feedback policy.

    X_{k+1} = X_k + b(t_k, X_k, u_k) dt + sigma(t_k, X_k, u_k) dW_k with
    u_k = policy(t_k, X_k); accumulates the running reward sum l*dt and,
    when ``h`` is given, the left-point Ito penalty sum.  Pure function of
    its arguments: re-running reproduces the record bit-for-bit.
    """
    grid = path.grid
    dt = grid.dt
    x = np.asarray(x0, float).reshape(problem.d).copy()
    if not np.all(np.isfinite(x)):
        raise NonFinite("initial state is not finite")
    states = np.empty((grid.n_steps + 1, problem.d))
    controls = np.empty((grid.n_steps, problem.control_dim))
    states[0] = x
    reward = 0.0
    penalty = 0.0
    t_nodes = grid.left_nodes()
    for k in range(grid.n_steps):
        t = float(t_nodes[k])
        u = policy(t, x)
        controls[k] = u
        b = problem.drift_at(t, x, u)
        sig = problem.diffusion_at(t, x, u)
        l = float(problem.running_reward_at(t, x, u))
        s_dw = sig @ path.increments[k]
        if h is not None:
            penalty += float(h.dx_at(t, x) @ s_dw)
        reward += dt * l
        x = x + dt * b + s_dw
        if not np.all(np.isfinite(x)):
            raise NonFinite(f"state became non-finite at step {k + 1}")
        states[k + 1] = x
    return TrajectoryRecord(states=states, controls=controls,
                            running_reward=reward, penalty=penalty)


@dataclass
class PathBatch:
    """Per-path accumulators from a batch simulation, ordered by stream id."""

    running_reward: np.ndarray   # (n_paths,)
    terminal_value: np.ndarray   # (n_paths,)  g(X_T)
    penalty: np.ndarray | None   # (n_paths,)  present when h was supplied
    terminal_state: np.ndarray   # (n_paths, d)


def increments_block(grid: TimeGrid, m: int, seed: int, lo: int, hi: int) -> np.ndarray:
    """Increments of paths [lo, hi), identical to per-path sample_brownian."""
    out = np.empty((hi - lo, grid.n_steps, m))
    sd = np.sqrt(grid.dt)
    for i in range(lo, hi):
        out[i - lo] = path_rng(seed, i).normal(0.0, sd, (grid.n_steps, m))
    return out


def _simulate_chunk(problem, policy, grid, x0, seed, lo, hi, h, out: PathBatch):
    n = hi - lo
    dt = grid.dt
    dW = increments_block(grid, problem.m, seed, lo, hi)
    X = np.broadcast_to(np.asarray(x0, float).reshape(problem.d), (n, problem.d)).copy()
    reward = np.zeros(n)
    penalty = np.zeros(n) if h is not None else None
    t_nodes = grid.left_nodes()
    for k in range(grid.n_steps):
        t = float(t_nodes[k])
        U = policy.control_at(t, X)
        B = problem.drift_at(t, X, U)
        S = problem.diffusion_at(t, X, U)
        L = problem.running_reward_at(t, X, U)
        s_dw = np.einsum("ndm,nm->nd", S, dW[:, k, :])
        if h is not None:
            penalty += np.einsum("nd,nd->n", h.dx_at(t, X), s_dw)
        reward += dt * L
        X = X + dt * B + s_dw
        if not np.all(np.isfinite(X)):
            bad = int(np.flatnonzero(~np.isfinite(X).all(axis=1))[0])
            raise NonFinite(f"state of path {lo + bad} became non-finite at step {k + 1}")
    out.running_reward[lo:hi] = reward
    out.terminal_value[lo:hi] = problem.terminal_reward_at(X)
    out.terminal_state[lo:hi] = X
    if h is not None:
        out.penalty[lo:hi] = penalty


def simulate_batch(problem: ControlProblem, policy: Policy, grid: TimeGrid, x0,
                   n_paths: int, seed: int, h: TestFunction | None = None) -> PathBatch:
    """Simulate paths 0..n_paths-1 and gather per-path accumulators.

    Work is split into fixed-size chunks whose outputs land in
    pre-assigned slots, so the result is bit-identical for any worker
    count; reductions (means, errors) are taken afterwards over the full
    per-path arrays in stream order.
    """
    if n_paths < 1:
        raise ValueError("n_paths must be >= 1")
    out = PathBatch(
        running_reward=np.empty(n_paths),
        terminal_value=np.empty(n_paths),
        penalty=np.empty(n_paths) if h is not None else None,
        terminal_state=np.empty((n_paths, problem.d)),
    )
    bounds = [(lo, min(lo + _CHUNK, n_paths)) for lo in range(0, n_paths, _CHUNK)]
    workers = min(worker_count(), len(bounds))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [
                pool.submit(_simulate_chunk, problem, policy, grid, x0, seed, lo, hi, h, out)
                for lo, hi in bounds
            ]
            for f in futures:
                f.result()
    else:
        for lo, hi in bounds:
            _simulate_chunk(problem, policy, grid, x0, seed, lo, hi, h, out)
    return out


def mean_and_std_error(values: np.ndarray) -> tuple[float, float]:
    values = np.asarray(values, float)
    n = values.size
    mean = float(np.mean(values))
    if n < 2:
        return mean, 0.0
    return mean, float(np.std(values, ddof=1) / np.sqrt(n))


def penalty_mean_test(problem: ControlProblem, policy: Policy, h: TestFunction, x0,
                      n_paths: int, grid: TimeGrid, seed: int) -> tuple[float, float]:
    """Sample mean and standard error of the penalty over independent paths.

    The penalty is a discretized stochastic integral, so the mean should
    sit within a few standard errors of zero for any (problem, policy, h).
    """
    if n_paths < 2:
        raise ValueError("n_paths must be >= 2")
    batch = simulate_batch(problem, policy, grid, x0, n_paths, seed, h=h)
    return mean_and_std_error(batch.penalty)
