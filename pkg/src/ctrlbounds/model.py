"""Control problems, candidate dual test functions, and feedback policies.

Shape conventions used throughout the package:

* a state is a float vector of length ``d``, a control a vector of
  length ``control_dim``, a noise increment a vector of length ``m``;
* ``drift(t, x, u) -> (d,)``, ``diffusion(t, x, u) -> (d, m)``,
  ``running_reward(t, x, u) -> scalar``, ``terminal_reward(x) -> scalar``;
* when a problem or test function is marked ``vectorized=True`` its
  callables must additionally accept arrays with extra leading batch
  axes on ``x`` / ``u`` (broadcast-compatible with each other) and
  return outputs with those batch axes prepended.  The estimators
  evaluate coefficients on large batches, so vectorized callables are
  orders of magnitude faster; scalar-only callables are looped over
  transparently.  The time argument is always a python float.

All types are immutable after construction and safe to share across
worker threads; callables must be pure.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import DerivativeMismatch, DimensionMismatch, NonFinite

# Tolerances for check_test_function.
FD_STEP = 1e-5
FD_RTOL = 1e-4
HESSIAN_SYMMETRY_TOL = 1e-9
TERMINAL_MATCH_TOL = 1e-8


def _frozen_array(values, shape=None) -> np.ndarray:
    arr = np.array(values, dtype=float)
    if shape is not None:
        arr = arr.reshape(shape)
    arr.flags.writeable = False
    return arr


def _batch_loop(fn, t, args, batch_shape, tail):
    """Evaluate a scalar-only callable over every index of a batch."""
    out = np.empty(batch_shape + tail)
    bargs = [np.broadcast_to(a, batch_shape + a.shape[-1:]) for a in args]
    for idx in np.ndindex(batch_shape):
        out[idx] = fn(t, *(a[idx] for a in bargs))
    return out


def _eval_field(fn, t, args, batch_shape, tail, vectorized, name):
    if vectorized:
        out = np.asarray(fn(t, *args), dtype=float)
    else:
        out = _batch_loop(fn, t, args, batch_shape, tail)
    try:
        return np.broadcast_to(out, batch_shape + tail)
    except ValueError:
        raise DimensionMismatch(
            f"{name} returned shape {out.shape}, expected broadcastable to "
            f"{batch_shape + tail}"
        )


@dataclass(frozen=True)
class ControlProblem:
    """The tuple (b, sigma, l, g, U, horizon) defining a control problem.

    The control set is a compact box ``[lo, hi]^control_dim`` carrying a
    uniform evaluation grid with ``control_points`` points per axis.  An
    optional ``argmax_hook(t, x, p, Z) -> control`` supplies a closed-form
    maximizer of the current-value Hamiltonian; when present, pointwise
    Hamiltonian suprema use the hook plus the box corners instead of the
    grid, which also recovers effectively unbounded control sets.
    """

    d: int
    m: int
    control_dim: int
    t0: float
    T: float
    drift: Callable
    diffusion: Callable
    running_reward: Callable
    terminal_reward: Callable
    control_lo: np.ndarray
    control_hi: np.ndarray
    control_points: int = 41
    argmax_hook: Optional[Callable] = None
    vectorized: bool = False
    label: str = ""

    def __post_init__(self):
        for name in ("d", "m", "control_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if not self.t0 < self.T:
            raise ValueError("t0 must be strictly smaller than T")
        lo = _frozen_array(self.control_lo, (self.control_dim,))
        hi = _frozen_array(self.control_hi, (self.control_dim,))
        object.__setattr__(self, "control_lo", lo)
        object.__setattr__(self, "control_hi", hi)
        if np.any(lo > hi):
            raise ValueError("control box is empty: lo > hi on some axis")
        if self.control_points < 1:
            raise ValueError("control grid needs at least one point per axis")

    def control_grid(self) -> np.ndarray:
        """Full control grid, shape (n_grid, control_dim), in lexicographic
        order (first axis most significant)."""
        axes = [
            np.linspace(self.control_lo[i], self.control_hi[i], self.control_points)
            if self.control_points > 1
            else np.array([0.5 * (self.control_lo[i] + self.control_hi[i])])
            for i in range(self.control_dim)
        ]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([g.ravel() for g in mesh], axis=-1)

    def control_corners(self) -> np.ndarray:
        """The 2^control_dim corners of the control box."""
        k = self.control_dim
        corners = np.empty((2**k, k))
        for i in range(2**k):
            for j in range(k):
                corners[i, j] = self.control_hi[j] if (i >> j) & 1 else self.control_lo[j]
        return corners

    # Batched coefficient evaluation; see the module docstring for shapes.

    def drift_at(self, t, x, u) -> np.ndarray:
        x, u = np.asarray(x, float), np.asarray(u, float)
        batch = np.broadcast_shapes(x.shape[:-1], u.shape[:-1])
        return _eval_field(self.drift, t, (x, u), batch, (self.d,), self.vectorized, "drift")

    def diffusion_at(self, t, x, u) -> np.ndarray:
        x, u = np.asarray(x, float), np.asarray(u, float)
        batch = np.broadcast_shapes(x.shape[:-1], u.shape[:-1])
        return _eval_field(
            self.diffusion, t, (x, u), batch, (self.d, self.m), self.vectorized, "diffusion"
        )

    def running_reward_at(self, t, x, u) -> np.ndarray:
        x, u = np.asarray(x, float), np.asarray(u, float)
        batch = np.broadcast_shapes(x.shape[:-1], u.shape[:-1])
        return _eval_field(
            self.running_reward, t, (x, u), batch, (), self.vectorized, "running_reward"
        )

    def terminal_reward_at(self, x) -> np.ndarray:
        x = np.asarray(x, float)
        batch = x.shape[:-1]
        if self.vectorized:
            out = np.asarray(self.terminal_reward(x), dtype=float)
        else:
            out = np.empty(batch)
            for idx in np.ndindex(batch):
                out[idx] = self.terminal_reward(x[idx])
        try:
            return np.broadcast_to(out, batch)
        except ValueError:
            raise DimensionMismatch(
                f"terminal_reward returned shape {out.shape}, expected {batch}"
            )

    def hook_at(self, t, x, p, Z) -> np.ndarray:
        if self.argmax_hook is None:
            raise ValueError("problem has no analytic argmax hook")
        x = np.asarray(x, float)
        batch = x.shape[:-1]
        if self.vectorized:
            out = np.asarray(self.argmax_hook(t, x, p, Z), dtype=float)
        else:
            out = np.empty(batch + (self.control_dim,))
            for idx in np.ndindex(batch):
                out[idx] = self.argmax_hook(t, x[idx], p[idx], Z[idx])
        return np.broadcast_to(out, batch + (self.control_dim,))


@dataclass(frozen=True)
class TestFunction:
    """A candidate dual function h with explicitly supplied derivatives.

    ``value(t, x)``, ``dt(t, x)`` are scalar fields; ``dx(t, x)`` returns
    the spatial gradient ``(d,)`` and ``dxx(t, x)`` the symmetric spatial
    Hessian ``(d, d)``.  Derivatives are user-supplied because the dual
    estimators consume them pointwise millions of times; finite
    differences are used only to *validate* them (``check_test_function``).

    ``terminal_matches_g`` asserts ``value(T, .) == terminal_reward``;
    when unset the non-smooth bound variants (with their terminal-gap
    term) apply automatically.
    """

    value: Callable
    dt: Callable
    dx: Callable
    dxx: Callable
    d: int
    terminal_matches_g: bool = False
    vectorized: bool = False
    label: str = ""

    def value_at(self, t, x) -> np.ndarray:
        x = np.asarray(x, float)
        return _eval_field(
            lambda tt, xx: self.value(tt, xx), t, (x,), x.shape[:-1], (), self.vectorized, "value"
        )

    def dt_at(self, t, x) -> np.ndarray:
        x = np.asarray(x, float)
        return _eval_field(
            lambda tt, xx: self.dt(tt, xx), t, (x,), x.shape[:-1], (), self.vectorized, "dt"
        )

    def dx_at(self, t, x) -> np.ndarray:
        x = np.asarray(x, float)
        return _eval_field(
            lambda tt, xx: self.dx(tt, xx), t, (x,), x.shape[:-1], (self.d,),
            self.vectorized, "dx",
        )

    def dxx_at(self, t, x) -> np.ndarray:
        x = np.asarray(x, float)
        return _eval_field(
            lambda tt, xx: self.dxx(tt, xx), t, (x,), x.shape[:-1], (self.d, self.d),
            self.vectorized, "dxx",
        )


@dataclass(frozen=True)
class Policy:
    """Markov feedback control map; outputs are clamped to the control box."""

    fn: Callable
    lo: np.ndarray
    hi: np.ndarray
    label: str = ""
    vectorized: bool = False

    def __post_init__(self):
        object.__setattr__(self, "lo", _frozen_array(self.lo))
        object.__setattr__(self, "hi", _frozen_array(self.hi))

    def __call__(self, t, x) -> np.ndarray:
        return np.clip(np.asarray(self.fn(t, x), dtype=float), self.lo, self.hi)

    def control_at(self, t, x) -> np.ndarray:
        x = np.asarray(x, float)
        k = self.lo.shape[0]
        if self.vectorized:
            raw = np.asarray(self.fn(t, x), dtype=float)
        else:
            raw = _batch_loop(lambda tt, xx: self.fn(tt, xx), t, (x,), x.shape[:-1], (k,))
        raw = np.broadcast_to(raw, x.shape[:-1] + (k,))
        return np.clip(raw, self.lo, self.hi)


def make_policy(problem: ControlProblem, fn, label="", vectorized=None) -> Policy:
    """Wrap a feedback map as a Policy clamped to the problem's control box."""
    if vectorized is None:
        vectorized = problem.vectorized
    return Policy(fn=fn, lo=problem.control_lo, hi=problem.control_hi,
                  label=label, vectorized=vectorized)


@dataclass(frozen=True)
class ParametricFamily:
    """A finite-dimensional family of test functions, the search space of
    the outer dual minimization."""

    dim: int
    build: Callable  # parameter vector (dim,) -> TestFunction
    initial: np.ndarray
    scales: np.ndarray
    label: str = ""

    def __post_init__(self):
        object.__setattr__(self, "initial", _frozen_array(self.initial, (self.dim,)))
        object.__setattr__(self, "scales", _frozen_array(self.scales, (self.dim,)))


@dataclass
class ProbeResult:
    t: float
    x: np.ndarray
    u: np.ndarray
    drift: np.ndarray
    diffusion: np.ndarray
    running_reward: float
    ok: bool = True


@dataclass
class ValidationReport:
    probes: list
    ok: bool = True


def validate_problem(problem: ControlProblem, probe_points: Sequence) -> ValidationReport:
    """Spot-check coefficient callables at probe points.

    ``probe_points`` is a non-empty list of (time, state, control)
    triples with times in [t0, T] and controls inside the box.  Raises
    DimensionMismatch on wrong output shapes and NonFinite on NaN or
    infinity; otherwise returns the per-probe values.
    """
    if not probe_points:
        raise ValueError("probe_points must be non-empty")
    probes = []
    for t, x, u in probe_points:
        t = float(t)
        x = np.asarray(x, float).reshape(problem.d)
        u = np.asarray(u, float).reshape(problem.control_dim)
        if not problem.t0 <= t <= problem.T:
            raise ValueError(f"probe time {t} outside [{problem.t0}, {problem.T}]")
        if np.any(u < problem.control_lo) or np.any(u > problem.control_hi):
            raise ValueError(f"probe control {u} outside the control box")

        b = np.asarray(problem.drift(t, x, u), dtype=float)
        if b.shape != (problem.d,):
            raise DimensionMismatch(
                f"drift returned shape {b.shape}, expected ({problem.d},) at probe {(t, x, u)}"
            )
        sig = np.asarray(problem.diffusion(t, x, u), dtype=float)
        if sig.shape != (problem.d, problem.m):
            raise DimensionMismatch(
                f"diffusion returned shape {sig.shape}, expected "
                f"({problem.d}, {problem.m}) at probe {(t, x, u)}"
            )
        l = np.asarray(problem.running_reward(t, x, u), dtype=float)
        if l.shape != ():
            raise DimensionMismatch(
                f"running_reward returned shape {l.shape}, expected scalar at probe {(t, x, u)}"
            )
        g = np.asarray(problem.terminal_reward(x), dtype=float)
        if g.shape != ():
            raise DimensionMismatch(
                f"terminal_reward returned shape {g.shape}, expected scalar at probe {x}"
            )
        for name, val in (("drift", b), ("diffusion", sig),
                          ("running_reward", l), ("terminal_reward", g)):
            if not np.all(np.isfinite(val)):
                raise NonFinite(f"{name} is not finite at probe {(t, x, u)}")
        probes.append(ProbeResult(t=t, x=x, u=u, drift=b, diffusion=sig,
                                  running_reward=float(l)))
    return ValidationReport(probes=probes, ok=True)


@dataclass
class PointCheck:
    t: float
    x: np.ndarray
    dt_error: float
    dx_error: float
    dxx_error: float
    terminal_error: float


@dataclass
class DerivativeCheckReport:
    points: list
    max_dt_error: float
    max_dx_error: float
    max_dxx_error: float
    max_terminal_error: float
    ok: bool = True


def _rel_err(a, b) -> float:
    return float(np.max(np.abs(a - b) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))))


def check_test_function(h: TestFunction, problem: ControlProblem,
                        points: Sequence) -> DerivativeCheckReport:
    """Validate supplied derivatives of h against central finite differences.

    ``points`` is a list of interior (time, state) pairs.  Scale-floored
    relative errors above ``FD_RTOL`` raise DerivativeMismatch, as do an
    asymmetric Hessian or, when ``terminal_matches_g`` is set, a terminal
    value drifting from the terminal reward.
    """
    d = problem.d
    eps = FD_STEP
    checked = []
    for t, x in points:
        t = float(t)
        x = np.asarray(x, float).reshape(d)

        fd_dt = (h.value(t + eps, x) - h.value(t - eps, x)) / (2 * eps)
        dt_err = _rel_err(np.asarray(h.dt(t, x), float), fd_dt)

        grad = np.asarray(h.dx(t, x), float).reshape(d)
        fd_grad = np.empty(d)
        for i in range(d):
            e = np.zeros(d)
            e[i] = eps
            fd_grad[i] = (h.value(t, x + e) - h.value(t, x - e)) / (2 * eps)
        dx_err = _rel_err(grad, fd_grad)

        hess = np.asarray(h.dxx(t, x), float).reshape(d, d)
        asym = float(np.max(np.abs(hess - hess.T)))
        if asym > HESSIAN_SYMMETRY_TOL:
            raise DerivativeMismatch(
                f"Hessian asymmetry {asym:.3e} exceeds {HESSIAN_SYMMETRY_TOL} at {(t, x)}"
            )
        # Hessian rows from central differences of the gradient: the gradient
        # is itself validated against h above, and differencing it avoids the
        # eps^-2 roundoff of second differences of h.
        fd_hess = np.empty((d, d))
        for i in range(d):
            ei = np.zeros(d)
            ei[i] = eps
            fd_hess[i] = (np.asarray(h.dx(t, x + ei), float).reshape(d)
                          - np.asarray(h.dx(t, x - ei), float).reshape(d)) / (2 * eps)
        dxx_err = _rel_err(hess, fd_hess)

        term_err = 0.0
        if h.terminal_matches_g:
            term_err = float(abs(h.value(problem.T, x) - problem.terminal_reward(x)))
            if term_err > TERMINAL_MATCH_TOL:
                raise DerivativeMismatch(
                    f"terminal_matches_g set but |h(T,x)-g(x)| = {term_err:.3e} at x={x}"
                )

        for name, err in (("dt", dt_err), ("dx", dx_err), ("dxx", dxx_err)):
            if err > FD_RTOL:
                raise DerivativeMismatch(
                    f"{name} relative error {err:.3e} exceeds {FD_RTOL} at {(t, x)}"
                )
        checked.append(PointCheck(t=t, x=x, dt_error=dt_err, dx_error=dx_err,
                                  dxx_error=dxx_err, terminal_error=term_err))

    return DerivativeCheckReport(
        points=checked,
        max_dt_error=max((p.dt_error for p in checked), default=0.0),
        max_dx_error=max((p.dx_error for p in checked), default=0.0),
        max_dxx_error=max((p.dxx_error for p in checked), default=0.0),
        max_terminal_error=max((p.terminal_error for p in checked), default=0.0),
        ok=True,
    )


def default_check_points(problem: ControlProblem, lo, hi, n_t=3, n_x=3) -> list:
    """A small interior grid of (time, state) validation points."""
    lo = np.asarray(lo, float).reshape(problem.d)
    hi = np.asarray(hi, float).reshape(problem.d)
    span = problem.T - problem.t0
    times = [problem.t0 + span * f for f in np.linspace(0.2, 0.8, n_t)]
    axes = [np.linspace(lo[i] + 0.1 * (hi[i] - lo[i]), hi[i] - 0.1 * (hi[i] - lo[i]), n_x)
            for i in range(problem.d)]
    mesh = np.meshgrid(*axes, indexing="ij")
    states = np.stack([g.ravel() for g in mesh], axis=-1)
    return [(t, x) for t in times for x in states]
