"""Dual upper bounds on the value function.

Two bounds are computed for a candidate test function h:

* the *pathwise* bound: freeze the noise increments of each simulated
  path, solve the resulting deterministic control problem by backward
  dynamic programming on a state grid (the per-path optimizer may
  anticipate the whole noise path, so it dominates every adapted control
  on that path), and average h(t,x) plus the per-path optima;
* the *pointwise* bound: h(t,x) plus the left-rectangle time quadrature
  of the spatial supremum of  dt_h + H(., ., dx_h, dxx_h)  over a
  compact search box, plus the supremum of the terminal gap g - h(T, .).

The terminal-gap term is always included; it is identically zero when
``h.terminal_matches_g`` is set, so the smooth bound variants are the
special case of the non-smooth ones.

Spatial suprema are compactified to a box.  If the supremum is attained
on the box edge the true supremum over all of space may be larger, so
the estimate is flagged ``boundary_attained`` (warning-grade) and the
outer search rejects such candidates.  A constant integrand that attains
its maximum everywhere is *not* flagged: the flag fires only when the
boundary value strictly exceeds the best interior value.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

try:
    import numba
    from numba import njit, prange

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False
    prange = range

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn

        return wrap if not (args and callable(args[0])) else args[0]

from .errors import BoundaryMaximum, NonFinite, StateBoxExit
from .hamiltonian import hcv_batch, sup_batch
from .model import ControlProblem, Policy, TestFunction
from .paths import (
    BrownianPath,
    TimeGrid,
    increments_block,
    mean_and_std_error,
    worker_count,
)
from .primal import KIND_DUAL_V1, KIND_DUAL_V2, BoundEstimate

CLAMP_WARN_FRACTION = 0.01

_INVPHI = (math.sqrt(5.0) - 1.0) / 2.0
_GOLDEN_ITERS_PER_LEVEL = 12


@dataclass(frozen=True)
class SpatialBox:
    """Compact box with a uniform grid over which spatial suprema are taken."""

    lo: np.ndarray
    hi: np.ndarray
    points: int = 401
    refine_levels: int = 2

    def __post_init__(self):
        lo = np.atleast_1d(np.array(self.lo, dtype=float))  # copy before freezing
        hi = np.atleast_1d(np.array(self.hi, dtype=float))
        lo.flags.writeable = False
        hi.flags.writeable = False
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        if lo.shape != hi.shape:
            raise ValueError("box corners must have equal shapes")
        if np.any(lo >= hi):
            raise ValueError("box requires lo < hi componentwise")
        if self.points < 2:
            raise ValueError("box needs at least 2 points per axis")
        if self.refine_levels < 0:
            raise ValueError("refine_levels must be >= 0")

    @property
    def d(self) -> int:
        return self.lo.shape[0]

    def axes(self) -> list:
        return [np.linspace(self.lo[i], self.hi[i], self.points) for i in range(self.d)]

    def grid(self) -> np.ndarray:
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack([g.ravel() for g in mesh], axis=-1)


@dataclass(frozen=True)
class PathwiseDPConfig:
    """Discretization of the per-path inner optimization.

    ``control_refine`` augments the control-grid maximization with a
    three-point parabolic fit around the best grid control (the fitted
    vertex value is taken when it improves on the grid); this removes the
    quadratic control-resolution bias on problems whose Hamiltonian is
    smooth in the control, at the cost of leaving the pure grid semantics.
    Only applied for one-dimensional control sets.
    """

    lo: np.ndarray
    hi: np.ndarray
    points: int = 161
    control_points: int = 17
    control_refine: bool = False
    engine: str = "auto"  # auto | numba | numpy
    chunk_size: int = 1024

    def __post_init__(self):
        lo = np.atleast_1d(np.array(self.lo, dtype=float))  # copy before freezing
        hi = np.atleast_1d(np.array(self.hi, dtype=float))
        lo.flags.writeable = False
        hi.flags.writeable = False
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        if np.any(lo >= hi):
            raise ValueError("state box requires lo < hi componentwise")
        if self.points < 2 or self.control_points < 2:
            raise ValueError("state and control resolutions must be >= 2")
        if self.engine not in ("auto", "numba", "numpy"):
            raise ValueError(f"unknown engine {self.engine!r}")

    @property
    def d(self) -> int:
        return self.lo.shape[0]


# ---------------------------------------------------------------------------
# Spatial supremum with local golden-section refinement.


def _golden_max(f, a: float, b: float, iters: int) -> tuple[float, float]:
    if b <= a:
        return a, f(a)
    c = b - _INVPHI * (b - a)
    d = a + _INVPHI * (b - a)
    fc, fd = f(c), f(d)
    best_x, best_v = (c, fc) if fc >= fd else (d, fd)
    for _ in range(iters):
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - _INVPHI * (b - a)
            fc = f(c)
            if fc > best_v:
                best_x, best_v = c, fc
        else:
            a, c, fc = c, d, fd
            d = a + _INVPHI * (b - a)
            fd = f(d)
            if fd > best_v:
                best_x, best_v = d, fd
    return best_x, best_v


def _sup_on_box(f_batch, f_point, box: SpatialBox) -> tuple[float, np.ndarray, bool]:
    """Maximize over the box grid, refine locally, detect boundary maxima.

    Returns (value, argmax point, boundary_attained).  The boundary flag
    is set only when the best boundary value strictly exceeds the best
    interior value (ties attained in the interior are trusted).
    """
    d = box.d
    grid = box.grid()
    vals = np.asarray(f_batch(grid), float)
    if not np.all(np.isfinite(vals)):
        raise NonFinite("spatial objective is not finite on the search box")
    shape = (box.points,) * d
    cube = vals.reshape(shape)
    interior = cube[tuple(slice(1, -1) for _ in range(d))]
    if interior.size == 0:
        boundary = True
    else:
        # Strictly-greater with a relative noise floor: evaluation roundoff on
        # a mathematically constant integrand must not mark the bound untrusted.
        bmax = float(np.max(cube))
        imax = float(np.max(interior))
        boundary = bmax > imax + 1e-9 * max(1.0, abs(bmax), abs(imax))
    flat_best = int(np.argmax(vals))
    best_v = float(vals[flat_best])
    best_y = grid[flat_best].copy()

    if box.refine_levels > 0:
        axes = box.axes()
        steps = [(box.hi[i] - box.lo[i]) / (box.points - 1) for i in range(d)]
        for _ in range(box.refine_levels):
            for axis in range(d):
                lo = max(box.lo[axis], best_y[axis] - steps[axis])
                hi = min(box.hi[axis], best_y[axis] + steps[axis])

                def f_axis(s, axis=axis):
                    y = best_y.copy()
                    y[axis] = s
                    return f_point(y)

                s_star, v_star = _golden_max(f_axis, lo, hi, _GOLDEN_ITERS_PER_LEVEL)
                if v_star > best_v:
                    best_v = v_star
                    best_y[axis] = s_star
    return best_v, best_y, boundary


def _integrand_funcs(problem: ControlProblem, h: TestFunction, tk: float):
    def f_batch(Y):
        ds = h.dt_at(tk, Y)
        grad = h.dx_at(tk, Y)
        hess = h.dxx_at(tk, Y)
        vals, _ = sup_batch(problem, tk, Y, grad, hess)
        return ds + vals

    def f_point(y):
        return float(f_batch(np.asarray(y, float)[None, :])[0])

    return f_batch, f_point


def _terminal_funcs(problem: ControlProblem, h: TestFunction):
    T = problem.T

    def f_batch(Y):
        return problem.terminal_reward_at(Y) - h.value_at(T, Y)

    def f_point(y):
        return float(f_batch(np.asarray(y, float)[None, :])[0])

    return f_batch, f_point


def pointwise_parts(problem: ControlProblem, h: TestFunction, grid: TimeGrid,
                    box: SpatialBox) -> tuple[float, float, bool]:
    """(time integral of the spatial sup, terminal-gap sup, boundary flag)."""
    dt = grid.dt
    boundary = False
    total = 0.0
    for tk in grid.left_nodes():
        f_batch, f_point = _integrand_funcs(problem, h, float(tk))
        val, _, bnd = _sup_on_box(f_batch, f_point, box)
        total += dt * val
        boundary = boundary or bnd
    f_batch, f_point = _terminal_funcs(problem, h)
    term, _, bnd = _sup_on_box(f_batch, f_point, box)
    boundary = boundary or bnd
    return total, term, boundary


def dual_v2(problem: ControlProblem, h: TestFunction, t: float, x,
            box: SpatialBox, time_grid: TimeGrid,
            problem_id: str = "", h_id: str = "") -> BoundEstimate:
    """Pointwise dual upper bound: h(t,x) plus the time quadrature of the
    spatial Hamiltonian supremum plus the terminal-gap supremum.

    Deterministic (std_error 0).  ``boundary_attained`` in the result
    marks a supremum that sat on the box edge; such a bound may
    underestimate the supremum over all of space and is not trusted by
    the outer search.
    """
    _check_span(problem, time_grid, t)
    x = np.asarray(x, float).reshape(problem.d)
    integral, term, boundary = pointwise_parts(problem, h, time_grid, box)
    value = float(h.value_at(float(t), x)) + integral + term
    if boundary:
        warnings.warn(
            "spatial supremum attained on the box boundary; bound is untrusted",
            BoundaryMaximum,
            stacklevel=2,
        )
    return BoundEstimate(
        value=value, std_error=0.0, n_paths=0, kind=KIND_DUAL_V2,
        dt=time_grid.dt, n_steps=time_grid.n_steps, seed=None,
        problem_id=problem_id, h_id=h_id or h.label,
        t=float(t), x=tuple(x), boundary_attained=boundary,
        terminal_gap=term,
    )


# ---------------------------------------------------------------------------
# Pathwise bound: tables + backward DP per frozen noise path.


@dataclass
class _DpTables:
    axes: list           # state grid axes, one (S_i,) array per dimension
    states: np.ndarray   # (S, d) flattened lexicographically
    controls: np.ndarray  # (C, control_dim)
    integ: np.ndarray    # (n_steps, S, C), integrand premultiplied by dt
    bdt: np.ndarray      # (n_steps, S, C, d), drift premultiplied by dt
    sig: np.ndarray      # (n_steps, S, C, d, m)
    terminal: np.ndarray  # (S,)


def _control_grid_for(problem: ControlProblem, n_points: int) -> np.ndarray:
    axes = [np.linspace(problem.control_lo[i], problem.control_hi[i], n_points)
            for i in range(problem.control_dim)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([g.ravel() for g in mesh], axis=-1)


def _dp_tables(problem: ControlProblem, h: TestFunction, grid: TimeGrid,
               cfg: PathwiseDPConfig) -> _DpTables:
    if cfg.d != problem.d:
        raise ValueError("DP state box dimension does not match the problem")
    axes = [np.linspace(cfg.lo[i], cfg.hi[i], cfg.points) for i in range(problem.d)]
    mesh = np.meshgrid(*axes, indexing="ij")
    states = np.stack([g.ravel() for g in mesh], axis=-1)
    controls = _control_grid_for(problem, cfg.control_points)
    S, C = states.shape[0], controls.shape[0]
    n = grid.n_steps
    dt = grid.dt

    integ = np.empty((n, S, C))
    bdt = np.empty((n, S, C, problem.d))
    sig = np.empty((n, S, C, problem.d, problem.m))
    Yb = states[:, None, :]
    Ub = controls[None, :, :]
    for k, tk in enumerate(grid.left_nodes()):
        tk = float(tk)
        ds = h.dt_at(tk, states)
        grad = h.dx_at(tk, states)
        hess = h.dxx_at(tk, states)
        integ[k] = (ds[:, None] + hcv_batch(
            problem, tk, Yb, Ub, grad[:, None, :], hess[:, None, :, :])) * dt
        bdt[k] = problem.drift_at(tk, Yb, Ub) * dt
        sig[k] = problem.diffusion_at(tk, Yb, Ub)
    if h.terminal_matches_g:
        terminal = np.zeros(S)
    else:
        terminal = np.asarray(
            problem.terminal_reward_at(states) - h.value_at(problem.T, states), float
        )
    for name, arr in (("integrand", integ), ("drift", bdt),
                      ("diffusion", sig), ("terminal gap", terminal)):
        if not np.all(np.isfinite(arr)):
            raise NonFinite(f"DP {name} table is not finite on the state grid")
    return _DpTables(axes=axes, states=states, controls=controls,
                     integ=integ, bdt=bdt, sig=sig, terminal=terminal)


@njit(parallel=True, cache=True)
def _dp_kernel_1d(integ, bdt, sig, terminal, dW, ygrid, x0, refine):  # pragma: no cover
    n_paths = dW.shape[0]
    n_steps, S, C = integ.shape
    y0 = ygrid[0]
    yend = ygrid[S - 1]
    inv_dy = 1.0 / (ygrid[1] - ygrid[0])
    out = np.empty(n_paths)
    clamp = np.empty(n_paths)
    for p in prange(n_paths):
        v = terminal.copy()
        vn = np.empty(S)
        phi = np.empty(C)
        n_clamped = 0
        for k in range(n_steps - 1, -1, -1):
            w = dW[p, k]
            for i in range(S):
                yi = ygrid[i]
                best = -np.inf
                bj = 0
                for j in range(C):
                    yn = yi + bdt[k, i, j] + sig[k, i, j] * w
                    if yn < y0:
                        yn = y0
                        n_clamped += 1
                    elif yn > yend:
                        yn = yend
                        n_clamped += 1
                    pos = (yn - y0) * inv_dy
                    idx = int(pos)
                    if idx > S - 2:
                        idx = S - 2
                    frac = pos - idx
                    # summation order matches the numpy reference engine
                    cont = v[idx] * (1.0 - frac) + v[idx + 1] * frac
                    f = integ[k, i, j] + cont
                    phi[j] = f
                    if f > best:
                        best = f
                        bj = j
                if refine and 0 < bj < C - 1:
                    fa = phi[bj - 1]
                    fb = phi[bj]
                    fc = phi[bj + 1]
                    alpha2 = fa + fc - 2.0 * fb
                    if alpha2 < 0.0:
                        beta = 0.5 * (fc - fa)
                        off = -beta / alpha2
                        if -1.0 < off < 1.0:
                            fv = fb - (beta * beta) / (2.0 * alpha2)
                            if fv > best:
                                best = fv
                vn[i] = best
            tmp = v
            v = vn
            vn = tmp
        pos = (x0 - y0) * inv_dy
        if pos < 0.0:
            pos = 0.0
        elif pos > S - 1.0:
            pos = S - 1.0
        idx = int(pos)
        if idx > S - 2:
            idx = S - 2
        frac = pos - idx
        out[p] = v[idx] * (1.0 - frac) + v[idx + 1] * frac
        clamp[p] = n_clamped / (n_steps * S * C)
    return out, clamp


def _interp_on_axes(v: np.ndarray, axes: list, pts: np.ndarray,
                    clip_pos: bool = True) -> np.ndarray:
    """Multilinear interpolation of v (flattened lexicographic grid values)
    at pts (..., d).  The position arithmetic mirrors the compiled kernel
    expression for expression (reciprocal-spacing multiply, same summation
    order) so both engines produce bit-identical values; transitions that were already
    clamped to the box pass ``clip_pos=False``."""
    d = len(axes)
    shape = tuple(len(a) for a in axes)
    cube = v.reshape(shape)
    idx = []
    frac = []
    for i in range(d):
        a = axes[i]
        inv_step = 1.0 / (a[1] - a[0])
        pos = (pts[..., i] - a[0]) * inv_step
        if clip_pos:
            pos = np.clip(pos, 0.0, len(a) - 1.0)
        ii = np.minimum(pos.astype(np.int64), len(a) - 2)
        idx.append(ii)
        frac.append(pos - ii)
    out = np.zeros(pts.shape[:-1])
    for corner in range(2**d):
        w = np.ones(pts.shape[:-1])
        ind = []
        for i in range(d):
            if (corner >> i) & 1:
                ind.append(idx[i] + 1)
                w = w * frac[i]
            else:
                ind.append(idx[i])
                w = w * (1.0 - frac[i])
        out += w * cube[tuple(ind)]
    return out


def _dp_numpy_path(tables: _DpTables, dW: np.ndarray, x0: np.ndarray,
                   refine: bool) -> tuple[float, float]:
    """Reference implementation of the backward sweep for one path."""
    n_steps, S, C = tables.integ.shape
    cdim = tables.controls.shape[1]
    ax_lo = np.array([a[0] for a in tables.axes])
    ax_hi = np.array([a[-1] for a in tables.axes])
    v = tables.terminal.copy()
    n_clamped = 0
    rows = np.arange(S)
    for k in range(n_steps - 1, -1, -1):
        ynext = (tables.states[:, None, :] + tables.bdt[k]
                 + np.einsum("scdm,m->scd", tables.sig[k], dW[k]))
        outside = np.any((ynext < ax_lo) | (ynext > ax_hi), axis=-1)
        n_clamped += int(np.count_nonzero(outside))
        ynext = np.clip(ynext, ax_lo, ax_hi)
        cont = _interp_on_axes(v, tables.axes, ynext, clip_pos=False)
        phi = tables.integ[k] + cont
        best = phi.max(axis=1)
        if refine and cdim == 1 and C >= 3:
            bj = phi.argmax(axis=1)
            inner = (bj > 0) & (bj < C - 1)
            bj_c = np.clip(bj, 1, C - 2)
            fa = phi[rows, bj_c - 1]
            fb = phi[rows, bj_c]
            fc = phi[rows, bj_c + 1]
            alpha2 = fa + fc - 2.0 * fb
            concave = alpha2 < 0.0
            safe = np.where(concave, alpha2, -1.0)
            beta = 0.5 * (fc - fa)
            off = -beta / safe
            valid = inner & concave & (np.abs(off) < 1.0)
            fv = fb - (beta * beta) / (2.0 * safe)
            best = np.where(valid & (fv > best), fv, best)
        v = best
    xq = np.asarray(x0, float)
    val = float(_interp_on_axes(v, tables.axes, xq[None, :])[0])
    return val, n_clamped / (n_steps * S * C)


def _select_engine(cfg: PathwiseDPConfig, problem: ControlProblem) -> str:
    fast_ok = HAVE_NUMBA and problem.d == 1 and problem.m == 1
    if cfg.engine == "numba":
        if not fast_ok:
            raise ValueError("numba engine requires d == 1, m == 1 and numba installed")
        return "numba"
    if cfg.engine == "numpy":
        return "numpy"
    return "numba" if fast_ok else "numpy"


def _dp_values(problem: ControlProblem, h: TestFunction, grid: TimeGrid, x,
               cfg: PathwiseDPConfig, n_paths: int, seed: int,
               tables: _DpTables | None = None,
               dW_single: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Per-path inner optima (and clamp fractions), ordered by stream id.

    ``dW_single`` short-circuits path generation for a caller-supplied
    single path.
    """
    if tables is None:
        tables = _dp_tables(problem, h, grid, cfg)
    x = np.asarray(x, float).reshape(problem.d)
    engine = _select_engine(cfg, problem)
    refine = bool(cfg.control_refine and problem.control_dim == 1
                  and tables.controls.shape[0] >= 3)

    if dW_single is not None:
        blocks = [np.asarray(dW_single, float)[None, :, :]]
        sizes = [1]
    else:
        bounds = [(lo, min(lo + cfg.chunk_size, n_paths))
                  for lo in range(0, n_paths, cfg.chunk_size)]
        blocks = None
        sizes = bounds

    vals = np.empty(max(n_paths, 1))
    clamps = np.empty(max(n_paths, 1))

    if engine == "numba":
        numba.set_num_threads(max(1, min(worker_count(), numba.config.NUMBA_NUM_THREADS)))
        ygrid = np.ascontiguousarray(tables.axes[0])
        sig_flat = tables.sig[..., 0, 0]
        bdt_flat = tables.bdt[..., 0]
        if dW_single is not None:
            out, cl = _dp_kernel_1d(tables.integ, bdt_flat, sig_flat, tables.terminal,
                                    blocks[0][:, :, 0], ygrid, float(x[0]), refine)
            return out, cl
        for lo, hi in sizes:
            dW = increments_block(grid, 1, seed, lo, hi)[:, :, 0]
            out, cl = _dp_kernel_1d(tables.integ, bdt_flat, sig_flat, tables.terminal,
                                    dW, ygrid, float(x[0]), refine)
            vals[lo:hi] = out
            clamps[lo:hi] = cl
        return vals, clamps

    if dW_single is not None:
        v, c = _dp_numpy_path(tables, blocks[0][0], x, refine)
        return np.array([v]), np.array([c])
    for lo, hi in sizes:
        dW = increments_block(grid, problem.m, seed, lo, hi)
        for i in range(hi - lo):
            v, c = _dp_numpy_path(tables, dW[i], x, refine)
            vals[lo + i] = v
            clamps[lo + i] = c
    return vals, clamps


def pathwise_inner_max(problem: ControlProblem, h: TestFunction, path: BrownianPath,
                       t: float, x, cfg: PathwiseDPConfig) -> float:
    """Inner optimum for one frozen noise path, relative to h.

    Solves the deterministic discrete-time problem left behind when the
    path's increments are frozen: backward recursion over the state grid
    maximizing integrand-plus-continuation over the control grid, with
    multilinear interpolation and clamping to the state box; terminal
    value is the terminal gap g - h(T, .) (zero when h matches g).
    """
    _check_span(problem, path.grid, t)
    vals, clamps = _dp_values(problem, h, path.grid, x, cfg,
                              n_paths=1, seed=path.seed, dW_single=path.increments)
    if clamps[0] > CLAMP_WARN_FRACTION:
        warnings.warn(
            f"{clamps[0]:.1%} of DP transitions clamped to the state box",
            StateBoxExit,
            stacklevel=2,
        )
    return float(vals[0])


def dual_v1(problem: ControlProblem, h: TestFunction, t: float, x, n_paths: int,
            grid: TimeGrid, cfg: PathwiseDPConfig, seed: int,
            problem_id: str = "", h_id: str = "") -> BoundEstimate:
    """Pathwise dual upper bound: h(t,x) plus the Monte-Carlo average of the
    per-path anticipative inner optima."""
    if n_paths < 1:
        raise ValueError("n_paths must be >= 1")
    _check_span(problem, grid, t)
    x = np.asarray(x, float).reshape(problem.d)
    vals, clamps = _dp_values(problem, h, grid, x, cfg, n_paths, seed)
    mean, se = mean_and_std_error(vals)
    clamp_fraction = float(np.mean(clamps))
    if clamp_fraction > CLAMP_WARN_FRACTION:
        warnings.warn(
            f"{clamp_fraction:.1%} of DP transitions clamped to the state box",
            StateBoxExit,
            stacklevel=2,
        )
    return BoundEstimate(
        value=float(h.value_at(float(t), x)) + mean, std_error=se,
        n_paths=n_paths, kind=KIND_DUAL_V1, dt=grid.dt, n_steps=grid.n_steps,
        seed=int(seed), problem_id=problem_id, h_id=h_id or h.label,
        t=float(t), x=tuple(x), clamp_fraction=clamp_fraction,
    )


def pathwise_policy_value(problem: ControlProblem, h: TestFunction, path: BrownianPath,
                          t: float, x, cfg: PathwiseDPConfig, policy: Policy) -> float:
    """Value of a feedback policy on one frozen path, computed through the
    same grid/interpolation machinery as the inner maximization (the policy
    control is snapped to the nearest control-grid point).  Used to check
    that the anticipative optimum dominates adapted policies path by path."""
    _check_span(problem, path.grid, t)
    tables = _dp_tables(problem, h, path.grid, cfg)
    n_steps, S, C = tables.integ.shape
    caxes = [np.unique(tables.controls[:, i]) for i in range(problem.control_dim)]
    strides = np.ones(problem.control_dim, dtype=np.int64)
    for i in range(problem.control_dim - 2, -1, -1):
        strides[i] = strides[i + 1] * len(caxes[i + 1])
    ax_lo = np.array([a[0] for a in tables.axes])
    ax_hi = np.array([a[-1] for a in tables.axes])
    v = tables.terminal.copy()
    rows = np.arange(S)
    for k in range(n_steps - 1, -1, -1):
        tk = float(path.grid.left_nodes()[k])
        u = policy.control_at(tk, tables.states)
        j = np.zeros(S, dtype=np.int64)
        for i in range(problem.control_dim):
            ax = caxes[i]
            step = ax[1] - ax[0] if len(ax) > 1 else 1.0
            ji = np.clip(np.round((u[:, i] - ax[0]) / step).astype(np.int64), 0, len(ax) - 1)
            j += ji * strides[i]
        ynext = (tables.states + tables.bdt[k][rows, j]
                 + np.einsum("sdm,m->sd", tables.sig[k][rows, j], path.increments[k]))
        ynext = np.clip(ynext, ax_lo, ax_hi)
        v = tables.integ[k][rows, j] + _interp_on_axes(v, tables.axes, ynext,
                                                       clip_pos=False)
    xq = np.asarray(x, float).reshape(problem.d)
    return float(_interp_on_axes(v, tables.axes, xq[None, :])[0])


@dataclass
class DegeneracyReport:
    """Distribution of the per-path gap between the pointwise bound total
    and the pathwise inner optima.  Gaps near zero on most paths mean the
    pathwise bound collapses onto the pointwise one (the dual stochastic
    problem degenerates, as can happen under controlled diffusion)."""

    n_paths: int
    tol: float
    pointwise_total: float
    pathwise_mean: float
    pathwise_std_error: float
    gap_mean: float
    gap_std: float
    gap_min: float
    gap_max: float
    gap_quantiles: dict
    fraction_degenerate: float
    boundary_attained: bool
    clamp_fraction: float

    def to_dict(self) -> dict:
        return {
            "n_paths": self.n_paths,
            "tol": self.tol,
            "pointwise_total": self.pointwise_total,
            "pathwise_mean": self.pathwise_mean,
            "pathwise_std_error": self.pathwise_std_error,
            "gap_mean": self.gap_mean,
            "gap_std": self.gap_std,
            "gap_min": self.gap_min,
            "gap_max": self.gap_max,
            "gap_quantiles": dict(self.gap_quantiles),
            "fraction_degenerate": self.fraction_degenerate,
            "boundary_attained": self.boundary_attained,
            "clamp_fraction": self.clamp_fraction,
        }


def degeneracy_diagnostic(problem: ControlProblem, h: TestFunction, t: float, x,
                          n_paths: int, grid: TimeGrid, cfg: PathwiseDPConfig,
                          box: SpatialBox, seed: int, tol: float = 1e-8) -> DegeneracyReport:
    """Compare the per-path inner optima against the pointwise bound total.

    gap_i = (time quadrature of the spatial sup + terminal-gap sup)
            - (pathwise inner optimum of path i)

    and the degeneracy indicator is the fraction of paths with gap <= tol.
    """
    _check_span(problem, grid, t)
    integral, term, boundary = pointwise_parts(problem, h, grid, box)
    pointwise_total = integral + term
    vals, clamps = _dp_values(problem, h, grid, x, cfg, n_paths, seed)
    gaps = pointwise_total - vals
    mean, se = mean_and_std_error(vals)
    qs = {f"q{int(100 * q):02d}": float(np.quantile(gaps, q))
          for q in (0.05, 0.25, 0.5, 0.75, 0.95)}
    return DegeneracyReport(
        n_paths=n_paths, tol=tol, pointwise_total=float(pointwise_total),
        pathwise_mean=mean, pathwise_std_error=se,
        gap_mean=float(np.mean(gaps)), gap_std=float(np.std(gaps, ddof=1)) if n_paths > 1 else 0.0,
        gap_min=float(np.min(gaps)), gap_max=float(np.max(gaps)),
        gap_quantiles=qs,
        fraction_degenerate=float(np.mean(gaps <= tol)),
        boundary_attained=boundary,
        clamp_fraction=float(np.mean(clamps)),
    )


def _check_span(problem: ControlProblem, grid: TimeGrid, t: float):
    if abs(grid.t_start - t) > 1e-9 or abs(grid.t_end - problem.T) > 1e-9:
        raise ValueError(
            f"time grid [{grid.t_start}, {grid.t_end}] must span [t={t}, T={problem.T}]"
        )
