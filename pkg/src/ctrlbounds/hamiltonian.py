"""Current-value Hamiltonian and its supremum over the control set.

The current-value Hamiltonian at a fixed control u is

    Hcv(t, x, p, Z, u) = b(t,x,u).p + 0.5 Tr[sigma sigma^T(t,x,u) Z] + l(t,x,u)

and the Hamiltonian H(t, x, p, Z) is its supremum over the control box.
The supremum is exhaustive over the control grid unless the problem
carries an analytic argmax hook, in which case the hook output and the
box corners are evaluated (covering both interior and boundary optima).
Ties are broken toward the lexicographically smallest control, which is
what first-occurrence argmax delivers on the lexicographically ordered
grid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NonFinite
from .model import ControlProblem


@dataclass(frozen=True)
class HamiltonianQuery:
    """Arguments (t, x, p, Z) of a Hamiltonian evaluation."""

    t: float
    x: np.ndarray
    p: np.ndarray
    Z: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.x, float)
        p = np.asarray(self.p, float).reshape(x.shape)
        Z = np.asarray(self.Z, float).reshape(x.shape[0], x.shape[0])
        if np.max(np.abs(Z - Z.T), initial=0.0) > 1e-9:
            raise ValueError("Hessian argument Z must be symmetric within 1e-9")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "Z", Z)


def hcv_batch(problem: ControlProblem, t, x, u, p, Z) -> np.ndarray:
    """Vectorized current-value Hamiltonian; x/u/p/Z carry broadcastable
    batch axes."""
    b = problem.drift_at(t, x, u)
    sig = problem.diffusion_at(t, x, u)
    l = problem.running_reward_at(t, x, u)
    bp = np.einsum("...d,...d->...", b, np.broadcast_to(p, b.shape))
    sst = np.einsum("...dm,...em->...de", sig, sig)
    tr = np.einsum("...de,...de->...", sst, np.broadcast_to(Z, sst.shape))
    return bp + 0.5 * tr + l


def hcv(problem: ControlProblem, query: HamiltonianQuery, u) -> float:
    """Current-value Hamiltonian at one control."""
    u = np.asarray(u, float).reshape(problem.control_dim)
    val = float(hcv_batch(problem, query.t, query.x, u, query.p, query.Z))
    if not np.isfinite(val):
        raise NonFinite(f"Hcv is not finite at t={query.t}, x={query.x}, u={u}")
    return val


def sup_batch(problem: ControlProblem, t, Y, P, Z) -> tuple[np.ndarray, np.ndarray]:
    """Hamiltonian supremum at a batch of spatial points.

    Y: (N, d) states, P: (N, d) gradients, Z: (N, d, d) Hessians.
    Returns (values (N,), argmax controls (N, control_dim)).
    """
    Y = np.asarray(Y, float)
    n = Y.shape[0]
    if problem.argmax_hook is not None:
        hook_u = problem.hook_at(t, Y, P, Z)
        corners = problem.control_corners()
        cands = np.concatenate([hook_u[:, None, :],
                                np.broadcast_to(corners, (n,) + corners.shape)], axis=1)
        vals = hcv_batch(problem, t, Y[:, None, :], cands, P[:, None, :], Z[:, None, :, :])
    else:
        grid = problem.control_grid()
        cands = np.broadcast_to(grid, (n,) + grid.shape)
        vals = hcv_batch(problem, t, Y[:, None, :], grid[None, :, :],
                         P[:, None, :], Z[:, None, :, :])
    if not np.all(np.isfinite(vals)):
        raise NonFinite(f"Hamiltonian values are not finite at t={t}")
    best = np.argmax(vals, axis=1)
    rows = np.arange(n)
    return vals[rows, best], cands[rows, best]


def hamiltonian_sup(problem: ControlProblem, query: HamiltonianQuery) -> tuple[float, np.ndarray]:
    """H(t, x, p, Z) together with the maximizing control."""
    vals, args = sup_batch(problem, query.t, query.x[None, :],
                           query.p[None, :], query.Z[None, :, :])
    return float(vals[0]), args[0]
