"""String-id registries of benchmark problems, test-function families,
and policies, consumed by the CLI and the test suite.

Benchmark ids: b1-brownian-quadratic, b2-lq-drift, b3-lq-diffusion,
b4-merton.  Each family contains the benchmark's oracle at a known
parameter vector, and each benchmark has a perturbation sampler drawing
parameters from a region where the pointwise bound's spatial suprema
stay interior to the default search box (so the sandwich tests exercise
trusted bounds).
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from .errors import UnknownIdentifier
from .hjb_bench import (
    BenchmarkProblem,
    LQParams,
    brownian_quadratic,
    merton_oracle,
    riccati_oracle,
)
from .model import ParametricFamily, Policy, TestFunction, make_policy

_PROBLEM_BUILDERS = {
    "b1-brownian-quadratic": lambda: brownian_quadratic(T=1.0),
    "b2-lq-drift": lambda: riccati_oracle(LQParams(q=1.0, r_ctrl=1.0, m_term=1.0,
                                                   sigma0=1.0, beta=0.0, T=1.0)),
    "b3-lq-diffusion": lambda: riccati_oracle(LQParams(q=1.0, r_ctrl=1.0, m_term=1.0,
                                                       sigma0=0.0, beta=0.5, T=1.0)),
    "b4-merton": lambda: merton_oracle(mu=0.2, sigma_bar=0.5, gamma=0.5, T=1.0, u_max=4.0),
}

FAMILY_FOR_PROBLEM = {
    "b1-brownian-quadratic": "b1-quadratic",
    "b2-lq-drift": "b2-quadratic",
    "b3-lq-diffusion": "b3-quadratic",
    "b4-merton": "b4-exponential",
}

# Parameter boxes for random perturbations around each oracle, chosen so
# perturbed candidates keep interior spatial suprema (see module docstring).
_PERTURBATION_BOXES = {
    "b1-brownian-quadratic": [(1.02, 1.25), (0.8, 1.2), (-0.2, 0.2)],
    "b2-lq-drift": [(0.75, 0.95), (0.85, 1.15), (-0.2, 0.2)],
    "b3-lq-diffusion": [(0.75, 0.95), (-0.15, 0.15), (-0.2, 0.2)],
    "b4-merton": [(1.03, 1.3), (0.7, 0.97)],
}


def list_problems() -> list:
    return sorted(_PROBLEM_BUILDERS)


@lru_cache(maxsize=None)
def get_benchmark(problem_id: str) -> BenchmarkProblem:
    try:
        builder = _PROBLEM_BUILDERS[problem_id]
    except KeyError:
        raise UnknownIdentifier(
            f"unknown problem id {problem_id!r}; known: {', '.join(list_problems())}"
        ) from None
    return builder()


def _b1_family() -> ParametricFamily:
    bench = get_benchmark("b1-brownian-quadratic")
    T = bench.problem.T

    def build(theta):
        a, b, c = (float(v) for v in theta)
        return TestFunction(
            value=lambda t, x: a * x[..., 0] ** 2 + b * (T - t) + c,
            dt=lambda t, x: x[..., 0] * 0.0 - b,
            dx=lambda t, x: 2.0 * a * x,
            dxx=lambda t, x: x[..., None] * 0.0 + 2.0 * a,
            d=1, terminal_matches_g=(a == 1.0 and c == 0.0),
            vectorized=True, label=f"b1-quadratic({a}, {b}, {c})",
        )

    return ParametricFamily(dim=3, build=build, initial=[1.4, 0.7, 0.2],
                            scales=[0.25, 0.25, 0.25], label="b1-quadratic")


def _b2_family() -> ParametricFamily:
    bench = get_benchmark("b2-lq-drift")
    T = bench.problem.T
    s0 = bench.aux["params"].sigma0

    def build(theta):
        a, b, c = (float(v) for v in theta)
        return TestFunction(
            value=lambda t, x: -a * x[..., 0] ** 2 - b * s0 * s0 * (T - t) + c,
            dt=lambda t, x: x[..., 0] * 0.0 + b * s0 * s0,
            dx=lambda t, x: -2.0 * a * x,
            dxx=lambda t, x: x[..., None] * 0.0 - 2.0 * a,
            d=1, terminal_matches_g=(a == 1.0 and c == 0.0),
            vectorized=True, label=f"b2-quadratic({a}, {b}, {c})",
        )

    return ParametricFamily(dim=3, build=build, initial=[1.0, 1.0, 0.0],
                            scales=[0.1, 0.1, 0.1], label="b2-quadratic")


def _b3_family() -> ParametricFamily:
    bench = get_benchmark("b3-lq-diffusion")
    T = bench.problem.T
    P, Pdot = bench.aux["P"], bench.aux["Pdot"]

    def build(theta):
        a, b, c = (float(v) for v in theta)
        return TestFunction(
            value=lambda t, x: -a * float(P(t)) * x[..., 0] ** 2 - b * (T - t) + c,
            dt=lambda t, x: -a * float(Pdot(t)) * x[..., 0] ** 2 + b,
            dx=lambda t, x: -2.0 * a * float(P(t)) * x,
            dxx=lambda t, x: x[..., None] * 0.0 - 2.0 * a * float(P(t)),
            d=1, terminal_matches_g=(a == 1.0 and c == 0.0),
            vectorized=True, label=f"b3-quadratic({a}, {b}, {c})",
        )

    return ParametricFamily(dim=3, build=build, initial=[1.0, 0.0, 0.0],
                            scales=[0.1, 0.1, 0.1], label="b3-quadratic")


def _b4_family() -> ParametricFamily:
    bench = get_benchmark("b4-merton")
    T = bench.problem.T
    lam = bench.aux["lam"]
    gamma = bench.aux["gamma"]

    def build(theta):
        s, w = (float(v) for v in theta)

        def pw(t, x):
            return s * np.exp(w * lam * (T - t)) * x[..., 0] ** gamma / gamma

        return TestFunction(
            value=pw,
            dt=lambda t, x: -w * lam * pw(t, x),
            dx=lambda t, x: s * np.exp(w * lam * (T - t)) * x ** (gamma - 1.0),
            dxx=lambda t, x: (s * np.exp(w * lam * (T - t)) * (gamma - 1.0)
                              * x[..., 0] ** (gamma - 2.0))[..., None, None],
            d=1, terminal_matches_g=(s == 1.0),
            vectorized=True, label=f"b4-exponential({s}, {w})",
        )

    return ParametricFamily(dim=2, build=build, initial=[1.0, 1.0],
                            scales=[0.08, 0.08], label="b4-exponential")


_FAMILY_BUILDERS = {
    "b1-quadratic": _b1_family,
    "b2-quadratic": _b2_family,
    "b3-quadratic": _b3_family,
    "b4-exponential": _b4_family,
}


def list_families() -> list:
    return sorted(_FAMILY_BUILDERS)


@lru_cache(maxsize=None)
def get_family(family_id: str) -> ParametricFamily:
    try:
        builder = _FAMILY_BUILDERS[family_id]
    except KeyError:
        raise UnknownIdentifier(
            f"unknown family id {family_id!r}; known: {', '.join(list_families())}"
        ) from None
    return builder()


def oracle_params(family_id: str) -> np.ndarray:
    """Parameter vector at which a family reproduces its benchmark oracle."""
    vec = {
        "b1-quadratic": [1.0, 1.0, 0.0],
        "b2-quadratic": [1.0, 1.0, 0.0],
        "b3-quadratic": [1.0, 0.0, 0.0],
        "b4-exponential": [1.0, 1.0],
    }.get(family_id)
    if vec is None:
        raise UnknownIdentifier(f"unknown family id {family_id!r}")
    return np.asarray(vec)


def perturbed_params(problem_id: str, n: int, seed: int) -> list:
    """Draw n parameter vectors from the benchmark's perturbation box."""
    try:
        box = _PERTURBATION_BOXES[problem_id]
    except KeyError:
        raise UnknownIdentifier(f"no perturbation box for problem {problem_id!r}") from None
    rng = np.random.default_rng(seed)
    return [np.array([rng.uniform(lo, hi) for lo, hi in box]) for _ in range(n)]


def resolve_policy(bench: BenchmarkProblem, name: str, value=None) -> Policy:
    """Look up a policy by name: oracle | zero | constant (with value)."""
    if name == "oracle":
        if bench.oracle_policy is None:
            raise UnknownIdentifier(f"{bench.problem_id} has no oracle policy")
        return bench.oracle_policy
    if name == "zero":
        k = bench.problem.control_dim
        return make_policy(bench.problem, lambda t, x: np.zeros(x.shape[:-1] + (k,)),
                           label="zero")
    if name == "constant":
        if value is None:
            raise UnknownIdentifier("constant policy requires a value")
        vec = np.atleast_1d(np.asarray(value, float))
        return make_policy(bench.problem,
                           lambda t, x: np.broadcast_to(vec, x.shape[:-1] + vec.shape),
                           label=f"constant({value})")
    raise UnknownIdentifier(f"unknown policy {name!r}; known: oracle, zero, constant")
