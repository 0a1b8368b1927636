import itertools
import warnings

import numpy as np
import pytest

import ctrlbounds as cb


def tiny_drift_control_problem(T=0.75, lo=-1.0, hi=1.0, reward=None):
    """b = u, sigma = 0: the frozen-noise inner problem is fully deterministic
    and control moves of u*dt land exactly on a dt-spaced state grid."""
    reward = reward or (lambda t, x, u: -(x[..., 0] - 0.3) ** 2
                        - 0.5 * u[..., 0] ** 2 + 0.2 * t)
    return cb.ControlProblem(
        d=1, m=1, control_dim=1, t0=0.0, T=T,
        drift=lambda t, x, u: u + x * 0.0,
        diffusion=lambda t, x, u: (x * 0.0 + u * 0.0)[..., None],
        running_reward=reward,
        terminal_reward=lambda x: x[..., 0] ** 2,
        control_lo=[lo], control_hi=[hi], control_points=3,
        vectorized=True,
    )


def quadratic_h(a, b, c, T):
    return cb.TestFunction(
        value=lambda t, x: a * x[..., 0] ** 2 + b * (T - t) + c,
        dt=lambda t, x: x[..., 0] * 0.0 - b,
        dx=lambda t, x: 2.0 * a * x,
        dxx=lambda t, x: x[..., None] * 0.0 + 2.0 * a,
        d=1, terminal_matches_g=(a == 1.0 and c == 0.0), vectorized=True,
    )


def manual_integrand(problem, h, t, x, u):
    """Independent evaluation of dt_h + Hcv from the raw callables."""
    x = np.asarray(x, float).reshape(problem.d)
    u = np.asarray(u, float).reshape(problem.control_dim)
    b = np.asarray(problem.drift(t, x, u), float)
    sig = np.asarray(problem.diffusion(t, x, u), float)
    grad = np.asarray(h.dx(t, x), float).reshape(problem.d)
    hess = np.asarray(h.dxx(t, x), float).reshape(problem.d, problem.d)
    lval = float(problem.running_reward(t, x, u))
    return (float(h.dt(t, x)) + float(b @ grad)
            + 0.5 * float(np.trace(sig @ sig.T @ hess)) + lval)


class TestTightnessAtOracle:
    def test_b1_dual_v2_is_exact(self):
        bench = cb.get_benchmark("b1-brownian-quadratic")
        grid = cb.TimeGrid(0.0, 1.0, 100)
        est = cb.dual_v2(bench.problem, bench.oracle_h, 0.0, [1.0],
                         bench.default_box, grid)
        assert est.value == 2.0
        assert est.std_error == 0.0
        assert est.terminal_gap == 0.0
        assert not est.boundary_attained

    def test_b1_dual_v1_is_exact_with_zero_variance(self):
        bench = cb.get_benchmark("b1-brownian-quadratic")
        grid = cb.TimeGrid(0.0, 1.0, 100)
        cfg = cb.PathwiseDPConfig(lo=[-5.0], hi=[5.0], points=81, control_points=5)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", cb.StateBoxExit)
            est = cb.dual_v1(bench.problem, bench.oracle_h, 0.0, [1.0], 64, grid, cfg, seed=7)
        assert est.value == 2.0
        assert est.std_error == 0.0

    def test_b3_dual_v2_matches_riccati_oracle(self):
        bench = cb.get_benchmark("b3-lq-diffusion")
        grid = cb.TimeGrid(0.0, 1.0, 200)
        est = cb.dual_v2(bench.problem, bench.oracle_h, 0.0, [1.0],
                         bench.default_box, grid)
        oracle = bench.oracle_value(0.0, [1.0])
        assert abs(est.value - oracle) <= 0.02 * abs(oracle)
        assert abs(est.value - oracle) < 1e-6  # the oracle integrand vanishes
        assert abs(est.terminal_gap) < 1e-9
        assert not est.boundary_attained


class TestConstantShiftInvariance:
    # Spacing 0.25 keeps every grid value dyadic, so y^2 + c is evaluated
    # without representation rounding and the shift cancels bit-for-bit.
    DYADIC_BOX = cb.SpatialBox(lo=[-5.0], hi=[5.0], points=41, refine_levels=2)

    @pytest.mark.parametrize("c", [0.5, 5.0])
    def test_dual_v2_shift_exact(self, c):
        bench = cb.get_benchmark("b1-brownian-quadratic")
        grid = cb.TimeGrid(0.0, 1.0, 50)
        base = cb.dual_v2(bench.problem, bench.oracle_h, 0.0, [1.0],
                          self.DYADIC_BOX, grid)
        shifted_h = quadratic_h(1.0, 1.0, c, T=1.0)
        assert not shifted_h.terminal_matches_g  # non-smooth variant kicks in
        shifted = cb.dual_v2(bench.problem, shifted_h, 0.0, [1.0],
                             self.DYADIC_BOX, grid)
        assert shifted.value == base.value == 2.0
        assert shifted.terminal_gap == -c

    @pytest.mark.parametrize("c", [0.5, 5.0])
    def test_dual_v2_shift_on_generic_grid_within_roundoff(self, c):
        bench = cb.get_benchmark("b1-brownian-quadratic")
        grid = cb.TimeGrid(0.0, 1.0, 50)
        shifted = cb.dual_v2(bench.problem, quadratic_h(1.0, 1.0, c, T=1.0),
                             0.0, [1.0], bench.default_box, grid)
        assert shifted.value == pytest.approx(2.0, abs=1e-13)

    @pytest.mark.parametrize("c", [0.5, 5.0])
    def test_dual_v1_shift(self, c):
        bench = cb.get_benchmark("b1-brownian-quadratic")
        grid = cb.TimeGrid(0.0, 1.0, 50)
        cfg = cb.PathwiseDPConfig(lo=[-5.0], hi=[5.0], points=81, control_points=5)
        shifted_h = quadratic_h(1.0, 1.0, c, T=1.0)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", cb.StateBoxExit)
            est = cb.dual_v1(bench.problem, shifted_h, 0.0, [1.0], 64, grid, cfg, seed=7)
        assert est.value == pytest.approx(2.0, abs=1e-12)


class TestPathwiseInnerMax:
    def test_singleton_control_set_equals_forced_policy(self):
        problem = tiny_drift_control_problem(lo=1.0, hi=1.0)
        h = quadratic_h(1.2, 0.8, 0.3, T=problem.T)
        grid = cb.TimeGrid(0.0, problem.T, 3)
        path = cb.sample_brownian(grid, 1, seed=3)
        cfg = cb.PathwiseDPConfig(lo=[-2.0], hi=[2.0], points=17, control_points=2)
        inner = cb.pathwise_inner_max(problem, h, path, 0.0, [0.0], cfg)
        policy = cb.make_policy(problem, lambda t, x: x * 0.0 + 1.0)
        forced = cb.pathwise_policy_value(problem, h, path, 0.0, [0.0], cfg, policy)
        assert inner == forced

    def test_singleton_matches_manual_trajectory_sum(self):
        problem = tiny_drift_control_problem(lo=1.0, hi=1.0)
        h = quadratic_h(1.2, 0.8, 0.3, T=problem.T)
        grid = cb.TimeGrid(0.0, problem.T, 3)
        path = cb.sample_brownian(grid, 1, seed=3)
        cfg = cb.PathwiseDPConfig(lo=[-2.0], hi=[2.0], points=17, control_points=2)
        inner = cb.pathwise_inner_max(problem, h, path, 0.0, [0.0], cfg)
        x, total = 0.0, 0.0
        for k, tk in enumerate(grid.left_nodes()):
            total += manual_integrand(problem, h, float(tk), [x], [1.0]) * grid.dt
            x += 1.0 * grid.dt
        total += float(problem.terminal_reward(np.array([x]))
                       - h.value(problem.T, np.array([x])))
        assert inner == pytest.approx(total, abs=1e-12)

    def test_matches_exhaustive_enumeration_without_noise(self):
        # sigma = 0, 3 steps, 3 grid controls: 27 control sequences
        problem = tiny_drift_control_problem()
        h = quadratic_h(1.1, 0.6, 0.2, T=problem.T)
        grid = cb.TimeGrid(0.0, problem.T, 3)
        path = cb.sample_brownian(grid, 1, seed=11)
        cfg = cb.PathwiseDPConfig(lo=[-2.0], hi=[2.0], points=17, control_points=3)
        inner = cb.pathwise_inner_max(problem, h, path, 0.0, [0.0], cfg)
        best = -np.inf
        for seq in itertools.product([-1.0, 0.0, 1.0], repeat=3):
            x, total = 0.0, 0.0
            for k, tk in enumerate(grid.left_nodes()):
                total += manual_integrand(problem, h, float(tk), [x], [seq[k]]) * grid.dt
                x += seq[k] * grid.dt
            total += float(problem.terminal_reward(np.array([x]))
                           - h.value(problem.T, np.array([x])))
            best = max(best, total)
        assert inner == pytest.approx(best, abs=1e-10)

    def test_dominates_snapped_feedback_policies(self):
        bench = cb.get_benchmark("b3-lq-diffusion")
        fam = cb.get_family("b3-quadratic")
        h = fam.build([0.85, 0.05, -0.1])
        grid = cb.TimeGrid(0.0, 1.0, 25)
        cfg = cb.PathwiseDPConfig(lo=[-4.0], hi=[4.0], points=41, control_points=9)
        policies = [
            bench.oracle_policy,
            cb.resolve_policy(bench, "zero"),
            cb.resolve_policy(bench, "constant", value=0.75),
        ]
        for stream in range(3):
            path = cb.sample_brownian(grid, 1, seed=77, stream_id=stream)
            inner = cb.pathwise_inner_max(bench.problem, h, path, 0.0, [1.0], cfg)
            for policy in policies:
                forced = cb.pathwise_policy_value(bench.problem, h, path, 0.0, [1.0],
                                                  cfg, policy)
                assert inner >= forced - 1e-12

    def test_control_refine_never_decreases_the_optimum(self):
        bench = cb.get_benchmark("b3-lq-diffusion")
        grid = cb.TimeGrid(0.0, 1.0, 25)
        path = cb.sample_brownian(grid, 1, seed=13)
        base_cfg = cb.PathwiseDPConfig(lo=[-4.0], hi=[4.0], points=41, control_points=9)
        fine_cfg = cb.PathwiseDPConfig(lo=[-4.0], hi=[4.0], points=41, control_points=9,
                                       control_refine=True)
        h = cb.get_family("b3-quadratic").build([0.9, 0.0, 0.0])
        lo = cb.pathwise_inner_max(bench.problem, h, path, 0.0, [1.0], base_cfg)
        hi = cb.pathwise_inner_max(bench.problem, h, path, 0.0, [1.0], fine_cfg)
        assert hi >= lo - 1e-15

    def test_grid_span_validated(self):
        bench = cb.get_benchmark("b1-brownian-quadratic")
        path = cb.sample_brownian(cb.TimeGrid(0.0, 0.5, 10), 1, seed=1)
        cfg = cb.PathwiseDPConfig(lo=[-2.0], hi=[2.0], points=9, control_points=3)
        with pytest.raises(ValueError):
            cb.pathwise_inner_max(bench.problem, bench.oracle_h, path, 0.0, [1.0], cfg)


class TestEngines:
    @pytest.mark.parametrize("refine", [False, True])
    def test_numba_and_numpy_agree(self, refine):
        bench = cb.get_benchmark("b3-lq-diffusion")
        grid = cb.TimeGrid(0.0, 1.0, 20)
        h = cb.get_family("b3-quadratic").build([0.9, 0.05, 0.0])
        kw = dict(lo=[-4.0], hi=[4.0], points=31, control_points=7,
                  control_refine=refine)
        est_np = cb.dual_v1(bench.problem, h, 0.0, [1.0], 16, grid,
                            cb.PathwiseDPConfig(engine="numpy", **kw), seed=11)
        est_nb = cb.dual_v1(bench.problem, h, 0.0, [1.0], 16, grid,
                            cb.PathwiseDPConfig(engine="numba", **kw), seed=11)
        assert est_np.value == est_nb.value
        assert est_np.std_error == est_nb.std_error
        assert est_np.clamp_fraction == est_nb.clamp_fraction

    def test_numba_engine_requires_scalar_state(self):
        with pytest.raises(ValueError):
            problem = _two_dim_zero_integrand()[0]
            cfg = cb.PathwiseDPConfig(lo=[-2.0, -2.0], hi=[2.0, 2.0], points=9,
                                      control_points=3, engine="numba")
            grid = cb.TimeGrid(0.0, 1.0, 4)
            cb.dual_v1(problem, _two_dim_zero_integrand()[1], 0.0, [0.0, 0.0],
                       4, grid, cfg, seed=1)


def _two_dim_zero_integrand():
    eye = np.eye(2)
    problem = cb.ControlProblem(
        d=2, m=2, control_dim=1, t0=0.0, T=1.0,
        drift=lambda t, x, u: x * 0.0 + u * 0.0,
        diffusion=lambda t, x, u: x[..., None] * 0.0 + u[..., None] * 0.0 + eye,
        running_reward=lambda t, x, u: x[..., 0] * 0.0 + u[..., 0] * 0.0,
        terminal_reward=lambda x: (x**2).sum(axis=-1),
        control_lo=[0.0], control_hi=[1.0], control_points=2,
        vectorized=True,
    )
    h = cb.TestFunction(
        value=lambda t, x: (x**2).sum(axis=-1) + 2.0 * (1.0 - t),
        dt=lambda t, x: x[..., 0] * 0.0 - 2.0,
        dx=lambda t, x: 2.0 * x,
        dxx=lambda t, x: x[..., None] * 0.0 + 2.0 * eye,
        d=2, terminal_matches_g=True, vectorized=True,
    )
    return problem, h


class TestTwoDimensionalState:
    def test_zero_integrand_value_is_exact(self):
        problem, h = _two_dim_zero_integrand()
        grid = cb.TimeGrid(0.0, 1.0, 10)
        cfg = cb.PathwiseDPConfig(lo=[-4.0, -4.0], hi=[4.0, 4.0], points=17,
                                  control_points=2)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", cb.StateBoxExit)
            est = cb.dual_v1(problem, h, 0.0, [0.5, -0.5], 6, grid, cfg, seed=4)
        assert est.value == 0.5 + 2.0
        assert est.std_error == 0.0

    def test_enumeration_oracle_in_two_dimensions(self):
        problem = cb.ControlProblem(
            d=2, m=1, control_dim=1, t0=0.0, T=0.5,
            drift=lambda t, x, u: np.concatenate(
                np.broadcast_arrays(u, -u), axis=-1),
            diffusion=lambda t, x, u: x[..., None] * 0.0,
            running_reward=lambda t, x, u: -(x[..., 0] - 0.2) ** 2
            - 2.0 * (x[..., 1] + 0.1) ** 2 - 0.3 * u[..., 0] ** 2,
            terminal_reward=lambda x: (x**2).sum(axis=-1),
            control_lo=[-1.0], control_hi=[1.0], control_points=3,
            vectorized=True,
        )
        h = cb.TestFunction(
            value=lambda t, x: 1.1 * x[..., 0] ** 2 + 0.9 * x[..., 1] ** 2 + 0.4 * (0.5 - t),
            dt=lambda t, x: x[..., 0] * 0.0 - 0.4,
            dx=lambda t, x: np.stack([2.2 * x[..., 0], 1.8 * x[..., 1]], axis=-1),
            dxx=lambda t, x: x[..., None] * 0.0 + np.diag([2.2, 1.8]),
            d=2, vectorized=True,
        )
        grid = cb.TimeGrid(0.0, 0.5, 2)
        path = cb.sample_brownian(grid, 1, seed=2)
        cfg = cb.PathwiseDPConfig(lo=[-2.0, -2.0], hi=[2.0, 2.0], points=17,
                                  control_points=3)
        inner = cb.pathwise_inner_max(problem, h, path, 0.0, [0.0, 0.0], cfg)
        best = -np.inf
        for seq in itertools.product([-1.0, 0.0, 1.0], repeat=2):
            x = np.zeros(2)
            total = 0.0
            for k, tk in enumerate(grid.left_nodes()):
                total += manual_integrand(problem, h, float(tk), x, [seq[k]]) * grid.dt
                x = x + np.array([seq[k], -seq[k]]) * grid.dt
            total += float(problem.terminal_reward(x) - h.value(0.5, x))
            best = max(best, total)
        assert inner == pytest.approx(best, abs=1e-10)


class TestOrderingAndDiagnostics:
    def test_pathwise_bound_not_above_pointwise_bound(self):
        bench = cb.get_benchmark("b2-lq-drift")
        h = cb.get_family("b2-quadratic").build([0.85, 1.0, 0.0])
        grid = cb.TimeGrid(0.0, 1.0, 200)
        box = bench.default_box
        cfg = cb.PathwiseDPConfig(lo=box.lo, hi=box.hi, points=121, control_points=17,
                                  control_refine=True)
        v1 = cb.dual_v1(bench.problem, h, 0.0, [1.0], 1000, grid, cfg, seed=19)
        v2 = cb.dual_v2(bench.problem, h, 0.0, [1.0], box, grid)
        assert v1.value <= v2.value + 3.0 * v1.std_error + 1e-9

    def test_degeneracy_vanishes_at_the_solution(self):
        bench = cb.get_benchmark("b1-brownian-quadratic")
        grid = cb.TimeGrid(0.0, 1.0, 25)
        box = cb.SpatialBox(lo=[-5.0], hi=[5.0], points=101, refine_levels=1)
        cfg = cb.PathwiseDPConfig(lo=[-5.0], hi=[5.0], points=51, control_points=3)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", cb.StateBoxExit)
            rep = cb.degeneracy_diagnostic(bench.problem, bench.oracle_h, 0.0, [1.0],
                                           200, grid, cfg, box, seed=3)
        assert rep.gap_min == 0.0 and rep.gap_max == 0.0
        assert rep.fraction_degenerate == 1.0

    def test_control_free_diffusion_keeps_a_positive_gap(self):
        bench = cb.get_benchmark("b2-lq-drift")
        h = cb.get_family("b2-quadratic").build([0.85, 1.0, 0.0])
        grid = cb.TimeGrid(0.0, 1.0, 50)
        box = bench.default_box
        cfg = cb.PathwiseDPConfig(lo=[-5.0], hi=[5.0], points=81, control_points=17,
                                  control_refine=True)
        rep = cb.degeneracy_diagnostic(bench.problem, h, 0.0, [1.0], 400, grid, cfg,
                                       box, seed=5)
        assert rep.gap_mean > 0.0
        assert rep.fraction_degenerate < 0.5

    def test_controlled_diffusion_gap_is_recorded(self):
        bench = cb.get_benchmark("b3-lq-diffusion")
        h = cb.get_family("b3-quadratic").build([0.85, 0.0, 0.0])
        grid = cb.TimeGrid(0.0, 1.0, 50)
        cfg = cb.PathwiseDPConfig(lo=[-5.0], hi=[5.0], points=81, control_points=17,
                                  control_refine=True)
        rep = cb.degeneracy_diagnostic(bench.problem, h, 0.0, [1.0], 200, grid, cfg,
                                       bench.default_box, seed=5)
        assert np.isfinite(rep.gap_mean)
        assert 0.0 <= rep.fraction_degenerate <= 1.0
        assert set(rep.gap_quantiles) == {"q05", "q25", "q50", "q75", "q95"}

    def test_boundary_maximum_flagged_and_warned(self):
        bench = cb.get_benchmark("b2-lq-drift")
        h = cb.get_family("b2-quadratic").build([1.1, 1.0, 0.0])
        grid = cb.TimeGrid(0.0, 1.0, 10)
        with pytest.warns(cb.BoundaryMaximum):
            est = cb.dual_v2(bench.problem, h, 0.0, [1.0], bench.default_box, grid)
        assert est.boundary_attained

    def test_state_box_exit_reported(self):
        bench = cb.get_benchmark("b2-lq-drift")
        grid = cb.TimeGrid(0.0, 1.0, 25)
        cfg = cb.PathwiseDPConfig(lo=[-0.5], hi=[0.5], points=21, control_points=9)
        with pytest.warns(cb.StateBoxExit):
            est = cb.dual_v1(bench.problem, bench.oracle_h, 0.0, [0.0], 32, grid, cfg,
                             seed=2)
        assert est.clamp_fraction > 0.01
