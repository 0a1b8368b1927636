import numpy as np
import pytest

import ctrlbounds as cb


def b1_search_config(n_steps=50, points=101):
    return cb.SearchConfig(
        time_grid=cb.TimeGrid(0.0, 1.0, n_steps),
        box=cb.SpatialBox(lo=[-5.0], hi=[5.0], points=points, refine_levels=1),
    )


class TestMinimizeDual:
    def test_zero_budget_evaluates_initial_point_only(self):
        bench = cb.get_benchmark("b1-brownian-quadratic")
        family = cb.get_family("b1-quadratic")
        trace = cb.minimize_dual(bench.problem, family, "dual_v2", 0.0, [1.0],
                                 budget=0, seed=1, config=b1_search_config())
        assert len(trace.entries) == 1
        assert trace.entries[0].params == tuple(family.initial)

    def test_converges_to_oracle_value_within_budget(self):
        bench = cb.get_benchmark("b1-brownian-quadratic")
        family = cb.get_family("b1-quadratic")
        trace = cb.minimize_dual(bench.problem, family, "dual_v2", 0.0, [1.0],
                                 budget=200, seed=1, config=b1_search_config())
        assert len(trace.entries) <= 200
        assert trace.best.objective <= 2.0 * 1.01
        assert trace.best.objective >= 2.0 - 1e-9  # stays an upper bound

    def test_best_so_far_is_non_increasing(self):
        bench = cb.get_benchmark("b1-brownian-quadratic")
        family = cb.get_family("b1-quadratic")
        trace = cb.minimize_dual(bench.problem, family, "dual_v2", 0.0, [1.0],
                                 budget=60, seed=2, config=b1_search_config())
        bsf = trace.best_so_far()
        assert all(a >= b for a, b in zip(bsf, bsf[1:]))

    def test_untrusted_candidates_get_infinite_objective(self):
        bench = cb.get_benchmark("b1-brownian-quadratic")
        family = cb.get_family("b1-quadratic")
        trace = cb.minimize_dual(bench.problem, family, "dual_v2", 0.0, [1.0],
                                 budget=80, seed=3, config=b1_search_config())
        rejected = [e for e in trace.entries if not np.isfinite(e.objective)]
        assert rejected  # the quadratic coefficient wall below 1 is always probed
        assert all(e.reason for e in rejected)
        # any candidate with terminal gap growing with |y|^2 sits on the wall
        assert any(e.params[0] < 1.0 for e in rejected)

    def test_objective_is_reproducible(self):
        bench = cb.get_benchmark("b2-lq-drift")
        family = cb.get_family("b2-quadratic")
        box = bench.default_box
        config = cb.SearchConfig(
            time_grid=cb.TimeGrid(0.0, 1.0, 25), box=box,
            dp=cb.PathwiseDPConfig(lo=box.lo, hi=box.hi, points=41, control_points=7),
            n_paths=64,
        )
        traces = [
            cb.minimize_dual(bench.problem, family, "dual_v1", 0.0, [1.0],
                             budget=10, seed=9, config=config)
            for _ in range(2)
        ]
        a, b = traces
        assert [e.objective for e in a.entries] == [e.objective for e in b.entries]
        assert [e.params for e in a.entries] == [e.params for e in b.entries]

    def test_all_candidates_invalid(self):
        bench = cb.get_benchmark("b1-brownian-quadratic")

        def build_broken(theta):
            return cb.TestFunction(
                value=lambda t, x: x[..., 0] ** 2,
                dt=lambda t, x: x[..., 0] * 0.0,
                dx=lambda t, x: 3.0 * x,  # wrong on purpose
                dxx=lambda t, x: x[..., None] * 0.0 + 2.0,
                d=1, vectorized=True,
            )

        family = cb.ParametricFamily(dim=1, build=build_broken, initial=[0.0], scales=[1.0])
        with pytest.raises(cb.AllCandidatesInvalid):
            cb.minimize_dual(bench.problem, family, "dual_v2", 0.0, [1.0],
                             budget=20, seed=1, config=b1_search_config())

    def test_supersolution_filter(self):
        bench = cb.get_benchmark("b1-brownian-quadratic")
        base = cb.get_family("b1-quadratic")
        # start from a genuine supersolution (residual = theta2 - theta1 >= 0,
        # terminal value >= g) so the filtered simplex is not empty
        family = cb.ParametricFamily(dim=3, build=base.build,
                                     initial=[1.2, 1.4, 0.1],
                                     scales=[0.05, 0.05, 0.05])
        config = b1_search_config()
        config.require_supersolution = True
        trace = cb.minimize_dual(bench.problem, family, "dual_v2", 0.0, [1.0],
                                 budget=40, seed=4, config=config)
        for e in trace.entries:
            if np.isfinite(e.objective):
                h = family.build(np.asarray(e.params))
                ok, _ = cb.supersolution_probe(
                    bench.problem, h, config.box,
                    np.linspace(0.05, 0.95, 5), tol=config.supersolution_tol)
                assert ok

    def test_invalid_objective_name(self):
        bench = cb.get_benchmark("b1-brownian-quadratic")
        family = cb.get_family("b1-quadratic")
        with pytest.raises(ValueError):
            cb.minimize_dual(bench.problem, family, "primal", 0.0, [1.0],
                             budget=5, seed=1, config=b1_search_config())

    def test_minimum_approaches_oracle_from_above_under_refinement(self):
        bench = cb.get_benchmark("b1-brownian-quadratic")
        family = cb.get_family("b1-quadratic")
        bests = []
        for n_steps, points in ((25, 51), (100, 201)):
            trace = cb.minimize_dual(bench.problem, family, "dual_v2", 0.0, [1.0],
                                     budget=150, seed=6,
                                     config=b1_search_config(n_steps, points))
            bests.append(trace.best.objective)
        for best in bests:
            assert best >= 2.0 - 1e-9  # never undercuts the oracle value
        assert bests[1] <= bests[0] + 1e-9


class TestGapReport:
    def _estimate(self, value, se, kind="primal", problem_id="p", t=0.0, x=(1.0,)):
        return cb.BoundEstimate(value=value, std_error=se, n_paths=100, kind=kind,
                                dt=0.01, n_steps=100, seed=1, problem_id=problem_id,
                                t=t, x=x)

    def test_zero_gap(self):
        rep = cb.gap_report(self._estimate(2.0, 0.01),
                            self._estimate(2.0, 0.0, kind="dual_v2"))
        assert rep.gap == 0.0
        assert rep.combined_std_error == pytest.approx(0.01)
        assert not rep.failed

    def test_arithmetic(self):
        rep = cb.gap_report(self._estimate(1.9, 0.02),
                            self._estimate(2.1, 0.05, kind="dual_v1"))
        assert rep.gap == pytest.approx(0.2)
        assert rep.combined_std_error == pytest.approx(np.sqrt(0.02**2 + 0.05**2))
        assert rep.combined_std_error == pytest.approx(0.0539, abs=2e-4)

    def test_mismatched_problem(self):
        with pytest.raises(cb.MismatchedProblem):
            cb.gap_report(self._estimate(1.0, 0.1),
                          self._estimate(2.0, 0.1, problem_id="other"))
        with pytest.raises(cb.MismatchedProblem):
            cb.gap_report(self._estimate(1.0, 0.1),
                          self._estimate(2.0, 0.1, x=(2.0,)))

    def test_negative_gap_alarm(self):
        rep = cb.gap_report(self._estimate(2.0, 0.01),
                            self._estimate(1.9, 0.01, kind="dual_v1"))
        assert rep.failed  # -0.1 is far below -3 combined standard errors
        ok = cb.gap_report(self._estimate(2.0, 0.05),
                           self._estimate(1.9, 0.05, kind="dual_v1"))
        assert not ok.failed  # within noise
