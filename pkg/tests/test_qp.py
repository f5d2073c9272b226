import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tacrecon import _backend, _fallback
from tacrecon.core import ContractError, make_rng
from tacrecon.qp import (
    DualSolution,
    FinalLayer,
    InfeasibleSystemError,
    MarginSystem,
    SolverConfig,
    build_margin_system,
    check_feasibility,
    perturbations_for_all_classes,
    recover_perturbation,
    solve_class,
    solve_dual,
    verify_kkt,
)

from oracles import active_set_qp, naive_margins, random_full_rank_system

TOY = FinalLayer(np.eye(2), np.zeros(2))  # w_0 = (1, 0), w_1 = (0, 1)


def system(v, m, k=0):
    v = np.atleast_2d(np.asarray(v, float))
    return MarginSystem(k, v, np.asarray(m, float), tuple(j for j in range(v.shape[0] + 1) if j != k))


class TestBuildMarginSystem:
    def test_one_point(self):
        sys_ = build_margin_system([[1.0, 0.0]], TOY, 1)
        np.testing.assert_array_equal(sys_.v, [[-1.0, 1.0]])
        np.testing.assert_array_equal(sys_.m, [1.0])
        assert sys_.class_order == (0,)

    def test_already_on_target_side(self):
        sys_ = build_margin_system([[0.0, 1.0]], TOY, 1)
        np.testing.assert_array_equal(sys_.m, [-1.0])

    def test_matches_naive_loop(self):
        rng = make_rng(10)
        X = rng.standard_normal((50, 8))
        W = rng.standard_normal((8, 5))
        layer = FinalLayer(W, np.zeros(5))
        for k in range(5):
            sys_ = build_margin_system(X, layer, k)
            np.testing.assert_allclose(sys_.m, naive_margins(X, W, k), rtol=1e-12, atol=1e-12)
            assert sys_.v.shape == (4, 8)
            assert sys_.class_order == tuple(j for j in range(5) if j != k)
            for row, j in zip(sys_.v, sys_.class_order):
                np.testing.assert_array_equal(row, W[:, k] - W[:, j])

    def test_bias_flag_shifts_margins(self):
        layer = FinalLayer(np.eye(2), np.array([0.0, 0.5]))
        plain = build_margin_system([[1.0, 0.0]], layer, 1)
        biased = build_margin_system([[1.0, 0.0]], layer, 1, include_bias=True)
        # class 1 already gets +0.5 from the bias, so it needs 0.5 less lift
        np.testing.assert_allclose(biased.m, plain.m - 0.5)

    @pytest.mark.parametrize("k", [-1, 2])
    def test_class_out_of_range(self, k):
        with pytest.raises(ContractError):
            build_margin_system([[1.0, 0.0]], TOY, k)

    def test_empty_batch(self):
        with pytest.raises(ContractError):
            build_margin_system(np.zeros((0, 2)), TOY, 0)


class TestFeasibility:
    def test_single_nonzero_row(self):
        rep = check_feasibility(system([[-1, 1]], [1]), 2)
        assert (rep.rank_of_v, rep.full_row_rank, rep.dim_condition, rep.guaranteed_feasible) == (1, True, True, True)

    def test_duplicated_rows(self):
        rep = check_feasibility(system([[1, 2, 0], [1, 2, 0]], [1, 1]), 3)
        assert rep.rank_of_v == 1
        assert not rep.full_row_rank
        assert not rep.guaranteed_feasible

    def test_dimension_condition_violated(self):
        rep = check_feasibility(system([[1, 0], [0, 1]], [1, 1]), 2)
        assert rep.full_row_rank
        assert not rep.dim_condition
        assert not rep.guaranteed_feasible


class TestSolveDual:
    def test_nonpositive_margins(self):
        sol = solve_dual(system([[1, 0], [0, 1]], [-1.0, 0.0]))
        np.testing.assert_array_equal(sol.lam, [0.0, 0.0])
        assert sol.objective == 0.0
        assert sol.converged

    def test_single_constraint_closed_form(self):
        sol = solve_dual(system([[1, 0]], [2.0]))
        np.testing.assert_allclose(sol.lam, [2.0])
        assert sol.objective == pytest.approx(2.0)

    def test_matches_active_set_oracle(self):
        rng = make_rng(11)
        for _ in range(30):
            _, _, sys_ = random_full_rank_system(rng, 4, 6)
            sol = solve_dual(sys_)
            _, _, best = active_set_qp(sys_.v, sys_.m)
            assert sol.converged
            assert sol.objective == pytest.approx(best, rel=1e-8, abs=1e-8)

    def test_zero_row_with_positive_margin_is_infeasible(self):
        with pytest.raises(InfeasibleSystemError) as info:
            solve_dual(system([[1, 0], [0, 0]], [1.0, 0.5], k=2))
        assert info.value.other_class == 1

    def test_zero_row_with_slack_margin_is_frozen(self):
        sol = solve_dual(system([[1, 0], [0, 0]], [1.0, -0.5]))
        np.testing.assert_allclose(sol.lam, [1.0, 0.0])

    def test_multipliers_nonnegative(self):
        rng = make_rng(12)
        for _ in range(20):
            _, _, sys_ = random_full_rank_system(rng, 6, 10)
            assert np.all(solve_dual(sys_).lam >= 0.0)

    def test_dual_ascent_is_monotone(self):
        rng = make_rng(13)
        for _ in range(10):
            _, _, sys_ = random_full_rank_system(rng, 10, 32)
            sol = solve_dual(sys_, SolverConfig(trace=True))
            steps = np.diff(sol.trace)
            assert np.all(steps >= -1e-12 * (1 + abs(sol.objective)))

    def test_unconverged_when_sweeps_exhausted(self):
        rng = make_rng(14)
        _, _, sys_ = random_full_rank_system(rng, 10, 12)
        sol = solve_dual(sys_, SolverConfig(max_sweeps=1, tol=1e-300))
        assert not sol.converged
        assert sol.iterations == 1

    def test_backends_agree(self):
        rng = make_rng(15)
        for _ in range(5):
            _, _, sys_ = random_full_rank_system(rng, 10, 32)
            V, m = sys_.v, sys_.m
            sq = np.einsum("ij,ij->i", V, V)
            out = []
            for impl in (_backend, _fallback):
                lam, u = np.zeros(9), np.zeros(32)
                impl.cd_sweeps(V, m, sq, lam, u, 5000, 1e-10, 1e-14)
                out.append(lam)
            np.testing.assert_allclose(out[0], out[1], rtol=1e-8, atol=1e-10)


class TestRecoverAndVerify:
    def test_zero_multipliers(self):
        s = recover_perturbation(system([[1, 0]], [-1.0]), DualSolution(np.zeros(1), 0.0, 0, True))
        np.testing.assert_array_equal(s, [0.0, 0.0])

    def test_hand_arithmetic(self):
        s = recover_perturbation(system([[-1, 1]], [1.0]), DualSolution(np.array([0.5]), 0.0, 0, True))
        np.testing.assert_allclose(s, [-0.5, 0.5])

    def test_length_mismatch(self):
        with pytest.raises(ContractError):
            recover_perturbation(system([[-1, 1]], [1.0]), DualSolution(np.zeros(2), 0.0, 0, True))

    def test_random_solution_is_primal_feasible(self):
        rng = make_rng(16)
        for _ in range(20):
            _, _, sys_ = random_full_rank_system(rng, 5, 8)
            s = recover_perturbation(sys_, solve_dual(sys_))
            assert np.all(sys_.v @ s >= sys_.m - 1e-6)

    def test_exact_single_constraint(self):
        sys_ = system([[1, 0]], [2.0])
        rep = verify_kkt(sys_, np.array([2.0, 0.0]), DualSolution(np.array([2.0]), 2.0, 0, True))
        assert rep.stationarity_resid == 0.0
        assert rep.primal_violation == 0.0
        assert rep.dual_violation == 0.0
        assert rep.comp_slack_resid == 0.0
        assert rep.duality_gap == 0.0

    def test_inactive_constraint(self):
        rep = verify_kkt(system([[1, 0]], [-1.0]), np.zeros(2), DualSolution(np.zeros(1), 0.0, 0, True))
        assert rep.certified(1e-15)
        assert rep.duality_gap == 0.0

    def test_converged_random_instances_certified(self):
        rng = make_rng(17)
        for _ in range(20):
            _, _, sys_ = random_full_rank_system(rng, 10, 32)
            sol = solve_dual(sys_)
            rep = verify_kkt(sys_, recover_perturbation(sys_, sol), sol)
            assert rep.certified(1e-6, sol.objective)

    def test_residual_fields_detect_bad_points(self):
        sys_ = system([[1, 0]], [2.0])
        rep = verify_kkt(sys_, np.array([1.0, 0.0]), DualSolution(np.array([-1.0]), 0.0, 0, True))
        assert rep.primal_violation == pytest.approx(1.0)
        assert rep.dual_violation == pytest.approx(1.0)
        assert rep.stationarity_resid == pytest.approx(2.0)


class TestAllClasses:
    def test_two_class_toy(self):
        X = np.array([[1.0, 0.0], [0.2, 0.9]])
        results = perturbations_for_all_classes(X, TOY)
        assert [r.target_class for r in results] == [0, 1]
        for r in results:
            assert r.certified
            margins = (TOY.weights[:, r.target_class] - TOY.weights[:, 1 - r.target_class]) @ (X + r.s).T
            assert np.all(margins >= -1e-9)

    def test_identical_columns(self):
        layer = FinalLayer(np.ones((4, 3)), np.zeros(3))
        X = make_rng(18).standard_normal((10, 4))
        for r in perturbations_for_all_classes(X, layer):
            assert r.error is None
            np.testing.assert_array_equal(r.s, 0.0)
            np.testing.assert_array_equal(r.dual.lam, 0.0)
            assert r.certified

    def test_infeasible_class_is_marked_not_raised(self):
        W = np.array([[1.0, 1.0, 0.0], [0.0, 0.0, 1.0]])  # classes 0 and 1 share a column
        X = np.array([[1.0, 0.0], [0.0, 1.0]])
        layer = FinalLayer(W, np.zeros(3))
        results = perturbations_for_all_classes(X, layer)
        assert len(results) == 3
        # all margins between the tied classes are zero: still satisfiable
        assert all(r.error is None for r in results)
        layer_b = FinalLayer(W, np.array([0.0, 1.0, 0.0]))
        results_b = perturbations_for_all_classes(X, layer_b, SolverConfig(include_bias_in_margins=True))
        assert results_b[0].error is not None
        assert results_b[0].s is None
        assert results_b[0].norm == np.inf

    def test_ten_class_layer_all_certified(self):
        rng = make_rng(19)
        layer = FinalLayer(rng.standard_normal((32, 10)), np.zeros(10))
        X = rng.standard_normal((100, 32))
        results = perturbations_for_all_classes(X, layer)
        assert all(r.certified for r in results)
        assert all(r.feasibility.guaranteed_feasible for r in results)

    def test_parallel_matches_serial(self):
        rng = make_rng(20)
        layer = FinalLayer(rng.standard_normal((16, 6)), np.zeros(6))
        X = rng.standard_normal((40, 16))
        a = perturbations_for_all_classes(X, layer)
        b = perturbations_for_all_classes(X, layer, SolverConfig(workers=4))
        for ra, rb in zip(a, b):
            assert ra.target_class == rb.target_class
            np.testing.assert_array_equal(ra.s, rb.s)


class TestProperties:
    def test_classification_guarantee(self):
        rng = make_rng(21)
        for _ in range(10):
            layer = FinalLayer(rng.standard_normal((32, 10)), np.zeros(10))
            X = rng.standard_normal((60, 32))
            for r in perturbations_for_all_classes(X, layer):
                assert r.certified
                W = layer.weights
                shifted = X + r.s
                for j in range(10):
                    if j != r.target_class:
                        assert np.min(shifted @ (W[:, r.target_class] - W[:, j])) >= -1e-6

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.sampled_from([3, 4]), st.sampled_from([4, 5, 6]))
    def test_minimality_against_oracle(self, seed, n_classes, d_emb):
        _, _, sys_ = random_full_rank_system(make_rng(seed), n_classes, d_emb)
        sol = solve_dual(sys_)
        s = recover_perturbation(sys_, sol)
        s_ref, _, _ = active_set_qp(sys_.v, sys_.m)
        assert float(s @ s) == pytest.approx(float(s_ref @ s_ref), rel=1e-7, abs=1e-12)

    def test_strong_duality_when_guaranteed(self):
        rng = make_rng(22)
        for _ in range(30):
            X, layer, sys_ = random_full_rank_system(rng, 6, 12)
            r = solve_class(X, layer, sys_.target_class)
            assert r.feasibility.guaranteed_feasible
            assert abs(r.kkt.duality_gap) <= 1e-6 * (1 + abs(r.dual.objective))

    @pytest.mark.parametrize("c", [0.5, 2.0, 7.0])
    def test_single_constraint_scale(self, c):
        v, m = np.array([[3.0, 4.0]]), np.array([5.0])
        s1 = recover_perturbation(system(v, m), solve_dual(system(v, m)))
        s_c = recover_perturbation(system(c * v, c * c * m), solve_dual(system(c * v, c * c * m)))
        np.testing.assert_allclose(s1, m[0] * v[0] / 25.0)
        np.testing.assert_allclose(s_c, c * s1, rtol=1e-12)
