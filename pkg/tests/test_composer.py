import numpy as np
import pytest

from otmap.admm_kr import fit_kr_stage
from otmap.composer import (
    empirical_objective,
    fit_sequential,
    kl_decay_check,
    progress_rows,
)
from otmap.density import gaussian_target
from otmap.errors import NonMonotoneAtPoint, OtmapError
from otmap.maps import SequentialMap, compose_forward, forward, identity_map
from otmap.solver import BasisSpec, SolverConfig

from _oracles import central_diff, random_monotone_kr_map


class TestEmpiricalObjective:
    def test_identity_map_gaussian_value(self):
        # E[-log q(X)] for X ~ q is the Gaussian entropy 0.5 log(2 pi e)
        rng = np.random.default_rng(0)
        X = rng.normal(size=(40000, 1))
        target = gaussian_target(np.zeros(1), np.eye(1))
        obj = empirical_objective(identity_map("kr", 1, 2), X, target)
        assert obj == pytest.approx(0.5 * np.log(2 * np.pi * np.e), abs=0.02)

    def test_optimal_map_beats_identity(self):
        rng = np.random.default_rng(1)
        X = rng.normal(0.0, 2.0, size=(4000, 1))
        target = gaussian_target(np.zeros(1), np.eye(1))
        mset_id = identity_map("kr", 1, 1)
        half = SequentialMap((identity_map("kr", 1, 1),))
        # analytic optimal map S(x) = x / 2
        from otmap.basis import build_multi_index_set
        from otmap.maps import TransportMap
        mset = build_multi_index_set("kr", 1, 1)
        W = np.zeros((1, 2))
        W[0, 1] = 0.5
        opt = TransportMap(mset, "hermite", W)
        assert empirical_objective(opt, X, target) <= empirical_objective(
            mset_id, X, target
        )

    def test_sequence_chain_rule_matches_numeric_logdet(self):
        rng = np.random.default_rng(2)
        stages = tuple(random_monotone_kr_map(rng, 2, 3) for _ in range(3))
        seq = SequentialMap(stages)
        target = gaussian_target(np.zeros(2), np.eye(2))
        X = rng.uniform(-1.5, 1.5, size=(10, 2))
        # numeric oracle: finite-difference Jacobian of the composition
        for x in X:
            J_num = np.column_stack([
                central_diff(lambda u, i=i: compose_forward(seq, u)[i], x, h=1e-6)
                for i in range(2)
            ]).T
            expected = np.log(np.linalg.det(J_num))
            seq_obj = empirical_objective(seq, x[None, :], target)
            direct = float(-target.log_q(compose_forward(seq, x)) - expected)
            assert seq_obj == pytest.approx(direct, abs=1e-8)

    def test_nonmonotone_error_carries_stage(self):
        from otmap.basis import build_multi_index_set
        from otmap.maps import TransportMap
        mset = build_multi_index_set("kr", 1, 1)
        W = np.zeros((1, 2))
        W[0, 1] = -1.0
        bad = TransportMap(mset, "hermite", W)
        seq = SequentialMap((identity_map("kr", 1, 1), bad))
        target = gaussian_target(np.zeros(1), np.eye(1))
        with pytest.raises(NonMonotoneAtPoint) as exc:
            empirical_objective(seq, np.array([[1.0]]), target)
        assert exc.value.stage == 2

    def test_rejects_other_types(self):
        with pytest.raises(OtmapError):
            empirical_objective(42, np.zeros((1, 1)),
                                gaussian_target(np.zeros(1), np.eye(1)))


class TestKlDecay:
    def test_identity_stages_constant(self):
        rng = np.random.default_rng(3)
        X = rng.normal(size=(500, 2))
        target = gaussian_target(np.zeros(2), np.eye(2))
        seq = SequentialMap((identity_map("kr", 2, 2),) * 4)
        objs = kl_decay_check(seq, X, target)
        assert len(objs) == 4
        assert np.ptp(objs) < 1e-12

    def test_single_stage_gives_length_one(self):
        X = np.random.default_rng(4).normal(size=(100, 1))
        target = gaussian_target(np.zeros(1), np.eye(1))
        seq = SequentialMap((identity_map("kr", 1, 1),))
        assert len(kl_decay_check(seq, X, target)) == 1


class TestFitSequential:
    def test_identity_source_early_stops_by_stage_three(self):
        rng = np.random.default_rng(5)
        X = rng.normal(size=(600, 2))
        target = gaussian_target(np.zeros(2), np.eye(2))
        seq = fit_sequential(X, target, stages=8, theta=1.0,
                             basis=BasisSpec("krsv", 2),
                             config=SolverConfig(max_iters=1500, seed=0))
        assert 2 <= len(seq.stages) <= 3
        # the first stage barely moves anything
        assert np.abs(forward(seq.stages[0], X) - X).max() < 0.2

    def test_early_stop_never_fires_before_stage_two(self):
        rng = np.random.default_rng(6)
        X = rng.normal(size=(300, 1))
        target = gaussian_target(np.zeros(1), np.eye(1))
        seq = fit_sequential(X, target, stages=6, theta=1.0,
                             basis=BasisSpec("kr", 2),
                             config=SolverConfig(max_iters=1000, seed=1),
                             eps_stop=1e9)
        assert len(seq.stages) == 2

    def test_single_stage_equals_fit_kr_stage(self):
        rng = np.random.default_rng(7)
        X = rng.normal(0.0, 1.5, size=(400, 2))
        target = gaussian_target(np.zeros(2), np.eye(2))
        cfg = SolverConfig(max_iters=800, seed=2)
        seq = fit_sequential(X, target, stages=1, theta=0.7,
                             basis=BasisSpec("krsv", 2), config=cfg,
                             holdout_frac=0.0)
        single, _ = fit_kr_stage(X, target, BasisSpec("krsv", 2), 0.7, cfg)
        assert np.array_equal(seq.stages[0].W, single.W)

    def test_stagewise_refit_matches_manual_recomputation(self):
        rng = np.random.default_rng(8)
        X = rng.normal(0.0, 1.8, size=(300, 2))
        target = gaussian_target(np.zeros(2), np.eye(2))
        cfg = SolverConfig(max_iters=600, seed=3)
        seq = fit_sequential(X, target, stages=2, theta=1.0,
                             basis=BasisSpec("krsv", 2), config=cfg,
                             holdout_frac=0.0, eps_stop=0.0)
        s1, _ = fit_kr_stage(X, target, BasisSpec("krsv", 2), 1.0, cfg)
        pushed = forward(s1, X)
        s2, _ = fit_kr_stage(pushed, target, BasisSpec("krsv", 2), 1.0, cfg)
        assert np.array_equal(seq.stages[0].W, s1.W)
        assert np.array_equal(seq.stages[1].W, s2.W)

    def test_objective_decays_for_scaled_gaussian(self):
        rng = np.random.default_rng(9)
        X = rng.normal(0.0, 2.0, size=(800, 2))
        target = gaussian_target(np.zeros(2), np.eye(2))
        seq = fit_sequential(X, target, stages=4, theta=1.0,
                             basis=BasisSpec("krsv", 2),
                             config=SolverConfig(max_iters=1500, seed=4))
        objs = kl_decay_check(seq, X, target)
        assert all(objs[t + 1] <= objs[t] + 0.05 for t in range(len(objs) - 1))

    def test_progress_rows_schema(self):
        rng = np.random.default_rng(10)
        X = rng.normal(size=(200, 1))
        target = gaussian_target(np.zeros(1), np.eye(1))
        seq = fit_sequential(X, target, stages=2, theta=1.0,
                             basis=BasisSpec("kr", 2),
                             config=SolverConfig(max_iters=500, seed=5),
                             eps_stop=0.0)
        rows = progress_rows(seq)
        assert len(rows) == len(seq.stages)
        assert all(len(r) == 5 for r in rows)

    def test_theta_schedule_broadcast_and_sequence(self):
        rng = np.random.default_rng(11)
        X = rng.normal(size=(150, 1))
        target = gaussian_target(np.zeros(1), np.eye(1))
        seq = fit_sequential(X, target, stages=2, theta=[2.0, 1.0],
                             basis=BasisSpec("kr", 1),
                             config=SolverConfig(max_iters=400, seed=6),
                             eps_stop=0.0)
        assert seq.thetas == (2.0, 1.0)

    def test_rejects_bad_args(self):
        target = gaussian_target(np.zeros(1), np.eye(1))
        with pytest.raises(OtmapError):
            fit_sequential(np.zeros((10, 1)), target, stages=0)
        with pytest.raises(OtmapError):
            fit_sequential(np.zeros((10, 1)), target, stages=2, theta=-1.0)
