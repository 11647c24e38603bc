import json

import numpy as np
import pytest

from otmap.basis import build_multi_index_set, eval_basis, eval_basis_jacobian
from otmap.errors import (
    BracketNotFound,
    NonMonotoneAtPoint,
    OtmapError,
    SchemaError,
    UnsupportedVersion,
)
from otmap.maps import (
    InvertOptions,
    SequentialMap,
    TransportMap,
    check_monotonicity,
    compose_forward,
    compose_inverse,
    deserialize,
    forward,
    identity_map,
    invert,
    load_map,
    log_det_jacobian,
    project_monotone,
    save_map,
    serialize,
)

from _oracles import random_monotone_kr_map


def _linear_1d(slope, structure="kr", order=2, family="monomial"):
    mset = build_multi_index_set(structure, 1, order)
    W = np.zeros((1, mset.size))
    W[0, mset.position((1,) + (0,) * 0)] = slope
    return TransportMap(mset, family, W)


class TestForward:
    def test_identity(self):
        im = identity_map("kr", 3, 2)
        rng = np.random.default_rng(0)
        X = rng.normal(size=(50, 3))
        assert forward(im, X) == pytest.approx(X, abs=1e-14)

    def test_linear_monomial(self):
        tm = _linear_1d(2.0, order=1)
        assert forward(tm, np.array([3.0])) == pytest.approx([6.0])

    def test_matches_dot_product_oracle(self):
        tm = random_monotone_kr_map(np.random.default_rng(1), 3, 3)
        rng = np.random.default_rng(2)
        for x in rng.uniform(-2, 2, size=(20, 3)):
            phi = eval_basis(tm.mset, tm.family, x)
            expected = [float(np.dot(tm.W[d], phi)) for d in range(3)]
            assert forward(tm, x) == pytest.approx(expected, abs=1e-14)

    def test_kr_triangularity_exact(self):
        tm = random_monotone_kr_map(np.random.default_rng(3), 4, 3)
        rng = np.random.default_rng(4)
        for _ in range(100):
            x = rng.uniform(-2, 2, size=4)
            base = forward(tm, x)
            d = rng.integers(0, 3)
            e = rng.integers(d + 1, 4)
            x2 = x.copy()
            x2[e] += rng.normal()
            assert forward(tm, x2)[d] == base[d]


class TestLogDet:
    def test_identity_is_zero(self):
        im = identity_map("dense", 2, 2)
        rng = np.random.default_rng(5)
        for x in rng.normal(size=(10, 2)):
            assert log_det_jacobian(im, x) == pytest.approx(0.0, abs=1e-14)

    def test_linear_slope_two(self):
        tm = _linear_1d(2.0)
        assert log_det_jacobian(tm, np.array([0.7])) == pytest.approx(np.log(2.0))

    def test_kr_sum_equals_dense_determinant(self):
        rng = np.random.default_rng(6)
        for _ in range(20):
            tm = random_monotone_kr_map(rng, 4, 3)
            x = rng.uniform(-2, 2, size=4)
            jac = eval_basis_jacobian(tm.mset, tm.family, x)
            sign, logdet = np.linalg.slogdet(tm.W @ jac)
            assert sign > 0
            assert log_det_jacobian(tm, x) == pytest.approx(logdet, abs=1e-10)

    def test_raises_with_point_and_coordinate(self):
        tm = _linear_1d(-1.0)
        with pytest.raises(NonMonotoneAtPoint) as exc:
            log_det_jacobian(tm, np.array([0.3]))
        assert exc.value.coord == 1
        assert exc.value.point == pytest.approx([0.3])

    def test_dense_raises_with_determinant(self):
        mset = build_multi_index_set("dense", 1, 1)
        W = np.zeros((1, 2))
        W[0, 1] = -2.0
        tm = TransportMap(mset, "monomial", W)
        with pytest.raises(NonMonotoneAtPoint) as exc:
            log_det_jacobian(tm, np.array([0.0]))
        assert exc.value.det == pytest.approx(-2.0)


class TestInvert:
    def test_identity(self):
        im = identity_map("kr", 2, 2)
        y = np.array([0.4, -1.1])
        assert invert(im, y) == pytest.approx(y, abs=1e-10)

    def test_linear(self):
        tm = _linear_1d(2.0, order=1)
        assert invert(tm, np.array([4.0])) == pytest.approx([2.0], abs=1e-10)

    def test_roundtrip_on_random_monotone_maps(self):
        rng = np.random.default_rng(7)
        tm = random_monotone_kr_map(rng, 3, 4)
        X = rng.uniform(-2.5, 2.5, size=(100, 3))
        Y = forward(tm, X)
        back = invert(tm, Y)
        assert np.abs(back - X).max() < 1e-6

    def test_dense_inversion_unsupported(self):
        im = identity_map("dense", 2, 2)
        with pytest.raises(OtmapError, match="kr"):
            invert(im, np.zeros(2))

    def test_bracket_not_found_for_bounded_component(self):
        # S(x) = x^2 never reaches -1; expansion must hit the cap and stop
        mset = build_multi_index_set("kr", 1, 2)
        W = np.zeros((1, mset.size))
        W[0, mset.position((2,))] = 1.0
        tm = TransportMap(mset, "monomial", W)
        with pytest.raises(BracketNotFound):
            invert(tm, np.array([-1.0]), InvertOptions(max_bracket=1e3))


class TestMonotonicityCheck:
    def test_identity_ok(self):
        im = identity_map("kr", 2, 2)
        pts = np.random.default_rng(8).normal(size=(40, 2))
        assert check_monotonicity(im, pts).ok

    def test_negative_slope_flags_every_point(self):
        tm = _linear_1d(-1.0)
        pts = np.linspace(-2, 2, 9)[:, None]
        report = check_monotonicity(tm, pts)
        assert not report.ok
        assert len(report.violations) == 9
        assert all(coord == 1 for _, coord in report.violations)

    def test_dense_check_uses_determinant_sign(self):
        im = identity_map("dense", 2, 1)
        pts = np.random.default_rng(9).normal(size=(10, 2))
        assert check_monotonicity(im, pts).ok


class TestProjection:
    def test_already_monotone_is_unchanged(self):
        tm = random_monotone_kr_map(np.random.default_rng(10), 2, 3)
        pts = np.random.default_rng(11).uniform(-2, 2, size=(30, 2))
        projected = project_monotone(tm, pts, margin=1e-4)
        assert np.abs(projected.W - tm.W).max() < 1e-8

    def test_negative_slope_projects_to_margin(self):
        tm = _linear_1d(-1.0, order=1)
        pts = np.array([[-1.0], [0.0], [1.0]])
        projected = project_monotone(tm, pts, margin=0.1)
        slope = projected.W[0, 1]
        assert slope == pytest.approx(0.1, abs=1e-5)
        assert abs(projected.W[0, 0]) < 1e-6

    def test_projected_map_passes_check(self):
        from otmap.basis import kr_mask

        rng = np.random.default_rng(12)
        mset = build_multi_index_set("kr", 2, 3)
        W = rng.normal(size=(2, mset.size)) * kr_mask(mset)
        tm = TransportMap(mset, "hermite", W)
        pts = rng.uniform(-1.5, 1.5, size=(25, 2))
        projected = project_monotone(tm, pts, margin=0.05)
        assert check_monotonicity(projected, pts).ok

    def test_dense_rejected(self):
        im = identity_map("dense", 2, 2)
        with pytest.raises(OtmapError):
            project_monotone(im, np.zeros((1, 2)))


class TestComposition:
    def test_single_stage_equals_forward(self):
        tm = random_monotone_kr_map(np.random.default_rng(13), 2, 2)
        seq = SequentialMap((tm,))
        X = np.random.default_rng(14).normal(size=(20, 2))
        assert compose_forward(seq, X) == pytest.approx(forward(tm, X), abs=0)

    def test_two_linear_stages_multiply(self):
        seq = SequentialMap((_linear_1d(2.0, order=1), _linear_1d(3.0, order=1)))
        out = compose_forward(seq, np.array([[1.0], [2.0]]))
        np.testing.assert_allclose(out, [[6.0], [12.0]], atol=1e-14)

    def test_identity_stages_unchanged(self):
        im = identity_map("kr", 3, 2)
        seq = SequentialMap((im,) * 5)
        X = np.random.default_rng(15).normal(size=(10, 3))
        assert compose_forward(seq, X) == pytest.approx(X, abs=1e-12)

    def test_inverse_roundtrip(self):
        rng = np.random.default_rng(16)
        stages = tuple(random_monotone_kr_map(rng, 2, 3) for _ in range(3))
        seq = SequentialMap(stages)
        X = rng.uniform(-2, 2, size=(50, 2))
        Y = compose_forward(seq, X)
        assert np.abs(compose_inverse(seq, Y) - X).max() < 1e-6

    def test_single_linear_stage_exact_inverse(self):
        seq = SequentialMap((_linear_1d(2.0, order=1),))
        np.testing.assert_allclose(
            compose_inverse(seq, np.array([[4.0]])), [[2.0]], atol=1e-10
        )

    def test_inverse_error_carries_stage_index(self):
        # stage 2 is decreasing, so its bracket expansion can never close
        seq = SequentialMap((identity_map("kr", 1, 2), _linear_1d(-1.0)))
        with pytest.raises(BracketNotFound, match="stage 2"):
            compose_inverse(seq, np.array([[1.0]]),
                            InvertOptions(max_bracket=1e3))

    def test_dimension_mismatch_rejected(self):
        with pytest.raises(OtmapError):
            SequentialMap((identity_map("kr", 1, 2), identity_map("kr", 2, 2)))


class TestFittedMapIdentities:
    def test_change_of_variables_identity_on_fitted_map(self):
        # for a 1-D Gaussian-to-Gaussian fit the source density must
        # match q(S(x)) |S'(x)| pointwise up to fitting error
        from otmap.admm_dense import fit_dense
        from otmap.density import gaussian_target
        from otmap.solver import BasisSpec, SolverConfig

        rng = np.random.default_rng(30)
        X = rng.normal(0.0, 2.0, size=(2000, 1))
        target = gaussian_target(np.zeros(1), np.eye(1))
        tmap, _ = fit_dense(X, target, BasisSpec("dense", 1), SolverConfig())
        held = rng.normal(0.0, 2.0, size=(500, 1))
        log_p = -0.5 * held[:, 0] ** 2 / 4.0 - 0.5 * np.log(2 * np.pi * 4.0)
        log_rhs = target.log_q(forward(tmap, held)) + log_det_jacobian(tmap, held)
        assert np.mean(np.abs(log_p - log_rhs)) < 0.05

    def test_fitted_map_monotone_at_fresh_samples(self):
        from otmap.admm_dense import fit_dense
        from otmap.density import gaussian_target
        from otmap.solver import BasisSpec, SolverConfig

        rng = np.random.default_rng(31)
        X = rng.normal(size=(1000, 2))
        target = gaussian_target(np.zeros(2), np.eye(2))
        tmap, _ = fit_dense(X, target, BasisSpec("dense", 2), SolverConfig())
        fresh = rng.normal(size=(1000, 2))
        assert check_monotonicity(tmap, fresh).ok


class TestSerialization:
    def test_map_roundtrip_bitwise(self, tmp_path):
        tm = random_monotone_kr_map(np.random.default_rng(17), 3, 3)
        path = tmp_path / "map.json"
        save_map(tm, path)
        back = load_map(path)
        assert np.array_equal(back.W, tm.W)
        assert back.structure == tm.structure
        assert back.family == tm.family
        assert np.array_equal(back.mset.indices, tm.mset.indices)

    def test_sequence_roundtrip(self, tmp_path):
        rng = np.random.default_rng(18)
        stages = tuple(random_monotone_kr_map(rng, 2, 2) for _ in range(3))
        seq = SequentialMap(stages, (1.0, 0.5, 0.25),
                            ({"admm_iters": 10}, {"admm_iters": 12}, {"admm_iters": 9}))
        path = tmp_path / "seq.json"
        save_map(seq, path)
        back = load_map(path)
        assert isinstance(back, SequentialMap)
        assert back.thetas == (1.0, 0.5, 0.25)
        assert back.stage_info[1] == {"admm_iters": 12}
        for a, b in zip(back.stages, seq.stages):
            assert np.array_equal(a.W, b.W)

    def test_rejects_structural_zero_violation(self):
        tm = identity_map("kr", 2, 2)
        doc = serialize(tm)
        doc["W"][0][-1] = 0.5  # row 1 may only use the leading K_1 terms
        with pytest.raises(SchemaError, match="structural-zero"):
            deserialize(doc)

    def test_version_mismatch(self):
        doc = serialize(identity_map("kr", 2, 2))
        doc["version"] = 99
        with pytest.raises(UnsupportedVersion):
            deserialize(doc)

    def test_schema_errors_carry_paths(self):
        doc = serialize(identity_map("kr", 2, 2))
        del doc["W"]
        with pytest.raises(SchemaError, match=r"\$"):
            deserialize(doc)
        seq_doc = serialize(SequentialMap((identity_map("kr", 2, 2),)))
        seq_doc["stages"][0]["W"] = [[0.0]]
        with pytest.raises(SchemaError, match=r"stages\[0\]"):
            deserialize(seq_doc)

    def test_json_is_plain_text(self, tmp_path):
        path = tmp_path / "map.json"
        save_map(identity_map("krsv", 2, 2), path)
        doc = json.loads(path.read_text())
        assert doc["version"] == 1
        assert doc["structure"] == "krsv"
