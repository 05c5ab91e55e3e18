import threading

import numpy as np
import pytest
from hypothesis import given, strategies as st

from crowdmotion.autodiff import Parameter, Tensor, square
from crowdmotion.errors import ConfigError, ShapeError
from crowdmotion.optim import grad_check
from crowdmotion.transforms import (
    DctPlan,
    SpeMatrix,
    dct_forward,
    dct_forward_stacked,
    dct_inverse,
    spatial_pe,
    temporal_pe,
)


def dct2_direct_longdouble(x: np.ndarray) -> np.ndarray:
    """Double-loop orthonormal DCT-II evaluated in extended precision."""
    x = x.astype(np.longdouble)
    n = len(x)
    out = np.zeros(n, dtype=np.longdouble)
    for j in range(n):
        acc = np.longdouble(0)
        for i in range(n):
            acc += x[i] * np.cos(np.pi * (2 * i + 1) * j / (2 * n), dtype=np.longdouble)
        scale = np.sqrt(np.longdouble(2) / n) * (np.sqrt(np.longdouble(0.5)) if j == 0 else 1)
        out[j] = acc * scale
    return out


class TestDct:
    def test_constant_sequence_is_dc_only(self):
        coeffs = dct_forward(np.full((4, 1), 5.0))
        assert abs(coeffs[0, 0] - 10.0) < 1e-12  # 5 * sqrt(4)
        assert np.all(np.abs(coeffs[1:]) < 1e-10)

    def test_length_one_is_identity(self):
        x = np.array([[3.25]])
        assert np.array_equal(dct_forward(x), x)

    def test_direct_summation_oracle(self):
        x = np.array([1.0, 2.0, 3.0, 4.0])
        got = dct_forward(x.reshape(-1, 1))[:, 0]
        oracle = dct2_direct_longdouble(x).astype(np.float64)
        assert np.allclose(got, oracle, atol=1e-12)
        # frozen values from a 50-digit direct summation
        frozen = [5.0, -2.230442497387663284, 0.0, -0.15851266778110721267]
        assert np.allclose(got, frozen, atol=1e-12)

    @pytest.mark.parametrize("length", list(range(1, 65)))
    def test_round_trip_and_parseval(self, length, rng):
        x = rng.standard_normal((length, 3))
        coeffs = dct_forward(x)
        assert np.allclose(dct_inverse(coeffs), x, atol=1e-9)
        assert np.allclose(
            np.linalg.norm(coeffs, axis=0), np.linalg.norm(x, axis=0), atol=1e-9
        )

    @pytest.mark.parametrize("length", [1, 2, 7, 16, 45, 64])
    def test_basis_orthonormal(self, length):
        basis = DctPlan.for_length(length).basis
        assert np.allclose(basis @ basis.T, np.eye(length), atol=1e-10)

    def test_zero_coefficients_give_zero_sequence(self):
        # a lone DC coefficient reconstructs a constant sequence
        coeffs = np.zeros((6, 1))
        assert np.allclose(dct_inverse(coeffs), 0.0)
        coeffs[0, 0] = 1.0
        seq = dct_inverse(coeffs)
        assert np.allclose(seq, 1.0 / np.sqrt(6.0), atol=1e-12)

    def test_stacked_matches_per_slab(self, rng):
        x = rng.standard_normal((3, 5, 2))
        stacked = dct_forward_stacked(x)
        for i in range(3):
            assert np.allclose(stacked[i], dct_forward(x[i]), atol=1e-12)

    def test_tensor_path_differentiable(self, rng):
        p = Parameter(rng.standard_normal((5, 2)), "p")
        report = grad_check(
            lambda: square(dct_inverse(dct_forward(p))).sum(), [p], tol=1e-6
        )
        assert report.passed, str(report)

    def test_plan_cache_concurrent_build(self):
        results = []

        def build():
            results.append(DctPlan.for_length(33))

        threads = [threading.Thread(target=build) for _ in range(8)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert all(r is results[0] for r in results)

    def test_bad_length(self):
        with pytest.raises(ShapeError):
            DctPlan.for_length(0)


class TestTemporalPe:
    def test_position_zero_alternates_zero_one(self):
        table = temporal_pe(3, 8)
        assert np.array_equal(table[0], np.tile([0.0, 1.0], 4))

    def test_bounded(self):
        table = temporal_pe(50, 16)
        assert np.all(np.abs(table) <= 1.0)

    def test_first_channel_is_sin_of_position(self):
        table = temporal_pe(2, 4)
        assert abs(table[1, 0] - 0.84147098480789650665) < 1e-15  # sin(1)

    def test_odd_dim_rejected(self):
        with pytest.raises(ConfigError):
            temporal_pe(4, 7)


class TestSpatialPe:
    def test_identical_pose_scores_one(self, rng):
        pose = rng.standard_normal(9)
        poses = np.stack([np.stack([pose, pose + 1.0]), np.stack([pose - 2.0, pose])])
        spe = spatial_pe(poses, pose)
        assert spe.values[0, 0] == 1.0
        assert spe.values[1, 1] == 1.0

    def test_far_poses_decay_to_zero(self):
        poses = np.full((1, 1, 9), 1e6)
        spe = spatial_pe(poses, np.zeros(9))
        assert spe.values[0, 0] < 1e-300 or spe.values[0, 0] == 0.0

    def test_unit_offset_every_coordinate(self):
        # 15 joints, every coordinate differing by exactly 1: exp(-45/45)
        query = np.zeros(45)
        poses = np.ones((1, 1, 45))
        spe = spatial_pe(poses, query)
        assert abs(spe.values[0, 0] - 0.3678794411714423216) < 1e-15

    def test_values_in_unit_interval(self, rng):
        poses = rng.standard_normal((3, 4, 9)) * 5.0
        spe = spatial_pe(poses, rng.standard_normal(9))
        assert np.all(spe.values > 0.0)
        assert np.all(spe.values <= 1.0)

    @given(st.lists(st.floats(-50, 50), min_size=3, max_size=3))
    def test_translation_invariance(self, shift3):
        rng = np.random.default_rng(7)
        poses = rng.standard_normal((2, 3, 9))
        query = rng.standard_normal(9)
        shift = np.tile(np.asarray(shift3), 3)
        base = spatial_pe(poses, query).values
        moved = spatial_pe(poses + shift, query + shift).values
        assert np.allclose(base, moved, atol=1e-12)

    def test_symmetric_in_pose_arguments(self, rng):
        a = rng.standard_normal(9)
        b = rng.standard_normal(9)
        ab = spatial_pe(a.reshape(1, 1, -1), b).values[0, 0]
        ba = spatial_pe(b.reshape(1, 1, -1), a).values[0, 0]
        assert ab == ba

    def test_dim_mismatch(self):
        with pytest.raises(ShapeError):
            spatial_pe(np.zeros((1, 2, 9)), np.zeros(6))

    def test_keeps_query_copy(self, rng):
        query = rng.standard_normal(9)
        spe = spatial_pe(rng.standard_normal((1, 2, 9)), query)
        assert isinstance(spe, SpeMatrix)
        query[0] = 999.0
        assert spe.queried_pose[0] != 999.0
