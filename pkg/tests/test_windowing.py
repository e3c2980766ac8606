"""Window geometry: padding, partition/shift round trips, pooling identities."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sparsewin.tensor import Tensor
from sparsewin.windowing import (
    WindowConfig,
    aggregate,
    crop,
    cyclic_shift,
    cyclic_unshift,
    inverse_aggregate,
    make_grid,
    pad_to_windows,
    window_partition,
    window_reverse,
)


def random_map(rng, h, w, c=3):
    return Tensor(rng.standard_normal((h, w, c)))


class TestPadding:
    def test_already_aligned(self):
        z = random_map(np.random.default_rng(0), 7, 7)
        zp, grid = pad_to_windows(z, WindowConfig(7))
        assert (grid.pad_b, grid.pad_r) == (0, 0)
        np.testing.assert_array_equal(zp.data, z.data)

    def test_ceiling_rule(self):
        z = random_map(np.random.default_rng(1), 8, 8)
        zp, grid = pad_to_windows(z, WindowConfig(7))
        assert zp.shape[:2] == (14, 14)
        assert (grid.pad_b, grid.pad_r) == (6, 6)
        np.testing.assert_array_equal(zp.data[:8, :8], z.data)
        assert np.all(zp.data[8:] == 0) and np.all(zp.data[:, 8:] == 0)

    def test_ceiling_arithmetic(self):
        _, grid = pad_to_windows(random_map(np.random.default_rng(2), 13, 9),
                                 WindowConfig(4))
        assert (grid.h_pad, grid.w_pad) == (16, 12)
        assert (grid.windows_y, grid.windows_x) == (4, 3)

    def test_crop_restores_original(self):
        z = random_map(np.random.default_rng(3), 10, 5)
        zp, grid = pad_to_windows(z, WindowConfig(4))
        np.testing.assert_array_equal(crop(zp, 10, 5).data, z.data)


class TestPartition:
    def test_single_window(self):
        z = random_map(np.random.default_rng(4), 2, 2)
        zp, grid = pad_to_windows(z, WindowConfig(2))
        wins = window_partition(zp, grid)
        assert wins.shape == (1, 2, 2, 3)
        np.testing.assert_array_equal(wins.data[0], z.data)

    def test_row_major_window_order(self):
        z = random_map(np.random.default_rng(5), 4, 2)
        zp, grid = pad_to_windows(z, WindowConfig(2))
        wins = window_partition(zp, grid)
        assert wins.shape[0] == 2
        np.testing.assert_array_equal(wins.data[0], z.data[:2])
        np.testing.assert_array_equal(wins.data[1], z.data[2:])

    def test_round_trip_bitwise(self):
        z = random_map(np.random.default_rng(6), 8, 8, 5)
        zp, grid = pad_to_windows(z, WindowConfig(4))
        wins = window_partition(zp, grid)
        assert wins.shape[0] == 4
        back = window_reverse(wins, grid)
        assert back.data.tobytes() == zp.data.tobytes()

    def test_unpadded_input_rejected(self):
        z = random_map(np.random.default_rng(7), 5, 5)
        grid = make_grid(5, 5, 4)
        with pytest.raises(ValueError, match="padded"):
            window_partition(z, grid)

    @given(h=st.integers(1, 12), w=st.integers(1, 12), m=st.integers(1, 5),
           seed=st.integers(0, 2**31))
    @settings(max_examples=40, deadline=None)
    def test_partition_reverse_property(self, h, w, m, seed):
        z = random_map(np.random.default_rng(seed), h, w, 2)
        zp, grid = pad_to_windows(z, WindowConfig(m))
        back = window_reverse(window_partition(zp, grid), grid)
        assert back.data.tobytes() == zp.data.tobytes()


class TestCyclicShift:
    def test_zero_shift_is_identity(self):
        z = random_map(np.random.default_rng(8), 4, 4)
        assert cyclic_shift(z, 0) is z

    def test_full_period_on_2x2(self):
        z = Tensor(np.array([[[1.0], [2.0]], [[3.0], [4.0]]]))
        out = cyclic_shift(z, 1)
        np.testing.assert_array_equal(out.data[..., 0], [[4.0, 3.0], [2.0, 1.0]])

    def test_shift_unshift_round_trip(self):
        z = random_map(np.random.default_rng(9), 6, 9)
        for s in (1, 2, 3):
            back = cyclic_unshift(cyclic_shift(z, s), s)
            assert back.data.tobytes() == z.data.tobytes()


class TestAggregate:
    def test_uniform_mean(self):
        z = Tensor(np.array([[[1.0], [2.0]], [[3.0], [4.0]]]))
        cfg = WindowConfig(2)
        zp, grid = pad_to_windows(z, cfg)
        out = aggregate(zp, cfg, grid)
        np.testing.assert_allclose(out.data, [[[2.5]]])

    def test_constant_map(self):
        cfg = WindowConfig(3)
        z = Tensor(np.full((6, 9, 2), 1.25))
        zp, grid = pad_to_windows(z, cfg)
        np.testing.assert_allclose(aggregate(zp, cfg, grid).data, 1.25)

    def test_degenerate_weights_pick_top_left(self):
        alpha = np.zeros((2, 2))
        alpha[0, 0] = 1.0
        cfg = WindowConfig(2, alpha=alpha)
        z = random_map(np.random.default_rng(10), 4, 4)
        zp, grid = pad_to_windows(z, cfg)
        out = aggregate(zp, cfg, grid)
        np.testing.assert_allclose(out.data[0, 0], z.data[0, 0])
        np.testing.assert_allclose(out.data[1, 1], z.data[2, 2])

    def test_zero_weight_sum_rejected(self):
        with pytest.raises(ValueError, match="positive"):
            WindowConfig(2, alpha=np.zeros((2, 2)))

    def test_permutation_invariance_within_window(self):
        rng = np.random.default_rng(11)
        cfg = WindowConfig(3)
        z = rng.standard_normal((3, 3, 4))
        zp, grid = pad_to_windows(Tensor(z), cfg)
        base = aggregate(zp, cfg, grid).data
        flat = z.reshape(9, 4)[rng.permutation(9)].reshape(3, 3, 4)
        shuffled = aggregate(Tensor(flat), cfg, grid).data
        np.testing.assert_allclose(base, shuffled, atol=1e-12)


class TestInverseAggregate:
    def test_broadcast(self):
        cfg = WindowConfig(2)
        grid = make_grid(2, 2, 2)
        out = inverse_aggregate(Tensor(np.full((1, 1, 1), 5.0)), cfg, grid)
        np.testing.assert_array_equal(out.data, np.full((2, 2, 1), 5.0))

    def test_projection_identity_on_aggregated_maps(self):
        rng = np.random.default_rng(12)
        cfg = WindowConfig(3)
        grid = make_grid(9, 6, 3)
        zbar = Tensor(rng.standard_normal((3, 2, 4)))
        round_trip = aggregate(inverse_aggregate(zbar, cfg, grid), cfg, grid)
        np.testing.assert_allclose(round_trip.data, zbar.data, atol=1e-12)

    def test_reconstruction_is_window_mean_broadcast(self):
        rng = np.random.default_rng(13)
        cfg = WindowConfig(4)
        z = random_map(rng, 8, 8, 2)
        zp, grid = pad_to_windows(z, cfg)
        recon = inverse_aggregate(aggregate(zp, cfg, grid), cfg, grid).data
        for wy in range(2):
            for wx in range(2):
                block = z.data[wy * 4:(wy + 1) * 4, wx * 4:(wx + 1) * 4]
                expected = np.broadcast_to(block.mean(axis=(0, 1)), (4, 4, 2))
                np.testing.assert_allclose(
                    recon[wy * 4:(wy + 1) * 4, wx * 4:(wx + 1) * 4],
                    expected, atol=1e-12)

    def test_projection_idempotence(self):
        rng = np.random.default_rng(14)
        cfg = WindowConfig(5)
        zp, grid = pad_to_windows(random_map(rng, 10, 15, 3), cfg)

        def project(t):
            return inverse_aggregate(aggregate(t, cfg, grid), cfg, grid)

        once = project(zp).data
        twice = project(project(zp)).data
        np.testing.assert_allclose(once, twice, atol=1e-12)
