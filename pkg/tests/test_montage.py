"""Montage geometry, spatial block masking, and position markers."""

import numpy as np
import pytest
import torch

from eegjepa.errors import (
    ConfigError,
    DataError,
    GeometryError,
    MaskingError,
    ShapeError,
)
from eegjepa.montage import (
    MaskSpec,
    Montage,
    apply_position_markers,
    bundled_montage,
    distance_matrix,
    head_size,
    init_spatial_table,
    load_montage,
    marker_matrix,
    sample_mask,
    save_montage,
    spherical_cap_montage,
    temporal_encoding,
    token_index,
    token_position,
)


def brute_force_masked(positions, center, fraction):
    """Independent mask oracle: recompute the masked set from raw distances."""
    positions = np.asarray(positions, dtype=np.float64)
    pairwise = np.linalg.norm(positions[:, None] - positions[None], axis=-1)
    radius = fraction * pairwise.max() / 2.0
    dist = np.linalg.norm(positions - positions[center], axis=1)
    return set(np.flatnonzero(dist <= radius).tolist())


def jittered_cap(n, seed):
    base = spherical_cap_montage(n)
    rng = np.random.default_rng(seed)
    pos = base.positions + rng.normal(scale=0.004, size=base.positions.shape)
    return Montage(names=base.names, positions=pos)


class TestHeadSize:
    def test_two_points(self):
        m = Montage(("a", "b"), np.array([[0.0, 0.0, 0.0], [0.3, 0.4, 0.0]]))
        assert head_size(m) == pytest.approx(0.5)

    def test_max_over_pairs(self):
        m = Montage(
            ("a", "b", "c"),
            np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 2.0, 0.0]]),
        )
        assert head_size(m) == pytest.approx(np.sqrt(5.0))

    def test_single_electrode_rejected(self):
        m = Montage(("a",), np.zeros((1, 3)))
        with pytest.raises(GeometryError):
            head_size(m)

    def test_coincident_rejected(self):
        m = Montage(("a", "b"), np.zeros((2, 3)))
        with pytest.raises(GeometryError):
            head_size(m)


class TestMontageType:
    def test_duplicate_names_rejected(self):
        with pytest.raises(GeometryError):
            Montage(("a", "a"), np.zeros((2, 3)))

    def test_nonfinite_rejected(self):
        with pytest.raises(GeometryError):
            Montage(("a", "b"), np.array([[0.0, 0.0, 0.0], [np.nan, 0.0, 0.0]]))

    def test_shape_mismatch_rejected(self):
        with pytest.raises(GeometryError):
            Montage(("a", "b"), np.zeros((3, 3)))


class TestSampleMask:
    @pytest.mark.parametrize("fraction", [0.4, 0.6, 0.8])
    @pytest.mark.parametrize("n", [5, 16, 62])
    def test_matches_brute_force_for_every_center(self, fraction, n):
        m = bundled_montage() if n == 62 else jittered_cap(n, seed=n)
        t = 3
        rng = np.random.default_rng(0)
        for center in range(m.n_channels):
            want = brute_force_masked(m.positions, center, fraction)
            if len(want) >= m.n_channels:
                with pytest.raises(MaskingError):
                    sample_mask(m, fraction, t, rng, center_channel=center)
                continue
            spec = sample_mask(m, fraction, t, rng, center_channel=center)
            assert set(spec.masked_channels) == want
            assert spec.center_channel == center
            # Channel-major token blocks: channel c covers tokens [c*t, (c+1)*t).
            grid = spec.token_mask.reshape(m.n_channels, t)
            for c in range(m.n_channels):
                assert grid[c].all() == (c in want)

    def test_boundary_is_inclusive(self):
        # b sits exactly at radius = 0.5 * head_size / 2 from a.
        m = Montage(
            ("a", "b", "c"),
            np.array([[0.0, 0.0, 0.0], [0.25, 0.0, 0.0], [1.0, 0.0, 0.0]]),
        )
        spec = sample_mask(m, 0.5, 1, np.random.default_rng(0), center_channel=0)
        assert set(spec.masked_channels) == {0, 1}

    def test_sampled_masks_are_valid_strict_subsets(self):
        m = jittered_cap(10, seed=7)
        for seed in range(30):
            rng = np.random.default_rng(seed)
            spec = sample_mask(m, 0.6, 4, rng)
            assert 0 < len(spec.masked_channels) < m.n_channels
            assert spec.center_channel in spec.masked_channels
            assert set(spec.masked_channels) == brute_force_masked(
                m.positions, spec.center_channel, 0.6
            )
            assert spec.token_mask.sum() == len(spec.masked_channels) * 4

    def test_covering_centers_are_resampled(self):
        # Hub-and-spokes: the hub covers everything at this fraction, the
        # spokes do not, so the hub must never be returned.
        m = Montage(
            ("hub", "s1", "s2", "s3"),
            np.array(
                [
                    [0.0, 0.0, 0.0],
                    [1.0, 0.0, 0.0],
                    [-0.5, 0.866, 0.0],
                    [-0.5, -0.866, 0.0],
                ]
            ),
        )
        assert brute_force_masked(m.positions, 0, 1.2) == {0, 1, 2, 3}
        for seed in range(40):
            spec = sample_mask(m, 1.2, 2, np.random.default_rng(seed))
            assert spec.center_channel != 0
            assert 0 < len(spec.masked_channels) < 4
        with pytest.raises(MaskingError):
            sample_mask(m, 1.2, 2, np.random.default_rng(0), center_channel=0)

    def test_no_valid_center_raises_naming_fraction(self):
        m = Montage(
            ("a", "b", "c"),
            np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.5, 0.866, 0.0]]),
        )
        with pytest.raises(MaskingError, match="2.0"):
            sample_mask(m, 2.0, 1, np.random.default_rng(3))

    def test_bad_parameters(self):
        m = jittered_cap(5, seed=1)
        rng = np.random.default_rng(0)
        with pytest.raises(ConfigError):
            sample_mask(m, 0.0, 1, rng)
        with pytest.raises(ConfigError):
            sample_mask(m, 0.5, 0, rng)
        with pytest.raises(ConfigError):
            sample_mask(m, 0.5, 1, rng, center_channel=9)

    def test_determinism(self):
        m = jittered_cap(12, seed=2)
        a = sample_mask(m, 0.6, 3, np.random.default_rng(11))
        b = sample_mask(m, 0.6, 3, np.random.default_rng(11))
        assert a.center_channel == b.center_channel
        assert a.masked_channels == b.masked_channels


class TestMaskSpecInvariants:
    def _valid_kwargs(self):
        token_mask = np.zeros(6, dtype=bool)
        token_mask[0:4] = True  # channels 0 and 1 of 3, t = 2
        return dict(
            center_channel=0,
            diameter_fraction=0.6,
            masked_channels=(0, 1),
            token_mask=token_mask,
            n_channels=3,
            windows_per_channel=2,
        )

    def test_valid(self):
        MaskSpec(**self._valid_kwargs())

    def test_center_must_be_masked(self):
        kwargs = self._valid_kwargs()
        kwargs["center_channel"] = 2
        with pytest.raises(MaskingError):
            MaskSpec(**kwargs)

    def test_full_coverage_rejected(self):
        kwargs = self._valid_kwargs()
        kwargs["masked_channels"] = (0, 1, 2)
        kwargs["token_mask"] = np.ones(6, dtype=bool)
        with pytest.raises(MaskingError):
            MaskSpec(**kwargs)

    def test_partial_channel_block_rejected(self):
        kwargs = self._valid_kwargs()
        bad = kwargs["token_mask"].copy()
        bad[1] = False  # half of channel 0's block
        kwargs["token_mask"] = bad
        with pytest.raises(MaskingError):
            MaskSpec(**kwargs)

    def test_wrong_length_rejected(self):
        kwargs = self._valid_kwargs()
        kwargs["token_mask"] = np.zeros(5, dtype=bool)
        with pytest.raises(ShapeError):
            MaskSpec(**kwargs)


class TestTokenLayout:
    def test_round_trip(self):
        for t in (1, 4, 16):
            for c in range(5):
                for w in range(t):
                    i = token_index(c, w, t)
                    assert token_position(i, t) == (c, w)

    def test_channel_major(self):
        assert token_index(0, 0, 4) == 0
        assert token_index(0, 3, 4) == 3
        assert token_index(1, 0, 4) == 4
        assert token_index(2, 1, 4) == 9


class TestTemporalEncoding:
    def test_frozen_values_window_one(self):
        # Direct evaluation of sin/cos(pos / 10000**(2i/dims)) at pos=1, dims=34.
        enc = temporal_encoding(np.array([1]), 34)
        np.testing.assert_allclose(enc[0, 0], 0.8414709848078965, rtol=1e-12)
        np.testing.assert_allclose(enc[0, 1], 0.5403023058681398, rtol=1e-12)
        np.testing.assert_allclose(enc[0, 2], 0.5494527615358913, rtol=1e-12)
        np.testing.assert_allclose(enc[0, 3], 0.8355247829002937, rtol=1e-12)
        np.testing.assert_allclose(enc[0, 32], 0.00017190721933915446, rtol=1e-12)
        np.testing.assert_allclose(enc[0, 33], 0.9999999852239538, rtol=1e-12)

    def test_window_zero(self):
        enc = temporal_encoding(np.array([0]), 34)
        np.testing.assert_allclose(enc[0, 0::2], 0.0, atol=0)
        np.testing.assert_allclose(enc[0, 1::2], 1.0, atol=0)

    def test_adjacent_pairs_lie_on_unit_circle(self):
        enc = temporal_encoding(np.arange(20), 16)
        np.testing.assert_allclose(
            enc[:, 0::2] ** 2 + enc[:, 1::2] ** 2, 1.0, rtol=1e-12
        )

    def test_distinct_positions_distinct_rows(self):
        enc = temporal_encoding(np.arange(64), 34)
        for i in range(64):
            for j in range(i + 1, 64):
                assert np.abs(enc[i] - enc[j]).max() > 1e-6

    def test_odd_dims_rejected(self):
        with pytest.raises(ConfigError):
            temporal_encoding(np.arange(3), 33)


class TestSpatialTable:
    def test_blocks_are_per_axis_encodings(self):
        m = jittered_cap(6, seed=4)
        table = init_spatial_table(m, 30)
        assert table.shape == (6, 30)
        for axis in range(3):
            np.testing.assert_allclose(
                table[:, axis * 10 : (axis + 1) * 10],
                temporal_encoding(m.positions[:, axis], 10),
                rtol=1e-12,
            )

    def test_frozen_value(self):
        m = Montage(("a", "b"), np.array([[0.095, 0.0, 0.0], [0.0, 0.0, 0.095]]))
        table = init_spatial_table(m, 30)
        # x = 0.095 encoded with 10 dims per axis.
        np.testing.assert_allclose(table[0, 0], 0.0948571686345573, rtol=1e-12)
        np.testing.assert_allclose(table[0, 1], 0.9954908927552453, rtol=1e-12)
        np.testing.assert_allclose(table[0, 8], 5.994094768972453e-05, rtol=1e-12)
        np.testing.assert_allclose(table[0, 9], 0.9999999982035414, rtol=1e-12)

    def test_indivisible_dims_rejected(self):
        m = jittered_cap(4, seed=0)
        with pytest.raises(ConfigError):
            init_spatial_table(m, 32)


class TestPositionMarkers:
    def test_zero_tokens_zero_table_exposes_temporal_encoding(self):
        C, t, d, spatial = 3, 5, 64, 30
        tokens = torch.zeros(C, t, d, dtype=torch.float64)
        table = torch.zeros(C, spatial, dtype=torch.float64)
        out = apply_position_markers(tokens, table)
        assert out.shape == (C * t, d)
        expect = temporal_encoding(np.arange(t), d - spatial)
        for c in range(C):
            np.testing.assert_allclose(
                out[c * t : (c + 1) * t, : d - spatial].numpy(), expect, rtol=1e-12
            )
            np.testing.assert_allclose(out[c * t : (c + 1) * t, d - spatial :], 0.0)

    def test_flatten_is_channel_major_and_additive(self):
        torch.manual_seed(0)
        C, t, d, spatial = 4, 3, 16, 6
        tokens = torch.randn(C, t, d, dtype=torch.float64)
        table = torch.randn(C, spatial, dtype=torch.float64)
        out = apply_position_markers(tokens, table)
        markers = marker_matrix(table, t, d)
        for c in range(C):
            for w in range(t):
                np.testing.assert_allclose(
                    out[c * t + w].numpy(), (tokens[c, w] + markers[c, w]).numpy()
                )

    def test_markers_distinct_across_positions(self):
        m = jittered_cap(5, seed=9)
        table = torch.as_tensor(init_spatial_table(m, 30))
        markers = marker_matrix(table, 4, 64).reshape(-1, 64)
        for i in range(markers.shape[0]):
            for j in range(i + 1, markers.shape[0]):
                assert (markers[i] - markers[j]).abs().max() > 1e-8

    def test_gradients_flow_through_tokens_and_table(self):
        tokens = torch.randn(3, 2, 16, requires_grad=True)
        table = torch.randn(3, 6, requires_grad=True)
        out = apply_position_markers(tokens, table)
        out.sum().backward()
        np.testing.assert_allclose(tokens.grad.numpy(), 1.0)
        np.testing.assert_allclose(table.grad.numpy(), 2.0)  # t = 2 windows each

    def test_batched_input(self):
        tokens = torch.randn(2, 3, 4, 16)
        table = torch.zeros(3, 6)
        out = apply_position_markers(tokens, table)
        assert out.shape == (2, 12, 16)

    def test_channel_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            apply_position_markers(torch.zeros(3, 2, 16), torch.zeros(4, 6))


class TestMontageIO:
    def test_round_trip(self, tmp_path):
        m = jittered_cap(7, seed=3)
        path = tmp_path / "m.txt"
        save_montage(m, path)
        loaded = load_montage(path)
        assert loaded.names == m.names
        np.testing.assert_allclose(loaded.positions, m.positions, atol=1e-6)

    def test_malformed_line(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("a 0 0\n")
        with pytest.raises(DataError):
            load_montage(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError):
            load_montage(tmp_path / "absent.txt")

    def test_bundled_62(self):
        m = bundled_montage()
        assert m.n_channels == 62
        assert len(set(m.names)) == 62
        assert head_size(m) == pytest.approx(0.19, abs=0.01)
        # Pairs named <site>1/<site>2 should be left/right mirrors (x sign).
        by_name = dict(zip(m.names, m.positions))
        np.testing.assert_allclose(by_name["C3"][0], -by_name["C4"][0], atol=1e-6)
        np.testing.assert_allclose(by_name["O1"][0], -by_name["O2"][0], atol=1e-6)


class TestSphericalCap:
    def test_deterministic_upper_hemisphere(self):
        a = spherical_cap_montage(16)
        b = spherical_cap_montage(16)
        np.testing.assert_array_equal(a.positions, b.positions)
        assert (a.positions[:, 2] >= 0).all()
        assert head_size(a) > 0
        np.testing.assert_allclose(np.linalg.norm(a.positions, axis=1), 0.095)
