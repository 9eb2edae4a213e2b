import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))
from haze import (
    A_RANGE,
    PRESETS,
    HazeParameterError,
    depth_map,
    generate_pairs,
    make_clean_scene,
    synthesize_haze,
    transmission,
)


@pytest.fixture
def rng():
    return np.random.default_rng(3)


@pytest.fixture
def clean(rng):
    return make_clean_scene(16, 20, rng)


class TestDepthMaps:

    def test_constant(self):
        np.testing.assert_array_equal(depth_map("constant", 3, 4, value=0.4), np.full((3, 4), 0.4))

    def test_constant_out_of_range(self):
        with pytest.raises(HazeParameterError):
            depth_map("constant", 3, 4, value=1.5)

    @pytest.mark.parametrize("kind", ["ramp", "radial"])
    def test_normalized(self, kind, rng):
        depth = depth_map(kind, 16, 20, rng)
        assert depth.shape == (16, 20)
        assert depth.min() >= 0.0 and depth.max() <= 1.0

    def test_ramp_is_monotone_along_width(self, rng):
        depth = depth_map("ramp", 4, 8, rng)
        steps = np.diff(depth[0])
        assert np.all(steps > 0) or np.all(steps < 0)
        np.testing.assert_array_equal(depth[0], depth[3])

    def test_unknown_kind(self, rng):
        with pytest.raises(HazeParameterError):
            depth_map("spiral", 4, 4, rng)


class TestSynthesize:

    def test_zero_beta_is_clean(self, clean):
        pair = synthesize_haze(clean, 0.0, 0.9)
        np.testing.assert_allclose(pair.hazy, pair.clean, atol=1e-7)

    def test_scattering_model(self, clean):
        pair = synthesize_haze(clean, 1.5, 0.8, "constant", depth_value=0.5)
        t = np.exp(-0.75)
        np.testing.assert_allclose(pair.hazy, clean * t + 0.8 * (1 - t), atol=1e-6)

    def test_thick_haze_approaches_airlight(self, clean):
        pair = synthesize_haze(clean, 50.0, 0.85)
        np.testing.assert_allclose(pair.hazy, 0.85, atol=1e-6)

    def test_more_haze_means_lower_contrast(self, clean):
        thin = synthesize_haze(clean, 0.5, 0.9).hazy
        thick = synthesize_haze(clean, 3.0, 0.9).hazy
        assert thick.std() < thin.std()

    def test_difference_grows_with_beta(self, clean):
        pairs = [synthesize_haze(clean, beta, 0.9, "ramp", np.random.default_rng(0))
                 for beta in (0.0, 0.25, 0.5, 1.0, 2.0, 4.0)]
        gaps = [np.abs(p.hazy - p.clean).mean() for p in pairs]
        assert gaps[0] == 0.0
        assert all(a <= b for a, b in zip(gaps, gaps[1:]))

    def test_provenance(self, clean, rng):
        pair = synthesize_haze(clean, 1.2, 0.75, "radial", rng, pair_id="p1", preset="moderate")
        assert pair.id == "p1"
        assert (pair.provenance.kind, pair.provenance.preset, pair.provenance.depth_kind) == \
            ("synthetic", "moderate", "radial")
        assert pair.provenance.beta == pytest.approx(1.2)

    @pytest.mark.parametrize("beta, A", [(-0.1, 0.8), (1.0, 0.5), (1.0, 1.2), (float("nan"), 0.8)])
    def test_invalid_parameters(self, clean, beta, A):
        with pytest.raises(HazeParameterError):
            synthesize_haze(clean, beta, A)

    def test_transmission(self):
        assert transmission(np.zeros(2), 3.0).tolist() == [1.0, 1.0]


class TestGeneratePairs:

    def test_count_ids_and_shapes(self):
        pairs = generate_pairs(6, (12, 16), seed=4)
        assert [p.id for p in pairs] == [f"syn{i:04d}" for i in range(6)]
        assert all(p.hazy.shape == (3, 12, 16) for p in pairs)
        assert all(p.hazy.dtype == np.float32 for p in pairs)

    def test_presets_cycle_and_stay_in_range(self):
        pairs = generate_pairs(9, (8, 8), seed=0)
        assert [p.provenance.preset for p in pairs[:3]] == ["thin", "moderate", "thick"]
        for p in pairs:
            low, high = PRESETS[p.provenance.preset]
            assert low <= p.provenance.beta <= high
            assert A_RANGE[0] <= p.provenance.A <= A_RANGE[1]

    def test_seeded(self):
        a, b = generate_pairs(3, (8, 8), seed=5), generate_pairs(3, (8, 8), seed=5)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.hazy, y.hazy)
            np.testing.assert_array_equal(x.clean, y.clean)

    def test_values_in_unit_range(self):
        for p in generate_pairs(3, (16, 16), seed=2):
            assert 0.0 <= p.hazy.min() and p.hazy.max() <= 1.0
            assert 0.0 <= p.clean.min() and p.clean.max() <= 1.0
