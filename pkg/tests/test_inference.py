import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dehazekit.attention import EncoderConfig, dhformer_forward, init_model
from dehazekit.backbone import ArchConfig
from dehazekit.errors import ConfigError, DimensionError
from dehazekit.inference import blend_weights, infer_tiled, ramp, tile_starts
from dehazekit.verify import randomize

ARCH = ArchConfig()
ENC = EncoderConfig()


@pytest.fixture(scope="module")
def params():
    return randomize(init_model(ARCH, ENC, 0), np.random.default_rng(3), 0.05).eval()


class TestTiles:
    @pytest.mark.parametrize(
        "length,expected",
        [(16, [0]), (17, [0, 1]), (28, [0, 12]), (32, [0, 12, 16]), (40, [0, 12, 24])],
    )
    def test_starts(self, length, expected):
        assert tile_starts(length, 16, 4) == expected

    def test_too_small(self):
        with pytest.raises(DimensionError):
            tile_starts(15, 16, 4)

    @pytest.mark.parametrize("overlap", [-1, 16])
    def test_bad_overlap(self, overlap):
        with pytest.raises(ConfigError):
            tile_starts(32, 16, overlap)

    def test_ramp(self):
        np.testing.assert_allclose(ramp(16, 4)[:6], [0.2, 0.4, 0.6, 0.8, 1.0, 1.0])
        assert np.all(ramp(16, 4) > 0)
        np.testing.assert_array_equal(ramp(16, 4), ramp(16, 4)[::-1])

    @settings(max_examples=40, deadline=None)
    @given(st.integers(16, 70), st.integers(16, 70), st.integers(0, 15))
    def test_weights_sum_to_one(self, h, w, overlap):
        tiles, acc = blend_weights(h, w, 16, overlap)
        total = np.zeros((h, w))
        for top, left, wt in tiles:
            total[top : top + 16, left : left + 16] += wt
        assert np.max(np.abs(total - 1.0)) <= 1e-9
        assert np.all(acc > 0)


class TestInferTiled:
    def test_single_tile_is_direct(self, params, rng):
        I = rng.uniform(size=(1, 3, 16, 16))
        J, _ = dhformer_forward(I, params, ARCH, ENC)
        np.testing.assert_array_equal(infer_tiled(I, params, ARCH, ENC), J.data)

    def test_shape(self, params, rng):
        out = infer_tiled(rng.uniform(size=(1, 3, 21, 37)), params, ARCH, ENC)
        assert out.shape == (1, 3, 21, 37)
        assert 0.0 <= out.min() and out.max() <= 1.0

    def test_constant_input_tiles_agree(self, params):
        I = np.full((1, 3, 28, 40), 0.6)
        tiles, _ = blend_weights(28, 40)
        crops = np.concatenate([I[:, :, t : t + 16, l : l + 16] for t, l, _ in tiles])
        J, _ = dhformer_forward(crops, params, ARCH, ENC)
        assert np.max(np.abs(J.data - J.data[0])) == 0.0
        out = infer_tiled(I, params, ARCH, ENC)
        # every tile predicts the same patch, so the blend reproduces it at the corners
        np.testing.assert_allclose(out[0, :, :4, :4], J.data[0, :, :4, :4], atol=1e-12)

    def test_tiles_are_independent(self, params, rng):
        # eval mode: the top-left result does not depend on the far corner
        I = rng.uniform(size=(1, 3, 16, 40))
        a = infer_tiled(I, params, ARCH, ENC)
        I2 = I.copy()
        I2[..., 28:] = rng.uniform(size=(1, 3, 16, 12))
        b = infer_tiled(I2, params, ARCH, ENC)
        np.testing.assert_array_equal(a[..., :12], b[..., :12])

    def test_restores_training_flag(self, params, rng):
        params.train()
        try:
            infer_tiled(rng.uniform(size=(1, 3, 16, 16)), params, ARCH, ENC)
            assert params.training
        finally:
            params.eval()

    def test_too_small(self, params):
        with pytest.raises(DimensionError):
            infer_tiled(np.zeros((1, 3, 12, 20)), params, ARCH, ENC)

    def test_batch_rejected(self, params):
        with pytest.raises(DimensionError):
            infer_tiled(np.zeros((2, 3, 16, 16)), params, ARCH, ENC)

    def test_tile_must_match_training_size(self, params):
        with pytest.raises(ConfigError):
            infer_tiled(np.zeros((1, 3, 32, 32)), params, ARCH, ENC, tile=8)
