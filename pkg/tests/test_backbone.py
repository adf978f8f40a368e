import numpy as np
import pytest
from conftest import TINY_ARCH

from dehazekit import autograd as ag
from dehazekit.attention import init_model
from dehazekit.backbone import (
    ArchConfig,
    backbone_forward,
    init_backbone,
    loss_residual,
    residual_net_forward,
    transmission_net_forward,
)
from dehazekit.errors import ConfigError, DimensionError
from dehazekit.scattering import T_MIN
from dehazekit.verify import randomize

ARCH = ArchConfig()

# frozen regression guard for the default architecture
CENSUS = {"trans.": 453, "res.": 26595, "attn.": 85919}
CENSUS_TOTAL = 112967


@pytest.fixture
def params():
    return init_backbone(ARCH, np.random.default_rng(0))


@pytest.fixture
def batch(rng):
    return rng.uniform(0.05, 0.95, (2, 3, 16, 16))


class TestArchConfig:
    @pytest.mark.parametrize(
        "kwargs",
        [
            {"input_size": 7},
            {"input_size": 6},
            {"trans_channels": 15},
            {"residual_depth": 1},
            {"trans_pool": 6},
        ],
    )
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigError):
            ArchConfig(**kwargs)

    def test_default_depth(self):
        assert ARCH.residual_depth == 13


class TestCensus:
    def test_total(self):
        assert init_model().count() == CENSUS_TOTAL

    @pytest.mark.parametrize("prefix,count", CENSUS.items())
    def test_by_prefix(self, prefix, count):
        assert init_model().count(prefix) == count

    def test_independent_of_seed(self):
        assert init_model(seed=3).count() == init_model(seed=9).count()

    def test_finite_and_unique(self):
        p = init_model()
        assert len(set(p.params)) == len(p.params)
        assert all(np.all(np.isfinite(t.data)) for t in p.params.values())

    def test_residual_layers(self, params):
        convs = [n for n in params if n.startswith("res.conv") and n.endswith(".w")]
        assert len(convs) == 13
        # only the final layer carries a bias (the others feed batch-norm)
        assert [n for n in params if n.startswith("res.conv") and n.endswith(".b")] == ["res.conv12.b"]


class TestTransmission:
    def test_shapes(self, params, batch):
        inter = {}
        t = transmission_net_forward(batch, params, ARCH, inter)
        assert inter["features"].shape == (2, 16, 14, 14)
        assert inter["eltwise"].shape == (2, 4, 14, 14)
        assert inter["pooled"].shape == (2, 4, 14, 14)
        assert t.shape == (2, 1, 16, 16)
        assert T_MIN <= t.data.min() and t.data.max() <= 1.0

    def test_eltwise_is_group_max(self, params, batch):
        inter = {}
        transmission_net_forward(batch, params, ARCH, inter)
        f = inter["features"].data
        np.testing.assert_array_equal(inter["eltwise"].data, f.reshape(2, 4, 4, 14, 14).max(axis=1))

    @pytest.mark.parametrize("bias,expected", [(1.0, 1.0), (0.0, T_MIN), (5.0, 1.0), (-2.0, T_MIN)])
    def test_zero_weight_head(self, params, batch, bias, expected):
        params["trans.out.w"].data[:] = 0.0
        params["trans.out.b"].data[:] = bias
        np.testing.assert_allclose(transmission_net_forward(batch, params, ARCH).data, expected, atol=1e-12)

    def test_init_starts_near_identity(self, params, batch):
        t = transmission_net_forward(batch, params, ARCH).data
        assert t.min() > 0.5 and t.max() <= 1.0

    def test_wrong_channels(self, params):
        with pytest.raises(DimensionError):
            transmission_net_forward(np.zeros((1, 4, 16, 16)), params, ARCH)


class TestResidual:
    def test_shape(self, params, batch):
        assert residual_net_forward(batch, params, ARCH).shape == batch.shape

    def test_zero_weights_give_bias(self, params, batch):
        for name, t in params.params.items():
            if name.startswith("res.conv"):
                t.data[:] = 0.0
        params["res.conv12.b"].data[:] = [0.1, -0.2, 0.3]
        out = residual_net_forward(batch, params, ARCH).data
        np.testing.assert_allclose(out, np.broadcast_to(np.array([0.1, -0.2, 0.3])[None, :, None, None], out.shape))

    def test_signed_output(self, params, batch):
        out = residual_net_forward(batch, params, ARCH).data
        assert out.min() < 0 < out.max()

    def test_grad_check_weight_slice(self, batch):
        p = init_backbone(ARCH, np.random.default_rng(2))
        w = p["res.conv5.w"]
        r = np.random.default_rng(3)
        idx = [tuple(int(r.integers(0, s)) for s in w.shape) for _ in range(6)]
        err = ag.grad_check(lambda _: ag.sum(residual_net_forward(batch, p, ARCH)), w, eps=1e-6, indices=idx)
        assert err <= 1e-4


class TestLoss:
    def test_zero_at_target(self, rng):
        K, J = rng.uniform(size=(2, 3, 16, 16)), rng.uniform(size=(2, 3, 16, 16))
        assert loss_residual(ag.tensor(K - J), K, J).item() == 0.0

    def test_unit_error(self, rng):
        K, J = rng.uniform(size=(1, 3, 16, 16)), rng.uniform(size=(1, 3, 16, 16))
        assert loss_residual(ag.tensor(K - J + 1.0), K, J).item() == pytest.approx(384.0, abs=1e-9)

    @pytest.mark.parametrize("n", [1, 2, 5])
    def test_gradient(self, rng, n):
        K, J = rng.uniform(size=(n, 3, 4, 4)), rng.uniform(size=(n, 3, 4, 4))
        R = ag.tensor(rng.normal(size=(n, 3, 4, 4)), requires_grad=True)
        ag.backward(loss_residual(R, K, J))
        np.testing.assert_allclose(R.grad, (R.data - (K - J)) / n, atol=1e-14)
        assert ag.grad_check(lambda r: loss_residual(r, K, J), R) <= 1e-5

    def test_nonnegative(self, rng):
        for _ in range(10):
            K, J, R = (rng.normal(size=(2, 3, 4, 4)) for _ in range(3))
            assert loss_residual(ag.tensor(R), K, J).item() >= 0.0

    def test_shape_mismatch(self, rng):
        with pytest.raises(DimensionError):
            loss_residual(ag.tensor(np.zeros((1, 3, 4, 4))), np.zeros((1, 3, 4, 5)), np.zeros((1, 3, 4, 5)))


class TestBackboneForward:
    def test_shapes(self, params, batch):
        t, K, R = backbone_forward(batch, params, ARCH)
        assert t.shape == (2, 1, 16, 16)
        assert K.shape == R.shape == (2, 3, 16, 16)
        assert np.all(np.isfinite(K.data))
        assert np.all(K.data <= batch / T_MIN + 1e-12)

    def test_clear_limit(self, params, batch):
        params["trans.out.w"].data[:] = 0.0
        params["trans.out.b"].data[:] = 1.0
        _, K, _ = backbone_forward(batch, params, ARCH)
        np.testing.assert_allclose(K.data, batch, atol=1e-15)

    def test_gradient_reaches_transmission_branch(self, params, batch, rng):
        J = rng.uniform(size=batch.shape)
        _, K, R = backbone_forward(batch, params, ARCH)
        ag.backward(loss_residual(R, K, J))
        assert np.abs(params["trans.conv1.w"].grad).sum() > 0
        assert np.abs(params["trans.out.b"].grad).sum() > 0

    def test_end_to_end_grad_check(self):
        rng = np.random.default_rng(0)
        p = randomize(init_backbone(TINY_ARCH, rng), rng, 0.1)
        p["trans.out.b"].data[:] = 0.6
        I = rng.uniform(0.1, 0.9, (2, 3, 8, 8))
        J = rng.uniform(size=(2, 3, 8, 8))

        def loss(_):
            _, K, R = backbone_forward(I, p, TINY_ARCH)
            return loss_residual(R, K, J)

        for name, t in p.params.items():
            idx = [tuple(int(rng.integers(0, s)) for s in t.shape) for _ in range(3)]
            assert ag.grad_check(loss, t, eps=1e-6, indices=idx) <= 1e-4, name

    def test_sgd_decreases_loss(self, params, rng):
        I = rng.uniform(0.1, 0.9, (1, 3, 16, 16))
        J = rng.uniform(size=(1, 3, 16, 16))
        losses = []
        for _ in range(11):
            params.zero_grad()
            _, K, R = backbone_forward(I, params, ARCH)
            loss = loss_residual(R, K, J)
            losses.append(loss.item())
            ag.backward(loss)
            for t in params.params.values():
                t.data = t.data - 1e-4 * t.grad
        assert all(b < a for a, b in zip(losses, losses[1:]))
