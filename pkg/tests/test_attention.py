import math

import numpy as np
import pytest
from conftest import TINY_ARCH

from dehazekit import autograd as ag
from dehazekit.attention import (
    EMBED_CHANNELS,
    EncoderConfig,
    channel_attention,
    channel_weights,
    dhformer_forward,
    encode,
    encoder_layer,
    extract_patches,
    fuse,
    global_tokens,
    init_attention,
    init_model,
    parallel_conv_embed,
    patchify,
    spatial_attention,
    spatial_weights,
)
from dehazekit.backbone import ArchConfig, loss_residual
from dehazekit.errors import ConfigError, DimensionError
from dehazekit.nn import ModelParams, init_layernorm, init_linear
from dehazekit.scattering import recompose
from dehazekit.verify import randomize

ARCH = ArchConfig()
ENC = EncoderConfig()


@pytest.fixture
def params():
    return init_model(ARCH, ENC, seed=0)


@pytest.fixture
def random_params():
    return randomize(init_model(ARCH, ENC, seed=0), np.random.default_rng(1), 0.1)


@pytest.fixture
def feat(rng):
    return ag.tensor(rng.normal(size=(2, EMBED_CHANNELS, 16, 16)))


def zero_prefix(params, prefix):
    for name, t in params.params.items():
        if name.startswith(prefix):
            t.data[:] = 0.0


class TestEncoderConfig:
    @pytest.mark.parametrize(
        "kwargs", [{"embed_dim": 10, "heads": 4}, {"n_layers": 0}, {"global_count": 3}, {"global_count": 0}]
    )
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigError):
            EncoderConfig(**kwargs)

    def test_token_count(self):
        assert ENC.num_patches(16) == 16
        with pytest.raises(ConfigError):
            EncoderConfig(patch_size=3).num_patches(16)


class TestEmbed:
    def test_shape(self, params, rng):
        out = parallel_conv_embed(ag.tensor(rng.normal(size=(2, 3, 16, 16))), params)
        assert out.shape == (2, 15, 16, 16)

    def test_zero_convs(self, params, rng):
        zero_prefix(params, "attn.c3")
        zero_prefix(params, "attn.c5")
        R = rng.normal(size=(1, 3, 16, 16))
        out = parallel_conv_embed(ag.tensor(R), params).data
        np.testing.assert_array_equal(out[:, :3], R)
        np.testing.assert_array_equal(out[:, 3:], 0.0)


class TestPatchify:
    def test_raw_patches(self, feat):
        raw = extract_patches(feat.data, 4)
        assert raw.shape == (2, 16, 240)
        # second token is the patch at rows 0..3, cols 4..7
        np.testing.assert_array_equal(raw[0, 1], feat.data[0, :, 0:4, 4:8].ravel())

    def test_projection_matches_raw_patches(self, params, feat):
        tokens = patchify(feat, params, ENC, add_position=False).data
        w = params["attn.patch.w"].data.reshape(ENC.embed_dim, -1)
        expected = extract_patches(feat.data, 4) @ w.T + params["attn.patch.b"].data
        np.testing.assert_allclose(tokens, expected, atol=1e-12)

    def test_single_patch(self, feat):
        enc = EncoderConfig(patch_size=16)
        p = init_attention(ARCH, enc, np.random.default_rng(0))
        assert patchify(feat, p, enc).shape == (2, 1, 64)

    def test_zero_projection(self, params, feat):
        zero_prefix(params, "attn.patch")
        params["attn.pos"].data[:] = 0.0
        np.testing.assert_array_equal(patchify(feat, params, ENC).data, 0.0)

    def test_indivisible(self, params, rng):
        with pytest.raises(ConfigError):
            patchify(ag.tensor(rng.normal(size=(1, 15, 18, 18))), params, ENC)


class TestGlobalTokens:
    def test_constant_map(self, params):
        x = ag.tensor(np.full((1, 15, 16, 16), 0.3))
        g = global_tokens(x, params, 1).data
        patch = np.full((1, 15, 4, 4), 0.3)
        expected = params["attn.patch.w"].data.reshape(64, -1) @ patch.ravel() + params["attn.patch.b"].data
        np.testing.assert_allclose(g[0, 0], expected, atol=1e-12)

    def test_four_cells(self, params, feat):
        g = global_tokens(feat, params, 4).data
        w_sum = params["attn.patch.w"].data.sum(axis=(2, 3))  # D, C
        cells = [(0, 0), (0, 8), (8, 0), (8, 8)]
        for k, (r, c) in enumerate(cells):
            mean = feat.data[:, :, r : r + 8, c : c + 8].mean(axis=(2, 3))
            np.testing.assert_allclose(g[:, k], mean @ w_sum.T + params["attn.patch.b"].data, atol=1e-12)

    def test_zero_projection(self, params, feat):
        zero_prefix(params, "attn.patch")
        np.testing.assert_array_equal(global_tokens(feat, params, 4).data, 0.0)

    def test_bad_count(self, params, feat):
        with pytest.raises(ConfigError):
            global_tokens(feat, params, 9)


def numpy_layer(T, p, heads, kv_extra=None):
    """Independent dense re-implementation of one pre-norm encoder block."""

    def ln(x, name):
        mu = x.mean(-1, keepdims=True)
        var = x.var(-1, keepdims=True)
        return (x - mu) / np.sqrt(var + 1e-5) * p[f"{name}.gamma"] + p[f"{name}.beta"]

    h = ln(T, "ln1")
    src = h if kv_extra is None else np.concatenate([h, ln(kv_extra, "ln1")], axis=0)
    q = h @ p["q.w"] + p["q.b"]
    k = src @ p["k.w"]
    v = src @ p["v.w"] + p["v.b"]
    d = T.shape[-1]
    dh = d // heads
    out = np.zeros_like(T)
    for hd in range(heads):
        sl = slice(hd * dh, (hd + 1) * dh)
        for i in range(T.shape[0]):
            s = np.array([q[i, sl] @ k[j, sl] for j in range(src.shape[0])]) / math.sqrt(dh)
            a = np.exp(s - s.max())
            a /= a.sum()
            out[i, sl] = sum(a[j] * v[j, sl] for j in range(src.shape[0]))
    T = T + out @ p["proj.w"] + p["proj.b"]
    hid = np.maximum(ln(T, "ln2") @ p["fc1.w"] + p["fc1.b"], 0)
    return T + hid @ p["fc2.w"] + p["fc2.b"]


def layer_params(rng, d, hidden):
    p = ModelParams()
    init_layernorm(p, "L.ln1", d)
    init_layernorm(p, "L.ln2", d)
    for proj in ("q", "k", "v", "proj"):
        init_linear(p, rng, f"L.{proj}", d, d, bias=proj != "k")
    init_linear(p, rng, "L.fc1", d, hidden)
    init_linear(p, rng, "L.fc2", hidden, d)
    for t in p.params.values():
        t.data = t.data + rng.normal(0, 0.1, size=t.shape)
    return p


class TestEncoderLayer:
    @pytest.mark.parametrize("heads", [1, 2])
    def test_two_token_oracle(self, rng, heads):
        enc = EncoderConfig(embed_dim=4, heads=heads, mlp_ratio=1.5, global_count=1)
        p = layer_params(rng, 4, enc.hidden_dim)
        T = rng.normal(size=(1, 2, 4))
        out = encoder_layer(ag.tensor(T), p, "L", enc).data
        ref = numpy_layer(T[0], {n[2:]: t.data for n, t in p.params.items()}, heads)
        np.testing.assert_allclose(out[0], ref, atol=1e-12)

    def test_global_kv_oracle(self, rng):
        enc = EncoderConfig(embed_dim=4, heads=2, global_count=4)
        p = layer_params(rng, 4, enc.hidden_dim)
        T, G = rng.normal(size=(1, 3, 4)), rng.normal(size=(1, 4, 4))
        log = []
        out = encoder_layer(ag.tensor(T), p, "L", enc, ag.tensor(G), log).data
        ref = numpy_layer(T[0], {n[2:]: t.data for n, t in p.params.items()}, 2, kv_extra=G[0])
        np.testing.assert_allclose(out[0], ref, atol=1e-12)
        assert log[0].shape == (1, 2, 3, 7)

    def test_zero_updates_are_identity(self, rng):
        p = layer_params(rng, 8, 16)
        for name in ("L.proj.w", "L.proj.b", "L.fc2.w", "L.fc2.b"):
            p[name].data[:] = 0.0
        T = rng.normal(size=(2, 5, 8))
        out = encoder_layer(ag.tensor(T), p, "L", EncoderConfig(embed_dim=8, heads=2)).data
        np.testing.assert_array_equal(out, T)

    def test_single_token_weight_is_one(self, rng):
        p = layer_params(rng, 8, 16)
        log = []
        encoder_layer(ag.tensor(rng.normal(size=(3, 1, 8))), p, "L", EncoderConfig(embed_dim=8, heads=2), attn_log=log)
        np.testing.assert_array_equal(log[0], 1.0)

    def test_rows_sum_to_one(self, random_params, feat):
        log = []
        channel_weights(feat, random_params, ENC, log)
        assert len(log) == ENC.n_layers
        for w in log:
            assert w.shape == (2, ENC.heads, 16, 16 + ENC.global_count)
            np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-9)

    @pytest.mark.parametrize("precision,tol", [("float64", 1e-12), ("float32", 1e-6)])
    def test_permutation_equivariance(self, random_params, rng, precision, tol):
        with ag.precision(precision):
            p = random_params.astype(ag.get_dtype())
            T = rng.normal(size=(2, 16, ENC.embed_dim))
            perm = rng.permutation(16)
            out = encode(ag.tensor(T), p, ENC).data
            out_perm = encode(ag.tensor(T[:, perm]), p, ENC).data
        # float32 sums the permuted keys in a different order; scale by magnitude
        np.testing.assert_allclose(out_perm, out[:, perm], atol=tol * np.abs(out).max(), rtol=0)

    def test_layernorm_scale_invariance(self, random_params, feat):
        # Tokens from a bias-free projection scale with the input, and LN
        # removes the scale, so the first attention pattern is unchanged.
        p = random_params
        p["attn.patch.b"].data[:] = 0.0
        p["attn.pos"].data[:] = 0.0
        enc = EncoderConfig(n_layers=1, use_global_tokens=False)
        logs = []
        for scale in (4.0, 12.0):
            log = []
            encode(patchify(feat * scale, p, enc), p, enc, attn_log=log)
            logs.append(log[0])
        np.testing.assert_allclose(logs[0], logs[1], atol=1e-6)


class TestChannelAttention:
    def test_init_gates_are_half(self, params, feat):
        np.testing.assert_array_equal(channel_weights(feat, params, ENC).data, 0.5)
        np.testing.assert_allclose(channel_attention(feat, params, ENC).data, feat.data / 2)

    def test_saturated_gate(self, params, feat):
        params["attn.ch_head.b"].data[:] = 40.0
        np.testing.assert_allclose(channel_attention(feat, params, ENC).data, feat.data, atol=1e-6 * np.abs(feat.data).max())

    def test_gates_strictly_inside(self, random_params, feat):
        w = channel_weights(feat, random_params, ENC).data
        assert w.shape == (2, 15, 1, 1)
        assert np.all((w > 0) & (w < 1))
        out = channel_attention(feat, random_params, ENC).data
        assert np.all(np.abs(out) <= np.abs(feat.data))

    def test_channel_permutation(self, random_params, feat, rng):
        perm = rng.permutation(EMBED_CHANNELS)
        out = channel_attention(feat, random_params, ENC).data
        q = random_params.copy()
        q["attn.patch.w"].data = q["attn.patch.w"].data[:, perm]
        q["attn.ch_head.w"].data = q["attn.ch_head.w"].data[:, perm]
        q["attn.ch_head.b"].data = q["attn.ch_head.b"].data[perm]
        out_perm = channel_attention(ag.tensor(feat.data[:, perm]), q, ENC).data
        np.testing.assert_allclose(out_perm, out[:, perm], atol=1e-12)


class TestSpatialAttention:
    def test_init_gate_is_half(self, params, feat):
        np.testing.assert_array_equal(spatial_weights(feat, params).data, 0.5)

    def test_saturated_gate(self, params, feat):
        params["attn.spatial.b"].data[:] = 40.0
        np.testing.assert_allclose(spatial_attention(feat, params).data, feat.data, atol=1e-6 * np.abs(feat.data).max())

    def test_constant_map_statistics(self, params, rng):
        # for a constant map max == mean, so splitting the kernel between the
        # two statistics does not change the gate
        params["attn.spatial.w"].data = rng.normal(size=(1, 2, 7, 7))
        x = ag.tensor(np.full((1, 15, 16, 16), 0.4))
        s1 = spatial_weights(x, params).data
        w = params["attn.spatial.w"].data
        params["attn.spatial.w"].data = np.concatenate([w.sum(axis=1, keepdims=True), np.zeros_like(w[:, :1])], axis=1)
        np.testing.assert_allclose(spatial_weights(x, params).data, s1, atol=1e-12)

    def test_gate_range(self, random_params, feat):
        s = spatial_weights(feat, random_params).data
        assert s.shape == (2, 1, 16, 16)
        assert np.all((s > 0) & (s < 1))


class TestFuseAndForward:
    def test_fuse_shape(self, params, feat):
        assert fuse(feat, feat, params).shape == (2, 3, 16, 16)

    def test_fuse_shape_mismatch(self, params, feat):
        with pytest.raises(DimensionError):
            fuse(feat, ag.tensor(feat.data[:, :, :8]), params)

    def test_zero_fuse_returns_clamped_k(self, params, rng):
        zero_prefix(params, "attn.fuse")
        J, diag = dhformer_forward(rng.uniform(size=(2, 3, 16, 16)), params, ARCH, ENC)
        np.testing.assert_array_equal(diag["R"].data, 0.0)
        np.testing.assert_array_equal(J.data, recompose(diag["K"].data, np.zeros((2, 3, 16, 16))))

    def test_init_reproduces_residual_only(self, rng):
        params = init_model(ARCH, ENC, 0)
        I = rng.uniform(size=(2, 3, 16, 16))
        _, diag = dhformer_forward(I, params, ARCH, ENC)
        # fuse noise is small, the pass-through taps dominate
        np.testing.assert_allclose(diag["R"].data, diag["R_prime"].data, atol=0.1 * np.abs(diag["R_prime"].data).max())
        _, res = dhformer_forward(I, init_model(ARCH, ENC, 0, "residual_only"), ARCH, ENC)
        np.testing.assert_array_equal(res["R"].data, diag["R_prime"].data)

    def test_fuse_pass_through_exact_without_noise(self, params, rng):
        from dehazekit.attention import fuse_init

        params["attn.fuse.w"].data = fuse_init(rng, std=0.0)
        _, diag = dhformer_forward(rng.uniform(size=(1, 3, 16, 16)), params, ARCH, ENC)
        np.testing.assert_allclose(diag["R"].data, diag["R_prime"].data, atol=1e-12)

    def test_output_shape_and_range(self, random_params, rng):
        J, diag = dhformer_forward(rng.uniform(size=(3, 3, 16, 16)), random_params, ARCH, ENC)
        assert J.shape == (3, 3, 16, 16)
        assert 0.0 <= J.data.min() and J.data.max() <= 1.0
        assert set(diag) == {"t", "K", "R_prime", "R", "J_raw"}

    def test_ablation_selection(self, rng):
        p = init_model(ARCH, ENC, 0, "residual_only")
        _, diag = dhformer_forward(rng.uniform(size=(1, 3, 16, 16)), p, ARCH, ENC)
        assert diag["R"] is diag["R_prime"]
        with pytest.raises(ConfigError):
            dhformer_forward(rng.uniform(size=(1, 3, 16, 16)), p, ARCH, ENC, ablation="none")

    def test_full_model_grad_check(self):
        rng = np.random.default_rng(0)
        enc = EncoderConfig(patch_size=4, embed_dim=8, n_layers=1, heads=1, global_count=4)
        p = randomize(init_model(TINY_ARCH, enc, 0), rng, 0.3)
        I = rng.uniform(0.1, 0.9, (2, 3, 8, 8))
        J = rng.uniform(size=(2, 3, 8, 8))

        def loss(_):
            _, diag = dhformer_forward(I, p, TINY_ARCH, enc)
            return loss_residual(diag["R"], diag["K"], J)

        worst = {}
        for name, t in p.params.items():
            if name.startswith("attn."):
                idx = [tuple(int(rng.integers(0, s)) for s in t.shape) for _ in range(3)]
                worst[name] = ag.grad_check(loss, t, eps=1e-6, indices=idx)
        assert max(worst.values()) <= 1e-4, worst

    def test_gradients_reach_every_parameter(self, random_params, rng):
        random_params["trans.out.b"].data[:] = 0.6  # keep t off the clamp
        I = rng.uniform(0.1, 0.9, (2, 3, 16, 16))
        _, diag = dhformer_forward(I, random_params, ARCH, ENC)
        ag.backward(loss_residual(diag["R"], diag["K"], rng.uniform(size=I.shape)))
        missing = [n for n, t in random_params.params.items() if t.grad is None or not np.any(t.grad)]
        assert missing == []
