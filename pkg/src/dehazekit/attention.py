"""Second network: transformer channel attention, pooled spatial attention, fusion.

The residual ``R'`` from the backbone is widened by parallel 3x3 and 5x5
convolutions into a 15-channel map.  A small ViT (patch tokens plus
learnable position embeddings, pre-norm encoder layers whose keys and values
also include globally pooled tokens) produces per-channel gates; a
CBAM-style max/mean map produces per-pixel gates on the channel-gated map.
The two gated maps are concatenated and a final convolution yields the
refined residual ``R``, and the output is ``J = K - R``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .backbone import ArchConfig, backbone_forward, init_backbone
from .errors import ConfigError, DimensionError
from .nn import ModelParams, conv, init_conv, init_layernorm, init_linear, layernorm, linear
from .scattering import recompose

EMBED_CHANNELS = 15  # R' (3) + 3x3 branch (3) + 5x5 branch (9)
ABLATIONS = ("full", "residual_only")


@dataclass(frozen=True)
class EncoderConfig:
    patch_size: int = 4
    embed_dim: int = 64
    n_layers: int = 2
    heads: int = 4
    mlp_ratio: float = 2.0
    global_count: int = 4
    use_global_tokens: bool = True

    def __post_init__(self):
        if self.embed_dim % self.heads:
            raise ConfigError(f"embed_dim {self.embed_dim} is not divisible by {self.heads} heads")
        if self.n_layers < 1:
            raise ConfigError("n_layers must be >= 1")
        g = math.isqrt(self.global_count)
        if self.global_count < 1 or g * g != self.global_count:
            raise ConfigError("global_count must be a positive perfect square")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    @property
    def hidden_dim(self) -> int:
        return int(round(self.embed_dim * self.mlp_ratio))

    def num_patches(self, size: int) -> int:
        if size % self.patch_size:
            raise ConfigError(f"patch size {self.patch_size} does not divide {size}")
        return (size // self.patch_size) ** 2

    def to_dict(self) -> dict:
        return asdict(self)


def init_attention(arch: ArchConfig, enc: EncoderConfig, rng: np.random.Generator) -> ModelParams:
    p = ModelParams()
    init_conv(p, rng, "attn.c3", 3, 3, 3)
    init_conv(p, rng, "attn.c5", 3, 9, 5)
    d, m = enc.embed_dim, enc.patch_size
    init_conv(p, rng, "attn.patch", EMBED_CHANNELS, d, m)
    p.add("attn.pos", rng.normal(0.0, 0.02, size=(enc.num_patches(arch.input_size), d)))
    for i in range(enc.n_layers):
        pre = f"attn.enc{i}"
        init_layernorm(p, f"{pre}.ln1", d)
        for proj in ("q", "k", "v", "proj"):
            # a key bias shifts every score of a query equally; softmax ignores it
            init_linear(p, rng, f"{pre}.{proj}", d, d, bias=proj != "k")
        init_layernorm(p, f"{pre}.ln2", d)
        init_linear(p, rng, f"{pre}.fc1", d, enc.hidden_dim)
        init_linear(p, rng, f"{pre}.fc2", enc.hidden_dim, d)
    # Gates start at exactly 0.5 and the fuse kernel passes R' through, so
    # the untrained full model reproduces the residual-only output (R = R')
    # and the attention path learns a correction on top of it.
    p.add("attn.ch_head.w", np.zeros((d, EMBED_CHANNELS)))
    p.add("attn.ch_head.b", np.zeros(EMBED_CHANNELS))
    p.add("attn.spatial.w", np.zeros((1, 2, 7, 7)))
    p.add("attn.spatial.b", np.zeros(1))
    p.add("attn.fuse.w", fuse_init(rng))
    p.add("attn.fuse.b", np.zeros(3))
    return p


def fuse_init(rng: np.random.Generator, std: float = 0.01) -> np.ndarray:
    """Small noise plus centre taps of 1/(0.5 + 0.25) from the R' channels of
    both attended maps, which carry R' scaled by 0.5 and 0.25 at init."""
    w = rng.normal(0.0, std, size=(3, 2 * EMBED_CHANNELS, 3, 3))
    for c in range(3):
        w[c, c, 1, 1] += 1.0 / 0.75
        w[c, EMBED_CHANNELS + c, 1, 1] += 1.0 / 0.75
    return w


def init_model(
    arch: ArchConfig = ArchConfig(),
    enc: EncoderConfig = EncoderConfig(),
    seed: int = 0,
    ablation: str = "full",
) -> ModelParams:
    """Fresh parameters.  The backbone is drawn first, so both ablation
    variants share identical backbone weights for a given seed."""
    if ablation not in ABLATIONS:
        raise ConfigError(f"unknown ablation {ablation!r}")
    rng = np.random.default_rng(seed)
    params = init_backbone(arch, rng)
    if ablation == "full":
        params.update(init_attention(arch, enc, rng))
    return params


def parallel_conv_embed(R_prime: Tensor, params: ModelParams) -> Tensor:
    c3 = conv(R_prime, params, "attn.c3", pad=1)
    c5 = conv(R_prime, params, "attn.c5", pad=2)
    return ag.concat_channels([R_prime, c3, c5])


def extract_patches(x: np.ndarray, m: int) -> np.ndarray:
    """Raw flattened ``m x m`` patches, ``[b, N, m*m*C]`` in (C, row, col) order."""
    b, c, h, w = x.shape
    if h % m or w % m:
        raise ConfigError(f"patch size {m} does not divide {h}x{w}")
    p = x.reshape(b, c, h // m, m, w // m, m).transpose(0, 2, 4, 1, 3, 5)
    return p.reshape(b, (h // m) * (w // m), c * m * m)


def patchify(x: Tensor, params: ModelParams, enc: EncoderConfig, add_position: bool = True) -> Tensor:
    """Tokens ``[b, N, D]``: linear projection of each flattened patch plus
    its position embedding.  The projection is a stride-``m`` convolution,
    which is the same linear map applied patch by patch."""
    m = enc.patch_size
    b, _, h, w = x.shape
    if h % m or w % m:
        raise ConfigError(f"patch size {m} does not divide {h}x{w}")
    proj = ag.patch_project(x, params["attn.patch.w"], params["attn.patch.b"])
    tokens = ag.transpose(ag.reshape(proj, (b, enc.embed_dim, -1)), (0, 2, 1))
    if add_position:
        pos = params["attn.pos"]
        if pos.shape != tokens.shape[1:]:
            raise DimensionError(f"position embeddings {pos.shape} do not match tokens {tokens.shape[1:]}")
        tokens = tokens + pos
    return tokens


def global_tokens(x: Tensor, params: ModelParams, count: int) -> Tensor:
    """Pool the map over a ``g x g`` grid (``g*g == count``) and project each
    cell mean with the patch projection, as if it were a constant patch."""
    g = math.isqrt(count)
    b, c, h, w = x.shape
    if count < 1 or g * g != count or h % g or w % g:
        raise ConfigError(f"global token count {count} does not tile a {h}x{w} map")
    cell = h // g
    pooled = ag.pool2d(x, "avg", cell, cell, 0) if cell > 1 else x
    pooled = ag.transpose(ag.reshape(pooled, (b, c, count)), (0, 2, 1))  # b, count, C
    wt = params["attn.patch.w"]
    d = wt.shape[0]
    w_sum = ag.sum(ag.reshape(wt, (d, c, -1)), axis=2)  # D, C
    return ag.matmul(pooled, ag.transpose(w_sum, (1, 0))) + params["attn.patch.b"]


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, n, d = x.shape
    return ag.transpose(ag.reshape(x, (b, n, heads, d // heads)), (0, 2, 1, 3))


def encoder_layer(
    T: Tensor,
    params: ModelParams,
    prefix: str,
    enc: EncoderConfig,
    global_kv: Optional[Tensor] = None,
    attn_log: Optional[list] = None,
) -> Tensor:
    """Pre-norm block: ``T' = MHA(LN(T)) + T``; ``out = MLP(LN(T')) + T'``.

    Queries come from the local tokens only; with ``global_kv`` the keys and
    values are taken over the local tokens followed by the (normalized)
    global tokens.
    """
    if enc.embed_dim % enc.heads:
        raise ConfigError("embed_dim must be divisible by heads")
    b, n, d = T.shape
    h = layernorm(T, params, f"{prefix}.ln1")
    src = h
    if global_kv is not None:
        src = ag.concat([h, layernorm(global_kv, params, f"{prefix}.ln1")], axis=1)
    q = _split_heads(linear(h, params, f"{prefix}.q"), enc.heads)
    k = _split_heads(linear(src, params, f"{prefix}.k"), enc.heads)
    v = _split_heads(linear(src, params, f"{prefix}.v"), enc.heads)
    scores = ag.matmul(q, ag.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(enc.head_dim))
    weights = ag.softmax(scores, axis=-1)
    if attn_log is not None:
        attn_log.append(weights.data)
    mixed = ag.reshape(ag.transpose(ag.matmul(weights, v), (0, 2, 1, 3)), (b, n, d))
    T = T + linear(mixed, params, f"{prefix}.proj")
    hidden = ag.relu(linear(layernorm(T, params, f"{prefix}.ln2"), params, f"{prefix}.fc1"))
    return T + linear(hidden, params, f"{prefix}.fc2")


def encode(tokens: Tensor, params: ModelParams, enc: EncoderConfig, global_kv=None, attn_log=None) -> Tensor:
    for i in range(enc.n_layers):
        tokens = encoder_layer(tokens, params, f"attn.enc{i}", enc, global_kv, attn_log)
    return tokens


def channel_weights(x: Tensor, params: ModelParams, enc: EncoderConfig, attn_log: Optional[list] = None) -> Tensor:
    """Per-channel gates in (0, 1), shape ``[b, C, 1, 1]``."""
    tokens = patchify(x, params, enc)
    g = global_tokens(x, params, enc.global_count) if enc.use_global_tokens else None
    pooled = ag.mean(encode(tokens, params, enc, g, attn_log), axis=1)  # b, D
    w = ag.sigmoid(linear(pooled, params, "attn.ch_head"))
    return ag.reshape(w, (x.shape[0], x.shape[1], 1, 1))


def channel_attention(x: Tensor, params: ModelParams, enc: EncoderConfig, attn_log: Optional[list] = None) -> Tensor:
    return x * channel_weights(x, params, enc, attn_log)


def spatial_weights(x: Tensor, params: ModelParams) -> Tensor:
    stats = ag.concat_channels([ag.amax(x, axis=1), ag.mean(x, axis=1, keepdims=True)])
    return ag.sigmoid(conv(stats, params, "attn.spatial", pad=3))


def spatial_attention(x: Tensor, params: ModelParams) -> Tensor:
    return x * spatial_weights(x, params)


def fuse(ch_out: Tensor, sp_out: Tensor, params: ModelParams) -> Tensor:
    if ch_out.shape != sp_out.shape:
        raise DimensionError(f"cannot fuse {ch_out.shape} with {sp_out.shape}")
    return conv(ag.concat_channels([ch_out, sp_out]), params, "attn.fuse", pad=1)


def is_full_model(params: ModelParams) -> bool:
    return "attn.fuse.w" in params


def dhformer_forward(
    I,
    params: ModelParams,
    arch: ArchConfig = ArchConfig(),
    enc: EncoderConfig = EncoderConfig(),
    ablation: Optional[str] = None,
    attn_log: Optional[list] = None,
) -> tuple[Tensor, dict]:
    """Dehaze a batch.  Returns the clamped estimate and a diagnostics dict
    with ``t``, ``K``, ``R_prime``, ``R`` and the unclamped ``J_raw``.

    ``ablation`` defaults to whatever the parameter set supports:
    ``"residual_only"`` skips the attention module and uses ``R = R'``.
    """
    if ablation is None:
        ablation = "full" if is_full_model(params) else "residual_only"
    if ablation not in ABLATIONS:
        raise ConfigError(f"unknown ablation {ablation!r}")
    t, K, R_prime = backbone_forward(I, params, arch)
    if ablation == "full":
        ch = channel_attention(parallel_conv_embed(R_prime, params), params, enc, attn_log)
        R = fuse(ch, spatial_attention(ch, params), params)
    else:
        R = R_prime
    J_raw = recompose(K, R, clamp=False)
    J_hat = ag.clip(J_raw, 0.0, 1.0)
    return J_hat, {"t": t, "K": K, "R_prime": R_prime, "R": R, "J_raw": J_raw}
