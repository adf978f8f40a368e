"""First network: transmission estimator, residual network and residual loss.

The transmission branch maps a hazy batch ``I`` to ``t``; the ratio
``K = I / t`` feeds a plain stack of 3x3 convolutions that predicts the
residual ``R'`` with ``J = K - R'``.  Atmospheric light is never estimated.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, DimensionError
from .nn import ModelParams, batchnorm, conv, init_batchnorm, init_conv
from .scattering import T_MIN, ratio_image


@dataclass(frozen=True)
class ArchConfig:
    input_size: int = 16
    trans_channels: int = 16
    slice_groups: int = 4
    trans_pool: int = 7
    residual_depth: int = 13
    residual_width: int = 16
    t_min: float = T_MIN

    def __post_init__(self):
        if self.input_size % 2 or self.input_size < 8:
            raise ConfigError("input_size must be even and >= 8")
        if self.trans_channels % self.slice_groups:
            raise ConfigError("trans_channels must split evenly into slice_groups")
        if self.residual_depth < 2:
            raise ConfigError("residual_depth must be >= 2")
        if self.trans_pool % 2 == 0:
            raise ConfigError("trans_pool must be odd")

    @property
    def group_width(self) -> int:
        return self.trans_channels // self.slice_groups

    def to_dict(self) -> dict:
        return asdict(self)


def init_backbone(arch: ArchConfig, rng: np.random.Generator) -> ModelParams:
    p = ModelParams()
    init_conv(p, rng, "trans.conv1", 3, arch.trans_channels, 3)
    # bias +1 with small non-positive weights: t starts just below 1 (K close
    # to I) and inside the clamp range, so the branch receives gradient
    p.add("trans.out.w", -np.abs(rng.normal(0.0, 0.01, size=(1, arch.group_width, 1, 1))))
    p.add("trans.out.b", np.ones(1))
    width = arch.residual_width
    for i in range(arch.residual_depth):
        c_in = 3 if i == 0 else width
        last = i == arch.residual_depth - 1
        init_conv(p, rng, f"res.conv{i}", c_in, 3 if last else width, 3, bias=last)
        if not last:
            init_batchnorm(p, f"res.bn{i}", width)
    return p


def _as_input(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def transmission_net_forward(I, params: ModelParams, arch: ArchConfig, intermediates: dict | None = None) -> Tensor:
    """Estimate ``t`` with values in ``[t_min, 1]`` at the input resolution.

    conv3x3 (no pad) -> slice into groups -> elementwise max over groups ->
    max-pool (stride 1, same size) -> ReLU -> 1x1 conv -> clamp -> bilinear
    upsample back to the input size.
    """
    I = _as_input(I)
    if I.ndim != 4 or I.shape[1] != 3:
        raise DimensionError(f"expected a [b, 3, H, W] batch, got {I.shape}")
    feat = conv(I, params, "trans.conv1")
    g = arch.group_width
    reduced = ag.slice_channels(feat, 0, g)
    for k in range(1, arch.slice_groups):
        reduced = ag.maximum(reduced, ag.slice_channels(feat, k * g, (k + 1) * g))
    pooled = ag.pool2d(reduced, "max", arch.trans_pool, 1, arch.trans_pool // 2)
    t_small = ag.clip(conv(ag.relu(pooled), params, "trans.out"), arch.t_min, 1.0)
    if intermediates is not None:
        intermediates.update(features=feat, eltwise=reduced, pooled=pooled, t_small=t_small)
    return ag.upsample_bilinear(t_small, I.shape[2:], align_corners=True)


def residual_net_forward(K, params: ModelParams, arch: ArchConfig) -> Tensor:
    """Residual ``R'`` of the same shape as ``K``; the last layer is a bare
    convolution so the residual can be signed."""
    x = _as_input(K)
    for i in range(arch.residual_depth):
        x = conv(x, params, f"res.conv{i}", pad=1)
        if i < arch.residual_depth - 1:
            x = ag.relu(batchnorm(x, params, f"res.bn{i}"))
    return x


def loss_residual(R_pred: Tensor, K, J) -> Tensor:
    """``sum_i ||R_i - (K_i - J_i)||_F^2 / (2 n)`` over a batch of ``n``."""
    K, J = _as_input(K), _as_input(J)
    if R_pred.shape != K.shape or K.shape != J.shape:
        raise DimensionError(f"loss shapes differ: {R_pred.shape}, {K.shape}, {J.shape}")
    diff = R_pred - (K - J)
    n = R_pred.shape[0]
    return ag.sum(diff * diff) * (1.0 / (2.0 * n))


def backbone_forward(I, params: ModelParams, arch: ArchConfig) -> tuple[Tensor, Tensor, Tensor]:
    I = _as_input(I)
    t = transmission_net_forward(I, params, arch)
    # f32 rounding in the upsample can dip a hair below t_min
    K = ratio_image(I, t, arch.t_min, tol=1e-6)
    return t, K, residual_net_forward(K, params, arch)
