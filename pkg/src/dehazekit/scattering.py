"""Atmospheric scattering model: haze synthesis and the residual decomposition.

A hazy observation is ``I = J * t + A * (1 - t)`` with transmission
``t = exp(-beta * d)``.  Dividing by ``t`` gives the ratio image
``K = I / t = J + u`` where ``u = A * (1 - t) / t`` is the residual a network
learns to predict; the clear image is recovered as ``J = K - R``.

Arrays follow the NCHW layout: images ``[n, 3, H, W]``, depth and
transmission ``[n, 1, H, W]``.  Functions that may sit inside a network
(:func:`ratio_image`, :func:`recompose`) also accept autograd tensors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .errors import ContractError, DimensionError, DomainError

T_MIN = 0.05


@dataclass(frozen=True)
class HazeParams:
    A: float
    beta: float

    def __post_init__(self):
        if not 0.0 < self.A <= 1.0:
            raise DomainError(f"atmospheric light must lie in (0, 1], got {self.A}")
        if not self.beta > 0.0:
            raise DomainError(f"scattering coefficient must be positive, got {self.beta}")


def validate_depth(d: np.ndarray) -> np.ndarray:
    d = np.asarray(d, dtype=np.float64)
    if not np.all(np.isfinite(d)):
        raise DomainError("depth map contains non-finite values")
    if np.any(d < 0):
        raise DomainError("depth map contains negative values")
    return d


def transmission_from_depth(d: np.ndarray, beta: float, t_min: float = T_MIN) -> np.ndarray:
    """``max(t_min, exp(-beta * d))`` pixelwise."""
    if not beta > 0:
        raise DomainError(f"beta must be positive, got {beta}")
    if not 0.0 < t_min < 1.0:
        raise DomainError(f"t_min must lie in (0, 1), got {t_min}")
    d = validate_depth(d)
    return np.maximum(t_min, np.exp(-beta * d))


def _check_pair_shapes(img_shape: tuple, t_shape: tuple) -> None:
    if len(img_shape) != len(t_shape) or img_shape[-2:] != t_shape[-2:]:
        raise DimensionError(f"image {img_shape} and transmission {t_shape} differ spatially")
    if len(img_shape) == 4 and t_shape[1] != 1 and t_shape[1] != img_shape[1]:
        raise DimensionError(f"transmission must have 1 or {img_shape[1]} channels, got {t_shape[1]}")


def synthesize_haze(J: np.ndarray, t: np.ndarray, A: float) -> np.ndarray:
    """Render haze onto a clear image.  No clamping is applied to ``t``."""
    J = np.asarray(J, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    _check_pair_shapes(J.shape, t.shape)
    return J * t + A * (1.0 - t)


def ratio_image(I, t, t_min: float = T_MIN, tol: float = 1e-9):
    """``K = I / t``; ``K`` may exceed 1.

    Raises :class:`ContractError` if any transmission value lies below
    ``t_min``.
    """
    t_data = t.data if isinstance(t, ag.Tensor) else np.asarray(t)
    i_shape = I.shape
    _check_pair_shapes(tuple(i_shape), tuple(t_data.shape))
    if np.any(t_data < t_min - tol):
        raise ContractError(f"transmission below t_min={t_min}: min {t_data.min():.3g}")
    if isinstance(I, ag.Tensor) or isinstance(t, ag.Tensor):
        return ag.elementwise(I, t, "div")
    return np.asarray(I, dtype=np.float64) / t_data


def residual_target(t: np.ndarray, A: float, channels: int = 3) -> np.ndarray:
    """Residual ``u = A (1 - t) / t`` broadcast to ``channels``."""
    t = np.asarray(t, dtype=np.float64)
    if np.any(t <= 0) or np.any(t > 1):
        raise ContractError("transmission must lie in (0, 1]")
    u = A * (1.0 - t) / t
    if u.ndim == 4 and u.shape[1] == 1:
        u = np.repeat(u, channels, axis=1)
    return u


def recompose(K, R, clamp: bool = True):
    """Clear-image estimate ``K - R``, clamped to ``[0, 1]`` unless
    ``clamp`` is false (the loss uses the unclamped form)."""
    if tuple(K.shape) != tuple(R.shape):
        raise DimensionError(f"K {tuple(K.shape)} and residual {tuple(R.shape)} differ")
    if isinstance(K, ag.Tensor) or isinstance(R, ag.Tensor):
        J = ag.elementwise(K, R, "sub")
        return ag.clip(J, 0.0, 1.0) if clamp else J
    J = np.asarray(K, dtype=np.float64) - np.asarray(R, dtype=np.float64)
    return np.clip(J, 0.0, 1.0) if clamp else J
