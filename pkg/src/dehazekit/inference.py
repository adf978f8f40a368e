"""Full-resolution inference by overlapping tiles at the training size."""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from .attention import EncoderConfig, dhformer_forward
from .backbone import ArchConfig
from .errors import ConfigError, DimensionError
from .nn import ModelParams


def tile_starts(length: int, tile: int, overlap: int) -> list:
    """Tile origins along one axis; the last tile is aligned to the border."""
    if length < tile:
        raise DimensionError(f"image extent {length} is smaller than the tile {tile}")
    if not 0 <= overlap < tile:
        raise ConfigError("overlap must satisfy 0 <= overlap < tile")
    step = tile - overlap
    starts = list(range(0, length - tile + 1, step))
    if starts[-1] != length - tile:
        starts.append(length - tile)
    return starts


def ramp(tile: int, overlap: int) -> np.ndarray:
    """1-D blend profile: rises linearly over ``overlap`` pixels at each end,
    flat in the middle, strictly positive everywhere."""
    i = np.arange(tile, dtype=np.float64)
    r = np.minimum((i + 1) / (overlap + 1), (tile - i) / (overlap + 1))
    return np.minimum(r, 1.0)


def blend_weights(height: int, width: int, tile: int = 16, overlap: int = 4) -> tuple[list, np.ndarray]:
    """Per-tile ``(top, left, weight)`` triples with weights normalized so
    that they sum to 1 at every pixel, plus the raw accumulated weight map."""
    rows, cols = tile_starts(height, tile, overlap), tile_starts(width, tile, overlap)
    profile = np.outer(ramp(tile, overlap), ramp(tile, overlap))
    acc = np.zeros((height, width))
    for top in rows:
        for left in cols:
            acc[top : top + tile, left : left + tile] += profile
    tiles = [
        (top, left, profile / acc[top : top + tile, left : left + tile]) for top in rows for left in cols
    ]
    return tiles, acc


def infer_tiled(
    I_full,
    params: ModelParams,
    arch: ArchConfig = ArchConfig(),
    enc: EncoderConfig = EncoderConfig(),
    tile: int = 16,
    overlap: int = 4,
    ablation=None,
) -> np.ndarray:
    """Dehaze one ``[1, 3, H, W]`` image.  Tiles are run as a single batch in
    evaluation mode (running batch-norm statistics), so each tile is
    processed independently of the others."""
    x = np.asarray(getattr(I_full, "data", I_full))
    if x.ndim != 4 or x.shape[:2] != (1, 3):
        raise DimensionError(f"expected a [1, 3, H, W] image, got {x.shape}")
    if tile != arch.input_size:
        raise ConfigError(f"tile {tile} must equal the training size {arch.input_size}")
    _, _, h, w = x.shape
    tiles, _ = blend_weights(h, w, tile, overlap)
    crops = np.concatenate([x[:, :, t : t + tile, l : l + tile] for t, l, _ in tiles])
    was_training = params.training
    params.eval()
    try:
        J, _ = dhformer_forward(ag.tensor(crops), params, arch, enc, ablation)
    finally:
        params.training = was_training
    out = np.zeros((1, 3, h, w), dtype=J.data.dtype)
    for (top, left, wt), patch in zip(tiles, J.data):
        out[0, :, top : top + tile, left : left + tile] += patch * wt
    # weights sum to 1 only up to rounding
    return np.clip(out, 0.0, 1.0, out=out)
