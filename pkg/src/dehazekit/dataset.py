"""Hazy/clear training pairs built from clear images and depth maps.

Pairs are synthesized on load and cached in memory, keyed by the manifest
path string and the seed, so nothing derived is written to disk.  The
manifest is a UTF-8 TSV with one ``clear_path<TAB>depth_path<TAB>split``
record per line; relative paths resolve against the manifest's directory.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
from PIL import Image, UnidentifiedImageError

from .autograd import bilinear_matrix
from .errors import ConfigError, DimensionError, FormatError
from .scattering import T_MIN, HazeParams, synthesize_haze, transmission_from_depth

TRAIN_SIZE = 16
A_RANGE = (0.7, 1.0)
BETA_RANGE = (0.4, 1.6)
SPLITS = ("train", "test")


# --------------------------------------------------------------------------
# image I/O
# --------------------------------------------------------------------------


def _open(path) -> Image.Image:
    try:
        img = Image.open(path)
        img.load()
    except (OSError, UnidentifiedImageError) as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc
    return img


def load_clear(path) -> np.ndarray:
    """8-bit RGB file -> float array ``[1, 3, H, W]`` in [0, 1]."""
    img = _open(path)
    if img.mode != "RGB":
        raise FormatError(f"{path}: expected an 8-bit 3-channel image, got mode {img.mode}")
    arr = np.asarray(img, dtype=np.float64) / 255.0
    return arr.transpose(2, 0, 1)[None]


def load_depth(path) -> np.ndarray:
    """8/16-bit single-channel file -> ``[1, 1, H, W]`` scaled by its own max."""
    img = _open(path)
    if img.mode not in ("L", "I;16", "I;16B", "I;16L", "I"):
        raise FormatError(f"{path}: expected a single-channel depth image, got mode {img.mode}")
    arr = np.asarray(img).astype(np.float64)
    if arr.ndim != 2:
        raise FormatError(f"{path}: depth image must be single-channel")
    peak = arr.max()
    arr = arr / peak if peak > 0 else np.zeros_like(arr)
    return arr[None, None]


def load_clear_depth(clear_path, depth_path) -> tuple[np.ndarray, np.ndarray]:
    clear, depth = load_clear(clear_path), load_depth(depth_path)
    if clear.shape[-2:] != depth.shape[-2:]:
        raise FormatError(f"{clear_path} and {depth_path} have different sizes")
    return clear, depth


def to_uint8(img: np.ndarray) -> np.ndarray:
    """``[1, 3, H, W]`` or ``[3, H, W]`` floats -> ``H x W x 3`` bytes."""
    img = np.asarray(img)
    if img.ndim == 4:
        img = img[0]
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)


def save_rgb(path, img: np.ndarray) -> None:
    Image.fromarray(to_uint8(img), mode="RGB").save(path)


def save_depth16(path, depth: np.ndarray) -> None:
    d = np.asarray(depth).reshape(depth.shape[-2:])
    Image.fromarray(np.round(np.clip(d, 0, 1) * 65535).astype(np.uint16)).save(path)


def save_depth8(path, depth: np.ndarray) -> None:
    d = np.asarray(depth).reshape(depth.shape[-2:])
    Image.fromarray(np.round(np.clip(d, 0, 1) * 255).astype(np.uint8), mode="L").save(path)


# --------------------------------------------------------------------------
# pairs
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class HazePair:
    clear: np.ndarray
    depth: np.ndarray
    params: HazeParams
    hazy: np.ndarray
    transmission: np.ndarray

    @property
    def shape(self) -> tuple:
        return self.clear.shape


def pair_rng(key: str, seed: int) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(key.encode("utf-8"))])


def make_pair(
    clear: np.ndarray,
    depth: np.ndarray,
    rng: np.random.Generator,
    a_range: tuple = A_RANGE,
    beta_range: tuple = BETA_RANGE,
    t_min: float = T_MIN,
) -> HazePair:
    """Sample (A, beta) and render the hazy counterpart of ``clear``."""
    A = float(rng.uniform(*a_range))
    beta = float(rng.uniform(*beta_range))
    params = HazeParams(A, beta)
    t = transmission_from_depth(depth, beta, t_min)
    return HazePair(clear, depth, params, synthesize_haze(clear, t, A), t)


def _map_pair(pair: HazePair, fn) -> HazePair:
    return replace(
        pair,
        clear=fn(pair.clear),
        depth=fn(pair.depth),
        hazy=fn(pair.hazy),
        transmission=fn(pair.transmission),
    )


def flip_pair(pair: HazePair) -> HazePair:
    return _map_pair(pair, lambda a: a[..., ::-1].copy())


def rotate_pair(pair: HazePair, quarter_turns: int) -> HazePair:
    return _map_pair(pair, lambda a: np.rot90(a, quarter_turns, axes=(-2, -1)).copy())


def crop_pair(pair: HazePair, top: int, left: int, size: int) -> HazePair:
    return _map_pair(pair, lambda a: a[..., top : top + size, left : left + size].copy())


def augment(pair: HazePair, rng: np.random.Generator, crop: int = TRAIN_SIZE) -> HazePair:
    """Random crop (only when larger than ``crop``), horizontal flip and a
    right-angle rotation, applied identically to every map of the pair."""
    h, w = pair.shape[-2:]
    if h < crop or w < crop:
        raise DimensionError(f"pair of size {h}x{w} is smaller than crop {crop}")
    if h > crop or w > crop:
        pair = crop_pair(pair, int(rng.integers(0, h - crop + 1)), int(rng.integers(0, w - crop + 1)), crop)
    if rng.random() < 0.5:
        pair = flip_pair(pair)
    return rotate_pair(pair, int(rng.integers(0, 4)))


def resize_to_train(x: np.ndarray, size: int = TRAIN_SIZE) -> np.ndarray:
    """Bilinear resize (pixel-centre sampling) of the last two axes to ``size``."""
    x = np.asarray(x, dtype=np.float64)
    h, w = x.shape[-2:]
    if h < size or w < size:
        raise DimensionError(f"cannot downscale {h}x{w} to {size}x{size}")
    if (h, w) == (size, size):
        return x.copy()
    ry = bilinear_matrix(h, size, align_corners=False)
    rx = bilinear_matrix(w, size, align_corners=False)
    return ry @ x @ rx.T


# --------------------------------------------------------------------------
# manifest and batching
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ManifestEntry:
    clear: str
    depth: str
    split: str


@dataclass
class DatasetManifest:
    entries: list
    root: Path = field(default_factory=Path)
    seed: int = 0

    def split(self, name: str) -> list:
        return [e for e in self.entries if e.split == name]

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p


def read_manifest(path, seed: int = 0, check_files: bool = True) -> DatasetManifest:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot read manifest {path}: {exc}") from exc
    entries = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3 or parts[2].strip() not in SPLITS:
            raise FormatError(f"{path}:{lineno}: expected clear<TAB>depth<TAB>train|test")
        entries.append(ManifestEntry(parts[0], parts[1], parts[2].strip()))
    manifest = DatasetManifest(entries, path.parent, seed)
    train = {e.clear for e in manifest.split("train")} | {e.depth for e in manifest.split("train")}
    test = {e.clear for e in manifest.split("test")} | {e.depth for e in manifest.split("test")}
    overlap = train & test
    if overlap:
        raise ConfigError(f"paths appear in both splits: {sorted(overlap)[:3]}")
    if check_files:
        for e in entries:
            for rel in (e.clear, e.depth):
                if not manifest.resolve(rel).is_file():
                    raise OSError(f"manifest {path} references missing file {rel}")
    return manifest


def write_manifest(path, entries) -> None:
    lines = [f"{e.clear}\t{e.depth}\t{e.split}" for e in entries]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


@lru_cache(maxsize=4096)
def _cached_pair(clear_path: str, depth_path: str, key: str, seed: int, size, a_range, beta_range, t_min):
    clear, depth = load_clear_depth(clear_path, depth_path)
    if size is not None:
        clear, depth = resize_to_train(clear, size), resize_to_train(depth, size)
    return make_pair(clear, depth, pair_rng(key, seed), a_range, beta_range, t_min)


def load_pair(
    manifest: DatasetManifest,
    entry: ManifestEntry,
    size: Optional[int] = TRAIN_SIZE,
    a_range: tuple = A_RANGE,
    beta_range: tuple = BETA_RANGE,
    t_min: float = T_MIN,
) -> HazePair:
    """Synthesized pair for one manifest record (cached).

    ``size=None`` keeps the native resolution, as used for evaluation.
    """
    return _cached_pair(
        str(manifest.resolve(entry.clear)),
        str(manifest.resolve(entry.depth)),
        entry.clear,
        manifest.seed,
        size,
        tuple(a_range),
        tuple(beta_range),
        t_min,
    )


def epoch_order(n: int, shuffle: bool, seed: int, epoch: int) -> np.ndarray:
    if not shuffle:
        return np.arange(n)
    return np.random.default_rng([seed, epoch]).permutation(n)


def stack_pairs(pairs) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    return (
        np.concatenate([p.hazy for p in pairs]),
        np.concatenate([p.clear for p in pairs]),
        np.concatenate([p.transmission for p in pairs]),
    )


def iterate_pairs(
    pairs: list,
    batch_size: int,
    shuffle: bool,
    seed: int,
    epoch: int = 0,
    augment_data: bool = False,
    crop: int = TRAIN_SIZE,
) -> Iterator[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    if not pairs:
        raise ConfigError("no pairs to batch")
    order = epoch_order(len(pairs), shuffle, seed, epoch)
    aug_rng = np.random.default_rng([seed, epoch, 1])
    for start in range(0, len(pairs), batch_size):
        chunk = [pairs[i] for i in order[start : start + batch_size]]
        if augment_data:
            chunk = [augment(p, aug_rng, crop) for p in chunk]
        yield stack_pairs(chunk)


def batches(
    manifest: DatasetManifest,
    batch_size: int,
    shuffle: bool,
    seed: int,
    epoch: int = 0,
    split: str = "train",
    augment_data: bool = False,
) -> Iterator[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """One epoch of ``(hazy, clear, transmission)`` batches at training size.

    Yields ``ceil(n / batch_size)`` batches; the last may be short.
    """
    entries = manifest.split(split)
    if not entries:
        raise ConfigError(f"manifest has no {split!r} records")
    pairs = [load_pair(manifest, e) for e in entries]
    yield from iterate_pairs(pairs, batch_size, shuffle, seed, epoch, augment_data)


def batches_per_epoch(n: int, batch_size: int) -> int:
    return math.ceil(n / batch_size)


# --------------------------------------------------------------------------
# procedural mini-dataset
# --------------------------------------------------------------------------

MINI_COUNT = 64
MINI_TEST = 8
MINI_SIZE = 32


def procedural_scene(index: int, size: int = MINI_SIZE, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """A colour-gradient image with a few flat shapes, and a matching depth
    ramp where the shapes sit closer to the camera."""
    rng = np.random.default_rng([seed, index, 7])
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    clear = np.empty((3, size, size))
    for c in range(3):
        base, gx, gy = rng.uniform(0.1, 0.6), rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3)
        clear[c] = base + gx * xx + gy * yy
    theta = rng.uniform(0, 2 * np.pi)
    ramp = 0.5 + 0.5 * (np.cos(theta) * (xx - 0.5) + np.sin(theta) * (yy - 0.5)) * 1.4
    depth = 0.3 + 0.7 * np.clip(ramp, 0, 1)
    for _ in range(int(rng.integers(1, 4))):
        cx, cy, r = rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8), rng.uniform(0.08, 0.25)
        colour = rng.uniform(0.0, 1.0, size=3)
        if rng.random() < 0.5:
            mask = (xx - cx) ** 2 + (yy - cy) ** 2 < r * r
        else:
            mask = (np.abs(xx - cx) < r) & (np.abs(yy - cy) < r * 0.7)
        clear[:, mask] = colour[:, None]
        depth[mask] = rng.uniform(0.05, 0.4)
    return np.clip(clear, 0, 1)[None], depth[None, None]


def make_mini_dataset(out_dir, count: int = MINI_COUNT, n_test: int = MINI_TEST, size: int = MINI_SIZE, seed: int = 0) -> Path:
    """Write ``count`` clear/depth PNG pairs and a manifest; return its path.

    Even indices store 16-bit depth, odd indices 8-bit.  The last ``n_test``
    pairs form the test split.
    """
    out = Path(out_dir)
    (out / "clear").mkdir(parents=True, exist_ok=True)
    (out / "depth").mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(count):
        clear, depth = procedural_scene(i, size, seed)
        cpath, dpath = f"clear/{i:03d}.png", f"depth/{i:03d}.png"
        save_rgb(out / cpath, clear)
        (save_depth16 if i % 2 == 0 else save_depth8)(out / dpath, depth)
        entries.append(ManifestEntry(cpath, dpath, "test" if i >= count - n_test else "train"))
    manifest = out / "manifest.tsv"
    write_manifest(manifest, entries)
    return manifest
