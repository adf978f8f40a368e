"""Full-reference image quality metrics and the per-test-set report.

Images may be given as ``[H, W]``, ``[C, H, W]`` or ``[1, C, H, W]`` arrays
(or tensors) in ``[0, max_val]``.  SSIM and FSIM work on luma
(0.299 R + 0.587 G + 0.114 B).

FSIM follows the reference construction: phase congruency from a log-Gabor
bank (4 scales, 4 orientations, minimum wavelength 6, scale factor 2,
sigma_f 0.55, angular ratio 1.2, noise threshold k = 2) and Scharr gradient
magnitude, with stabilizers T1 = 0.85 and T2 = 160 on the [0, 255] scale.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal import convolve2d

from .errors import ConfigError, DimensionError, FormatError

PSNR_CAP = 120.0
LUMA = np.array([0.299, 0.587, 0.114])

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03

FSIM_T1 = 0.85
FSIM_T2 = 160.0
FSIM_MIN_SIZE = 32


def _array(x) -> np.ndarray:
    return np.asarray(getattr(x, "data", x), dtype=np.float64)


def _squeeze(x) -> np.ndarray:
    a = _array(x)
    if a.ndim == 4:
        if a.shape[0] != 1:
            raise DimensionError(f"expected a single image, got batch of {a.shape[0]}")
        a = a[0]
    return a


def to_gray(x) -> np.ndarray:
    """Luma of a 3-channel image; 1-channel and 2-D inputs pass through."""
    a = _squeeze(x)
    if a.ndim == 2:
        return a
    if a.ndim == 3 and a.shape[0] == 3:
        return np.tensordot(LUMA, a, axes=(0, 0))
    if a.ndim == 3 and a.shape[0] == 1:
        return a[0]
    raise DimensionError(f"cannot interpret shape {a.shape} as an image")


def _same_shape(x: np.ndarray, y: np.ndarray) -> None:
    if x.shape != y.shape:
        raise DimensionError(f"image shapes differ: {x.shape} vs {y.shape}")


def psnr(x, y, max_val: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` for identical inputs."""
    if max_val <= 0:
        raise ValueError("max_val must be positive")
    a, b = _array(x), _array(y)
    _same_shape(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(max_val * max_val / mse)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r * r) / (2 * sigma * sigma))
    w = np.outer(g, g)
    return w / w.sum()


def _filter_valid(img: np.ndarray, window: np.ndarray) -> np.ndarray:
    return np.tensordot(sliding_window_view(img, window.shape), window, axes=([2, 3], [0, 1]))


def ssim_map(x, y, max_val: float = 1.0) -> np.ndarray:
    """Local SSIM at every position where the 11x11 window fits."""
    a, b = to_gray(x), to_gray(y)
    _same_shape(a, b)
    if min(a.shape) < SSIM_WINDOW:
        raise DimensionError(f"SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {a.shape}")
    c1 = (SSIM_K1 * max_val) ** 2
    c2 = (SSIM_K2 * max_val) ** 2
    w = gaussian_window()
    mu_a, mu_b = _filter_valid(a, w), _filter_valid(b, w)
    var_a = _filter_valid(a * a, w) - mu_a * mu_a
    var_b = _filter_valid(b * b, w) - mu_b * mu_b
    cov = _filter_valid(a * b, w) - mu_a * mu_b
    # with C3 = C2 / 2 the contrast and structure terms collapse into one ratio
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return num / den


def ssim(x, y, max_val: float = 1.0) -> float:
    return float(np.mean(ssim_map(x, y, max_val)))


def naive_ssim(x, y, max_val: float = 1.0) -> float:
    """Reference SSIM: explicit loop over windows, separate l, c, s terms.
    Slow; used to cross-check :func:`ssim`."""
    a, b = to_gray(x), to_gray(y)
    _same_shape(a, b)
    c1 = (SSIM_K1 * max_val) ** 2
    c2 = (SSIM_K2 * max_val) ** 2
    c3 = c2 / 2
    w = gaussian_window()
    k = SSIM_WINDOW
    values = []
    for i in range(a.shape[0] - k + 1):
        for j in range(a.shape[1] - k + 1):
            pa, pb = a[i : i + k, j : j + k], b[i : i + k, j : j + k]
            mu_a, mu_b = float(np.sum(w * pa)), float(np.sum(w * pb))
            sd_a = math.sqrt(float(np.sum(w * (pa - mu_a) ** 2)))
            sd_b = math.sqrt(float(np.sum(w * (pb - mu_b) ** 2)))
            cov = float(np.sum(w * (pa - mu_a) * (pb - mu_b)))
            lum = (2 * mu_a * mu_b + c1) / (mu_a**2 + mu_b**2 + c1)
            con = (2 * sd_a * sd_b + c2) / (sd_a**2 + sd_b**2 + c2)
            st = (cov + c3) / (sd_a * sd_b + c3)
            values.append(lum * con * st)
    return float(np.mean(values))


# --------------------------------------------------------------------------
# FSIM
# --------------------------------------------------------------------------


def _freq_grid(rows: int, cols: int) -> tuple[np.ndarray, np.ndarray]:
    def axis(n):
        if n % 2:
            return np.arange(-(n - 1) / 2, (n - 1) / 2 + 1) / (n - 1)
        return np.arange(-n / 2, n / 2) / n

    return np.meshgrid(axis(cols), axis(rows))


def _lowpass(rows: int, cols: int, cutoff: float = 0.45, order: int = 15) -> np.ndarray:
    x, y = _freq_grid(rows, cols)
    radius = np.sqrt(x * x + y * y)
    return np.fft.ifftshift(1.0 / (1.0 + (radius / cutoff) ** (2 * order)))


def phase_congruency(
    img: np.ndarray,
    nscale: int = 4,
    norient: int = 4,
    min_wavelength: float = 6.0,
    mult: float = 2.0,
    sigma_onf: float = 0.55,
    d_theta_on_sigma: float = 1.2,
    k: float = 2.0,
    epsilon: float = 1e-4,
) -> np.ndarray:
    """Phase congruency map (summed over orientations, noise-compensated)."""
    rows, cols = img.shape
    image_fft = np.fft.fft2(img)
    theta_sigma = math.pi / norient / d_theta_on_sigma

    x, y = _freq_grid(rows, cols)
    radius = np.fft.ifftshift(np.sqrt(x * x + y * y))
    theta = np.fft.ifftshift(np.arctan2(-y, x))
    radius[0, 0] = 1.0
    sin_t, cos_t = np.sin(theta), np.cos(theta)
    lp = _lowpass(rows, cols)

    log_gabor = []
    for s in range(nscale):
        fo = 1.0 / (min_wavelength * mult**s)
        lg = np.exp(-(np.log(radius / fo) ** 2) / (2 * math.log(sigma_onf) ** 2)) * lp
        lg[0, 0] = 0.0
        log_gabor.append(lg)

    energy_all = np.zeros((rows, cols))
    an_all = np.zeros((rows, cols))
    for o in range(norient):
        angle = o * math.pi / norient
        ds = sin_t * math.cos(angle) - cos_t * math.sin(angle)
        dc = cos_t * math.cos(angle) + sin_t * math.sin(angle)
        spread = np.exp(-(np.abs(np.arctan2(ds, dc)) ** 2) / (2 * theta_sigma**2))

        eo, ifft_filters = [], []
        for s in range(nscale):
            filt = log_gabor[s] * spread
            ifft_filters.append(np.real(np.fft.ifft2(filt)) * math.sqrt(rows * cols))
            eo.append(np.fft.ifft2(image_fft * filt))
            if s == 0:
                em_n = float(np.sum(filt * filt))
        sum_e = np.sum([r.real for r in eo], axis=0)
        sum_o = np.sum([r.imag for r in eo], axis=0)
        sum_an = np.sum([np.abs(r) for r in eo], axis=0)
        x_energy = np.sqrt(sum_e**2 + sum_o**2) + epsilon
        mean_e, mean_o = sum_e / x_energy, sum_o / x_energy
        energy = np.zeros((rows, cols))
        for r in eo:
            e, od = r.real, r.imag
            energy += e * mean_e + od * mean_o - np.abs(e * mean_o - od * mean_e)

        # noise energy estimated from the smallest scale (Rayleigh model)
        median_e2n = float(np.median(np.abs(eo[0]) ** 2))
        noise_power = (-median_e2n / math.log(0.5)) / em_n
        sum_an2 = float(np.sum(np.sum(np.square(ifft_filters), axis=0)))
        sum_ai_aj = 0.0
        for si in range(nscale - 1):
            for sj in range(si + 1, nscale):
                sum_ai_aj += float(np.sum(ifft_filters[si] * ifft_filters[sj]))
        tau = math.sqrt((2 * noise_power * sum_an2 + 4 * noise_power * sum_ai_aj) / 2)
        threshold = (tau * math.sqrt(math.pi / 2) + k * math.sqrt((2 - math.pi / 2) * tau * tau)) / 1.7

        energy_all += np.maximum(energy - threshold, 0.0)
        an_all += sum_an
    return energy_all / (an_all + np.finfo(np.float64).eps)


SCHARR_X = np.array([[3.0, 0.0, -3.0], [10.0, 0.0, -10.0], [3.0, 0.0, -3.0]]) / 16.0


def gradient_magnitude(img: np.ndarray) -> np.ndarray:
    gx = convolve2d(img, SCHARR_X, mode="same")
    gy = convolve2d(img, SCHARR_X.T, mode="same")
    return np.sqrt(gx * gx + gy * gy)


def _similarity(a: np.ndarray, b: np.ndarray, c: float) -> np.ndarray:
    return (2 * a * b + c) / (a * a + b * b + c)


@dataclass
class FsimIntermediate:
    pc_max: np.ndarray
    s_l: np.ndarray
    score: float


def fsim_details(x, y, max_val: float = 1.0) -> FsimIntermediate:
    a = to_gray(x) * (255.0 / max_val)
    b = to_gray(y) * (255.0 / max_val)
    _same_shape(a, b)
    if min(a.shape) < FSIM_MIN_SIZE:
        raise DimensionError(f"FSIM needs at least {FSIM_MIN_SIZE}x{FSIM_MIN_SIZE} pixels, got {a.shape}")
    f = max(1, round(min(a.shape) / 256))
    if f > 1:
        box = np.ones((f, f)) / (f * f)
        a = convolve2d(a, box, mode="same")[::f, ::f]
        b = convolve2d(b, box, mode="same")[::f, ::f]
    pc_a, pc_b = phase_congruency(a), phase_congruency(b)
    s_l = _similarity(pc_a, pc_b, FSIM_T1) * _similarity(gradient_magnitude(a), gradient_magnitude(b), FSIM_T2)
    pc_max = np.maximum(pc_a, pc_b)
    total = float(np.sum(pc_max))
    # featureless images carry no phase congruency weight: fall back to the plain mean
    score = float(np.sum(s_l * pc_max)) / total if total > 0 else float(np.mean(s_l))
    return FsimIntermediate(pc_max, s_l, score)


def fsim(x, y, max_val: float = 1.0) -> float:
    return fsim_details(x, y, max_val).score


# --------------------------------------------------------------------------
# reports
# --------------------------------------------------------------------------

CSV_HEADER = ("image", "psnr_db", "ssim", "fsim")


@dataclass(frozen=True)
class MetricRow:
    image: str
    psnr_db: float
    ssim: float
    fsim: float


@dataclass
class MetricReport:
    rows: list
    cap: float = PSNR_CAP
    capped: list = field(default_factory=list)

    @property
    def mpsnr(self) -> float:
        return float(np.mean([r.psnr_db for r in self.rows]))

    @property
    def mssim(self) -> float:
        return float(np.mean([r.ssim for r in self.rows]))

    @property
    def mfsim(self) -> float:
        return float(np.mean([r.fsim for r in self.rows]))

    def means(self) -> tuple[float, float, float]:
        return self.mpsnr, self.mssim, self.mfsim

    def __len__(self) -> int:
        return len(self.rows)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_HEADER)
            for r in self.rows:
                w.writerow([r.image, repr(r.psnr_db), repr(r.ssim), repr(r.fsim)])
            w.writerow(["mean", *(repr(v) for v in self.means())])

    @classmethod
    def from_csv(cls, path, cap: float = PSNR_CAP) -> "MetricReport":
        with open(path, newline="", encoding="utf-8") as fh:
            records = list(csv.reader(fh))
        if not records or tuple(records[0]) != CSV_HEADER:
            raise FormatError(f"{path}: missing header {','.join(CSV_HEADER)}")
        body = records[1:]
        if body and body[-1][0] == "mean":
            body = body[:-1]
        try:
            rows = [MetricRow(r[0], float(r[1]), float(r[2]), float(r[3])) for r in body]
        except (IndexError, ValueError) as exc:
            raise FormatError(f"{path}: malformed row: {exc}") from exc
        return aggregate(rows, cap)


def aggregate(rows, cap: float = PSNR_CAP) -> MetricReport:
    """Collect rows into a report; infinite PSNR values count as ``cap``
    and the affected images are listed in ``report.capped``."""
    rows = list(rows)
    if not rows:
        raise ConfigError("cannot aggregate an empty set of metric rows")
    out, capped = [], []
    for r in rows:
        if r.psnr_db >= cap:
            capped.append(r.image)
            r = MetricRow(r.image, cap, r.ssim, r.fsim)
        out.append(r)
    return MetricReport(out, cap, capped)


def evaluate_pair(image_id: str, estimate, reference, max_val: float = 1.0) -> MetricRow:
    return MetricRow(
        image_id,
        psnr(estimate, reference, max_val),
        ssim(estimate, reference, max_val),
        fsim(estimate, reference, max_val),
    )
