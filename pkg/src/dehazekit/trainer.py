"""Training loop, optimizers, evaluation harness and the attention ablation.

Training minimizes the residual loss on the refined residual ``R`` (or on
``R'`` for the residual-only variant).  Runs are bit-reproducible for a fixed
seed, precision and single-threaded BLAS.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from . import autograd as ag
from .attention import ABLATIONS, EncoderConfig, dhformer_forward, init_model
from .backbone import ArchConfig, loss_residual
from .dataset import DatasetManifest, HazePair, iterate_pairs, load_pair
from .errors import ConfigError, ContractError, TrainingDivergence
from .inference import infer_tiled
from .metrics import MetricReport, MetricRow, aggregate, evaluate_pair, psnr
from .nn import ModelParams
from .scattering import ratio_image, recompose, residual_target

OPTIMIZERS = ("sgd", "adam")
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 150
    batch_size: int = 16
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    seed: int = 0
    precision: str = "float32"
    ablation: str = "full"
    augment: bool = True
    shuffle: bool = True
    val_fraction: float = 0.1

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}")
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"ablation must be one of {ABLATIONS}")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError("val_fraction must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()


# --------------------------------------------------------------------------
# optimizers
# --------------------------------------------------------------------------


@dataclass
class OptimizerState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def optimizer_step(
    params: ModelParams,
    grads: Optional[dict],
    state: OptimizerState,
    kind: str = "adam",
    lr: float = 1e-3,
) -> None:
    """Update every parameter in place.

    ``grads`` maps names to arrays; ``None`` reads each tensor's ``.grad``.
    """
    if kind not in OPTIMIZERS:
        raise ConfigError(f"unknown optimizer {kind!r}")
    if grads is None:
        grads = {n: t.grad for n, t in params.params.items()}
    missing = [n for n in params.params if grads.get(n) is None]
    if missing:
        raise ContractError(f"no gradient for parameter(s) {missing[:5]}")
    state.step += 1
    if kind == "sgd":
        for name, t in params.params.items():
            t.data = t.data - lr * grads[name]
        return
    b1, b2 = ADAM_BETAS
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, t in params.params.items():
        g = grads[name]
        m = state.m.get(name, 0.0) * b1 + (1.0 - b1) * g
        v = state.v.get(name, 0.0) * b2 + (1.0 - b2) * (g * g)
        state.m[name], state.v[name] = m, v
        t.data = (t.data - lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)).astype(t.data.dtype)


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class LossRecord:
    step: int
    epoch: int
    loss: float


@dataclass
class LossHistory:
    records: list = field(default_factory=list)
    val_losses: list = field(default_factory=list)
    best_val_loss: Optional[float] = None

    @property
    def losses(self) -> list:
        return [r.loss for r in self.records]

    def __len__(self) -> int:
        return len(self.records)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "epoch", "loss"])
            for r in self.records:
                w.writerow([r.step, r.epoch, repr(r.loss)])

    def digest(self) -> str:
        text = "\n".join(f"{r.step},{r.epoch},{r.loss!r}" for r in self.records)
        return hashlib.sha256(text.encode("utf-8")).hexdigest()


def batch_loss(
    hazy: np.ndarray,
    clear: np.ndarray,
    params: ModelParams,
    arch: ArchConfig,
    enc: EncoderConfig,
    ablation: str,
) -> ag.Tensor:
    _, diag = dhformer_forward(ag.tensor(hazy), params, arch, enc, ablation)
    return loss_residual(diag["R"], diag["K"], clear)


def split_validation(pairs: list, fraction: float, seed: int) -> tuple[list, list]:
    """Hold out ``round(fraction * n)`` pairs, only when ``n >= 10``."""
    n = len(pairs)
    n_val = int(round(fraction * n)) if n >= 10 else 0
    if n_val == 0:
        return list(pairs), []
    order = np.random.default_rng([seed, 99]).permutation(n)
    val = set(order[:n_val].tolist())
    return [p for i, p in enumerate(pairs) if i not in val], [pairs[i] for i in sorted(val)]


def _guard(value: float, step: int, what: str) -> None:
    if not math.isfinite(value):
        raise TrainingDivergence(f"{what} became {value} at batch {step}", step)


def train(
    data,
    cfg: TrainConfig = TrainConfig(),
    arch: ArchConfig = ArchConfig(),
    enc: EncoderConfig = EncoderConfig(),
    params: Optional[ModelParams] = None,
    on_step: Optional[Callable[[LossRecord], None]] = None,
) -> tuple[ModelParams, LossHistory]:
    """Train on a manifest's train split, or on an explicit list of pairs.

    A validation holdout (``cfg.val_fraction``) is evaluated after every
    epoch purely as a divergence guard; it never stops training early.
    """
    if isinstance(data, DatasetManifest):
        entries = data.split("train")
        if not entries:
            raise ConfigError("manifest train split is empty")
        pairs = [load_pair(data, e, size=arch.input_size) for e in entries]
    else:
        pairs = list(data)
        if not pairs:
            raise ConfigError("no training pairs")
    train_pairs, val_pairs = split_validation(pairs, cfg.val_fraction, cfg.seed)
    history = LossHistory()
    with ag.precision(cfg.precision):
        if params is None:
            params = init_model(arch, enc, cfg.seed, cfg.ablation)
        else:
            params = params.astype(ag.get_dtype())
        state = OptimizerState()
        step = 0
        for epoch in range(cfg.epochs):
            params.train()
            for hazy, clear, _ in iterate_pairs(
                train_pairs, cfg.batch_size, cfg.shuffle, cfg.seed, epoch, cfg.augment, arch.input_size
            ):
                params.zero_grad()
                loss = batch_loss(hazy, clear, params, arch, enc, cfg.ablation)
                value = loss.item()
                _guard(value, step, "loss")
                ag.backward(loss)
                optimizer_step(params, None, state, cfg.optimizer, cfg.learning_rate)
                record = LossRecord(step, epoch, value)
                history.records.append(record)
                if on_step is not None:
                    on_step(record)
                step += 1
            if val_pairs:
                params.eval()
                hazy, clear, _ = next(iterate_pairs(val_pairs, len(val_pairs), False, cfg.seed))
                val = batch_loss(hazy, clear, params, arch, enc, cfg.ablation).item()
                _guard(val, step - 1, "validation loss")
                history.val_losses.append(val)
                if history.best_val_loss is None or val < history.best_val_loss:
                    history.best_val_loss = val
        params.zero_grad()
        params.eval()
    return params, history


# --------------------------------------------------------------------------
# dehazers and evaluation
# --------------------------------------------------------------------------

Dehazer = Callable[[HazePair], np.ndarray]


def oracle_dehazer(pair: HazePair) -> np.ndarray:
    """Uses the true transmission and the analytic residual ``u``."""
    K = ratio_image(pair.hazy, pair.transmission)
    R = residual_target(pair.transmission, pair.params.A, pair.hazy.shape[1])
    return recompose(K, R)


def identity_dehazer(pair: HazePair) -> np.ndarray:
    """``t = 1`` and ``R = 0``: returns the hazy input."""
    return recompose(ratio_image(pair.hazy, np.ones_like(pair.transmission)), np.zeros_like(pair.hazy))


def network_dehazer(
    params: ModelParams,
    arch: ArchConfig = ArchConfig(),
    enc: EncoderConfig = EncoderConfig(),
    ablation: Optional[str] = None,
    overlap: int = 4,
) -> Dehazer:
    def run(pair: HazePair) -> np.ndarray:
        return infer_tiled(pair.hazy, params, arch, enc, arch.input_size, overlap, ablation)

    return run


def evaluate_pairs(pairs: Sequence[HazePair], ids: Sequence[str], dehazer: Dehazer) -> MetricReport:
    return aggregate(evaluate_pair(i, dehazer(p), p.clear) for i, p in zip(ids, pairs))


def load_test_split(manifest: DatasetManifest, split: str = "test") -> tuple[list, list]:
    entries = manifest.split(split)
    if not entries:
        raise ConfigError(f"manifest has no {split!r} records")
    for e in entries:
        if not manifest.resolve(e.clear).is_file():
            raise ConfigError(f"missing ground truth {e.clear}")
    return [load_pair(manifest, e, size=None) for e in entries], [e.clear for e in entries]


def evaluate(
    params: Optional[ModelParams],
    manifest: DatasetManifest,
    arch: ArchConfig = ArchConfig(),
    enc: EncoderConfig = EncoderConfig(),
    ablation: Optional[str] = None,
    dehazer: Optional[Dehazer] = None,
    split: str = "test",
) -> MetricReport:
    """Dehaze each test image at native resolution and score it against its
    clear image.  ``dehazer`` overrides the network (oracle, identity)."""
    pairs, ids = load_test_split(manifest, split)
    if dehazer is None:
        if params is None:
            raise ConfigError("either params or a dehazer is required")
        dehazer = network_dehazer(params, arch, enc, ablation)
    return evaluate_pairs(pairs, ids, dehazer)


# --------------------------------------------------------------------------
# overfit probe and ablation
# --------------------------------------------------------------------------

PROBE_CONFIG = TrainConfig(
    epochs=500, batch_size=8, learning_rate=1e-3, augment=False, shuffle=False, val_fraction=0.0
)


@dataclass
class ProbeResult:
    params: ModelParams
    history: LossHistory
    psnr_hazy: float
    psnr_dehazed: float

    @property
    def loss_ratio(self) -> float:
        return self.history.losses[-1] / self.history.losses[0]


def probe_pairs(manifest: DatasetManifest, count: int = 8, size: int = 16) -> list:
    entries = manifest.split("train")[:count]
    if len(entries) < count:
        raise ConfigError(f"need {count} train records, manifest has {len(entries)}")
    return [load_pair(manifest, e, size=size) for e in entries]


def _mean_psnr(estimate: np.ndarray, clear: np.ndarray) -> float:
    return float(np.mean([psnr(e, c) for e, c in zip(estimate, clear)]))


def overfit_probe(
    pairs: list,
    cfg: TrainConfig = PROBE_CONFIG,
    arch: ArchConfig = ArchConfig(),
    enc: EncoderConfig = EncoderConfig(),
) -> ProbeResult:
    """Fit a handful of pairs and score them in evaluation mode."""
    params, history = train(pairs, cfg, arch, enc)
    hazy, clear, _ = next(iterate_pairs(pairs, len(pairs), False, cfg.seed))
    with ag.precision(cfg.precision):
        J, _ = dhformer_forward(ag.tensor(hazy), params.eval(), arch, enc, cfg.ablation)
    return ProbeResult(params, history, _mean_psnr(hazy, clear), _mean_psnr(J.data, clear))


def percent_delta(full: float, residual: float) -> float:
    return 100.0 * (full - residual) / residual


@dataclass
class AblationResult:
    """Per-seed outcomes for both variants.

    ``*_fit_psnr`` is the mean PSNR on the training pairs themselves (the
    overfit setting); ``*_reports`` score the held-out pairs with all three
    metrics.
    """

    seeds: tuple
    full_fit_psnr: list
    residual_fit_psnr: list
    full_reports: list
    residual_reports: list

    def means(self, variant: str) -> dict:
        full = variant == "full"
        reports = self.full_reports if full else self.residual_reports
        return {
            "fit_psnr": float(np.mean(self.full_fit_psnr if full else self.residual_fit_psnr)),
            "psnr": float(np.mean([r.mpsnr for r in reports])),
            "ssim": float(np.mean([r.mssim for r in reports])),
            "fsim": float(np.mean([r.mfsim for r in reports])),
        }

    def deltas(self) -> dict:
        f, r = self.means("full"), self.means("residual_only")
        return {k: percent_delta(f[k], r[k]) for k in f}

    def summary_rows(self) -> list:
        f, r, d = self.means("full"), self.means("residual_only"), self.deltas()
        keys = ("fit_psnr", "psnr", "ssim", "fsim")
        return [
            ("full", *(f[k] for k in keys)),
            ("residual_only", *(r[k] for k in keys)),
            ("delta_percent", *(d[k] for k in keys)),
        ]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["variant", "fit_psnr_db", "mpsnr_db", "mssim", "mfsim"])
            for row in self.summary_rows():
                w.writerow([row[0], *(repr(float(v)) for v in row[1:])])

    def mean_report(self, variant: str) -> MetricReport:
        """Per-image metrics averaged over seeds, in the report CSV shape."""
        reports = self.full_reports if variant == "full" else self.residual_reports
        rows = [
            MetricRow(
                rows[0].image,
                float(np.mean([r.psnr_db for r in rows])),
                float(np.mean([r.ssim for r in rows])),
                float(np.mean([r.fsim for r in rows])),
            )
            for rows in zip(*(rep.rows for rep in reports))
        ]
        return aggregate(rows, reports[0].cap)


def ablation_compare(
    pairs: list,
    eval_pairs: list,
    eval_ids: list,
    cfg: TrainConfig = PROBE_CONFIG,
    arch: ArchConfig = ArchConfig(),
    enc: EncoderConfig = EncoderConfig(),
    seeds: Sequence[int] = (0, 1, 2),
) -> AblationResult:
    """Train both variants on the same pairs and seeds, then score them.

    Both variants share backbone initial weights for a given seed, so the
    only difference is the attention module.
    """
    fit = {v: [] for v in ABLATIONS}
    reports = {v: [] for v in ABLATIONS}
    hazy, clear, _ = next(iterate_pairs(pairs, len(pairs), False, 0))
    for seed in seeds:
        for variant in ABLATIONS:
            run_cfg = replace(cfg, seed=seed, ablation=variant)
            params, _ = train(pairs, run_cfg, arch, enc)
            with ag.precision(run_cfg.precision):
                J, _ = dhformer_forward(ag.tensor(hazy), params.eval(), arch, enc, variant)
                fit[variant].append(_mean_psnr(J.data, clear))
                reports[variant].append(evaluate_pairs(eval_pairs, eval_ids, network_dehazer(params, arch, enc, variant)))
    return AblationResult(
        tuple(seeds), fit["full"], fit["residual_only"], reports["full"], reports["residual_only"]
    )
