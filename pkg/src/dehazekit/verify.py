"""Self-check suites run by ``dehazekit verify``.

Each suite returns a list of :class:`Check` results; :func:`run_suites`
times every suite and :func:`format_table` renders the pass/fail table.
"""

from __future__ import annotations

import tempfile
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autograd as ag
from .attention import EncoderConfig, dhformer_forward, encoder_layer, init_model
from .backbone import ArchConfig, loss_residual
from .checkpoint import CheckpointMeta, checkpoint_bytes, parse_checkpoint
from .dataset import make_mini_dataset, read_manifest
from .inference import blend_weights
from .metrics import fsim, naive_ssim, psnr, ssim
from .nn import ModelParams
from .scattering import ratio_image, residual_target, synthesize_haze, transmission_from_depth

GRAD_TOL = 1e-4
MINI_ARCH = ArchConfig(input_size=8, trans_channels=8, slice_groups=2, trans_pool=3, residual_depth=4, residual_width=4)
MINI_ENC = EncoderConfig(patch_size=4, embed_dim=8, n_layers=1, heads=1, global_count=4)


@dataclass(frozen=True)
class Check:
    name: str
    passed: bool
    detail: str = ""


@dataclass(frozen=True)
class SuiteResult:
    suite: str
    checks: tuple
    seconds: float

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)


# --------------------------------------------------------------------------
# gradients
# --------------------------------------------------------------------------


def _scalarize(y: ag.Tensor, seed: int = 7) -> ag.Tensor:
    """Weighted sum with fixed random weights, so every output coordinate
    contributes a distinct amount."""
    w = np.random.default_rng(seed).normal(size=y.shape)
    return ag.sum(y * ag.tensor(w))


def _away_from(x: np.ndarray, points, gap: float = 1e-2) -> np.ndarray:
    """Push values off the kinks of piecewise-linear ops."""
    for p in points:
        near = np.abs(x - p) < gap
        x = np.where(near, p + np.sign(x - p + 1e-300) * gap * 2, x)
    return x


def primitive_cases(rng: np.random.Generator) -> dict:
    """Name -> (function of the inputs, list of input arrays)."""

    def r(*shape):
        return rng.normal(size=shape)

    def distinct(*shape):
        # well separated values so max/argmax choices are stable under eps
        return rng.permutation(np.arange(np.prod(shape), dtype=np.float64)).reshape(shape) * 0.1

    bn_running = {"mean": np.zeros(3), "var": np.ones(3)}
    return {
        "add": (lambda a, b: a + b, [r(2, 3), r(3)]),
        "sub": (lambda a, b: a - b, [r(2, 3), r(2, 1)]),
        "mul": (lambda a, b: a * b, [r(2, 3), r(2, 3)]),
        "div": (lambda a, b: a / b, [r(2, 3), rng.uniform(0.5, 2.0, (2, 3))]),
        "maximum": (ag.maximum, [distinct(2, 3), distinct(2, 3) + 0.05]),
        "clip": (lambda x: ag.clip(x, -0.5, 0.5), [_away_from(r(3, 4), (-0.5, 0.5))]),
        "sum": (lambda x: ag.sum(x, axis=1), [r(2, 3, 4)]),
        "mean": (lambda x: ag.mean(x, axis=(0, 2), keepdims=True), [r(2, 3, 4)]),
        "amax": (lambda x: ag.amax(x, axis=1), [distinct(2, 3, 2, 2)]),
        "matmul": (ag.matmul, [r(2, 3, 4), r(4, 5)]),
        "conv2d": (lambda x, w, b: ag.conv2d(x, w, b, stride=1, pad=1), [r(2, 2, 5, 5), r(3, 2, 3, 3), r(3)]),
        "conv2d_strided": (lambda x, w, b: ag.conv2d(x, w, b, stride=2, pad=0), [r(1, 2, 7, 7), r(2, 2, 3, 3), r(2)]),
        "patch_project": (ag.patch_project, [r(1, 3, 4, 4), r(5, 3, 2, 2), r(5)]),
        "max_pool": (lambda x: ag.pool2d(x, "max", 3, 1, 1), [distinct(1, 2, 4, 4)]),
        "avg_pool": (lambda x: ag.pool2d(x, "avg", 3, 2, 1), [r(1, 2, 5, 5)]),
        "relu": (ag.relu, [_away_from(r(3, 4), (0.0,))]),
        "sigmoid": (ag.sigmoid, [r(3, 4)]),
        "softmax": (lambda x: ag.softmax(x, axis=-1), [r(2, 5)]),
        "layernorm": (
            lambda x, g, b: ag.normalize(x, "layernorm", (g, b)),
            [r(2, 3, 6), r(6), r(6)],
        ),
        "batchnorm2d": (
            lambda x, g, b: ag.normalize(
                x, "batchnorm2d", (g, b), running={k: v.copy() for k, v in bn_running.items()}, training=True
            ),
            [r(4, 3, 2, 2), r(3), r(3)],
        ),
        "reshape": (lambda x: ag.reshape(x, (4, 6)), [r(2, 3, 4)]),
        "transpose": (lambda x: ag.transpose(x, (2, 0, 1)), [r(2, 3, 4)]),
        "concat": (lambda a, b: ag.concat([a, b], axis=1), [r(2, 2, 3), r(2, 1, 3)]),
        "slice": (lambda x: ag.slice_axis(x, 1, 1, 3), [r(2, 4, 3)]),
        "upsample_bilinear": (lambda x: ag.upsample_bilinear(x, (7, 5)), [r(1, 2, 3, 4)]),
    }


def check_primitive(name: str, fn: Callable, inputs: list, eps: float = 1e-6) -> float:
    """Worst relative error over all inputs of one primitive."""
    tensors = [ag.tensor(a) for a in inputs]
    worst = 0.0
    for i, t in enumerate(tensors):

        def f(x, i=i):
            args = list(tensors)
            args[i] = x
            return _scalarize(fn(*args))

        worst = max(worst, ag.grad_check(f, t, eps=eps))
    return worst


def randomize(params: ModelParams, rng: np.random.Generator, scale: float = 0.3) -> ModelParams:
    """Perturb every parameter so no gradient vanishes by construction
    (zero-initialized gates, identity fuse taps)."""
    for t in params.params.values():
        t.data = (t.data + rng.normal(0.0, scale, size=t.shape)).astype(t.data.dtype)
    return params


def model_grad_errors(per_tensor: int = 4, seed: int = 0) -> dict:
    """Worst relative error per parameter tensor of the full loss on the
    minimal 8x8 configuration (double precision)."""
    rng = np.random.default_rng(seed)
    with ag.precision("float64"):
        params = randomize(init_model(MINI_ARCH, MINI_ENC, seed), rng)
        I = rng.uniform(0.1, 0.9, (2, 3, 8, 8))
        J = rng.uniform(0.0, 1.0, (2, 3, 8, 8))

        def loss(_):
            _, diag = dhformer_forward(I, params, MINI_ARCH, MINI_ENC)
            return loss_residual(diag["R"], diag["K"], J)

        out = {}
        for name, t in params.params.items():
            idx = [tuple(int(rng.integers(0, s)) for s in t.shape) for _ in range(per_tensor)]
            out[name] = ag.grad_check(loss, t, eps=1e-6, indices=idx)
    return out


def suite_gradients() -> list:
    checks = []
    rng = np.random.default_rng(0)
    with ag.precision("float64"):
        for name, (fn, inputs) in primitive_cases(rng).items():
            err = check_primitive(name, fn, inputs)
            checks.append(Check(f"grad:{name}", err <= GRAD_TOL, f"rel err {err:.2e}"))
    errs = model_grad_errors()
    worst = max(errs, key=errs.get)
    checks.append(Check("grad:dhformer_loss", errs[worst] <= GRAD_TOL, f"worst {worst} {errs[worst]:.2e}"))
    return checks


# --------------------------------------------------------------------------
# scattering
# --------------------------------------------------------------------------


def scattering_draw(rng: np.random.Generator, size: int = 8) -> tuple:
    J = rng.uniform(0.0, 1.0, (1, 3, size, size))
    d = rng.uniform(0.0, 1.0, (1, 1, size, size))
    A = float(rng.uniform(0.7, 1.0))
    beta = float(rng.uniform(0.4, 1.6))
    return J, d, A, beta


def suite_scattering(draws: int = 100) -> list:
    rng = np.random.default_rng(1)
    worst, monotone, clamped = 0.0, True, False
    for _ in range(draws):
        J, d, A, beta = scattering_draw(rng)
        t = transmission_from_depth(d, beta)
        clamped |= bool(np.any(np.exp(-beta * d) < 0.05))
        I = synthesize_haze(J, t, A)
        J_rec = ratio_image(I, t) - residual_target(t, A)
        worst = max(worst, float(np.max(np.abs(J_rec - J))))
        t_hi = transmission_from_depth(d, beta * 1.5)
        monotone &= bool(np.all(t_hi <= t))
    return [
        Check("scatter:recover_J", worst <= 1e-12 and not clamped, f"max abs err {worst:.2e}"),
        Check("scatter:t_monotone_in_beta", monotone),
    ]


# --------------------------------------------------------------------------
# metrics
# --------------------------------------------------------------------------


def suite_metrics(images: int = 20) -> list:
    rng = np.random.default_rng(2)
    s_err = f_err = 0.0
    for _ in range(images):
        x = rng.uniform(0.0, 1.0, (3, 32, 32))
        s_err = max(s_err, abs(ssim(x, x) - 1.0))
        f_err = max(f_err, abs(fsim(x, x) - 1.0))
    base = np.clip(rng.uniform(0.2, 0.8, (3, 32, 32)), 0, 1)
    noise = rng.normal(size=base.shape)
    values = [psnr(base + s * noise, base) for s in (0.01, 0.02, 0.05, 0.1, 0.2)]
    decreasing = all(a > b for a, b in zip(values, values[1:]))
    ramp = np.tile(np.linspace(0, 1, 16), (16, 1))
    noisy = ramp + np.random.default_rng(3).normal(0, 0.05, ramp.shape)
    o_err = abs(ssim(ramp, noisy) - naive_ssim(ramp, noisy))
    return [
        Check("metric:ssim_self", s_err <= 1e-9, f"max |ssim-1| {s_err:.1e}"),
        Check("metric:fsim_self", f_err <= 1e-9, f"max |fsim-1| {f_err:.1e}"),
        Check("metric:psnr_decreasing", decreasing, ", ".join(f"{v:.2f}" for v in values)),
        Check("metric:ssim_vs_naive", o_err <= 1e-10, f"abs diff {o_err:.1e}"),
    ]


# --------------------------------------------------------------------------
# transformer
# --------------------------------------------------------------------------


def suite_transformer() -> list:
    rng = np.random.default_rng(4)
    enc = EncoderConfig()
    arch = ArchConfig()
    with ag.precision("float64"):
        params = randomize(init_model(arch, enc, 4), rng, 0.1)
        T = ag.tensor(rng.normal(size=(2, 16, enc.embed_dim)))
        g = ag.tensor(rng.normal(size=(2, enc.global_count, enc.embed_dim)))

        zeroed = params.copy()
        for name in ("attn.enc0.proj.w", "attn.enc0.proj.b", "attn.enc0.fc2.w", "attn.enc0.fc2.b"):
            zeroed[name].data[...] = 0.0
        ident = encoder_layer(T, zeroed, "attn.enc0", enc, g)
        identity_ok = bool(np.array_equal(ident.data, T.data))

        perm = rng.permutation(16)
        out = encoder_layer(T, params, "attn.enc0", enc)
        out_p = encoder_layer(ag.tensor(T.data[:, perm]), params, "attn.enc0", enc)
        perm_err = float(np.max(np.abs(out.data[:, perm] - out_p.data)))

        log: list = []
        I = rng.uniform(0.1, 0.9, (2, 3, 16, 16))
        dhformer_forward(I, params, arch, enc, attn_log=log)
        row_err = max(float(np.max(np.abs(w.sum(axis=-1) - 1.0))) for w in log)
    return [
        Check("attn:zero_update_identity", identity_ok),
        Check("attn:permutation_equivariance", perm_err <= 1e-6, f"max abs diff {perm_err:.1e}"),
        Check("attn:rows_sum_to_one", row_err <= 1e-9, f"max abs dev {row_err:.1e}"),
    ]


# --------------------------------------------------------------------------
# oracle evaluation, checkpoint and tiling
# --------------------------------------------------------------------------


def suite_oracle() -> list:
    from .trainer import evaluate, oracle_dehazer

    with tempfile.TemporaryDirectory() as tmp:
        manifest = read_manifest(make_mini_dataset(tmp))
        report = evaluate(None, manifest, dehazer=oracle_dehazer)
    return [Check("eval:oracle_mpsnr", report.mpsnr >= 60.0, f"MPSNR {report.mpsnr:.2f} dB")]


def suite_checkpoint() -> list:
    from .inference import infer_tiled

    with ag.precision("float32"):
        params = init_model(MINI_ARCH, MINI_ENC, 5).eval()
        meta = CheckpointMeta(MINI_ARCH, MINI_ENC, "full", "", 3, 0.25)
        blob = checkpoint_bytes(params, meta)
        loaded = parse_checkpoint(blob)
        again = checkpoint_bytes(loaded.params, loaded.meta)
        x = np.random.default_rng(6).uniform(0, 1, (1, 3, 12, 10))
        a = infer_tiled(x, params, MINI_ARCH, MINI_ENC, 8, 2)
        b = infer_tiled(x, loaded.params, MINI_ARCH, MINI_ENC, 8, 2)
    worst = 0.0
    for h, w in ((16, 16), (37, 23), (64, 48), (29, 100)):
        tiles, _ = blend_weights(h, w, 16, 4)
        total = np.zeros((h, w))
        for top, left, wt in tiles:
            total[top : top + 16, left : left + 16] += wt
        worst = max(worst, float(np.max(np.abs(total - 1.0))))
    return [
        Check("ckpt:byte_identical", blob == again, f"{len(blob)} bytes"),
        Check("ckpt:eval_equal", bool(np.array_equal(a, b))),
        Check("tile:weights_sum_to_one", worst <= 1e-9, f"max abs dev {worst:.1e}"),
    ]


SUITES: dict = {
    "gradients": suite_gradients,
    "scattering": suite_scattering,
    "metrics": suite_metrics,
    "transformer": suite_transformer,
    "oracle": suite_oracle,
    "checkpoint": suite_checkpoint,
}


def run_suites(names=None) -> list:
    results = []
    for name in names or SUITES:
        start = time.perf_counter()
        try:
            checks = tuple(SUITES[name]())
        except Exception as exc:  # a crashing suite is a failing suite
            checks = (Check(f"{name}:error", False, f"{type(exc).__name__}: {exc}"),)
        results.append(SuiteResult(name, checks, time.perf_counter() - start))
    return results


def format_table(results: list) -> str:
    width = max((len(c.name) for r in results for c in r.checks), default=10)
    lines = []
    for r in results:
        lines.append(f"[{'PASS' if r.passed else 'FAIL'}] suite {r.suite} ({r.seconds:.2f} s)")
        for c in r.checks:
            lines.append(f"  {'PASS' if c.passed else 'FAIL'}  {c.name:<{width}}  {c.detail}")
    return "\n".join(lines)


def failures(results: list) -> list:
    return [c.name for r in results for c in r.checks if not c.passed]

