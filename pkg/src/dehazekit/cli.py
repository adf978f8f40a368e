"""Command-line entry point.

Exit codes: 0 success, 1 verification failure, 2 input or configuration
error, 3 training divergence, 4 checkpoint/architecture mismatch.

Every subcommand accepts ``--config FILE`` with ``key = value`` lines (keys
are the long flag names, dashes or underscores; ``#`` starts a comment).
Flags given on the command line override file values.  The fully resolved
configuration is printed at the start of each run.
"""

from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

from . import autograd as ag
from .attention import ABLATIONS, EncoderConfig
from .backbone import ArchConfig
from .checkpoint import CheckpointMeta, load_checkpoint, save_checkpoint
from .dataset import (
    A_RANGE,
    BETA_RANGE,
    MINI_COUNT,
    MINI_SIZE,
    MINI_TEST,
    load_clear,
    load_pair,
    make_mini_dataset,
    read_manifest,
    save_rgb,
)
from .errors import CheckpointMismatch, ConfigError, DehazeError, TrainingDivergence
from .inference import infer_tiled
from .trainer import (
    PROBE_CONFIG,
    TrainConfig,
    ablation_compare,
    evaluate,
    identity_dehazer,
    load_test_split,
    network_dehazer,
    oracle_dehazer,
    probe_pairs,
    train,
)

EXIT_OK, EXIT_VERIFY, EXIT_INPUT, EXIT_DIVERGED, EXIT_MISMATCH = 0, 1, 2, 3, 4

# defaults live here rather than in argparse so that config-file values can
# be told apart from flags the user actually typed
DEFAULTS = {
    "mini-dataset": {"count": MINI_COUNT, "test": MINI_TEST, "size": MINI_SIZE, "seed": 0},
    "synth": {"seed": 0, "a_range": A_RANGE, "beta_range": BETA_RANGE},
    "train": {
        "ablation": "full",
        "epochs": None,
        "batch_size": TrainConfig.batch_size,
        "lr": TrainConfig.learning_rate,
        "optimizer": TrainConfig.optimizer,
        "seed": 0,
        "precision": TrainConfig.precision,
        "augment": True,
        "val_fraction": TrainConfig.val_fraction,
        "probe": False,
        "data_seed": 0,
    },
    "dehaze": {"overlap": 4},
    "eval": {"overlap": 4, "data_seed": 0, "oracle": False, "identity": False},
    "verify": {"suite": None},
    "ablate": {"seeds": (0, 1, 2), "epochs": PROBE_CONFIG.epochs, "pairs": 8, "data_seed": 0, "precision": "float32"},
}
REQUIRED = {
    "mini-dataset": ("out",),
    "synth": ("manifest", "out_dir"),
    "train": ("manifest", "out"),
    "dehaze": ("checkpoint", "input", "out"),
    "eval": ("manifest", "report"),
    "verify": (),
    "ablate": ("manifest", "out_dir"),
}


def _range(text: str) -> tuple:
    try:
        lo, hi = (float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected 'lo,hi', got {text!r}") from None
    if not lo <= hi:
        raise argparse.ArgumentTypeError(f"range {text!r} has lo > hi")
    return (lo, hi)


def _seeds(text: str) -> tuple:
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dehazekit", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def command(name: str, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", type=Path, help="file of 'key = value' lines; flags override it")
        return p

    def dflt(cmd: str, key: str) -> str:
        return f"(default: {DEFAULTS[cmd][key]})"

    p = command("mini-dataset", "write the procedural clear/depth mini-dataset and its manifest")
    p.add_argument("--out", type=Path, help="output directory")
    p.add_argument("--count", type=int, help=f"number of pairs {dflt('mini-dataset', 'count')}")
    p.add_argument("--test", type=int, help=f"pairs in the test split {dflt('mini-dataset', 'test')}")
    p.add_argument("--size", type=int, help=f"image side in pixels {dflt('mini-dataset', 'size')}")
    p.add_argument("--seed", type=int, help=f"scene seed {dflt('mini-dataset', 'seed')}")

    p = command("synth", "render hazy images for every manifest record plus a CSV of sampled (A, beta)")
    p.add_argument("--manifest", type=Path, help="manifest TSV")
    p.add_argument("--out-dir", type=Path, help="output directory")
    p.add_argument("--seed", type=int, help=f"sampling seed {dflt('synth', 'seed')}")
    p.add_argument("--a-range", type=_range, help="atmospheric light range 'lo,hi' (default: 0.7,1.0)")
    p.add_argument("--beta-range", type=_range, help="scattering coefficient range 'lo,hi' (default: 0.4,1.6)")

    p = command("train", "train a model and write a checkpoint, loss CSV and loss plot")
    p.add_argument("--manifest", type=Path, help="manifest TSV")
    p.add_argument("--out", type=Path, help="checkpoint path; the loss CSV and PNG are written beside it")
    p.add_argument("--ablation", choices=ABLATIONS, help=f"model variant {dflt('train', 'ablation')}")
    p.add_argument("--epochs", type=int, help="(default: 150, or 500 with --probe)")
    p.add_argument("--batch-size", type=int, help=f"{dflt('train', 'batch_size')}")
    p.add_argument("--lr", type=float, help=f"learning rate {dflt('train', 'lr')}")
    p.add_argument("--optimizer", choices=("adam", "sgd"), help=f"{dflt('train', 'optimizer')}")
    p.add_argument("--seed", type=int, help=f"initialization and shuffling seed {dflt('train', 'seed')}")
    p.add_argument("--precision", choices=("float32", "float64"), help=f"{dflt('train', 'precision')}")
    p.add_argument("--augment", type=_bool, help=f"random crop/flip/rotation {dflt('train', 'augment')}")
    p.add_argument("--val-fraction", type=float, help=f"divergence-guard holdout {dflt('train', 'val_fraction')}")
    p.add_argument("--data-seed", type=int, help=f"haze sampling seed {dflt('train', 'data_seed')}")
    p.add_argument(
        "--probe",
        action="store_true",
        default=None,
        help="overfit probe: first 8 train pairs as one batch, no augmentation, 500 steps unless --epochs",
    )

    p = command("dehaze", "dehaze an image or every image in a directory")
    p.add_argument("--checkpoint", type=Path, help="checkpoint file")
    p.add_argument("--input", type=Path, help="image file or directory")
    p.add_argument("--out", type=Path, help="output directory; files are named <stem>_dehazed.png")
    p.add_argument("--overlap", type=int, help=f"tile overlap in pixels {dflt('dehaze', 'overlap')}")
    p.add_argument("--expect-arch", help="comma-separated key=value architecture fields the checkpoint must match")

    p = command("eval", "score the test split and write the metric report CSV and plot")
    p.add_argument("--manifest", type=Path, help="manifest TSV")
    p.add_argument("--report", type=Path, help="output CSV path; the PNG is written beside it")
    p.add_argument("--checkpoint", type=Path, help="checkpoint file (omit with --oracle or --identity)")
    p.add_argument(
        "--oracle", action="store_true", default=None, help="use the true transmission and analytic residual"
    )
    p.add_argument("--identity", action="store_true", default=None, help="return the hazy input unchanged")
    p.add_argument("--overlap", type=int, help=f"tile overlap in pixels {dflt('eval', 'overlap')}")
    p.add_argument("--data-seed", type=int, help=f"haze sampling seed {dflt('eval', 'data_seed')}")
    p.add_argument("--expect-arch", help="comma-separated key=value architecture fields the checkpoint must match")

    p = command("verify", "run the self-check suites and print a pass/fail table")
    p.add_argument("--suite", action="append", help="run only this suite (repeatable; default: all)")

    p = command("ablate", "train full and residual-only models over several seeds and compare them")
    p.add_argument("--manifest", type=Path, help="manifest TSV")
    p.add_argument("--out-dir", type=Path, help="directory for the report CSVs and plots")
    p.add_argument("--seeds", type=_seeds, help="comma-separated seeds (default: 0,1,2)")
    p.add_argument("--epochs", type=int, help=f"steps per run (one batch per epoch) {dflt('ablate', 'epochs')}")
    p.add_argument("--pairs", type=int, help=f"training pairs {dflt('ablate', 'pairs')}")
    p.add_argument("--data-seed", type=int, help=f"haze sampling seed {dflt('ablate', 'data_seed')}")
    p.add_argument("--precision", choices=("float32", "float64"), help=f"{dflt('ablate', 'precision')}")
    return parser


# --------------------------------------------------------------------------
# config resolution
# --------------------------------------------------------------------------


def read_config_file(path: Path, parser: argparse.ArgumentParser) -> dict:
    """Parse ``key = value`` lines, converting values with the flag types."""
    actions = {a.dest: a for a in parser._actions if a.option_strings and a.dest not in ("help", "config")}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    values = {}
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip().replace("-", "_")
        if not sep:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        if key not in actions:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        action, value = actions[key], value.strip()
        convert = _bool if isinstance(action, argparse._StoreTrueAction) else action.type
        try:
            converted = convert(value) if convert is not None else value
        except (argparse.ArgumentTypeError, ValueError) as exc:
            raise ConfigError(f"{path}:{lineno}: bad value for {key}: {exc}") from exc
        if action.choices is not None and converted not in action.choices:
            raise ConfigError(f"{path}:{lineno}: {key} must be one of {list(action.choices)}")
        if isinstance(action, argparse._AppendAction):
            converted = values.get(key, []) + [converted]
        values[key] = converted
    return values


def resolve(args: argparse.Namespace, parser: argparse.ArgumentParser) -> dict:
    sub = parser._subparsers._group_actions[0].choices[args.command]
    file_values = read_config_file(args.config, sub) if args.config else {}
    resolved = dict(DEFAULTS[args.command])
    resolved.update(file_values)
    for key, value in vars(args).items():
        if key not in ("command", "config") and value is not None:
            resolved[key] = value
    for key in vars(args):
        resolved.setdefault(key, None)
    resolved.pop("command"), resolved.pop("config")
    if args.command == "train" and resolved["epochs"] is None:
        resolved["epochs"] = PROBE_CONFIG.epochs if resolved["probe"] else TrainConfig.epochs
    missing = [k for k in REQUIRED[args.command] if resolved.get(k) is None]
    if missing:
        raise ConfigError(f"{args.command}: missing required option(s) " + ", ".join("--" + m.replace("_", "-") for m in missing))
    return resolved


def print_config(command: str, cfg: dict) -> None:
    print(f"# dehazekit {command}")
    for key in sorted(cfg):
        value = cfg[key]
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        print(f"# {key} = {value}")


def _parse_arch(text: Optional[str]) -> Optional[dict]:
    if not text:
        return None
    fields = {}
    for item in text.split(","):
        key, sep, value = item.partition("=")
        if not sep or key.strip() not in ArchConfig.__dataclass_fields__:
            raise ConfigError(f"bad --expect-arch item {item!r}")
        ftype = type(getattr(ArchConfig(), key.strip()))
        fields[key.strip()] = ftype(value)
    return fields


def _load_model(path: Path, expect_arch: Optional[str]):
    if not Path(path).is_file():
        raise ConfigError(f"checkpoint not found: {path}")
    ckpt = load_checkpoint(path)
    wanted = _parse_arch(expect_arch)
    if wanted:
        expected = replace(ckpt.meta.arch, **wanted)
        if expected != ckpt.meta.arch:
            raise CheckpointMismatch(f"{path}: checkpoint architecture {ckpt.meta.arch} does not match {expected}")
    return ckpt


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_mini_dataset(cfg: dict) -> int:
    manifest = make_mini_dataset(cfg["out"], cfg["count"], cfg["test"], cfg["size"], cfg["seed"])
    print(f"wrote {cfg['count']} pairs and {manifest}")
    return EXIT_OK


def cmd_synth(cfg: dict) -> int:
    manifest = read_manifest(cfg["manifest"], seed=cfg["seed"])
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for entry in manifest.entries:
        pair = load_pair(manifest, entry, size=None, a_range=cfg["a_range"], beta_range=cfg["beta_range"])
        name = Path(entry.clear).stem + "_hazy.png"
        save_rgb(out / name, pair.hazy)
        rows.append((name, entry.clear, entry.split, repr(pair.params.A), repr(pair.params.beta)))
    with open(out / "haze_params.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["image", "clear", "split", "A", "beta"])
        w.writerows(rows)
    print(f"wrote {len(rows)} hazy images and {out / 'haze_params.csv'}")
    return EXIT_OK


def cmd_train(cfg: dict) -> int:
    from .plotting import figure_path, plot_loss_curve

    manifest = read_manifest(cfg["manifest"], seed=cfg["data_seed"])
    arch, enc = ArchConfig(), EncoderConfig()
    if cfg["probe"]:
        tcfg = replace(PROBE_CONFIG, seed=cfg["seed"], ablation=cfg["ablation"], precision=cfg["precision"])
        tcfg = replace(tcfg, epochs=cfg["epochs"])
        data = probe_pairs(manifest, 8, arch.input_size)
    else:
        tcfg = TrainConfig(
            epochs=cfg["epochs"],
            batch_size=cfg["batch_size"],
            learning_rate=cfg["lr"],
            optimizer=cfg["optimizer"],
            seed=cfg["seed"],
            precision=cfg["precision"],
            ablation=cfg["ablation"],
            augment=cfg["augment"],
            val_fraction=cfg["val_fraction"],
        )
        data = manifest
    params, history = train(data, tcfg, arch, enc)
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    meta = CheckpointMeta(arch, enc, tcfg.ablation, tcfg.digest(), tcfg.epochs, history.best_val_loss)
    save_checkpoint(params, meta, out)
    loss_csv = out.with_name(out.stem + "_loss.csv")
    history.to_csv(loss_csv)
    plot_loss_curve(history, figure_path(loss_csv))
    print(f"steps={len(history)} initial_loss={history.losses[0]!r} final_loss={history.losses[-1]!r}")
    print(f"loss_sha256={history.digest()}")
    print(f"wrote {out} ({params.count()} parameters) and {loss_csv}")
    return EXIT_OK


def _image_files(path: Path) -> list:
    if path.is_dir():
        return sorted(p for p in path.iterdir() if p.is_file())
    if not path.exists():
        raise ConfigError(f"input not found: {path}")
    return [path]


def cmd_dehaze(cfg: dict) -> int:
    ckpt = _load_model(cfg["checkpoint"], cfg["expect_arch"])
    arch, enc = ckpt.meta.arch, ckpt.meta.encoder
    src = Path(cfg["input"])
    files = _image_files(src)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    written = 0
    for f in files:
        try:
            img = load_clear(f)
            with ag.precision("float32"):
                J = infer_tiled(img, ckpt.params, arch, enc, arch.input_size, cfg["overlap"], ckpt.meta.ablation)
        except (OSError, DehazeError) as exc:
            if not src.is_dir():
                raise
            print(f"warning: skipping {f}: {exc}", file=sys.stderr)
            continue
        target = out / f"{f.stem}_dehazed.png"
        save_rgb(target, J)
        written += 1
        print(f"{f} -> {target}")
    print(f"dehazed {written} of {len(files)} file(s)")
    return EXIT_OK


def cmd_eval(cfg: dict) -> int:
    from .plotting import figure_path, plot_report

    manifest = read_manifest(cfg["manifest"], seed=cfg["data_seed"])
    if cfg["oracle"] and cfg["identity"]:
        raise ConfigError("--oracle and --identity are mutually exclusive")
    if cfg["oracle"]:
        report = evaluate(None, manifest, dehazer=oracle_dehazer)
    elif cfg["identity"]:
        report = evaluate(None, manifest, dehazer=identity_dehazer)
    else:
        if cfg["checkpoint"] is None:
            raise ConfigError("eval needs --checkpoint unless --oracle or --identity is given")
        ckpt = _load_model(cfg["checkpoint"], cfg["expect_arch"])
        with ag.precision("float32"):
            dehazer = network_dehazer(ckpt.params, ckpt.meta.arch, ckpt.meta.encoder, ckpt.meta.ablation, cfg["overlap"])
            report = evaluate(None, manifest, dehazer=dehazer)
    path = Path(cfg["report"])
    path.parent.mkdir(parents=True, exist_ok=True)
    report.to_csv(path)
    plot_report(report, figure_path(path))
    if report.capped:
        print(f"# psnr capped at {report.cap} dB for {len(report.capped)} image(s)")
    print("image,psnr_db,ssim,fsim")
    print(f"mean,{report.mpsnr!r},{report.mssim!r},{report.mfsim!r}")
    return EXIT_OK


def cmd_verify(cfg: dict) -> int:
    from .verify import SUITES, failures, format_table, run_suites

    names = cfg["suite"]
    unknown = [n for n in names or [] if n not in SUITES]
    if unknown:
        raise ConfigError(f"unknown suite(s) {unknown}; available: {', '.join(SUITES)}")
    results = run_suites(names)
    print(format_table(results))
    total = sum(r.seconds for r in results)
    failed = failures(results)
    if failed:
        print(f"FAILED ({total:.2f} s): " + ", ".join(failed))
        return EXIT_VERIFY
    print(f"all {sum(len(r.checks) for r in results)} checks passed ({total:.2f} s)")
    return EXIT_OK


def cmd_ablate(cfg: dict) -> int:
    from .plotting import figure_path, plot_ablation, plot_report

    manifest = read_manifest(cfg["manifest"], seed=cfg["data_seed"])
    arch, enc = ArchConfig(), EncoderConfig()
    pairs = probe_pairs(manifest, cfg["pairs"], arch.input_size)
    eval_pairs, eval_ids = load_test_split(manifest)
    tcfg = replace(PROBE_CONFIG, epochs=cfg["epochs"], batch_size=cfg["pairs"], precision=cfg["precision"])
    result = ablation_compare(pairs, eval_pairs, eval_ids, tcfg, arch, enc, cfg["seeds"])
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    for variant in ABLATIONS:
        report = result.mean_report(variant)
        path = out / f"{variant}_report.csv"
        report.to_csv(path)
        plot_report(report, figure_path(path))
    summary = out / "ablation.csv"
    result.to_csv(summary)
    plot_ablation(result, figure_path(summary))
    print("variant,fit_psnr_db,mpsnr_db,mssim,mfsim")
    for row in result.summary_rows():
        print(",".join([row[0], *(f"{v:.6g}" for v in row[1:])]))
    return EXIT_OK


COMMANDS = {
    "mini-dataset": cmd_mini_dataset,
    "synth": cmd_synth,
    "train": cmd_train,
    "dehaze": cmd_dehaze,
    "eval": cmd_eval,
    "verify": cmd_verify,
    "ablate": cmd_ablate,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve(args, parser)
        print_config(args.command, cfg)
        return COMMANDS[args.command](cfg)
    except TrainingDivergence as exc:
        print(f"error: training diverged at batch {exc.batch_index}: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except CheckpointMismatch as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except (DehazeError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
