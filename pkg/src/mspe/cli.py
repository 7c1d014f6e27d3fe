"""Command-line entry point.

Every subcommand accepts ``--config FILE`` with ``key = value`` lines (``#``
starts a comment). Keys are flag names without the leading dashes; a flag
given on the command line beats the file, which beats the built-in default.

Exit codes: 0 success, 2 usage error (bad flag, missing seed or checkpoint),
1 runtime failure. Errors are a single ``mspe: error: ...`` line on stderr.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import os
import sys

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint, state_from_tensors, state_to_tensors
from .data import FormatError, atomic_write, load_idx, save_idx_dataset
from .evaluate import (Mode, ModelState, VanillaEmbedder, aspect_resolutions, cosine_similarity_diag,
                       sweep)
from .patch_embed import bank_from_pretrained
from .pipeline import (MSPE, PRETRAIN, TEST_SAMPLES_PER_CLASS, TRAIN_SAMPLES_PER_CLASS, ModelConfig,
                       init_model, synthetic_split)
from .resize import axis_matrix
from .train import TrainConfig, TrainingError, mspe_train, pretrain

log = logging.getLogger("mspe")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def read_config(path) -> dict:
    """Parse a key=value file into {dest: raw string}."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, value = (p.strip() for p in line.split("=", 1))
            out[key.lstrip("-").replace("-", "_")] = value
    return out


def _range(text: str) -> list[int]:
    try:
        a, b, step = (int(v) for v in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected start:stop:step, got {text!r}") from None
    if step < 1 or b < a:
        raise argparse.ArgumentTypeError(f"empty range {text!r}")
    return list(range(a, b + 1, step))


def _int_list(text: str) -> tuple:
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _modes(text: str) -> list:
    try:
        return [Mode.parse(m.strip()) for m in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"unknown mode in {text!r}; use vanilla, flexivit, mspe") from None


def _common(p, seed=True):
    p.add_argument("--config", help="key=value file; command-line flags override it")
    if seed:
        p.add_argument("--seed", type=int, required=True, help="master seed (required)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def _data_flags(p, samples_default):
    p.add_argument("--data", help="IDX image file (default: synthetic shapes)")
    p.add_argument("--labels", help="IDX label file paired with --data")
    p.add_argument("--samples-per-class", type=int, default=samples_default, help="synthetic samples per class")
    p.add_argument("--data-seed", type=int, help="synthetic data seed (default: --seed)")


def _optim_flags(p, cfg: TrainConfig):
    p.add_argument("--lr", type=float, default=cfg.learning_rate, help="learning rate")
    p.add_argument("--momentum", type=float, default=cfg.momentum, help="SGD momentum")
    p.add_argument("--weight-decay", type=float, default=cfg.weight_decay, help="L2 weight decay")
    p.add_argument("--batch-size", type=int, default=cfg.batch_size, help="minibatch size")
    p.add_argument("--epochs", type=int, default=cfg.epochs, help="training epochs")
    p.add_argument("--precision", choices=("float32", "float64"), default=cfg.precision, help="compute dtype")
    p.add_argument("--history", help="write per-step losses CSV here")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mspe", description="Multi-scale patch embedding toolkit")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    m = ModelConfig()

    p = sub.add_parser("gen-data", help="render a synthetic shapes split to IDX files")
    _common(p)
    p.add_argument("--out-dir", required=True, help="directory for images.idx and labels.idx")
    p.add_argument("--split", choices=("train", "test"), default="train", help="which split to render")
    p.add_argument("--samples-per-class", type=int, default=TEST_SAMPLES_PER_CLASS, help="samples per class")
    p.add_argument("--num-classes", type=int, default=m.num_classes, help="number of shape classes")
    p.add_argument("--resolution", type=int, default=m.base_resolution, help="image side length")
    p.add_argument("--data-seed", type=int, help="data seed (default: --seed)")

    p = sub.add_parser("pretrain", help="train the ViT and its single patch kernel at the base resolution")
    _common(p)
    p.add_argument("--out", required=True, help="checkpoint to write")
    p.add_argument("--dim", type=int, default=m.dim, help="token width D")
    p.add_argument("--depth", type=int, default=m.depth, help="transformer blocks")
    p.add_argument("--heads", type=int, default=m.heads, help="attention heads")
    p.add_argument("--grid", type=int, default=m.grid, help="tokens per side N")
    p.add_argument("--num-classes", type=int, default=m.num_classes, help="classes")
    p.add_argument("--base-resolution", type=int, default=m.base_resolution, help="training resolution")
    _optim_flags(p, PRETRAIN)
    _data_flags(p, TRAIN_SAMPLES_PER_CLASS)

    p = sub.add_parser("mspe-train", help="fine-tune a K-kernel bank with the encoder frozen")
    _common(p)
    p.add_argument("--checkpoint", required=True, help="pretrained checkpoint")
    p.add_argument("--out", required=True, help="checkpoint to write (encoder copied unchanged)")
    p.add_argument("--K", type=int, default=MSPE.K, help="number of bank kernels")
    p.add_argument("--lam", type=float, default=MSPE.lam, help="weight of the base-resolution term")
    p.add_argument("--resolutions", type=_int_list, default=",".join(map(str, MSPE.resolutions)),
                   help="comma-separated training resolutions")
    p.add_argument("--kernel-resize", default=MSPE.kernel_resize, choices=("pi", "bilinear", "nearest", "bicubic"),
                   help="kernel resize rule")
    p.add_argument("--resize-method", default=MSPE.resize_method, choices=("bilinear", "nearest", "bicubic"),
                   help="interpolation behind the resize operator")
    _optim_flags(p, MSPE)
    _data_flags(p, TRAIN_SAMPLES_PER_CLASS)

    p = sub.add_parser("eval", help="accuracy sweep over resolutions and modes")
    _common(p)
    p.add_argument("--checkpoint", required=True, help="checkpoint to evaluate")
    p.add_argument("--modes", type=_modes, default="vanilla,flexivit,mspe", help="comma-separated modes")
    p.add_argument("--square", type=_range, help="square sweep start:stop:step (inclusive)")
    p.add_argument("--fixed-height", type=int, help="aspect sweep height")
    p.add_argument("--widths", type=_range, help="aspect sweep widths start:stop:step")
    p.add_argument("--out", help="CSV path (default: stdout)")
    _data_flags(p, TEST_SAMPLES_PER_CLASS)

    p = sub.add_parser("diag-sim", help="patch and class-token cosine similarity against the base resolution")
    _common(p)
    p.add_argument("--checkpoint", required=True, help="checkpoint (a bank is needed for mspe)")
    p.add_argument("--r-low", type=int, default=16, help="low resolution")
    p.add_argument("--r-high", type=int, help="reference resolution (default: base resolution)")
    p.add_argument("--samples", type=int, default=256, help="number of images")
    p.add_argument("--modes", type=_modes, default="flexivit,mspe", help="embedders to compare at r-low")
    p.add_argument("--out-dir", required=True, help="directory for diag_<mode>.csv")
    _data_flags(p, TEST_SAMPLES_PER_CLASS)

    p = sub.add_parser("inspect-resize", help="print a 1-D resize operator as CSV")
    _common(p, seed=False)
    p.add_argument("--src", type=int, required=True, help="source length")
    p.add_argument("--dst", type=int, required=True, help="target length")
    p.add_argument("--method", default="bilinear", choices=("bilinear", "nearest", "bicubic"), help="interpolation")
    p.add_argument("--out", help="CSV path (default: stdout)")
    return parser


def parse_args(argv):
    """Two passes: find the command and --config, then re-parse with the file
    values installed as defaults so flags still win."""
    parser = build_parser()
    choices = parser._subparsers._group_actions[0].choices
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    first, rest = pre.parse_known_args(argv)
    command = next((a for a in rest if a in choices), None)
    if first.config is None or command is None or "-h" in argv or "--help" in argv:
        return parser.parse_args(argv)
    if not os.path.exists(first.config):
        raise UsageError(f"config file not found: {first.config}")
    values = read_config(first.config)
    sub = choices[command]
    known = {a.dest: a for a in sub._actions}
    unknown = sorted(set(values) - set(known) - {"config", "help"})
    if unknown:
        raise UsageError(f"{first.config}: unknown key(s) {', '.join(unknown)}")
    for dest, raw in values.items():
        action = known[dest]
        if isinstance(action, argparse._StoreTrueAction):
            values[dest] = raw.lower() in ("1", "true", "yes", "on")
        action.required = False
    sub.set_defaults(**values)
    return parser.parse_args(argv)


def _emit(path, text):
    if path is None:
        sys.stdout.write(text)
    else:
        atomic_write(path, text)


def _need_file(path, what):
    if not os.path.exists(path):
        raise UsageError(f"{what} not found: {path}")


def _dataset(ns, split, num_classes):
    if ns.data:
        _need_file(ns.data, "data file")
        if ns.labels:
            _need_file(ns.labels, "label file")
        return load_idx(ns.data, ns.labels)
    data_seed = ns.seed if ns.data_seed is None else ns.data_seed
    return synthetic_split(data_seed, split, ns.samples_per_class, num_classes)


def _load_state(path):
    _need_file(path, "checkpoint")
    with open(path, "rb") as fh:
        digest = hashlib.sha256(fh.read()).hexdigest()[:16]
    return state_from_tensors(load_checkpoint(path)), digest


def _train_config(ns, **extra) -> TrainConfig:
    return TrainConfig(learning_rate=ns.lr, momentum=ns.momentum, weight_decay=ns.weight_decay,
                       batch_size=ns.batch_size, epochs=ns.epochs, seed=ns.seed, precision=ns.precision, **extra)


def cmd_gen_data(ns):
    data_seed = ns.seed if ns.data_seed is None else ns.data_seed
    ds = synthetic_split(data_seed, ns.split, ns.samples_per_class, ns.num_classes)
    os.makedirs(ns.out_dir, exist_ok=True)
    save_idx_dataset(ds, os.path.join(ns.out_dir, "images.idx"), os.path.join(ns.out_dir, "labels.idx"),
                     ns.resolution)


def cmd_pretrain(ns):
    ds = _dataset(ns, "train", ns.num_classes)
    model = ModelConfig(ns.dim, ns.depth, ns.heads, ns.grid, ns.num_classes, ds.channels, ns.base_resolution)
    params, kernel, bias = init_model(model, ns.seed)
    cfg = _train_config(ns, base_resolution=ns.base_resolution)

    def save(_epoch, p, k, b):
        save_checkpoint(ns.out, state_to_tensors(p, k, b, base_resolution=ns.base_resolution))

    params, kernel, bias, hist = pretrain(params, kernel, bias, ds, cfg, on_epoch=save)
    save(None, params, kernel, bias)
    if ns.history:
        atomic_write(ns.history, hist.to_csv())


def cmd_mspe_train(ns):
    (params, kernel, bias, _, base), _ = _load_state(ns.checkpoint)
    ds = _dataset(ns, "train", params.num_classes)
    cfg = _train_config(ns, K=ns.K, lam=ns.lam, resolutions=tuple(ns.resolutions), base_resolution=base,
                        kernel_resize=ns.kernel_resize, resize_method=ns.resize_method)
    bank0 = bank_from_pretrained(kernel, bias, params.grid, cfg.K, resize=ns.kernel_resize, method=ns.resize_method)

    def save(_epoch, b):
        save_checkpoint(ns.out, state_to_tensors(params, kernel, bias, bank=b, base_resolution=base))

    bank, hist = mspe_train(params, bank0, ds, cfg, on_epoch=save)
    save(None, bank)
    if ns.history:
        atomic_write(ns.history, hist.to_csv())


def cmd_eval(ns):
    if ns.square is None and ns.fixed_height is None:
        raise UsageError("mspe eval: give --square or --fixed-height with --widths")
    if (ns.fixed_height is None) != (ns.widths is None):
        raise UsageError("mspe eval: --fixed-height and --widths go together")
    (params, kernel, bias, bank, base), digest = _load_state(ns.checkpoint)
    resolutions = []
    if ns.square is not None:
        resolutions += [(r, r) for r in ns.square]
    if ns.fixed_height is not None:
        resolutions += aspect_resolutions(ns.fixed_height, ns.widths)
    ds = _dataset(ns, "test", params.num_classes)
    report = sweep(ModelState(params, kernel, bias, bank, base), ds, ns.modes, resolutions,
                   metadata={"checkpoint": digest, "seed": ns.seed, "dataset": ds.name})
    _emit(ns.out, report.to_csv())


def cmd_diag_sim(ns):
    (params, kernel, bias, bank, base), _ = _load_state(ns.checkpoint)
    state = ModelState(params, kernel, bias, bank, base)
    ds = _dataset(ns, "test", params.num_classes)
    r_high = base if ns.r_high is None else ns.r_high
    rng = np.random.default_rng((ns.seed, 4))
    n = min(ns.samples, len(ds))
    idx = np.sort(rng.choice(len(ds), size=n, replace=False))
    images = ds.at_resolution(r_high)[idx]
    # reference: the pretrained embedding of the image at the high resolution
    reference = VanillaEmbedder(kernel, bias, r_high)
    os.makedirs(ns.out_dir, exist_ok=True)
    for mode in ns.modes:
        try:
            emb = state.embedder(mode)
        except ValueError as exc:
            raise RuntimeError(str(exc)) from None
        res = cosine_similarity_diag(params, emb, reference, images, ns.r_low, r_high)
        atomic_write(os.path.join(ns.out_dir, f"diag_{mode.value}.csv"), res.to_csv())
        log.info("diag %s: patch %.4f cls %.4f", mode.value, res.patch_cos, res.cls_cos)


def cmd_inspect_resize(ns):
    if ns.src < 1 or ns.dst < 1:
        raise UsageError("mspe inspect-resize: --src and --dst must be >= 1")
    m = axis_matrix(ns.src, ns.dst, ns.method)
    _emit(ns.out, "".join(",".join(f"{v:.17g}" for v in row) + "\n" for row in m))


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "mspe-train": cmd_mspe_train,
    "eval": cmd_eval,
    "diag-sim": cmd_diag_sim,
    "inspect-resize": cmd_inspect_resize,
}


def _fail(code, msg):
    sys.stderr.write("mspe: error: " + " ".join(str(msg).split()) + "\n")
    return code


def main(argv=None) -> int:
    try:
        ns = parse_args(sys.argv[1:] if argv is None else argv)
    except UsageError as exc:
        return _fail(2, f"usage: {exc}")
    except SystemExit as exc:
        # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        COMMANDS[ns.command](ns)
    except UsageError as exc:
        return _fail(2, f"usage: {exc}")
    except (CheckpointError, FormatError, TrainingError, ValueError, RuntimeError, OSError) as exc:
        return _fail(1, f"{type(exc).__name__}: {exc}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
