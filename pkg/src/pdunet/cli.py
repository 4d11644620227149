"""Command-line front end: dataset generation, training, evaluation,
prediction export, and receptive-field analysis.

Every subcommand accepts ``--config FILE`` with ``key = value`` lines
(``#`` starts a comment); explicit command-line flags win over file
values.  Exit codes: 0 on success, 1 on runtime failures (missing
files, training faults), 2 on usage errors (bad flags, bad values).
"""

from __future__ import annotations

import argparse
import sys
import time
from dataclasses import dataclass, field

import numpy as np

from .arch import MODEL_NAMES, Model, NetSpec
from .checkpoint import build_from_checkpoint, load_checkpoint
from .errors import ConfigError, PdunetError
from .metrics import CLASS_NAMES, FOREGROUND_CLASSES, wilcoxon_one_tailed
from .phantom import (PhantomConfig, read_dataset, read_pgm, write_dataset,
                      write_pgm)
from .rfield import accounting_note, gridding_coverage, network_rf
from .tensor import Tensor, read_container, write_container
from .train import evaluate_samples, predict, train_model


@dataclass
class RunConfig:
    """Knobs shared by the training and evaluation commands."""

    model: str = "unet_progressive"
    dataset: str = ""
    epochs: int = 40
    batch_size: int = 4
    lr: float = 1e-4
    seed: int = 0
    out_dir: str = ""
    eval_classes: tuple = field(default=FOREGROUND_CLASSES)

    def validate(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be >= 1, got "
                              f"{self.batch_size}")
        if self.lr <= 0:
            raise ConfigError(f"learning rate must be positive, got "
                              f"{self.lr}")


# -- option value parsers ---------------------------------------------------

def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _float_pair(text: str):
    parts = text.split(",")
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"expected LOW,HIGH, got {text!r}")
    return float(parts[0]), float(parts[1])


def _int_pair(text: str):
    lo, hi = _float_pair(text)
    return int(lo), int(hi)


def _ratio_triple(text: str):
    parts = text.split(",")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(
            f"expected TRAIN,VAL,TEST, got {text!r}")
    return tuple(int(p) for p in parts)


def _class_list(text: str):
    lookup = {name: code for code, name in enumerate(CLASS_NAMES)}
    out = []
    for name in text.split(","):
        name = name.strip()
        if name not in lookup or lookup[name] == 0:
            raise argparse.ArgumentTypeError(
                f"unknown foreground class {name!r}; pick from "
                + ", ".join(CLASS_NAMES[1:]))
        out.append(lookup[name])
    return tuple(out)


def _dilation_list(text: str):
    try:
        dils = tuple(int(p) for p in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"expected comma-separated dilations, got {text!r}")
    if not dils or any(d < 1 for d in dils):
        raise argparse.ArgumentTypeError(
            f"dilations must be positive integers, got {text!r}")
    return dils


# -- config files -----------------------------------------------------------

def read_config_file(path) -> dict:
    """``key = value`` lines into a string map; ``#`` starts a comment."""
    values = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep or not key.strip():
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', "
                                  f"got {raw.rstrip()!r}")
            values[key.strip().replace("-", "_")] = value.strip()
    return values


def _apply_config(subparser, args, argv):
    values = read_config_file(args.config)
    actions = {}
    for action in subparser._actions:
        if action.dest not in ("help", "config") and action.option_strings:
            actions[action.dest] = action
    for key, raw in values.items():
        if key not in actions:
            raise ConfigError(f"unknown config key {key!r} for command "
                              f"{args.command!r}")
        action = actions[key]
        explicit = any(tok == opt or tok.startswith(opt + "=")
                       for opt in action.option_strings for tok in argv)
        if explicit:
            continue
        if isinstance(action, argparse.BooleanOptionalAction):
            value = _bool(raw)
        elif action.type is not None:
            try:
                value = action.type(raw)
            except (TypeError, ValueError, argparse.ArgumentTypeError) as e:
                raise ConfigError(f"config key {key!r}: {e}")
        else:
            value = raw
        setattr(args, key, value)


# -- subcommand implementations ---------------------------------------------

def cmd_phantom(args) -> int:
    _require(args, ("out",))
    cfg = PhantomConfig(size=args.size, lumen_axes=args.lumen_axes,
                        wall_thickness=args.wall_thickness,
                        thick_poles=args.thick_poles,
                        tumor_count=args.tumor_count,
                        tumor_radius=args.tumor_radius,
                        attached=args.attached,
                        bias_amplitude=args.bias_amplitude,
                        noise_sigma=args.noise_sigma,
                        spacing=args.spacing, seed=args.seed)
    samples, parts = write_dataset(args.out, cfg, args.count, args.ratios)
    if args.export_pgm:
        for s in samples[:args.export_pgm]:
            write_pgm(f"{args.out}/{s.index:04d}_img.pgm",
                      s.image.data[0, 0])
            write_pgm(f"{args.out}/{s.index:04d}_lbl.pgm",
                      (s.labels.grid * 85).astype(np.uint8))
    sizes = "/".join(str(len(p)) for p in parts)
    print(f"wrote {len(samples)} samples ({sizes} train/val/test) to "
          f"{args.out}")
    return 0


def _require(args, names):
    for name in names:
        if not getattr(args, name):
            raise ConfigError(f"--{name.replace('_', '-')} is required")


def cmd_train(args) -> int:
    _require(args, ("dataset", "out"))
    run = RunConfig(model=args.model, dataset=args.dataset,
                    epochs=args.epochs, batch_size=args.batch_size,
                    lr=args.lr, seed=args.seed, out_dir=args.out)
    run.validate()
    data = read_dataset(run.dataset)
    if not data["train"] or not data["val"]:
        raise ConfigError(f"dataset {run.dataset!r} lacks train or val "
                          f"samples")
    size = data["train"][0].image.shape[2]
    spec = NetSpec(run.model, base_width=args.base_width, input_size=size)
    result = train_model(spec, data["train"], data["val"], run.epochs,
                         run.out_dir, batch_size=run.batch_size, lr=run.lr,
                         seed=run.seed, patience=args.patience,
                         factor=args.factor, resume_from=args.resume,
                         log_fn=print)
    print(f"# best validation foreground DSC {result.best_dsc:.4f}; "
          f"checkpoints in {run.out_dir}")
    return 0


def _timing(model, samples):
    """Per-slice forward time (ms) after one warm-up pass."""
    warm = samples[0]
    predict(model, warm.image)
    spans = []
    for s in samples:
        t0 = time.perf_counter()
        predict(model, s.image)
        spans.append((time.perf_counter() - t0) * 1e3)
    arr = np.asarray(spans)
    return float(arr.mean()), float(arr.std())


def _comparison_lines(rep_a, rep_b, classes):
    """Paired one-tailed Wilcoxon per class; H1 is 'first model better'."""
    lines = ["comparison (one-tailed Wilcoxon, H1: first checkpoint "
             "better):"]
    for cls in classes:
        cells = []
        for metric in ("dsc", "assd"):
            a = {r[0]: r for r in rep_a.rows if r[1] == cls}
            b = {r[0]: r for r in rep_b.rows if r[1] == cls}
            col = 2 if metric == "dsc" else 3
            pairs = [(a[k][col], b[k][col]) for k in sorted(a)
                     if k in b and a[k][col] is not None
                     and b[k][col] is not None]
            if len(pairs) < 5:
                cells.append(f"{metric.upper()} undefined (fewer than 5 "
                             f"informative pairs)")
                continue
            x = [p[0] for p in pairs]
            y = [p[1] for p in pairs]
            # larger DSC is better, smaller ASSD is better
            p_val = (wilcoxon_one_tailed(x, y) if metric == "dsc"
                     else wilcoxon_one_tailed(y, x))
            if p_val is None:
                cells.append(f"{metric.upper()} undefined (no nonzero "
                             f"differences)")
            else:
                cells.append(f"{metric.upper()} p={p_val:.4f}")
        lines.append(f"{CLASS_NAMES[cls]}: " + ", ".join(cells))
    return lines


def cmd_eval(args) -> int:
    _require(args, ("checkpoint", "dataset"))
    ck = load_checkpoint(args.checkpoint)
    model = build_from_checkpoint(ck)
    data = read_dataset(args.dataset)
    samples = data[args.split]
    if not samples:
        raise ConfigError(f"split {args.split!r} of {args.dataset!r} is "
                          f"empty")
    print(f"# checkpoint {args.checkpoint} ({ck.echo}), epoch {ck.epoch}")
    report = evaluate_samples(model, samples, args.batch_size,
                              with_assd=True)
    shown = [r for r in report.rows if r[1] in args.classes]
    print("sample_id,class,dsc,assd_mm")
    for sid, cls, d, a in shown:
        fmt = lambda v: "NA" if v is None else f"{v:.4f}"
        print(f"{sid},{CLASS_NAMES[cls]},{fmt(d)},{fmt(a)}")
    for cls in args.classes:
        d_mean, d_std, d_n = report.mean_std(cls, "dsc")
        a_mean, a_std, a_n = report.mean_std(cls, "assd")
        name = CLASS_NAMES[cls]
        if d_n == 0:
            print(f"{name}: DSC undefined (class absent in every sample)")
            continue
        line = f"{name}: DSC {d_mean:.4f} ± {d_std:.4f} (n={d_n})"
        if a_n:
            line += f", ASSD {a_mean:.4f} ± {a_std:.4f} mm (n={a_n})"
        else:
            line += ", ASSD undefined (empty surface in every sample)"
        print(line)
    mean_ms, std_ms = _timing(model, samples)
    print(f"per-slice inference: {mean_ms:.2f} ± {std_ms:.2f} ms over "
          f"{len(samples)} slices (after warm-up)")
    if args.compare:
        other = build_from_checkpoint(load_checkpoint(args.compare))
        rep_b = evaluate_samples(other, samples, args.batch_size,
                                 with_assd=True)
        for line in _comparison_lines(report, rep_b, args.classes):
            print(line)
    return 0


def _load_image(path) -> Tensor:
    if str(path).endswith(".pgm"):
        arr = read_pgm(path).astype(np.float32) / 255.0
    else:
        arr = read_container(path)
        if arr.dtype == np.uint8:
            arr = arr.astype(np.float32) / 255.0
        arr = np.squeeze(arr)
        if arr.ndim != 2:
            raise ConfigError(f"{path}: expected a single-channel 2D image, "
                              f"got shape {arr.shape}")
    return Tensor(arr.astype(np.float32)[np.newaxis, np.newaxis])


def cmd_predict(args) -> int:
    _require(args, ("checkpoint", "image", "out"))
    model = build_from_checkpoint(load_checkpoint(args.checkpoint))
    image = _load_image(args.image)
    labels, probs = predict(model, image)
    write_container(f"{args.out}_labels.dls",
                    labels[0].astype(np.uint8))
    write_pgm(f"{args.out}_labels.pgm",
              (labels[0] * 85).astype(np.uint8))
    for code, name in enumerate(CLASS_NAMES):
        write_container(f"{args.out}_prob_{name}.dls",
                        probs[0, code].astype(np.float32))
    counts = np.bincount(labels.ravel(), minlength=len(CLASS_NAMES))
    summary = ", ".join(f"{name} {int(c)}"
                        for name, c in zip(CLASS_NAMES, counts))
    print(f"wrote {args.out}_labels.dls (+pgm) and "
          f"{len(CLASS_NAMES)} probability maps; pixels: {summary}")
    return 0


def cmd_rf(args) -> int:
    spec = NetSpec(args.model)
    report = network_rf(spec, args.scope)
    print(report.table())
    print()
    print(f"headline receptive field ({accounting_note(args.scope)}): "
          f"{report.rf}")
    for depth, blk in enumerate(spec.blocks(), start=1):
        convs = [(3, d, 1) for d in blk.dilations]
        contributing, window = gridding_coverage(convs)
        dils = ",".join(str(d) for d in blk.dilations)
        print(f"enc{depth} convs (D={dils}): {contributing}/{window} "
              f"window positions contribute "
              f"(density {contributing / window:.3f})")
    return 0


def cmd_grid(args) -> int:
    convs = [(3, d, 1) for d in args.dilations]
    contributing, window = gridding_coverage(convs)
    dils = ",".join(str(d) for d in args.dilations)
    print(f"3x3 conv stack with dilations {dils}: {contributing}/{window} "
          f"window positions contribute "
          f"(density {contributing / window:.3f})")
    return 0


# -- parser -----------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(
        prog="pdunet",
        description="Multi-class segmentation with dilated UNet variants: "
                    "phantom data, training, evaluation, receptive fields.")
    sub = parser.add_subparsers(dest="command", required=True)
    subparsers = {}

    def command(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", default=None,
                       help="key = value file with defaults for this "
                            "command")
        subparsers[name] = p
        return p

    p = command("phantom", "generate a synthetic labelled dataset")
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("--count", type=int, default=60,
                   help="number of samples (default 60)")
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ratios", type=_ratio_triple, default=(40, 5, 15),
                   help="train,val,test ratio integers (default 40,5,15)")
    p.add_argument("--lumen-axes", type=_float_pair, default=(0.12, 0.30))
    p.add_argument("--wall-thickness", type=_float_pair, default=(3.0, 7.0))
    p.add_argument("--thick-poles", action=argparse.BooleanOptionalAction,
                   default=True)
    p.add_argument("--tumor-count", type=_int_pair, default=(0, 2))
    p.add_argument("--tumor-radius", type=_float_pair, default=(3.0, 9.0))
    p.add_argument("--attached", action=argparse.BooleanOptionalAction,
                   default=True,
                   help="tumors grow on the wall boundary (default) "
                        "rather than floating in the lumen")
    p.add_argument("--bias-amplitude", type=float, default=0.3)
    p.add_argument("--noise-sigma", type=float, default=0.03)
    p.add_argument("--spacing", type=_float_pair, default=(0.5, 0.5))
    p.add_argument("--export-pgm", type=int, default=0, metavar="N",
                   help="also write PGM previews for the first N samples")
    p.set_defaults(fn=cmd_phantom)

    p = command("train", "train a model on a phantom dataset")
    p.add_argument("--dataset", default=None, help="dataset directory")
    p.add_argument("--model", default="unet_progressive",
                   choices=MODEL_NAMES)
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--base-width", type=int, default=32)
    p.add_argument("--patience", type=int, default=20)
    p.add_argument("--factor", type=float, default=0.5)
    p.add_argument("--out", default=None, help="checkpoint directory")
    p.add_argument("--resume", default=None,
                   help="checkpoint to continue from")
    p.set_defaults(fn=cmd_train)

    p = command("eval", "score a checkpoint on a dataset split")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--dataset", default=None)
    p.add_argument("--split", default="test",
                   choices=("train", "val", "test"))
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--classes", type=_class_list,
                   default=FOREGROUND_CLASSES,
                   help="comma-separated subset of lumen,wall,tumor")
    p.add_argument("--compare", default=None,
                   help="second checkpoint for a paired Wilcoxon test")
    p.set_defaults(fn=cmd_eval)

    p = command("predict", "segment one image with a trained checkpoint")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--image", default=None,
                   help="input image (.dls container or 8-bit .pgm)")
    p.add_argument("--out", default=None, help="output path prefix")
    p.set_defaults(fn=cmd_predict)

    p = command("rf", "receptive-field table for a model")
    p.add_argument("model", choices=MODEL_NAMES)
    p.add_argument("--scope", default="bridge",
                   choices=("encoder", "bridge", "full"),
                   help="layer accounting for the headline figure")
    p.set_defaults(fn=cmd_rf)

    p = command("grid", "position coverage of a dilation schedule")
    p.add_argument("dilations", type=_dilation_list,
                   help="comma-separated dilations, e.g. 2,2,2")
    p.set_defaults(fn=cmd_grid)

    return parser, subparsers


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, subparsers = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.config:
            _apply_config(subparsers[args.command], args, argv)
        return args.fn(args)
    except ConfigError as e:
        print(f"pdunet {args.command}: {e}", file=sys.stderr)
        return 2
    except (PdunetError, OSError, ValueError) as e:
        print(f"pdunet {args.command}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
