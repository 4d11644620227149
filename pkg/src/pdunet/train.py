"""Seeded training loop with plateau scheduling and resumable state.

One epoch is a full pass over the training samples in a freshly
shuffled order.  After each epoch the validation split is scored by
per-class DSC, the learning-rate schedule sees the mean foreground
DSC, and two checkpoints are refreshed: ``last.dlck`` always,
``best.dlck`` whenever validation improved.  Everything that moves
(shuffle stream, optimizer moments, schedule counters) goes into the
checkpoint, so resuming from ``last.dlck`` replays the uninterrupted
run bit for bit.
"""

from __future__ import annotations

import math
import os
from typing import NamedTuple

import numpy as np

from .arch import Model, NetSpec
from .checkpoint import (build_from_checkpoint, load_checkpoint, restore_rng,
                         rng_state, save_checkpoint)
from .errors import ConfigError, TrainingFault
from .layers import softmax, softmax_xent
from .metrics import FOREGROUND_CLASSES, LabelMap, MetricReport, assd, dsc
from .optim import Adam, PlateauSchedule
from .tensor import Tensor

_SHUFFLE_TAG = 1  # keeps the shuffle stream apart from weight init


class TrainResult(NamedTuple):
    lines: list        # epoch rows plus halving comments, in order
    best_dsc: float
    epochs_run: int
    best_path: str
    last_path: str


def batch_arrays(samples):
    """Stack Sample images into (N,1,H,W) and labels into (N,H,W)."""
    images = np.concatenate([s.image.data for s in samples], axis=0)
    labels = np.stack([s.labels.grid for s in samples], axis=0)
    return Tensor(images), labels.astype(np.int64)


def predict(model: Model, images: Tensor):
    """Eval-mode forward pass: (argmax labels (N,H,W), probs (N,C,H,W))."""
    logits = model.forward(images, train=False)
    probs = softmax(logits)
    return probs.argmax(axis=1).astype(np.int64), probs


def _batched(items, size):
    for i in range(0, len(items), size):
        yield items[i:i + size]


def evaluate_samples(model: Model, samples, batch_size=4, with_assd=False):
    """Per-sample, per-class DSC (and optionally ASSD) as a MetricReport."""
    report = MetricReport()
    for chunk in _batched(samples, batch_size):
        images, _ = batch_arrays(chunk)
        pred, _ = predict(model, images)
        for row, s in zip(pred, chunk):
            pmap = LabelMap(row, s.labels.spacing)
            for cls in FOREGROUND_CLASSES:
                d = dsc(pmap, s.labels, cls)
                a = assd(pmap, s.labels, cls) if with_assd else None
                report.add(f"{s.index:04d}", cls, d, a)
    return report


def _epoch_line(epoch, loss, report, lr):
    def cell(v):
        return "nan" if v is None else f"{v:.4f}"

    cells = [cell(report.mean_std(cls, "dsc")[0])
             for cls in FOREGROUND_CLASSES]
    return f"{epoch}\t{loss:.6f}\t" + "\t".join(cells) + f"\t{lr:.6e}"


def train_model(spec: NetSpec, train_samples, val_samples, epochs,
                out_dir, batch_size=4, lr=1e-4, seed=0, patience=20,
                factor=0.5, resume_from=None, log_fn=None) -> TrainResult:
    """Run (or resume) training and leave checkpoints under ``out_dir``.

    Raises TrainingFault on a non-finite loss; checkpoints written in
    earlier epochs stay on disk in that case.
    """
    if epochs < 1:
        raise ConfigError(f"epochs must be >= 1, got {epochs}")
    if batch_size < 1:
        raise ConfigError(f"batch size must be >= 1, got {batch_size}")
    if lr <= 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    if not train_samples or not val_samples:
        raise ConfigError("training needs nonempty train and val splits")

    os.makedirs(out_dir, exist_ok=True)
    best_path = os.path.join(out_dir, "best.dlck")
    last_path = os.path.join(out_dir, "last.dlck")
    log_path = os.path.join(out_dir, "train.log")

    schedule = PlateauSchedule(lr=lr, patience=patience, factor=factor)
    if resume_from is None:
        model = Model(spec, seed=seed)
        optimizer = Adam(list(model.params()), lr=lr)
        shuffle_rng = np.random.default_rng(
            np.random.SeedSequence((seed, _SHUFFLE_TAG)))
        start_epoch = 0
    else:
        ck = load_checkpoint(resume_from)
        model = build_from_checkpoint(ck)
        optimizer = Adam(list(model.params()), lr=ck.extra["lr"])
        optimizer.load_state(ck.opt_state, ck.extra["adam_t"])
        schedule.lr = ck.extra["lr"]
        schedule.best = ck.extra["best"]
        schedule.stale = ck.extra["stale"]
        shuffle_rng = restore_rng(ck.extra["rng"])
        start_epoch = ck.epoch

    lines = []

    def emit(text):
        lines.append(text)
        with open(log_path, "a") as fh:
            fh.write(text + "\n")
        if log_fn is not None:
            log_fn(text)

    def save(path, epoch):
        save_checkpoint(path, model, optimizer, epoch=epoch,
                        best_dsc=schedule.best,
                        extra={"rng": rng_state(shuffle_rng),
                               "lr": schedule.lr, "best": schedule.best,
                               "stale": schedule.stale,
                               "adam_t": optimizer.t})

    for epoch in range(start_epoch + 1, epochs + 1):
        order = shuffle_rng.permutation(len(train_samples))
        total_loss = 0.0
        total_images = 0
        for picks in _batched(order, batch_size):
            images, labels = batch_arrays([train_samples[i] for i in picks])
            logits = model.forward(images, train=True)
            loss, grad = softmax_xent(logits, labels)
            if not math.isfinite(loss):
                raise TrainingFault(
                    f"non-finite loss {loss!r} in epoch {epoch}; last good "
                    f"checkpoint kept at {last_path}")
            model.zero_grad()
            model.backward(grad)
            optimizer.lr = schedule.lr
            optimizer.step()
            total_loss += loss * len(picks)
            total_images += len(picks)

        report = evaluate_samples(model, val_samples, batch_size)
        metric = report.mean_foreground_dsc()
        if metric is None:
            raise TrainingFault("validation split defines no foreground DSC")
        prev_best = schedule.best
        prev_lr = schedule.lr
        new_lr = schedule.update(metric)
        emit(_epoch_line(epoch, total_loss / total_images, report, new_lr))
        if new_lr != prev_lr:
            emit(f"# epoch {epoch}: lr halved to {new_lr:.6e}")
        save(last_path, epoch)
        if metric > prev_best:
            save(best_path, epoch)

    return TrainResult(lines, schedule.best, epochs - start_epoch,
                       best_path, last_path)
