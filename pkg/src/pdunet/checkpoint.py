"""Training checkpoints: parameters, optimizer moments, bookkeeping.

Binary layout, all integers little-endian:

    magic "DLCK" | u32 version
    u32 echo length | echo text (utf-8, one line describing the model)
    u32 record count | records            (parameters and norm buffers)
    u32 record count | records            (Adam first/second moments)
    u32 epoch | f32 best validation DSC
    u32 blob length | JSON blob           (RNG state, schedule, counters)

Each record is: u16 name length, name bytes, tensor container payload.
Arrays are stored float32, which is also the training precision, so a
load reproduces every parameter and moment bit for bit.  The JSON blob
keeps the exact float64 learning rate and best score because the f32
header field is only a human-readable convenience.
"""

from __future__ import annotations

import json
import math
import struct
from typing import NamedTuple

import numpy as np

from .arch import Model, NetSpec
from .errors import ConfigError, ShapeError
from .tensor import container_bytes, parse_container

MAGIC = b"DLCK"
VERSION = 1

_ECHO_FIELDS = ("name", "base_width", "classes", "in_channels", "input_size")


def spec_echo(spec: NetSpec) -> str:
    return " ".join(f"{f}={getattr(spec, f)}" for f in _ECHO_FIELDS)


def parse_spec_echo(text: str) -> NetSpec:
    fields = {}
    for token in text.split():
        key, _, value = token.partition("=")
        if key not in _ECHO_FIELDS or not value:
            raise ConfigError(f"unrecognized model description token "
                              f"{token!r}")
        fields[key] = value
    missing = [f for f in _ECHO_FIELDS if f not in fields]
    if missing:
        raise ConfigError(f"model description missing {missing}")
    return NetSpec(fields["name"], base_width=int(fields["base_width"]),
                   classes=int(fields["classes"]),
                   in_channels=int(fields["in_channels"]),
                   input_size=int(fields["input_size"]))


class CheckpointData(NamedTuple):
    version: int
    echo: str
    tensors: dict          # parameter and buffer arrays by name
    opt_state: dict        # Adam moment arrays by name
    epoch: int
    best_dsc: float        # f32 header copy; exact value lives in extra
    extra: dict


def _named_model_arrays(model: Model):
    for name, p in model.params():
        yield name, p.data
    for name, b in model.buffers():
        yield name, b.data


def _write_records(out, items):
    records = []
    for name, arr in items:
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise ConfigError(f"record name too long: {name!r}")
        records.append(struct.pack("<H", len(encoded)) + encoded
                       + container_bytes(np.asarray(arr)))
    out.append(struct.pack("<I", len(records)))
    out.extend(records)


def save_checkpoint(path, model: Model, optimizer=None, epoch: int = 0,
                    best_dsc: float = math.nan, extra: dict = None) -> None:
    """Serialize model state; ``optimizer`` may be None before training."""
    if epoch < 0:
        raise ConfigError(f"epoch must be nonnegative, got {epoch}")
    echo = spec_echo(model.spec).encode("utf-8")
    out = [MAGIC, struct.pack("<I", VERSION),
           struct.pack("<I", len(echo)), echo]
    _write_records(out, _named_model_arrays(model))
    _write_records(out, optimizer.state_items() if optimizer else ())
    out.append(struct.pack("<If", int(epoch), float(best_dsc)))
    blob = json.dumps(extra or {}).encode("utf-8")
    out.append(struct.pack("<I", len(blob)))
    out.append(blob)
    with open(path, "wb") as fh:
        fh.write(b"".join(out))


def _read_records(blob, off, where):
    (count,) = struct.unpack_from("<I", blob, off)
    off += 4
    table = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off:off + nlen].decode("utf-8")
        off += nlen
        arr, off = parse_container(blob, off, where=f"{where}:{name}")
        if name in table:
            raise ValueError(f"{where}: duplicate record {name!r}")
        table[name] = arr
    return table, off


def load_checkpoint(path) -> CheckpointData:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (magic {blob[:4]!r})")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (elen,) = struct.unpack_from("<I", blob, 8)
    off = 12
    echo = blob[off:off + elen].decode("utf-8")
    off += elen
    tensors, off = _read_records(blob, off, f"{path}(params)")
    opt_state, off = _read_records(blob, off, f"{path}(moments)")
    epoch, best = struct.unpack_from("<If", blob, off)
    off += 8
    (blen,) = struct.unpack_from("<I", blob, off)
    off += 4
    extra = json.loads(blob[off:off + blen].decode("utf-8")) if blen else {}
    return CheckpointData(version, echo, tensors, opt_state,
                          int(epoch), float(best), extra)


def apply_tensors(model: Model, tensors: dict) -> None:
    """Copy checkpoint arrays into a model, demanding an exact match."""
    expected = dict(_named_model_arrays(model))
    missing = sorted(set(expected) - set(tensors))
    surplus = sorted(set(tensors) - set(expected))
    if missing or surplus:
        raise ConfigError(f"checkpoint does not fit the model: missing "
                          f"{missing[:3]}, surplus {surplus[:3]}")
    for name, dst in expected.items():
        src = tensors[name]
        if src.shape != dst.shape:
            raise ShapeError(f"{name}: checkpoint shape {src.shape} vs "
                             f"model {dst.shape}")
        dst[...] = src


def build_from_checkpoint(ck: CheckpointData) -> Model:
    """Rebuild the described architecture and load its weights."""
    model = Model(parse_spec_echo(ck.echo))
    apply_tensors(model, ck.tensors)
    return model


def rng_state(rng: np.random.Generator) -> dict:
    """JSON-serializable snapshot of a Generator's position."""
    return rng.bit_generator.state


def restore_rng(state: dict) -> np.random.Generator:
    rng = np.random.default_rng()
    rng.bit_generator.state = state
    return rng
