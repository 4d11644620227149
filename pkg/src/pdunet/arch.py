"""Network assembly: encoder blocks, residual bridge, skip-connected decoder.

Four ready-made configurations share the machinery here:

``unet_original``
    two-conv stages with 2x2 max pooling and a plain two-conv decoder.
``unet_baseline``
    three-conv blocks, strided-conv downsampling, every dilation 1.
``unet_dilated``
    like the baseline but the first conv of each block is dilated,
    with rates 1, 2, 4, 8 from the shallowest depth to the deepest.
``unet_progressive``
    dilation rates 1, 2, 4 on the three convs inside every block.

All models take a single-channel image whose extents are divisible by 16
and emit per-class logits at full resolution.  Channel widths start at
``base_width`` (32 by default) and double at every downsampling; the
bridge at 1/16 resolution runs two convs plus a residual block.  Skip
connections concatenate each block output into the same-resolution
decoder module.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, ShapeError
from .layers import (BatchNorm2d, Conv2d, MaxPool2x2, PReLU,
                     UpsampleNearest2x, concat_channels, split_channels)
from .optim import glorot_init
from .tensor import Tensor

MODEL_NAMES = ("unet_original", "unet_baseline", "unet_dilated",
               "unet_progressive")

_BLOCK_KINDS = {
    "unet_baseline": "standard",
    "unet_dilated": "dilated_head",
    "unet_progressive": "progressive",
}
_HEAD_DILATIONS = (1, 2, 4, 8)


class BlockSpec:
    """Dilation layout of one encoder block (one entry per conv)."""

    def __init__(self, kind: str, width: int, dilations):
        self.kind = kind
        self.width = width
        self.dilations = tuple(int(d) for d in dilations)

    def __repr__(self):
        return (f"BlockSpec(kind={self.kind!r}, width={self.width}, "
                f"dilations={self.dilations})")


def block_dilations(kind: str, depth: int):
    """Per-conv dilation rates for a three-conv block at encoder depth 1..4."""
    if kind == "standard":
        return (1, 1, 1)
    if kind == "dilated_head":
        return (_HEAD_DILATIONS[depth - 1], 1, 1)
    if kind == "progressive":
        return (1, 2, 4)
    raise ConfigError(f"unknown block kind {kind!r}")


class NetSpec:
    """Declarative description of one model configuration."""

    def __init__(self, name: str, base_width: int = 32, classes: int = 4,
                 in_channels: int = 1, input_size: int = 128):
        if name not in MODEL_NAMES:
            raise ConfigError(f"unknown model name {name!r}; expected one of "
                              + ", ".join(MODEL_NAMES))
        if base_width < 1 or in_channels < 1:
            raise ConfigError("base_width and in_channels must be >= 1")
        if classes < 2:
            raise ConfigError("need at least two classes")
        if input_size < 16 or input_size % 16:
            raise ConfigError(f"input_size must be a positive multiple of 16, "
                              f"got {input_size}")
        self.name = name
        self.base_width = int(base_width)
        self.classes = int(classes)
        self.in_channels = int(in_channels)
        self.input_size = int(input_size)

    @property
    def widths(self):
        w = self.base_width
        return (w, 2 * w, 4 * w, 8 * w)

    @property
    def bridge_width(self):
        return 16 * self.base_width

    def blocks(self):
        """BlockSpec per encoder depth.

        The ``unet_original`` stages carry two convs, the other models
        three; dilation schedules follow the block kind.
        """
        if self.name == "unet_original":
            return [BlockSpec("standard", w, (1, 1)) for w in self.widths]
        kind = _BLOCK_KINDS[self.name]
        return [BlockSpec(kind, w, block_dilations(kind, depth))
                for depth, w in enumerate(self.widths, start=1)]

    def rf_path(self):
        """Layers on the input-to-bridge path as (label, k, D, s, segment).

        Segments: "encoder" (block convs plus downsampling), "bridge"
        (the two main bridge convs), "residual" (the bridge residual
        block's convs, absent for unet_original).
        """
        rows = []
        for depth, blk in enumerate(self.blocks(), start=1):
            for j, d in enumerate(blk.dilations, start=1):
                rows.append((f"enc{depth}.conv{j}", 3, d, 1, "encoder"))
            if self.name == "unet_original":
                rows.append((f"enc{depth}.pool", 2, 1, 2, "encoder"))
            else:
                rows.append((f"enc{depth}.down", 3, 1, 2, "encoder"))
        rows.append(("bridge.conv1", 3, 1, 1, "bridge"))
        rows.append(("bridge.conv2", 3, 1, 1, "bridge"))
        if self.name != "unet_original":
            rows.append(("bridge.res.conv1", 3, 1, 1, "residual"))
            rows.append(("bridge.res.conv2", 3, 1, 1, "residual"))
        return rows

    def conv_layer_counts(self):
        """Convolution tallies by segment (pooling layers are not convs)."""
        enc = sum(1 for label, _, _, _, seg in self.rf_path()
                  if seg == "encoder" and not label.endswith(".pool"))
        bridge = sum(1 for _, _, _, _, seg in self.rf_path()
                     if seg in ("bridge", "residual"))
        per_module = 3 if self.name == "unet_original" else 4
        return {"encoder": enc, "bridge": bridge,
                "decoder": 4 * per_module + 1}


def parse_netspec(text: str) -> NetSpec:
    """Build a NetSpec from `key = value` lines (# starts a comment)."""
    keys = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected `key = value`, "
                              f"got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in keys:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        keys[key] = value
    if "name" not in keys:
        raise ConfigError("network spec must set `name`")
    known = {"name", "base_width", "classes", "input_size"}
    unknown = sorted(set(keys) - known)
    if unknown:
        raise ConfigError("unknown network spec keys: " + ", ".join(unknown))
    kwargs = {"name": keys["name"]}
    for key in ("base_width", "classes", "input_size"):
        if key in keys:
            try:
                kwargs[key] = int(keys[key])
            except ValueError:
                raise ConfigError(f"{key} must be an integer, "
                                  f"got {keys[key]!r}") from None
    return NetSpec(**kwargs)


class ConvUnit:
    """conv -> batch norm -> PReLU; norm and activation are optional.

    3x3 convs default to padding = dilation so the output keeps the
    input resolution (or exactly halves it at stride 2).
    """

    def __init__(self, cin, cout, kernel=3, stride=1, dilation=1,
                 padding=None, norm=True, act=True, dtype=np.float32):
        if padding is None:
            padding = dilation if kernel == 3 else 0
        self.conv = Conv2d(cin, cout, kernel, stride=stride,
                           dilation=dilation, padding=padding, dtype=dtype)
        self.bn = BatchNorm2d(cout, dtype=dtype) if norm else None
        self.act = PReLU(cout, dtype=dtype) if act else None

    def forward(self, x, train=False):
        y = self.conv.forward(x)
        if self.bn is not None:
            y = self.bn.forward(y, train=train)
        if self.act is not None:
            y = self.act.forward(y)
        return y

    def backward(self, grad):
        if self.act is not None:
            grad = self.act.backward(grad)
        if self.bn is not None:
            grad = self.bn.backward(grad)
        return self.conv.backward(grad)

    def params(self):
        out = [("conv.weight", self.conv.weight), ("conv.bias", self.conv.bias)]
        if self.bn is not None:
            out += [("bn.gamma", self.bn.gamma), ("bn.beta", self.bn.beta)]
        if self.act is not None:
            out.append(("act.slope", self.act.slope))
        return out

    def buffers(self):
        if self.bn is None:
            return []
        return [("bn.running_mean", self.bn.running_mean),
                ("bn.running_var", self.bn.running_var)]


class ResidualBlock:
    """Two conv units plus an identity skip added to their output.

    A 1x1 projection stands in for the identity when the widths differ.
    With zeroed conv weights the block is the identity map.
    """

    def __init__(self, cin, cout, dtype=np.float32):
        self.conv1 = ConvUnit(cin, cout, dtype=dtype)
        self.conv2 = ConvUnit(cout, cout, dtype=dtype)
        self.proj = None if cin == cout else Conv2d(cin, cout, 1, dtype=dtype)

    def forward(self, x, train=False):
        y = self.conv2.forward(self.conv1.forward(x, train=train), train=train)
        skip = x.data if self.proj is None else self.proj.forward(x).data
        return Tensor(skip + y.data)

    def backward(self, grad):
        gx = self.conv1.backward(self.conv2.backward(grad))
        if self.proj is None:
            return Tensor(gx.data + grad.data)
        return Tensor(gx.data + self.proj.backward(grad).data)

    def params(self):
        out = [("conv1." + n, p) for n, p in self.conv1.params()]
        out += [("conv2." + n, p) for n, p in self.conv2.params()]
        if self.proj is not None:
            out += [("proj.weight", self.proj.weight),
                    ("proj.bias", self.proj.bias)]
        return out

    def buffers(self):
        return ([("conv1." + n, b) for n, b in self.conv1.buffers()]
                + [("conv2." + n, b) for n, b in self.conv2.buffers()])


class Model:
    """A built network: ordered named units plus the wiring to run them."""

    def __init__(self, spec: NetSpec, seed: int = 0, dtype=np.float32):
        self.spec = spec
        self.dtype = dtype
        self._units = {}
        if spec.name == "unet_original":
            self._build_original()
        else:
            self._build_blocked()
        self._init_weights(seed)

    # -- construction ------------------------------------------------

    def _add(self, name, unit):
        self._units[name] = unit

    def _build_blocked(self):
        spec = self.spec
        dt = self.dtype
        cin = spec.in_channels
        for depth, blk in enumerate(spec.blocks(), start=1):
            for j, d in enumerate(blk.dilations, start=1):
                self._add(f"enc{depth}.conv{j}",
                          ConvUnit(cin, blk.width, dilation=d, dtype=dt))
                cin = blk.width
            self._add(f"enc{depth}.down",
                      ConvUnit(blk.width, 2 * blk.width, stride=2, dtype=dt))
            cin = 2 * blk.width
        bw = spec.bridge_width
        self._add("bridge.conv1", ConvUnit(bw, bw, dtype=dt))
        self._add("bridge.conv2", ConvUnit(bw, bw, dtype=dt))
        self._add("bridge.res", ResidualBlock(bw, bw, dtype=dt))
        chans = bw
        for depth in range(4, 0, -1):
            skip_c = spec.widths[depth - 1]
            self._add(f"dec{depth}.up", UpsampleNearest2x())
            self._add(f"dec{depth}.conv1",
                      ConvUnit(chans + skip_c, skip_c, dtype=dt))
            for j in range(2, 5):
                self._add(f"dec{depth}.conv{j}",
                          ConvUnit(skip_c, skip_c, dtype=dt))
            chans = skip_c
        self._add("head", ConvUnit(chans, spec.classes, kernel=1,
                                   norm=False, act=False, dtype=dt))

    def _build_original(self):
        spec = self.spec
        dt = self.dtype
        cin = spec.in_channels
        for depth, width in enumerate(spec.widths, start=1):
            self._add(f"enc{depth}.conv1", ConvUnit(cin, width, dtype=dt))
            self._add(f"enc{depth}.conv2", ConvUnit(width, width, dtype=dt))
            self._add(f"enc{depth}.pool", MaxPool2x2())
            cin = width
        bw = spec.bridge_width
        self._add("bridge.conv1", ConvUnit(cin, bw, dtype=dt))
        self._add("bridge.conv2", ConvUnit(bw, bw, dtype=dt))
        chans = bw
        for depth in range(4, 0, -1):
            out = spec.widths[depth - 1]
            self._add(f"dec{depth}.up", UpsampleNearest2x())
            self._add(f"dec{depth}.upconv", ConvUnit(chans, out, dtype=dt))
            self._add(f"dec{depth}.conv1", ConvUnit(2 * out, out, dtype=dt))
            self._add(f"dec{depth}.conv2", ConvUnit(out, out, dtype=dt))
            chans = out
        self._add("head", ConvUnit(chans, spec.classes, kernel=1,
                                   norm=False, act=False, dtype=dt))

    def _init_weights(self, seed):
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        for name, p in self.params():
            if name.endswith(".weight"):
                p.data[...] = glorot_init(p.shape, rng, self.dtype).data

    # -- registry ----------------------------------------------------

    def params(self):
        for uname, unit in self._units.items():
            for pname, p in unit.params():
                yield f"{uname}.{pname}", p

    def buffers(self):
        for uname, unit in self._units.items():
            for bname, b in unit.buffers():
                yield f"{uname}.{bname}", b

    def parameter_count(self) -> int:
        return sum(p.data.size for _, p in self.params())

    def zero_grad(self):
        for _, p in self.params():
            p.zero_grad()

    # -- execution ---------------------------------------------------

    def _check_input(self, x):
        n, c, h, w = x.shape
        if c != self.spec.in_channels:
            raise ShapeError(f"expected {self.spec.in_channels} input "
                             f"channels, got {c}")
        if h % 16 or w % 16 or h < 16 or w < 16:
            raise ShapeError(f"spatial extents must be positive multiples "
                             f"of 16, got {h}x{w}")

    def forward(self, x: Tensor, train: bool = False) -> Tensor:
        self._check_input(x)
        if self.spec.name == "unet_original":
            return self._forward_original(x, train)
        return self._forward_blocked(x, train)

    def backward(self, grad_logits: Tensor) -> Tensor:
        if self.spec.name == "unet_original":
            return self._backward_original(grad_logits)
        return self._backward_blocked(grad_logits)

    def _forward_blocked(self, x, train):
        u = self._units
        skips = []
        h = x
        for depth in range(1, 5):
            for j in range(1, 4):
                h = u[f"enc{depth}.conv{j}"].forward(h, train=train)
            skips.append(h)
            h = u[f"enc{depth}.down"].forward(h, train=train)
        h = u["bridge.conv1"].forward(h, train=train)
        h = u["bridge.conv2"].forward(h, train=train)
        h = u["bridge.res"].forward(h, train=train)
        for depth in range(4, 0, -1):
            h = u[f"dec{depth}.up"].forward(h)
            h = concat_channels(h, skips[depth - 1])
            for j in range(1, 5):
                h = u[f"dec{depth}.conv{j}"].forward(h, train=train)
        return u["head"].forward(h, train=train)

    def _backward_blocked(self, grad):
        u = self._units
        g = u["head"].backward(grad)
        skip_grads = [None] * 4
        for depth in range(1, 5):
            for j in range(4, 0, -1):
                g = u[f"dec{depth}.conv{j}"].backward(g)
            g, gs = split_channels(g, 2 * self.spec.widths[depth - 1])
            skip_grads[depth - 1] = gs
            g = u[f"dec{depth}.up"].backward(g)
        g = u["bridge.res"].backward(g)
        g = u["bridge.conv2"].backward(g)
        g = u["bridge.conv1"].backward(g)
        for depth in range(4, 0, -1):
            g = u[f"enc{depth}.down"].backward(g)
            g = Tensor(g.data + skip_grads[depth - 1].data)
            for j in range(3, 0, -1):
                g = u[f"enc{depth}.conv{j}"].backward(g)
        return g

    def _forward_original(self, x, train):
        u = self._units
        skips = []
        h = x
        for depth in range(1, 5):
            h = u[f"enc{depth}.conv1"].forward(h, train=train)
            h = u[f"enc{depth}.conv2"].forward(h, train=train)
            skips.append(h)
            h = u[f"enc{depth}.pool"].forward(h)
        h = u["bridge.conv1"].forward(h, train=train)
        h = u["bridge.conv2"].forward(h, train=train)
        for depth in range(4, 0, -1):
            h = u[f"dec{depth}.up"].forward(h)
            h = u[f"dec{depth}.upconv"].forward(h, train=train)
            h = concat_channels(h, skips[depth - 1])
            h = u[f"dec{depth}.conv1"].forward(h, train=train)
            h = u[f"dec{depth}.conv2"].forward(h, train=train)
        return u["head"].forward(h, train=train)

    def _backward_original(self, grad):
        u = self._units
        g = u["head"].backward(grad)
        skip_grads = [None] * 4
        for depth in range(1, 5):
            g = u[f"dec{depth}.conv2"].backward(g)
            g = u[f"dec{depth}.conv1"].backward(g)
            g, gs = split_channels(g, self.spec.widths[depth - 1])
            skip_grads[depth - 1] = gs
            g = u[f"dec{depth}.upconv"].backward(g)
            g = u[f"dec{depth}.up"].backward(g)
        g = u["bridge.conv2"].backward(g)
        g = u["bridge.conv1"].backward(g)
        for depth in range(4, 0, -1):
            g = u[f"enc{depth}.pool"].backward(g)
            g = Tensor(g.data + skip_grads[depth - 1].data)
            g = u[f"enc{depth}.conv2"].backward(g)
            g = u[f"enc{depth}.conv1"].backward(g)
        return g


def build(spec, base_width: int = 32, seed: int = 0,
          dtype=np.float32) -> Model:
    """Construct a model from a NetSpec or a configuration name."""
    if isinstance(spec, str):
        spec = NetSpec(spec, base_width=base_width)
    return Model(spec, seed=seed, dtype=dtype)
