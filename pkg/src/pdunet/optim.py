"""Adam, Glorot-uniform weight initialization, plateau learning-rate halving."""

from __future__ import annotations

import math

import numpy as np

from .errors import ShapeError, TrainingFault
from .tensor import Tensor


def glorot_init(shape, rng, dtype=np.float32) -> Tensor:
    """Sample a conv weight (out, in, kh, kw) uniformly in +-bound.

    bound = sqrt(6 / (fan_in + fan_out)) with fan_in = in*kh*kw and
    fan_out = out*kh*kw.  Reproducible for a given generator state.
    """
    if len(shape) != 4:
        raise ShapeError(f"expected a rank-4 weight shape, got {shape}")
    out_c, in_c, kh, kw = shape
    fan_in = in_c * kh * kw
    fan_out = out_c * kh * kw
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype))


class Adam:
    """Adam with bias correction over an ordered list of (name, Tensor).

    Moment buffers live per parameter name; the step counter t is shared.
    Parameters whose gradient buffer is unallocated are skipped.
    """

    def __init__(self, named_params, lr=1e-4, beta1=0.9, beta2=0.99,
                 epsilon=1e-8):
        self.params = list(named_params)
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.epsilon = float(epsilon)
        self.t = 0
        self._m = {name: np.zeros_like(p.data) for name, p in self.params}
        self._v = {name: np.zeros_like(p.data) for name, p in self.params}

    def zero_grad(self):
        for _, p in self.params:
            p.zero_grad()

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in self.params:
            g = p.grad
            if g is None:
                continue
            if g.shape != p.data.shape:
                raise ShapeError(f"gradient shape {g.shape} does not match "
                                 f"parameter {name} {p.data.shape}")
            m = self._m[name]
            v = self._v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.epsilon)

    def state_items(self):
        """Yield (key, array) moment pairs in parameter order."""
        for name, _ in self.params:
            yield name + ".m", self._m[name]
            yield name + ".v", self._v[name]

    def load_state(self, arrays, t):
        """Restore moments from a {key: array} mapping plus the counter."""
        for name, _ in self.params:
            for suffix, table in ((".m", self._m), (".v", self._v)):
                src = np.asarray(arrays[name + suffix])
                if src.shape != table[name].shape:
                    raise ShapeError(f"optimizer state {name + suffix} has "
                                     f"shape {src.shape}, expected "
                                     f"{table[name].shape}")
                table[name][...] = src
        self.t = int(t)


class PlateauSchedule:
    """Halve the learning rate after `patience` epochs without improvement.

    Improvement means a strictly larger validation metric than the best
    seen so far.  The counter resets both on improvement and on a halving.
    """

    def __init__(self, lr=1e-4, patience=20, factor=0.5):
        if patience < 1:
            raise TrainingFault("patience must be at least one epoch")
        if not 0.0 < factor < 1.0:
            raise TrainingFault("factor must lie in (0, 1)")
        self.lr = float(lr)
        self.patience = int(patience)
        self.factor = float(factor)
        self.best = -math.inf
        self.stale = 0

    def update(self, val_metric) -> float:
        m = float(val_metric)
        if not math.isfinite(m):
            raise TrainingFault(f"validation metric is not finite: {m!r}")
        if m > self.best:
            self.best = m
            self.stale = 0
        else:
            self.stale += 1
            if self.stale >= self.patience:
                self.lr *= self.factor
                self.stale = 0
        return self.lr
