"""Shared test oracles: naive convolution loops and finite differences.

These stay deliberately dumb and independent of the package's vectorized
implementations.
"""

import numpy as np

from pdunet.tensor import Tensor


def naive_conv2d(x, w, b, stride=1, dilation=1, padding=0):
    """Quintuple-loop sliding-window convolution; out-of-range taps read 0."""
    n_, c_, h_, w_ = x.shape
    o_, _, k, _ = w.shape
    eff = k + (k - 1) * (dilation - 1)
    oh = (h_ + 2 * padding - eff) // stride + 1
    ow = (w_ + 2 * padding - eff) // stride + 1
    y = np.zeros((n_, o_, oh, ow), dtype=x.dtype)
    for n in range(n_):
        for o in range(o_):
            for i in range(oh):
                for j in range(ow):
                    acc = b[o]
                    for c in range(c_):
                        for u in range(k):
                            for v in range(k):
                                hi = i * stride + u * dilation - padding
                                wi = j * stride + v * dilation - padding
                                if 0 <= hi < h_ and 0 <= wi < w_:
                                    acc += w[o, c, u, v] * x[n, c, hi, wi]
                    y[n, o, i, j] = acc
    return y


def rel_err(a, fd):
    return abs(a - fd) / max(1.0, abs(a), abs(fd))


def check_gradients(loss_fn, arrays, grads, h=1e-4, tol=1e-6):
    """Central-difference check of every coordinate of every array.

    ``loss_fn`` recomputes the scalar loss from the arrays' current
    contents; ``grads`` are the analytic gradients to verify.  Relative
    error uses a unit floor so numerically-zero gradients compare on an
    absolute scale.
    """
    worst = 0.0
    for arr, g in zip(arrays, grads):
        flat = arr.reshape(-1)
        gflat = np.asarray(g).reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            lp = loss_fn()
            flat[i] = old - h
            lm = loss_fn()
            flat[i] = old
            fd = (lp - lm) / (2.0 * h)
            err = rel_err(gflat[i], fd)
            worst = max(worst, err)
            assert err <= tol, (
                f"gradient mismatch at flat index {i}: analytic {gflat[i]!r} "
                f"vs finite-difference {fd!r} (rel err {err:.3g})")
    return worst


def check_gradients_sampled(loss_fn, arr, grad, rng, n, h=1e-7, tol=1e-4):
    """Central-difference check on ``n`` randomly chosen coordinates.

    Meant for whole networks where full-coordinate checking is too slow;
    a few sampled coordinates still catch wiring mistakes, which show up
    as order-one errors.  The step stays small because a deep net puts
    kinks (pool argmax flips, PReLU crossings) near almost every
    coordinate at larger steps, and the tolerance absorbs the resulting
    evaluation noise; the strict 1e-6 contract is checked per layer.
    """
    flat = arr.reshape(-1)
    gflat = np.asarray(grad).reshape(-1)
    picks = rng.choice(flat.size, size=min(n, flat.size), replace=False)
    for i in picks:
        old = flat[i]
        flat[i] = old + h
        lp = loss_fn()
        flat[i] = old - h
        lm = loss_fn()
        flat[i] = old
        fd = (lp - lm) / (2.0 * h)
        err = rel_err(gflat[i], fd)
        assert err <= tol, (
            f"gradient mismatch at flat index {i}: analytic {gflat[i]!r} "
            f"vs finite-difference {fd!r} (rel err {err:.3g})")


def projection_loss(y: Tensor, r: np.ndarray) -> float:
    """Scalar probe <y, r> used to turn a layer output into a loss."""
    return float((y.data * r).sum())
