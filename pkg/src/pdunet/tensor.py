"""Dense rank-4 tensor container and its file format.

Every value flowing through the network is a ``Tensor``: a contiguous
row-major (N, C, H, W) float buffer with an optional same-shape gradient
buffer.  Lower-rank quantities use degenerate extents, e.g. a per-channel
bias is (1, C, 1, 1).  float32 is the working precision; float64 is used
for gradient verification.
"""

from __future__ import annotations

import struct
from typing import Iterable, Sequence

import numpy as np

from .errors import ShapeError

FLOAT_DTYPES = (np.float32, np.float64)

# container payload codes
_CODE_F32 = 0x01
_CODE_U8 = 0x02

_MAGIC = b"DLS1"


class Shape:
    """Rank-4 extent tuple with equality and batch-axis compatibility."""

    __slots__ = ("dims",)

    def __init__(self, dims: Sequence[int]):
        dims = tuple(int(d) for d in dims)
        if len(dims) != 4:
            raise ShapeError(f"expected 4 extents, got {len(dims)}")
        if any(d < 1 for d in dims):
            raise ShapeError(f"all extents must be >= 1, got {dims}")
        self.dims = dims

    def __eq__(self, other) -> bool:
        if isinstance(other, Shape):
            return self.dims == other.dims
        return self.dims == tuple(other)

    def __hash__(self):
        return hash(self.dims)

    def __iter__(self):
        return iter(self.dims)

    def __getitem__(self, i):
        return self.dims[i]

    def __repr__(self):
        return f"Shape{self.dims}"

    def size(self) -> int:
        n, c, h, w = self.dims
        return n * c * h * w

    def batch_compatible(self, other: "Shape") -> bool:
        """True when the shapes differ at most in the batch extent.

        This is the only broadcast the package recognizes; everything else
        is a shape error at the point of use.
        """
        return self.dims[1:] == tuple(other)[1:]


def _check_extents(shape: Iterable[int]) -> tuple:
    dims = tuple(int(d) for d in shape)
    if len(dims) != 4:
        raise ShapeError(f"expected 4 extents, got {len(dims)}")
    if any(d < 1 for d in dims):
        raise ShapeError(f"all extents must be >= 1, got {dims}")
    return dims


class Tensor:
    """(N, C, H, W) array with an optional gradient buffer.

    ``data`` is always C-contiguous so that element (n, c, h, w) lives at
    flat index ``((n*C + c)*H + h)*W + w``.
    """

    __slots__ = ("data", "grad")

    def __init__(self, data: np.ndarray, grad: np.ndarray | None = None):
        data = np.asarray(data)
        if data.dtype not in FLOAT_DTYPES:
            data = data.astype(np.float32)
        _check_extents(data.shape)
        self.data = np.ascontiguousarray(data)
        if grad is not None:
            if grad.shape != data.shape:
                raise ShapeError("grad shape must match data shape")
            grad = np.ascontiguousarray(grad.astype(data.dtype, copy=False))
        self.grad = grad

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def size(self) -> int:
        return self.data.size

    def ensure_grad(self) -> np.ndarray:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        return self.grad

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0.0)

    def flat_index(self, n: int, c: int, h: int, w: int) -> int:
        _, C, H, W = self.shape
        return ((n * C + c) * H + h) * W + w

    def get(self, n: int, c: int, h: int, w: int) -> float:
        return float(self.data[n, c, h, w])

    def set(self, n: int, c: int, h: int, w: int, value: float) -> None:
        self.data[n, c, h, w] = value

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(),
                      None if self.grad is None else self.grad.copy())

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype})"


def zeros(shape: Iterable[int], dtype=np.float32) -> Tensor:
    """All-zero tensor; raises ShapeError on nonpositive extents."""
    return Tensor(np.zeros(_check_extents(shape), dtype=dtype))


def ones(shape: Iterable[int], dtype=np.float32) -> Tensor:
    return Tensor(np.ones(_check_extents(shape), dtype=dtype))


def full(shape: Iterable[int], value: float, dtype=np.float32) -> Tensor:
    return Tensor(np.full(_check_extents(shape), value, dtype=dtype))


def from_array(a: np.ndarray, dtype=np.float32) -> Tensor:
    """Wrap an array, padding the rank to 4 with leading unit extents."""
    a = np.asarray(a, dtype=dtype)
    if a.ndim > 4:
        raise ShapeError(f"rank {a.ndim} exceeds 4")
    while a.ndim < 4:
        a = a[np.newaxis]
    return Tensor(a)


_ELEMENTWISE = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
}


def elementwise(op: str, a: Tensor, b: Tensor) -> Tensor:
    """c[i] = op(a[i], b[i]) over identical shapes; no broadcasting."""
    if op not in _ELEMENTWISE:
        raise ValueError(f"unknown elementwise op {op!r}")
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    return Tensor(_ELEMENTWISE[op](a.data, b.data))


_REDUCE = {
    "sum": np.sum,
    "mean": np.mean,
    "max": np.max,
}


def reduce(op: str, t: Tensor, axes: Iterable[int]) -> Tensor:
    """Reduce over ``axes``; the reduced extents become 1."""
    if op not in _REDUCE:
        raise ValueError(f"unknown reduce op {op!r}")
    axes = tuple(sorted(set(int(a) for a in axes)))
    if not axes:
        raise ShapeError("empty axis set")
    if any(a < 0 or a > 3 for a in axes):
        raise ShapeError(f"axes {axes} out of range for rank 4")
    return Tensor(_REDUCE[op](t.data, axis=axes, keepdims=True))


# ---------------------------------------------------------------------------
# container file format
#
#   magic "DLS1" | u8 rank | rank x u32le extents | u8 code | payload
#   code 0x01: float32 little-endian, row-major
#   code 0x02: uint8 (label maps)
# ---------------------------------------------------------------------------

def container_bytes(array: np.ndarray) -> bytes:
    """Serialize a rank-1..4 float32 or uint8 array to container bytes."""
    array = np.ascontiguousarray(array)
    if array.ndim < 1 or array.ndim > 4:
        raise ShapeError(f"container rank must be 1..4, got {array.ndim}")
    if array.dtype == np.uint8:
        code = _CODE_U8
        payload = array.tobytes()
    else:
        code = _CODE_F32
        payload = array.astype("<f4", copy=False).tobytes()
    return (_MAGIC + struct.pack("<B", array.ndim)
            + struct.pack(f"<{array.ndim}I", *array.shape)
            + struct.pack("<B", code) + payload)


def parse_container(blob: bytes, offset: int = 0, where: str = "container"):
    """Decode one container from ``blob``; returns (array, next offset)."""
    if blob[offset:offset + 4] != _MAGIC:
        raise ValueError(f"{where}: bad magic {blob[offset:offset + 4]!r}")
    rank = blob[offset + 4]
    if rank < 1 or rank > 4:
        raise ShapeError(f"{where}: bad rank {rank}")
    off = offset + 5
    extents = struct.unpack_from(f"<{rank}I", blob, off)
    off += 4 * rank
    code = blob[off]
    off += 1
    n = int(np.prod(extents))
    if code == _CODE_F32:
        a = np.frombuffer(blob, dtype="<f4", count=n, offset=off)
        a = a.astype(np.float32)
        off += 4 * n
    elif code == _CODE_U8:
        a = np.frombuffer(blob, dtype=np.uint8, count=n, offset=off).copy()
        off += n
    else:
        raise ValueError(f"{where}: unknown payload code {code:#x}")
    if a.size != n:
        raise ValueError(f"{where}: truncated payload")
    return a.reshape(extents), off


def write_container(path, array: np.ndarray) -> None:
    """Serialize a rank-1..4 float32 or uint8 array."""
    with open(path, "wb") as f:
        f.write(container_bytes(array))


def read_container(path) -> np.ndarray:
    """Inverse of :func:`write_container`."""
    with open(path, "rb") as f:
        blob = f.read()
    array, _ = parse_container(blob, 0, where=str(path))
    return array


def save_tensor(path, t: Tensor) -> None:
    write_container(path, t.data.astype(np.float32, copy=False))


def load_tensor(path) -> Tensor:
    return from_array(read_container(path))
