"""Dense row-major tensors with an optional gradient slot, plus the RATN
binary serialization format used by attention-map export and checkpoints."""

from __future__ import annotations

import struct
from pathlib import Path
from typing import BinaryIO

import numpy as np

from reattn.errors import ContractError, DimensionError, NumericalError, ParameterError

DTYPES = {"single": np.float32, "double": np.float64}

# RATN precision codes are bytes-per-value.
_MAGIC = b"RATN"
_CODE_FOR_DTYPE = {np.dtype(np.float32): 4, np.dtype(np.float64): 8}
_DTYPE_FOR_CODE = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


def resolve_dtype(precision) -> np.dtype:
    """Accepts 'single'/'double' or a NumPy float dtype."""
    if isinstance(precision, str):
        try:
            return np.dtype(DTYPES[precision])
        except KeyError:
            raise ParameterError(f"unknown precision {precision!r}; use 'single' or 'double'")
    dt = np.dtype(precision)
    if dt not in _CODE_FOR_DTYPE:
        raise ParameterError(f"unsupported dtype {dt}; tensors are float32 or float64")
    return dt


class Tensor:
    """A NumPy array plus autodiff bookkeeping.

    `data` is always C-contiguous float32 or float64. `grad` is a same-shape
    array populated by `ComputationTape.backward`, and only ever present when
    `requires_grad` is set. Tensors holding NaN or Inf are rejected at
    construction; results of internal ops are checked at block boundaries
    instead (see `Model.forward`).
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False, dtype=None, check=True):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(resolve_dtype(dtype), copy=False)
        elif arr.dtype not in _CODE_FOR_DTYPE:
            arr = arr.astype(np.float32)
        arr = np.ascontiguousarray(arr)
        if check and not np.isfinite(arr).all():
            raise NumericalError("tensor holds NaN or Inf values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        """Internal fast path: trusts `arr` to be a finite, contiguous float array."""
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        return t

    # -- basic queries ------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        """The underlying array (not a copy)."""
        return self.data

    def item(self) -> float:
        if self.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"

    # -- gradient slot ------------------------------------------------------

    def zero_grad(self):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        else:
            self.grad.fill(0.0)

    def accumulate_grad(self, g: np.ndarray):
        if not self.requires_grad:
            raise ContractError("gradient assigned to a tensor without requires_grad")
        if g.shape != self.data.shape:
            raise DimensionError(f"gradient shape {g.shape} != tensor shape {self.data.shape}")
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def detach(self) -> "Tensor":
        """Same storage, no gradient participation."""
        return Tensor._wrap(self.data, False)

    def copy(self) -> "Tensor":
        return Tensor._wrap(self.data.copy(), self.requires_grad)

    def astype(self, precision) -> "Tensor":
        return Tensor._wrap(
            np.ascontiguousarray(self.data.astype(resolve_dtype(precision))),
            self.requires_grad,
        )

    def check_finite(self, context: str = "tensor"):
        if not np.isfinite(self.data).all():
            raise NumericalError(f"non-finite values in {context}")
        return self

    # -- operator sugar (delegates to reattn.ops) ---------------------------

    def __add__(self, other):
        from reattn import ops

        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from reattn import ops

        return ops.sub(self, other)

    def __mul__(self, other):
        from reattn import ops

        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from reattn import ops

        return ops.div(self, other)

    def __neg__(self):
        from reattn import ops

        return ops.neg(self)

    def __matmul__(self, other):
        from reattn import ops

        return ops.matmul(self, other)

    def __getitem__(self, key):
        from reattn import ops

        return ops.slice_(self, key)

    def reshape(self, *shape):
        from reattn import ops

        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, axes=None):
        from reattn import ops

        return ops.transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        from reattn import ops

        return ops.sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from reattn import ops

        return ops.mean(self, axis=axis, keepdims=keepdims)


# -- RATN serialization -----------------------------------------------------
#
# Layout: 4-byte magic "RATN", u8 precision code (bytes per value: 4 or 8),
# u8 rank, rank x u32 little-endian extents, then the raw little-endian
# values in row-major order.


def write_tensor(f: BinaryIO, arr: np.ndarray | Tensor):
    if isinstance(arr, Tensor):
        arr = arr.data
    arr = np.asarray(arr)
    if arr.ndim:
        arr = np.ascontiguousarray(arr)
    if arr.dtype not in _CODE_FOR_DTYPE:
        raise ParameterError(f"cannot serialize dtype {arr.dtype}")
    if arr.ndim > 255:
        raise DimensionError(f"rank {arr.ndim} exceeds the format limit of 255")
    for extent in arr.shape:
        if extent > 0xFFFFFFFF:
            raise DimensionError(f"extent {extent} exceeds u32")
    code = _CODE_FOR_DTYPE[arr.dtype]
    f.write(_MAGIC)
    f.write(struct.pack("<BB", code, arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    f.write(arr.astype(f"<f{code}", copy=False).tobytes(order="C"))


def read_tensor(f: BinaryIO) -> np.ndarray:
    magic = f.read(4)
    if magic != _MAGIC:
        raise ContractError(f"bad tensor magic {magic!r}, expected {_MAGIC!r}")
    code, rank = struct.unpack("<BB", f.read(2))
    if code not in _DTYPE_FOR_CODE:
        raise ContractError(f"unknown precision code {code}")
    shape = struct.unpack(f"<{rank}I", f.read(4 * rank)) if rank else ()
    count = int(np.prod(shape)) if shape else 1
    raw = f.read(count * code)
    if len(raw) != count * code:
        raise ContractError("truncated tensor payload")
    arr = np.frombuffer(raw, dtype=_DTYPE_FOR_CODE[code]).reshape(shape)
    # frombuffer is read-only; astype copies to a writable native-order array
    # (ascontiguousarray would promote rank 0 to rank 1).
    return arr.astype(arr.dtype.newbyteorder("="))


def save_tensor(path, arr):
    with open(Path(path), "wb") as f:
        write_tensor(f, arr)


def load_tensor(path) -> np.ndarray:
    with open(Path(path), "rb") as f:
        return read_tensor(f)
