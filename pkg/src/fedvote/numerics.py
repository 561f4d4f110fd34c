"""Dense tensor arithmetic and seeded randomness underlying every model.

All arithmetic is IEEE-754 double precision and every function here is pure:
identical inputs give bitwise-identical outputs, so whole experiments replay
exactly from a single seed.

The random number generator is a SplitMix64 counter stream (Weyl increment
0x9E3779B97F4A7C15 followed by the SplitMix64 finalizer). Independent
consumers get decorrelated streams by hashing a label with FNV-1a 64 into the
stream id. Normal deviates come from the Box-Muller transform, two uniforms
per pair. The algorithm is frozen; test vectors live in the test suite.
"""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .errors import ShapeError

__all__ = [
    "Tensor",
    "RngStream",
    "fnv1a64",
    "derive_seed",
    "matmul",
    "conv2d_valid",
    "maxpool2",
    "relu",
    "relu_grad",
    "softmax",
    "softmax_rows",
    "rng_normal",
]

_MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15
_STREAM_SALT = 0x5851F42D4C957F2D
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_INV_2_53 = 2.0 ** -53


class Tensor:
    """Dense row-major array of finite float64 values.

    The backing storage is marked read-only, so tensors are safe to share
    across threads. Construction rejects NaN/Inf.
    """

    __slots__ = ("_array",)

    def __init__(self, values, shape: Sequence[int] | None = None):
        arr = np.array(values, dtype=np.float64, order="C")
        if shape is not None:
            shape = tuple(int(s) for s in shape)
            if any(s < 0 for s in shape):
                raise ShapeError(f"negative extent in shape {shape}")
            try:
                arr = arr.reshape(shape)
            except ValueError:
                raise ShapeError(
                    f"cannot view {arr.size} values as shape {shape}"
                ) from None
        if arr.size and not np.isfinite(arr).all():
            raise ValueError("tensor values must be finite (no NaN/Inf)")
        arr = np.ascontiguousarray(arr)
        arr.setflags(write=False)
        self._array = arr

    @classmethod
    def zeros(cls, shape: Sequence[int]) -> "Tensor":
        return cls(np.zeros(tuple(int(s) for s in shape), dtype=np.float64))

    @property
    def shape(self) -> tuple[int, ...]:
        return self._array.shape

    @property
    def size(self) -> int:
        return self._array.size

    @property
    def array(self) -> np.ndarray:
        """Read-only ndarray view with the full shape."""
        return self._array

    @property
    def data(self) -> np.ndarray:
        """Read-only flat (row-major) view of the values."""
        return self._array.reshape(-1)

    def reshape(self, shape: Sequence[int]) -> "Tensor":
        return Tensor(self._array, shape=shape)

    def tolist(self):
        return self._array.tolist()

    def __eq__(self, other) -> bool:
        if not isinstance(other, Tensor):
            return NotImplemented
        return self.shape == other.shape and bool(
            np.array_equal(self._array, other._array)
        )

    __hash__ = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"


def _as_tensor(x, name: str) -> Tensor:
    if not isinstance(x, Tensor):
        raise TypeError(f"{name} must be a Tensor, got {type(x).__name__}")
    return x


# --- seeded randomness ----------------------------------------------------


def _mix64(z: int) -> int:
    """SplitMix64 finalizer on a 64-bit integer."""
    z &= _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


def _mix64_array(z: np.ndarray) -> np.ndarray:
    z = z ^ (z >> np.uint64(30))
    z = z * np.uint64(0xBF58476D1CE4E5B9)
    z = z ^ (z >> np.uint64(27))
    z = z * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def fnv1a64(label: str) -> int:
    """FNV-1a 64-bit hash of the UTF-8 encoding of `label`."""
    h = _FNV_OFFSET
    for byte in label.encode("utf-8"):
        h = ((h ^ byte) * _FNV_PRIME) & _MASK64
    return h


def derive_seed(seed: int, label: str) -> int:
    """Fan a root seed out to a named sub-seed, deterministically."""
    return _mix64((int(seed) & _MASK64) ^ fnv1a64(label))


class RngStream:
    """Deterministic SplitMix64 draw stream.

    The pair (seed, stream_id) fully determines the sequence across runs and
    platforms. Each consumer must own its stream; instances are stateful and
    not safe to share between threads.
    """

    __slots__ = ("seed", "stream_id", "_state")

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream_id = int(stream_id) & _MASK64
        self._state = _mix64(self.seed ^ _mix64(self.stream_id ^ _STREAM_SALT))

    @classmethod
    def named(cls, seed: int, label: str) -> "RngStream":
        """Stream keyed by a human-readable label (hashed to the stream id)."""
        return cls(seed, stream_id=fnv1a64(label))

    def next_uint64(self) -> int:
        self._state = (self._state + _GAMMA) & _MASK64
        return _mix64(self._state)

    def next_uint64_array(self, count: int) -> np.ndarray:
        """`count` draws at once; the sequence matches repeated next_uint64()."""
        if count < 0:
            raise ValueError(f"count must be >= 0, got {count}")
        steps = np.arange(1, count + 1, dtype=np.uint64)
        states = np.uint64(self._state) + np.uint64(_GAMMA) * steps
        if count:
            self._state = int(states[-1])
        return _mix64_array(states)

    def next_double(self) -> float:
        """Uniform double in [0, 1) with 53 random bits."""
        return (self.next_uint64() >> 11) * _INV_2_53

    def next_below(self, bound: int) -> int:
        """Unbiased uniform integer in [0, bound) via rejection sampling."""
        if bound <= 0:
            raise ValueError(f"bound must be positive, got {bound}")
        threshold = (1 << 64) - ((1 << 64) % bound)
        while True:
            x = self.next_uint64()
            if x < threshold:
                return x % bound

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates permutation of range(n)."""
        if n < 0:
            raise ValueError(f"n must be >= 0, got {n}")
        idx = np.arange(n, dtype=np.int64)
        for i in range(n - 1, 0, -1):
            j = self.next_below(i + 1)
            idx[i], idx[j] = idx[j], idx[i]
        return idx

    def standard_normals(self, n: int) -> np.ndarray:
        """n standard-normal draws via Box-Muller (two uniforms per pair).

        Each call consumes 2*ceil(n/2) raw draws; for odd n the second half
        of the final pair is discarded.
        """
        if n < 0:
            raise ValueError(f"n must be >= 0, got {n}")
        if n == 0:
            return np.empty(0, dtype=np.float64)
        pairs = (n + 1) // 2
        raw = self.next_uint64_array(2 * pairs)
        u1 = ((raw[0::2] >> np.uint64(11)) + np.uint64(1)).astype(np.float64) * _INV_2_53
        u2 = (raw[1::2] >> np.uint64(11)).astype(np.float64) * _INV_2_53
        radius = np.sqrt(-2.0 * np.log(u1))
        angle = (2.0 * math.pi) * u2
        out = np.empty(2 * pairs, dtype=np.float64)
        out[0::2] = radius * np.cos(angle)
        out[1::2] = radius * np.sin(angle)
        return out[:n]

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"


def rng_normal(rng: RngStream, n: int, mean: float = 0.0, std: float = 1.0) -> Tensor:
    """Tensor[n] of Normal(mean, std) draws from `rng`. std == 0 gives a constant."""
    n = int(n)
    if n < 0:
        raise ValueError(f"n must be >= 0, got {n}")
    std = float(std)
    if not math.isfinite(std) or std < 0:
        raise ValueError(f"std must be finite and >= 0, got {std}")
    z = rng.standard_normals(n)
    return Tensor(mean + std * z)


# --- tensor operations ----------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of Tensor[m,k] and Tensor[k,n]."""
    a = _as_tensor(a, "a")
    b = _as_tensor(b, "b")
    if len(a.shape) != 2 or len(b.shape) != 2:
        raise ShapeError(f"matmul needs rank-2 tensors, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"matmul inner dimensions differ: {a.shape} x {b.shape}"
        )
    return Tensor(a.array @ b.array)


def conv2d_valid(inputs: Tensor, kernels: Tensor, bias: Tensor) -> Tensor:
    """Valid (no padding, stride 1) cross-correlation with per-filter bias.

    inputs: [h, w, c], kernels: [kh, kw, c, f], bias: [f]
    -> [(h-kh+1), (w-kw+1), f]
    """
    inputs = _as_tensor(inputs, "inputs")
    kernels = _as_tensor(kernels, "kernels")
    bias = _as_tensor(bias, "bias")
    if len(inputs.shape) != 3:
        raise ShapeError(f"conv2d_valid input must be [h,w,c], got {inputs.shape}")
    if len(kernels.shape) != 4:
        raise ShapeError(f"conv2d_valid kernels must be [kh,kw,c,f], got {kernels.shape}")
    h, w, c = inputs.shape
    kh, kw, kc, f = kernels.shape
    if len(bias.shape) != 1 or bias.shape[0] != f:
        raise ShapeError(f"bias must be [{f}], got {bias.shape}")
    if kc != c:
        raise ShapeError(
            f"channel mismatch: input {inputs.shape} vs kernels {kernels.shape}"
        )
    if kh > h or kw > w:
        raise ShapeError(
            f"kernel {kernels.shape} larger than input {inputs.shape}"
        )
    windows = np.lib.stride_tricks.sliding_window_view(
        inputs.array, (kh, kw), axis=(0, 1)
    )  # (h', w', c, kh, kw)
    out = np.einsum("ijckl,klcf->ijf", windows, kernels.array, optimize=False)
    return Tensor(out + bias.array)


def maxpool2(inputs: Tensor) -> Tensor:
    """2x2 non-overlapping window maxima; a trailing odd row/column is dropped."""
    inputs = _as_tensor(inputs, "inputs")
    if len(inputs.shape) != 3:
        raise ShapeError(f"maxpool2 input must be [h,w,f], got {inputs.shape}")
    h, w, f = inputs.shape
    if h < 2 or w < 2:
        raise ShapeError(f"maxpool2 needs h,w >= 2, got {inputs.shape}")
    h2, w2 = h // 2, w // 2
    cropped = inputs.array[: 2 * h2, : 2 * w2, :]
    return Tensor(cropped.reshape(h2, 2, w2, 2, f).max(axis=(1, 3)))


def relu(x: Tensor) -> Tensor:
    """Elementwise max(0, x)."""
    x = _as_tensor(x, "x")
    return Tensor(np.maximum(x.array, 0.0))


def relu_grad(x: Tensor) -> Tensor:
    """Elementwise subgradient of relu: 1 where x > 0, else 0 (0 at x == 0)."""
    x = _as_tensor(x, "x")
    return Tensor((x.array > 0.0).astype(np.float64))


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    """Stable softmax along the last axis of an ndarray (max-subtraction)."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(logits: Tensor) -> Tensor:
    """Softmax of a rank-1 tensor of logits."""
    logits = _as_tensor(logits, "logits")
    if len(logits.shape) != 1 or logits.shape[0] < 1:
        raise ShapeError(f"softmax needs a non-empty rank-1 tensor, got {logits.shape}")
    return Tensor(softmax_rows(logits.array))
