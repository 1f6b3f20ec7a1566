"""Dense tensor primitives: elementwise ops, matmul, and seeded random fills.

Tensors are plain numpy arrays in row-major layout; 4-d activations use the
NCHW convention. Every op checks its result for NaN/Inf and fails fast with
the op name and the first offending flat index.
"""

import numpy as np

from .errors import NumericsError, ShapeError

DEFAULT_DTYPE = np.float32


def check_finite(x, op):
    """Raise NumericsError naming the first non-finite entry of x."""
    if np.all(np.isfinite(x)):
        return x
    flat = np.asarray(x).ravel()
    idx = int(np.argmin(np.isfinite(flat)))
    raise NumericsError(f"{op}: non-finite value {flat[idx]!r} at flat index {idx}")


def sigmoid(x):
    x = np.asarray(x)
    out = np.empty_like(x, dtype=x.dtype if x.dtype.kind == "f" else np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def tanh(x):
    return np.tanh(x)


def relu(x):
    return np.maximum(x, 0)


def _broadcast_bias(a, b):
    """Allow a per-channel bias to broadcast over the spatial dims of NCHW/CHW."""
    b = np.asarray(b)
    a = np.asarray(a)
    if b.shape == a.shape:
        return b
    if b.ndim == 1:
        if a.ndim == 4 and b.shape[0] == a.shape[1]:
            return b.reshape(1, -1, 1, 1)
        if a.ndim == 3 and b.shape[0] == a.shape[0]:
            return b.reshape(-1, 1, 1)
    raise ShapeError(f"operand shape {b.shape} incompatible with {a.shape}")


_UNARY = {"sigmoid": sigmoid, "tanh": tanh, "relu": relu}
_BINARY = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
    "scale": np.multiply,
}


def elementwise(op, a, b=None):
    """Apply a tagged elementwise op; binary ops accept an equal-shape operand
    or a per-channel bias vector."""
    a = np.asarray(a)
    if op in _UNARY:
        if b is not None:
            raise ShapeError(f"{op} takes one operand")
        out = _UNARY[op](a)
    elif op in _BINARY:
        if b is None:
            raise ShapeError(f"{op} takes two operands")
        out = _BINARY[op](a, _broadcast_bias(a, b))
    else:
        raise ValueError(f"unknown elementwise op {op!r}")
    return check_finite(out, op)


def matmul(a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects rank-2 operands, got {a.shape} x {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} x {b.shape}")
    return check_finite(a @ b, "matmul")


class Rng:
    """Deterministic PRNG (numpy PCG64) with a documented seed-split scheme.

    Identical seeds produce identical scalar streams on every platform.
    Children spawned via split() are independent and reproducible.
    """

    algorithm = "PCG64"

    def __init__(self, seed, _seq=None):
        self.seed = int(seed) if _seq is None else None
        self._seq = _seq if _seq is not None else np.random.SeedSequence(int(seed))
        self._gen = np.random.Generator(np.random.PCG64(self._seq))

    def split(self, n):
        """Derive n independent child generators (SeedSequence.spawn)."""
        return [Rng(0, _seq=child) for child in self._seq.spawn(n)]

    def uniform(self, lo, hi, shape=None):
        return self._gen.uniform(lo, hi, shape)

    def integers(self, lo, hi):
        return int(self._gen.integers(lo, hi))

    def permutation(self, n):
        return self._gen.permutation(n)

    def choice(self, n):
        return int(self._gen.integers(0, n))


def fill_random(shape, rng, dist="uniform", lo=-1.0, hi=1.0, fan_in=None,
                dtype=DEFAULT_DTYPE):
    """Draw a tensor from the given distribution.

    dist="uniform" draws U[lo, hi); dist="scaled-fan-in" draws
    U[-sqrt(6/fan_in), +sqrt(6/fan_in)) with fan_in defaulting to the product
    of all dims past the first.
    """
    shape = tuple(int(s) for s in shape)
    if any(s < 0 for s in shape):
        raise ShapeError(f"negative extent in shape {shape}")
    if dist == "scaled-fan-in":
        if fan_in is None:
            fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else shape[0]
        bound = np.sqrt(6.0 / fan_in)
        lo, hi = -bound, bound
    elif dist != "uniform":
        raise ValueError(f"unknown distribution {dist!r}")
    out = rng.uniform(lo, hi, shape).astype(dtype)
    return check_finite(out, "fill_random")
