"""Dense float64 numeric primitives with hand-derived backward passes.

Everything downstream (feature extraction, embedding alignment, the
attention update, the segmentation head) is built from the handful of
operations in this module: affine maps, 3x3 convolution, rectifier,
sigmoid, softmax, 2x2 average pooling.  Each primitive that sits on a
training path ships a matching ``*_backward`` that consumes the cache
returned by the forward call.  ``fd_grad`` is the central-difference
oracle the test suite uses to validate every one of those backward
passes.

Conventions:

- all values are float64, C-contiguous
- vectors are shape ``(n,)``, matrices ``(m, n)``
- feature maps are ``(C, H, W)``; batched maps ``(N, C, H, W)``
- batched variants carry a ``_batch`` suffix and are the workhorses;
  the unsuffixed single-instance forms wrap them
"""

from __future__ import annotations

from dataclasses import dataclass, fields, is_dataclass
from typing import Callable, Iterator, Optional

import numpy as np


class DimensionError(ValueError):
    """Operand extents are inconsistent with the operation's contract."""


class EvaluationError(RuntimeError):
    """A function evaluation produced a non-finite value."""


def as_f64(x) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(x, dtype=np.float64))


def check_finite(x: np.ndarray, what: str = "value") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise EvaluationError(f"non-finite {what} encountered")
    return x


# ---------------------------------------------------------------------------
# parameter containers and initialization
# ---------------------------------------------------------------------------


@dataclass
class AffineParams:
    """Weight matrix ``(m, n)`` plus optional bias ``(m,)``."""

    weight: np.ndarray
    bias: Optional[np.ndarray] = None

    def __post_init__(self):
        self.weight = as_f64(self.weight)
        if self.weight.ndim != 2:
            raise DimensionError("affine weight must be a matrix")
        if self.bias is not None:
            self.bias = as_f64(self.bias)
            if self.bias.shape != (self.weight.shape[0],):
                raise DimensionError(
                    f"bias shape {self.bias.shape} does not match weight rows "
                    f"{self.weight.shape[0]}"
                )

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]


@dataclass
class ConvParams:
    """3x3 kernels ``(C_out, C_in, 3, 3)`` with bias ``(C_out,)``.

    ``dilation`` spaces the taps; padding always equals the dilation so
    spatial extents are preserved.
    """

    kernels: np.ndarray
    bias: np.ndarray
    dilation: int = 1

    def __post_init__(self):
        self.kernels = as_f64(self.kernels)
        self.bias = as_f64(self.bias)
        if self.kernels.ndim != 4 or self.kernels.shape[2:] != (3, 3):
            raise DimensionError("conv kernels must have shape (C_out, C_in, 3, 3)")
        if self.bias.shape != (self.kernels.shape[0],):
            raise DimensionError("conv bias length must equal C_out")
        if self.dilation < 1:
            raise DimensionError("dilation must be >= 1")

    @property
    def c_out(self) -> int:
        return self.kernels.shape[0]

    @property
    def c_in(self) -> int:
        return self.kernels.shape[1]


def make_affine(rng: np.random.Generator, m: int, n: int, bias: bool = True) -> AffineParams:
    """Uniform init in [-1/sqrt(n), +1/sqrt(n)] from the supplied generator."""
    s = 1.0 / np.sqrt(n)
    w = rng.uniform(-s, s, size=(m, n))
    b = rng.uniform(-s, s, size=(m,)) if bias else None
    return AffineParams(w, b)


def make_conv(rng: np.random.Generator, c_out: int, c_in: int, dilation: int = 1) -> ConvParams:
    s = 1.0 / np.sqrt(c_in * 9)
    k = rng.uniform(-s, s, size=(c_out, c_in, 3, 3))
    b = rng.uniform(-s, s, size=(c_out,))
    return ConvParams(k, b, dilation)


def param_arrays(obj, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
    """Walk a (possibly nested) parameter dataclass, yielding (path, array).

    Arrays are yielded by reference so callers can update them in place;
    used by the SGD step and the finite-difference suites.
    """
    if isinstance(obj, np.ndarray):
        yield prefix, obj
    elif is_dataclass(obj):
        for f in fields(obj):
            v = getattr(obj, f.name)
            yield from param_arrays(v, f"{prefix}.{f.name}" if prefix else f.name)
    elif isinstance(obj, (list, tuple)):
        for i, v in enumerate(obj):
            yield from param_arrays(v, f"{prefix}[{i}]")
    elif obj is None or isinstance(obj, (int, float, str, bool)):
        return
    else:
        raise TypeError(f"cannot walk parameters of type {type(obj)!r} at {prefix!r}")


# ---------------------------------------------------------------------------
# affine
# ---------------------------------------------------------------------------


def affine(x: np.ndarray, p: AffineParams) -> np.ndarray:
    """weight @ x + bias for a single vector ``x``."""
    x = as_f64(x)
    if x.ndim != 1 or x.shape[0] != p.in_dim:
        raise DimensionError(f"affine input length {x.shape} vs weight columns {p.in_dim}")
    y = p.weight @ x
    if p.bias is not None:
        y = y + p.bias
    return y


def affine_batch(x: np.ndarray, p: AffineParams) -> np.ndarray:
    """Rows of ``x`` (N, n) mapped to (N, m)."""
    if x.ndim != 2 or x.shape[1] != p.in_dim:
        raise DimensionError(f"affine batch input {x.shape} vs weight columns {p.in_dim}")
    y = x @ p.weight.T
    if p.bias is not None:
        y = y + p.bias
    return y


def affine_backward(x: np.ndarray, p: AffineParams, g_out: np.ndarray):
    """Gradients (g_x, g_weight, g_bias) for the single-vector forward."""
    g_x = p.weight.T @ g_out
    g_w = np.outer(g_out, x)
    g_b = g_out.copy() if p.bias is not None else None
    return g_x, g_w, g_b


def affine_batch_backward(x: np.ndarray, p: AffineParams, g_out: np.ndarray):
    g_x = g_out @ p.weight
    g_w = g_out.T @ x
    g_b = g_out.sum(axis=0) if p.bias is not None else None
    return g_x, g_w, g_b


# ---------------------------------------------------------------------------
# 3x3 convolution (correlation, zero padding = dilation, stride 1)
#
# Batched maps are CHANNEL-MAJOR: (C, N, H, W).  That layout makes the
# im2col buffer a contiguous (C*9, N*H*W) matrix, so the convolution is
# a single GEMM with no transposed copies on either side.
# ---------------------------------------------------------------------------


def _im2col(x: np.ndarray, d: int) -> np.ndarray:
    """(C, N, H, W) -> contiguous (C*9, N*H*W) tap-column matrix."""
    c, n, h, w = x.shape
    pad = np.zeros((c, n, h + 2 * d, w + 2 * d), dtype=np.float64)
    pad[:, :, d : d + h, d : d + w] = x
    cols = np.empty((c, 9, n, h, w), dtype=np.float64)
    for ky in range(3):
        for kx in range(3):
            cols[:, ky * 3 + kx] = pad[:, :, ky * d : ky * d + h, kx * d : kx * d + w]
    return cols.reshape(c * 9, n * h * w)


def _col2im(g_cols: np.ndarray, shape: tuple[int, int, int, int], d: int) -> np.ndarray:
    """Adjoint of _im2col: scatter-add columns back onto the input grid."""
    c, n, h, w = shape
    g = g_cols.reshape(c, 9, n, h, w)
    pad = np.zeros((c, n, h + 2 * d, w + 2 * d), dtype=np.float64)
    for ky in range(3):
        for kx in range(3):
            pad[:, :, ky * d : ky * d + h, kx * d : kx * d + w] += g[:, ky * 3 + kx]
    return pad[:, :, d : d + h, d : d + w]


def conv3x3_batch(x: np.ndarray, p: ConvParams) -> tuple[np.ndarray, dict]:
    """Dilated 3x3 correlation over channel-major (C_in, N, H, W)."""
    if x.ndim != 4:
        raise DimensionError("conv3x3_batch expects (C, N, H, W)")
    c, n, h, w = x.shape
    if c != p.c_in:
        raise DimensionError(f"conv input channels {c} vs kernel C_in {p.c_in}")
    cols = _im2col(x, p.dilation)
    kmat = p.kernels.reshape(p.c_out, c * 9)
    out = kmat @ cols
    out += p.bias[:, None]
    cache = {"x": x, "x_shape": x.shape, "p": p}  # cols recomputed in backward
    return out.reshape(p.c_out, n, h, w), cache


def conv3x3_batch_backward(cache: dict, g_out: np.ndarray):
    p: ConvParams = cache["p"]
    c, n, h, w = cache["x_shape"]
    g = g_out.reshape(p.c_out, n * h * w)
    cols = _im2col(cache["x"], p.dilation)
    g_k = (g @ cols.T).reshape(p.kernels.shape)
    g_b = g.sum(axis=1)
    kmat = p.kernels.reshape(p.c_out, c * 9)
    g_cols = kmat.T @ g
    g_x = _col2im(g_cols, cache["x_shape"], p.dilation)
    return g_x, g_k, g_b


def conv3x3(fmap: np.ndarray, p: ConvParams) -> np.ndarray:
    """Single-map convenience wrapper: (C_in, H, W) -> (C_out, H, W)."""
    fmap = as_f64(fmap)
    if fmap.ndim != 3:
        raise DimensionError("conv3x3 expects (C, H, W)")
    out, _ = conv3x3_batch(fmap[:, None], p)
    return out[:, 0]


# ---------------------------------------------------------------------------
# activations, pooling, softmax
# ---------------------------------------------------------------------------


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(x: np.ndarray, g_out: np.ndarray) -> np.ndarray:
    return np.where(x > 0, g_out, 0.0)


def sigmoid(v: np.ndarray) -> np.ndarray:
    """Elementwise logistic function, stable for large |v|."""
    v = as_f64(v)
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def sigmoid_backward(s: np.ndarray, g_out: np.ndarray) -> np.ndarray:
    """Backward given the forward *output* s."""
    return g_out * s * (1.0 - s)


def softmax(v: np.ndarray) -> np.ndarray:
    """Stable softmax over the last axis; rejects empty input."""
    v = as_f64(v)
    if v.size == 0 or v.shape[-1] == 0:
        raise DimensionError("softmax of an empty vector")
    shifted = v - v.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(a: np.ndarray, g_out: np.ndarray) -> np.ndarray:
    """Backward given the forward output ``a`` (softmax over last axis)."""
    dot = np.sum(g_out * a, axis=-1, keepdims=True)
    return a * (g_out - dot)


def avgpool2_batch(x: np.ndarray) -> np.ndarray:
    """2x2 mean pooling, stride 2, over the trailing two axes of a 4-D map."""
    a, b, h, w = x.shape
    if h % 2 or w % 2:
        raise DimensionError("avgpool2 needs even spatial extents")
    return x.reshape(a, b, h // 2, 2, w // 2, 2).mean(axis=(3, 5))


def avgpool2_batch_backward(g_out: np.ndarray) -> np.ndarray:
    g = np.repeat(np.repeat(g_out, 2, axis=2), 2, axis=3)
    return g * 0.25


def upsample_nearest(x: np.ndarray, factor: int) -> np.ndarray:
    """Nearest-neighbor upsampling of the trailing two axes."""
    return np.repeat(np.repeat(x, factor, axis=-2), factor, axis=-1)


def downsample_nearest(mask: np.ndarray, factor: int) -> np.ndarray:
    """Nearest-neighbor (top-left tap) downsampling of a 2-D grid."""
    h, w = mask.shape
    if h % factor or w % factor:
        raise DimensionError(f"extents {mask.shape} not divisible by {factor}")
    return mask[::factor, ::factor]


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------


def fd_grad(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-3) -> np.ndarray:
    """Central-difference gradient estimate of a scalar-valued ``f`` at ``x``.

    Perturbs one coordinate at a time: (f(x + h e_k) - f(x - h e_k)) / 2h.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    x = as_f64(x).copy()
    g = np.zeros_like(x)
    flat = x.ravel()
    gflat = g.ravel()
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        fp = float(f(x))
        flat[k] = orig - h
        fm = float(f(x))
        flat[k] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise EvaluationError(f"non-finite function value at coordinate {k}")
        gflat[k] = (fp - fm) / (2.0 * h)
    return g


def rel_error(analytic: np.ndarray, estimate: np.ndarray, floor: float = 1e-3) -> float:
    """Max relative disagreement, with a floor so near-zero entries compare absolutely."""
    a = np.asarray(analytic, dtype=np.float64)
    e = np.asarray(estimate, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(e)), floor)
    return float(np.max(np.abs(a - e) / denom)) if a.size else 0.0
