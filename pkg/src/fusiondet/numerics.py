"""Dense float64 math kernels shared by every other module.

All arrays are plain numpy ``float64`` ndarrays in row-major order. Public
ops validate shapes, never mutate their inputs, and guarantee finite
outputs. Gradients exist only where a loss needs them (small per-layer
backward helpers); there is no autodiff graph.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ShapeError(ValueError):
    """Raised when an operand's shape violates an op's contract."""


class OracleError(RuntimeError):
    """Raised when a numerical verification probe produces NaN/Inf."""


def as_tensor(x, name: str = "tensor") -> np.ndarray:
    """Coerce to a float64 array and reject non-finite values."""
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains NaN or Inf")
    return arr


def check_finite(arr: np.ndarray, name: str = "result") -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains NaN or Inf")
    return arr


# ---------------------------------------------------------------------------
# parameter containers


@dataclass
class LinearParams:
    """Affine map y = W x + b with W of shape [out, in] and b of shape [out]."""

    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.weight = as_tensor(self.weight, "weight")
        self.bias = as_tensor(self.bias, "bias")
        if self.weight.ndim != 2 or self.bias.ndim != 1:
            raise ShapeError("weight must be 2-D and bias 1-D")
        if self.weight.shape[0] != self.bias.shape[0]:
            raise ShapeError(
                f"weight rows {self.weight.shape[0]} != bias length {self.bias.shape[0]}"
            )

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]


@dataclass
class MlpParams:
    """Two affine layers with a rectifier between them."""

    first: LinearParams
    second: LinearParams

    def __post_init__(self):
        if self.first.out_dim != self.second.in_dim:
            raise ShapeError(
                f"inner dims do not chain: {self.first.out_dim} -> {self.second.in_dim}"
            )

    @property
    def in_dim(self) -> int:
        return self.first.in_dim

    @property
    def out_dim(self) -> int:
        return self.second.out_dim


def init_linear(rng: np.random.Generator, out_dim: int, in_dim: int) -> LinearParams:
    """Uniform init in +-1/sqrt(fan_in); deterministic given the generator state."""
    bound = 1.0 / np.sqrt(max(in_dim, 1))
    weight = rng.uniform(-bound, bound, size=(out_dim, in_dim))
    bias = rng.uniform(-bound, bound, size=out_dim)
    return LinearParams(weight, bias)


def init_mlp(rng: np.random.Generator, in_dim: int, hidden_dim: int, out_dim: int) -> MlpParams:
    return MlpParams(init_linear(rng, hidden_dim, in_dim), init_linear(rng, out_dim, hidden_dim))


def zeros_linear(out_dim: int, in_dim: int) -> LinearParams:
    return LinearParams(np.zeros((out_dim, in_dim)), np.zeros(out_dim))


def zeros_mlp(in_dim: int, hidden_dim: int, out_dim: int) -> MlpParams:
    return MlpParams(zeros_linear(hidden_dim, in_dim), zeros_linear(out_dim, hidden_dim))


# ---------------------------------------------------------------------------
# core ops


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product of a [m,k] and b [k,n]."""
    a = as_tensor(a, "a")
    b = as_tensor(b, "b")
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError("matmul expects 2-D operands")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dims differ: {a.shape} x {b.shape}")
    return check_finite(a @ b)


def softmax(v: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    """Temperature-scaled softmax of a vector, stabilized by max subtraction."""
    v = as_tensor(v, "v")
    if v.ndim != 1 or v.size == 0:
        raise ShapeError("softmax expects a non-empty 1-D vector")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    z = v / temperature
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def stable_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Softmax along an axis of an n-D array; internal attention helper."""
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def linear_forward(p: LinearParams, x: np.ndarray) -> np.ndarray:
    """Apply an affine layer to rows of x (last axis = input dim)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != p.in_dim:
        raise ShapeError(f"input width {x.shape[-1]} != layer in_dim {p.in_dim}")
    return x @ p.weight.T + p.bias


def mlp_forward(p: MlpParams, x: np.ndarray) -> np.ndarray:
    """linear -> ReLU -> linear on the last axis."""
    return linear_forward(p.second, relu(linear_forward(p.first, x)))


def linear_backward(p: LinearParams, x: np.ndarray, dout: np.ndarray):
    """Gradients of an affine layer.

    x is [n, in] (or [in]), dout matches the forward output. Returns
    (d_weight, d_bias, d_x).
    """
    x2 = np.atleast_2d(np.asarray(x, dtype=np.float64))
    d2 = np.atleast_2d(np.asarray(dout, dtype=np.float64))
    dw = d2.T @ x2
    db = d2.sum(axis=0)
    dx = d2 @ p.weight
    if np.asarray(x).ndim == 1:
        dx = dx[0]
    return dw, db, dx


def mlp_backward(p: MlpParams, x: np.ndarray, dout: np.ndarray):
    """Gradients of linear -> ReLU -> linear.

    ReLU subgradient at 0 is taken as 0. Returns
    ((dw1, db1), (dw2, db2), dx).
    """
    pre = linear_forward(p.first, x)
    hidden = relu(pre)
    dw2, db2, dhidden = linear_backward(p.second, hidden, dout)
    dpre = dhidden * (pre > 0)
    dw1, db1, dx = linear_backward(p.first, x, dpre)
    return (dw1, db1), (dw2, db2), dx


def conv2d(
    input: np.ndarray,
    kernels: np.ndarray,
    stride: int = 1,
    padding: int = 0,
) -> np.ndarray:
    """2-D cross-correlation of input [C,H,W] with kernels [C',C,kh,kw]."""
    x = as_tensor(input, "input")
    k = as_tensor(kernels, "kernels")
    if x.ndim != 3 or k.ndim != 4:
        raise ShapeError("conv2d expects input [C,H,W] and kernels [C',C,kh,kw]")
    c, h, w = x.shape
    c_out, c_in, kh, kw = k.shape
    if c_in != c:
        raise ShapeError(f"kernel input channels {c_in} != input channels {c}")
    h_out = (h + 2 * padding - kh) // stride + 1
    w_out = (w + 2 * padding - kw) // stride + 1
    if h_out <= 0 or w_out <= 0:
        raise ShapeError(f"non-positive output extents ({h_out}, {w_out})")
    if padding:
        x = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    # im2col: patches [h_out*w_out, C*kh*kw] against kernels [C', C*kh*kw]
    windows = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(1, 2))
    windows = windows[:, ::stride, ::stride]  # [C, h_out, w_out, kh, kw]
    cols = windows.transpose(1, 2, 0, 3, 4).reshape(h_out * w_out, c * kh * kw)
    out = cols @ k.reshape(c_out, c * kh * kw).T
    return check_finite(out.T.reshape(c_out, h_out, w_out))


def conv_transpose2d(input: np.ndarray, kernels: np.ndarray, stride: int) -> np.ndarray:
    """Transposed convolution of input [C,H,W] with kernels [C,C',kh,kw].

    Output extents are (H-1)*stride+kh by (W-1)*stride+kw; with kh=kw=stride
    this exactly multiplies the spatial extents by the stride.
    """
    x = as_tensor(input, "input")
    k = as_tensor(kernels, "kernels")
    c, h, w = x.shape
    c_in, c_out, kh, kw = k.shape
    if c_in != c:
        raise ShapeError(f"kernel input channels {c_in} != input channels {c}")
    h_out = (h - 1) * stride + kh
    w_out = (w - 1) * stride + kw
    # each input cell scatters a [C', kh, kw] block
    contrib = np.einsum("chw,cokl->hwokl", x, k, optimize=True)  # [h,w,C',kh,kw]
    out = np.zeros((c_out, h_out, w_out))
    for i in range(kh):
        for j in range(kw):
            out[:, i : i + h * stride : stride, j : j + w * stride : stride] += (
                contrib[:, :, :, i, j].transpose(2, 0, 1)
            )
    return check_finite(out)


# ---------------------------------------------------------------------------
# verification


def finite_diff_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, one probe per coordinate.

    This is the independent oracle every analytic loss gradient is checked
    against; it must stay free of the code paths it verifies.
    """
    if not (1e-7 <= h <= 1e-3):
        raise ValueError("h must lie in [1e-7, 1e-3]")
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = grad.reshape(-1)
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp.reshape(-1)[i] += h
        xm.reshape(-1)[i] -= h
        fp = float(f(xp))
        fm = float(f(xm))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise OracleError(f"non-finite probe at coordinate {i}")
        flat[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max elementwise |a-n| / max(|a|, |n|, 1e-8)."""
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    if a.shape != n.shape:
        raise ShapeError("gradient shapes differ")
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0
