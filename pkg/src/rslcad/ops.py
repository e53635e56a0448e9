"""Forward/backward numeric kernels for the CNN.

Every kernel works on float64 numpy arrays. Image-like tensors are either a
single sample ``(C, H, W)`` or a batch ``(N, C, H, W)``; single samples are
promoted to a batch of one internally and squeezed back on return.

Convolution is cross-correlation with stride 1. ``padding`` defaults to 0
("valid"); the network builder passes ``k // 2`` to keep extents.
Max pooling is non-overlapping (stride == window) and crops any trailing
remainder.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from . import _kernels

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when tensor extents do not agree with an operation's contract."""


class NonFiniteError(FloatingPointError, ValueError):
    """A tensor holds NaN or Inf; numerically a training failure, not bad input shape."""


@dataclass
class ConvParams:
    kernel: np.ndarray  # (out_channels, in_channels, kH, kW)
    bias: np.ndarray  # (out_channels,)

    def __post_init__(self):
        self.kernel = as_tensor(self.kernel)
        self.bias = as_tensor(self.bias)
        if self.kernel.ndim != 4:
            raise ShapeError(f"conv kernel must be rank 4, got shape {self.kernel.shape}")
        if self.bias.shape != (self.kernel.shape[0],):
            raise ShapeError(
                f"conv bias shape {self.bias.shape} does not match "
                f"{self.kernel.shape[0]} output channels"
            )

    @property
    def out_channels(self) -> int:
        return self.kernel.shape[0]

    @property
    def in_channels(self) -> int:
        return self.kernel.shape[1]


@dataclass
class FcParams:
    weights: np.ndarray  # (out_dim, in_dim)
    bias: np.ndarray  # (out_dim,)

    def __post_init__(self):
        self.weights = as_tensor(self.weights)
        self.bias = as_tensor(self.bias)
        if self.weights.ndim != 2:
            raise ShapeError(f"fc weights must be rank 2, got shape {self.weights.shape}")
        if self.bias.shape != (self.weights.shape[0],):
            raise ShapeError(
                f"fc bias shape {self.bias.shape} does not match "
                f"{self.weights.shape[0]} outputs"
            )


@dataclass
class PoolIndex:
    """Argmax bookkeeping from ``pool_forward``.

    ``flat_index`` has the pooled output's shape; each entry is the position of
    the winning element in the raveled input.
    """

    input_shape: Tuple[int, ...]
    flat_index: np.ndarray


def as_tensor(values) -> np.ndarray:
    """Convert to a float64 array of rank 1..4 with finite entries."""
    arr = np.asarray(values, dtype=DTYPE)
    if not 1 <= arr.ndim <= 4:
        raise ShapeError(f"tensors have rank 1..4, got rank {arr.ndim}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError("tensor contains non-finite values")
    return arr


def _batched(x: np.ndarray) -> Tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"expected (C,H,W) or (N,C,H,W) input, got shape {x.shape}")


def _pad(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _im2col_cm(xp: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """Patch matrix ``(C*kh*kw, N*H'*W')`` of a padded channel-major batch ``(C, N, H, W)``."""
    c, n, h, w = xp.shape
    ho, wo = h - kh + 1, w - kw + 1
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=DTYPE)
    for a in range(kh):
        for b in range(kw):
            cols[:, a, b] = xp[:, :, a:a + ho, b:b + wo]
    return cols.reshape(c * kh * kw, n * ho * wo)


def _check_conv(c_in: int, h: int, w: int, params: ConvParams, padding: int) -> Tuple[int, int]:
    o, c, kh, kw = params.kernel.shape
    if padding < 0:
        raise ShapeError("padding must be non-negative")
    if c_in != c:
        raise ShapeError(f"input has {c_in} channels, kernel expects {c}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if hp < kh or wp < kw:
        raise ShapeError(f"input extent {hp}x{wp} (padded) smaller than kernel {kh}x{kw}")
    return hp - kh + 1, wp - kw + 1


def conv_forward_cm(x: np.ndarray, params: ConvParams, padding: int = 0, add_bias: bool = True):
    """Convolution on a channel-major batch ``(C, N, H, W)``.

    Returns ``(output (O, N, H', W'), cols)``; ``cols`` feeds :func:`conv_backward_cm`.
    With ``add_bias=False`` the caller adds the bias later (after pooling,
    which commutes with a per-channel constant).
    """
    c, n, h, w = x.shape
    ho, wo = _check_conv(c, h, w, params, padding)
    o, _, kh, kw = params.kernel.shape
    cols = _im2col_cm(_pad(x, padding), kh, kw)
    out = params.kernel.reshape(o, -1) @ cols
    if add_bias:
        out += params.bias[:, None]
    return out.reshape(o, n, ho, wo), cols


def conv_backward_cm(
    x_shape: Tuple[int, int, int, int],
    params: ConvParams,
    upstream: np.ndarray,
    cols: np.ndarray,
    padding: int = 0,
    need_input_grad: bool = True,
):
    """Backward of :func:`conv_forward_cm`; ``upstream`` is ``(O, N, H', W')``."""
    c, n, h, w = x_shape
    ho, wo = _check_conv(c, h, w, params, padding)
    o, _, kh, kw = params.kernel.shape
    if upstream.shape != (o, n, ho, wo):
        raise ShapeError(f"upstream grad shape {upstream.shape} != conv output shape {(o, n, ho, wo)}")
    gmat = upstream.reshape(o, n * ho * wo)
    grads = ConvParams((gmat @ cols.T).reshape(o, c, kh, kw), gmat.sum(axis=1))
    if not need_input_grad:
        return None, grads

    dcols = params.kernel.reshape(o, -1).T @ gmat
    hp, wp = h + 2 * padding, w + 2 * padding
    dxp = _kernels.col2im(dcols, c, n, hp, wp, kh, kw)
    if padding:
        dxp = np.ascontiguousarray(dxp[:, :, padding:padding + h, padding:padding + w])
    return dxp, grads


def conv_forward(x: np.ndarray, params: ConvParams, padding: int = 0) -> np.ndarray:
    """Stride-1 cross-correlation plus per-channel bias.

    Output extents are ``H + 2*padding - kH + 1`` by ``W + 2*padding - kW + 1``.
    """
    xb, single = _batched(x)
    out, _ = conv_forward_cm(np.ascontiguousarray(xb.transpose(1, 0, 2, 3)), params, padding)
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))
    return out[0] if single else out


def conv_backward(
    x: np.ndarray,
    params: ConvParams,
    upstream: np.ndarray,
    padding: int = 0,
    need_input_grad: bool = True,
):
    """Gradients of a scalar loss through :func:`conv_forward`.

    Returns ``(input_grad, ConvParams(kernel_grad, bias_grad))``;
    ``input_grad`` is None when ``need_input_grad`` is false.
    """
    xb, single = _batched(x)
    gb, _ = _batched(upstream)
    xcm = np.ascontiguousarray(xb.transpose(1, 0, 2, 3))
    ho, wo = _check_conv(xcm.shape[0], xcm.shape[2], xcm.shape[3], params, padding)
    expected = (xb.shape[0], params.out_channels, ho, wo)
    if gb.shape != expected:
        raise ShapeError(f"upstream grad shape {gb.shape} != conv output shape {expected}")
    cols = _im2col_cm(_pad(xcm, padding), *params.kernel.shape[2:])
    gcm = np.ascontiguousarray(gb.transpose(1, 0, 2, 3))
    dx, grads = conv_backward_cm(xcm.shape, params, gcm, cols, padding, need_input_grad)
    if dx is not None:
        dx = np.ascontiguousarray(dx.transpose(1, 0, 2, 3))
        dx = dx[0] if single else dx
    return dx, grads


def pool_forward(x: np.ndarray, window: Tuple[int, int]):
    """Non-overlapping max pooling.

    Returns ``(output, PoolIndex)``. Within a window the first maximum in
    row-major order wins. Any leading layout works for rank-4 input, since
    only the last two axes are pooled.
    """
    xb, single = _batched(x)
    ph, pw = window
    n, c, h, w = xb.shape
    if ph < 1 or pw < 1:
        raise ShapeError(f"pool window must be positive, got {window}")
    if h < ph or w < pw:
        raise ShapeError(f"pool window {ph}x{pw} larger than input {h}x{w}")
    out, flat = _kernels.maxpool(np.ascontiguousarray(xb).reshape(n * c, h, w), ph, pw)
    out = out.reshape(n, c, h // ph, w // pw)
    flat = flat.reshape(out.shape)
    if single:
        return out[0], PoolIndex((c, h, w), flat[0])
    return out, PoolIndex((n, c, h, w), flat)


def pool_backward(index: PoolIndex, upstream: np.ndarray) -> np.ndarray:
    """Route each upstream value to its argmax position; zero elsewhere."""
    upstream = np.asarray(upstream, dtype=DTYPE)
    if upstream.shape != index.flat_index.shape:
        raise ShapeError(
            f"upstream grad shape {upstream.shape} != pooled shape {index.flat_index.shape}"
        )
    size = int(np.prod(index.input_shape))
    if index.flat_index.size and (index.flat_index.min() < 0 or index.flat_index.max() >= size):
        raise RuntimeError("pool index map inconsistent with input shape")
    grad = np.zeros(size, dtype=DTYPE)
    # windows never overlap, so every target is written at most once
    grad[index.flat_index.ravel()] = upstream.ravel()
    return grad.reshape(index.input_shape)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(np.asarray(x, dtype=DTYPE), 0.0)


def relu_backward(x: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=DTYPE)
    upstream = np.asarray(upstream, dtype=DTYPE)
    if x.shape != upstream.shape:
        raise ShapeError(f"relu upstream shape {upstream.shape} != input shape {x.shape}")
    return np.where(x > 0, upstream, 0.0)


def fc_forward(x: np.ndarray, params: FcParams) -> np.ndarray:
    """Affine map on a flattened vector ``(in_dim,)`` or batch ``(N, in_dim)``."""
    x = np.asarray(x, dtype=DTYPE)
    in_dim = params.weights.shape[1]
    if x.shape[-1] != in_dim or x.ndim not in (1, 2):
        raise ShapeError(f"fc expects input length {in_dim}, got shape {x.shape}")
    return x @ params.weights.T + params.bias


def fc_backward(x: np.ndarray, params: FcParams, upstream: np.ndarray):
    """Returns ``(input_grad, FcParams(weight_grad, bias_grad))``."""
    x = np.asarray(x, dtype=DTYPE)
    upstream = np.asarray(upstream, dtype=DTYPE)
    out_dim, in_dim = params.weights.shape
    if x.shape[-1] != in_dim or upstream.shape != x.shape[:-1] + (out_dim,):
        raise ShapeError(
            f"fc backward shapes disagree: input {x.shape}, upstream {upstream.shape}, "
            f"weights {params.weights.shape}"
        )
    x2 = x.reshape(-1, in_dim)
    g2 = upstream.reshape(-1, out_dim)
    grads = FcParams(g2.T @ x2, g2.sum(axis=0))
    return upstream @ params.weights, grads


def softmax(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=DTYPE)
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, label):
    """Negative log-likelihood of ``label`` under softmax(logits).

    For a 1-D ``logits`` and integer ``label`` returns ``(loss, logit_grad)``.
    For ``(N, K)`` logits and an array of labels returns per-sample losses
    ``(N,)`` and per-sample gradients ``(N, K)`` (not averaged).
    """
    logits = np.asarray(logits, dtype=DTYPE)
    single = logits.ndim == 1
    lg = logits[None] if single else logits
    labels = np.atleast_1d(np.asarray(label))
    k = lg.shape[-1]
    if labels.shape != (lg.shape[0],):
        raise ShapeError(f"{labels.shape[0]} labels for {lg.shape[0]} logit rows")
    if not np.issubdtype(labels.dtype, np.integer) or labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels must be integers in [0, {k}), got {labels.tolist()}")

    z = lg - lg.max(axis=-1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=-1))
    rows = np.arange(lg.shape[0])
    losses = log_norm - z[rows, labels]
    grad = np.exp(z - log_norm[:, None])
    grad[rows, labels] -= 1.0
    if single:
        return float(losses[0]), grad[0]
    return losses, grad


def sgd_update(params: np.ndarray, grads: np.ndarray, learning_rate: float) -> np.ndarray:
    """Return ``params - learning_rate * grads`` as a new array.

    Value semantics: two successive updates from a snapshot equal one update
    with the summed gradients, up to rounding.
    """
    params = np.asarray(params, dtype=DTYPE)
    grads = np.asarray(grads, dtype=DTYPE)
    if params.shape != grads.shape:
        raise ShapeError(f"param shape {params.shape} != grad shape {grads.shape}")
    if learning_rate < 0:
        raise ValueError("learning rate must be non-negative")
    return params - learning_rate * grads
