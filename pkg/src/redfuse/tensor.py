"""Dense numeric kernels on NCHW numpy arrays.

Every function here is pure: inputs are never mutated and outputs are fresh
arrays. Learned convolutions use zero padding; the fixed metric/loss filters
(Gaussian, Sobel) use mirror padding, i.e. ``d c b | a b c d | c b a``
(numpy ``"reflect"``, scipy ``"mirror"``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DTYPES = {"single": np.float32, "double": np.float64}

SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T.copy()


class ShapeError(ValueError):
    """Raised when tensor dimensions do not satisfy a kernel's contract."""


def _check_4d(x: np.ndarray, what: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{what}: expected NCHW tensor, got shape {x.shape}")


def _same_shape(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


# --------------------------------------------------------------------------
# convolution
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ConvSpec:
    kernel: np.ndarray  # (Cout, Cin, kH, kW)
    bias: np.ndarray | None = None  # (Cout,)
    stride: int = 1
    padding: int = 0

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return conv2d(x, self.kernel, self.bias, self.stride, self.padding)


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _zero_pad(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    p = padding
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    # (N, Cin, H', W', kh, kw) strided view
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def conv2d(
    x: np.ndarray,
    kernel: np.ndarray,
    bias: np.ndarray | None = None,
    stride: int = 1,
    padding: int = 0,
) -> np.ndarray:
    """2-D cross-correlation with per-output-channel bias."""
    _check_4d(x, "conv2d input")
    if kernel.ndim != 4:
        raise ShapeError(f"conv2d kernel must be (Cout, Cin, kH, kW), got {kernel.shape}")
    cout, cin, kh, kw = kernel.shape
    if x.shape[1] != cin:
        raise ShapeError(f"conv2d: input has {x.shape[1]} channels, kernel expects {cin}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d: invalid stride={stride} padding={padding}")
    h, w = x.shape[2] + 2 * padding, x.shape[3] + 2 * padding
    if h < kh or w < kw:
        raise ShapeError(f"conv2d: padded input {h}x{w} smaller than kernel {kh}x{kw}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({cout},)")
    cols = _windows(_zero_pad(x, padding), kh, kw, stride)
    out = np.tensordot(cols, kernel, axes=([1, 4, 5], [1, 2, 3]))  # N,H',W',Cout
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    if bias is not None:
        out += bias.reshape(1, cout, 1, 1)
    return out


def conv2d_backward(
    x: np.ndarray,
    kernel: np.ndarray,
    grad_out: np.ndarray,
    stride: int = 1,
    padding: int = 0,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vector-Jacobian products of :func:`conv2d` w.r.t. input, kernel, bias."""
    _, _, kh, kw = kernel.shape
    xp = _zero_pad(x, padding)
    cols = _windows(xp, kh, kw, stride)
    grad_kernel = np.tensordot(grad_out, cols, axes=([0, 2, 3], [0, 2, 3]))
    grad_bias = grad_out.sum(axis=(0, 2, 3))
    # N,H',W',Cin,kh,kw
    grad_cols = np.tensordot(grad_out, kernel, axes=([1], [0])).transpose(0, 3, 1, 2, 4, 5)
    grad_xp = np.zeros_like(xp)
    ho, wo = grad_out.shape[2], grad_out.shape[3]
    for a in range(kh):
        for b in range(kw):
            grad_xp[:, :, a : a + stride * (ho - 1) + 1 : stride, b : b + stride * (wo - 1) + 1 : stride] += (
                grad_cols[:, :, :, :, a, b]
            )
    if padding:
        grad_xp = grad_xp[:, :, padding:-padding, padding:-padding]
    return np.ascontiguousarray(grad_xp), grad_kernel, grad_bias


# --------------------------------------------------------------------------
# pixel (un)shuffle
# --------------------------------------------------------------------------


def pixel_unshuffle(x: np.ndarray, r: int) -> np.ndarray:
    """Space-to-depth: out[n, c*r*r + dy*r + dx, h, w] = x[n, c, h*r + dy, w*r + dx]."""
    _check_4d(x, "pixel_unshuffle")
    if r < 1:
        raise ShapeError(f"pixel_unshuffle: factor must be positive, got {r}")
    n, c, h, w = x.shape
    if h % r or w % r:
        raise ShapeError(f"pixel_unshuffle: spatial dims {h}x{w} not divisible by {r}")
    y = x.reshape(n, c, h // r, r, w // r, r).transpose(0, 1, 3, 5, 2, 4)
    return np.ascontiguousarray(y.reshape(n, c * r * r, h // r, w // r))


def pixel_shuffle(x: np.ndarray, r: int) -> np.ndarray:
    """Depth-to-space; exact inverse of :func:`pixel_unshuffle`."""
    _check_4d(x, "pixel_shuffle")
    if r < 1:
        raise ShapeError(f"pixel_shuffle: factor must be positive, got {r}")
    n, c, h, w = x.shape
    if c % (r * r):
        raise ShapeError(f"pixel_shuffle: {c} channels not divisible by {r * r}")
    y = x.reshape(n, c // (r * r), r, r, h, w).transpose(0, 1, 4, 2, 5, 3)
    return np.ascontiguousarray(y.reshape(n, c // (r * r), h * r, w * r))


# --------------------------------------------------------------------------
# elementwise suite
# --------------------------------------------------------------------------


def _binary(a, b, what):
    if np.isscalar(b):
        return
    _same_shape(np.asarray(a), np.asarray(b), what)


def add(a: np.ndarray, b) -> np.ndarray:
    _binary(a, b, "add")
    return np.add(a, b)


def subtract(a: np.ndarray, b) -> np.ndarray:
    _binary(a, b, "subtract")
    return np.subtract(a, b)


def multiply(a: np.ndarray, b) -> np.ndarray:
    _binary(a, b, "multiply")
    return np.multiply(a, b)


def divide(a: np.ndarray, b) -> np.ndarray:
    _binary(a, b, "divide")
    return np.divide(a, b)


def scale(a: np.ndarray, s: float) -> np.ndarray:
    return np.multiply(a, np.asarray(s, dtype=a.dtype))


def sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)


def silu(x: np.ndarray) -> np.ndarray:
    return x * sigmoid(x)


def absolute(x: np.ndarray) -> np.ndarray:
    return np.abs(x)


def maximum(a: np.ndarray, b) -> np.ndarray:
    _binary(a, b, "maximum")
    return np.maximum(a, b)


def sqrt(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    if np.any(x < 0):
        raise ValueError(f"sqrt of negative value (min {x.min()!r})")
    return np.sqrt(x)


# --------------------------------------------------------------------------
# reductions
# --------------------------------------------------------------------------

_REDUCERS = {"mean": np.mean, "sum": np.sum, "min": np.min, "max": np.max}


def reduce(x: np.ndarray, mode: str, axes=None) -> np.ndarray:
    """Reduce over ``axes`` (all axes when None) with mean/sum/min/max."""
    if mode not in _REDUCERS:
        raise ValueError(f"unknown reduction {mode!r}")
    x = np.asarray(x)
    if axes is not None:
        axes = tuple(np.atleast_1d(axes).tolist())
        for ax in axes:
            if not -x.ndim <= ax < x.ndim:
                raise ShapeError(f"reduce: axis {ax} out of range for shape {x.shape}")
        count = int(np.prod([x.shape[ax] for ax in axes]))
    else:
        count = x.size
    if count == 0:
        raise ShapeError("reduce: empty reduction")
    return np.asarray(_REDUCERS[mode](x, axis=axes))


# --------------------------------------------------------------------------
# mirror padding and fixed filters
# --------------------------------------------------------------------------


def reflect_index(n: int, p: int) -> np.ndarray:
    """Source index for every position of a mirror-padded axis of length n + 2p."""
    if p > 0 and p >= n:
        raise ShapeError(f"mirror padding {p} requires axis length > {p}, got {n}")
    idx = np.arange(-p, n + p)
    idx = np.abs(idx)
    return np.where(idx > n - 1, 2 * (n - 1) - idx, idx)


def pad_reflect(x: np.ndarray, ph: int, pw: int | None = None) -> np.ndarray:
    """Mirror-pad the last two axes."""
    pw = ph if pw is None else pw
    ih = reflect_index(x.shape[-2], ph)
    iw = reflect_index(x.shape[-1], pw)
    return x[..., ih, :][..., iw]


def pad_reflect_adjoint(gp: np.ndarray, ph: int, pw: int | None = None) -> np.ndarray:
    """Fold a gradient on the padded domain back onto the source grid."""
    pw = ph if pw is None else pw
    h = gp.shape[-2] - 2 * ph
    w = gp.shape[-1] - 2 * pw
    ih = reflect_index(h, ph)
    iw = reflect_index(w, pw)
    gw = np.zeros(gp.shape[:-1] + (w,), dtype=gp.dtype)
    np.add.at(gw, (..., iw), gp)
    g = np.zeros(gp.shape[:-2] + (h, w), dtype=gp.dtype)
    np.add.at(g, (..., ih, slice(None)), gw)
    return g


def gaussian_kernel1d(window: int, sigma: float, dtype=np.float64) -> np.ndarray:
    if window < 1 or window % 2 == 0:
        raise ValueError(f"Gaussian window must be a positive odd integer, got {window}")
    if sigma <= 0:
        raise ValueError(f"Gaussian sigma must be positive, got {sigma}")
    d = np.arange(window, dtype=np.float64) - (window - 1) / 2
    k = np.exp(-(d**2) / (2.0 * sigma**2))
    return (k / k.sum()).astype(dtype)


def correlate_valid_h(xp: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Valid 1-D correlation along axis -2 in fixed tap order."""
    n = xp.shape[-2] - k.size + 1
    out = k[0] * xp[..., 0:n, :]
    for j in range(1, k.size):
        out = out + k[j] * xp[..., j : j + n, :]
    return out


def correlate_valid_w(xp: np.ndarray, k: np.ndarray) -> np.ndarray:
    n = xp.shape[-1] - k.size + 1
    out = k[0] * xp[..., 0:n]
    for j in range(1, k.size):
        out = out + k[j] * xp[..., j : j + n]
    return out


def correlate_valid_h_adjoint(g: np.ndarray, k: np.ndarray) -> np.ndarray:
    n = g.shape[-2]
    gp = np.zeros(g.shape[:-2] + (n + k.size - 1, g.shape[-1]), dtype=g.dtype)
    for j in range(k.size):
        gp[..., j : j + n, :] += k[j] * g
    return gp


def correlate_valid_w_adjoint(g: np.ndarray, k: np.ndarray) -> np.ndarray:
    n = g.shape[-1]
    gp = np.zeros(g.shape[:-1] + (n + k.size - 1,), dtype=g.dtype)
    for j in range(k.size):
        gp[..., j : j + n] += k[j] * g
    return gp


def _check_window(x: np.ndarray, window: int) -> None:
    if window > 2 * min(x.shape[-2], x.shape[-1]):
        raise ShapeError(f"window {window} larger than twice the smallest image dim of {x.shape}")


def gaussian_filter(x: np.ndarray, window: int, sigma: float) -> np.ndarray:
    """Separable normalized Gaussian blur over the last two axes, mirror boundary."""
    k = gaussian_kernel1d(window, sigma, x.dtype)
    _check_window(x, window)
    r = window // 2
    if r == 0:
        return x.copy()
    xp = pad_reflect(x, r)
    return correlate_valid_w(correlate_valid_h(xp, k), k)


def gaussian_filter_adjoint(g: np.ndarray, window: int, sigma: float) -> np.ndarray:
    k = gaussian_kernel1d(window, sigma, g.dtype)
    r = window // 2
    if r == 0:
        return g.copy()
    gp = correlate_valid_h_adjoint(correlate_valid_w_adjoint(g, k), k)
    return pad_reflect_adjoint(gp, r)


def _correlate3x3_adjoint(g: np.ndarray, kern: np.ndarray) -> np.ndarray:
    h, w = g.shape[-2], g.shape[-1]
    gp = np.zeros(g.shape[:-2] + (h + 2, w + 2), dtype=g.dtype)
    for a in range(3):
        for b in range(3):
            c = kern[a, b]
            if c:
                gp[..., a : a + h, b : b + w] += g.dtype.type(c) * g
    return gp


def sobel(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Horizontal and vertical 3x3 Sobel responses with mirror padding.

    Evaluated separably, central difference first and [1, 2, 1] smoothing
    second, so flat regions give exact zeros.
    """
    if x.shape[-2] < 3 or x.shape[-1] < 3:
        raise ShapeError(f"Sobel needs images of at least 3x3, got {x.shape}")
    xp = pad_reflect(x, 1)
    two = xp.dtype.type(2)
    dx = xp[..., 2:] - xp[..., :-2]
    dy = xp[..., 2:, :] - xp[..., :-2, :]
    sx = dx[..., :-2, :] + two * dx[..., 1:-1, :] + dx[..., 2:, :]
    sy = dy[..., :-2] + two * dy[..., 1:-1] + dy[..., 2:]
    return sx, sy


def sobel_adjoint(gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    gp = _correlate3x3_adjoint(gx, SOBEL_X) + _correlate3x3_adjoint(gy, SOBEL_Y)
    return pad_reflect_adjoint(gp, 1)


def group_norm_stats(x: np.ndarray, groups: int, eps: float):
    n, c, h, w = x.shape
    if c % groups:
        raise ShapeError(f"group_norm: {c} channels not divisible into {groups} groups")
    xg = x.reshape(n, groups, -1)
    mean = xg.mean(axis=2, keepdims=True)
    var = ((xg - mean) ** 2).mean(axis=2, keepdims=True)
    rstd = 1.0 / np.sqrt(var + x.dtype.type(eps))
    return xg, mean, rstd


def group_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, groups: int, eps: float = 1e-5) -> np.ndarray:
    """Per-sample group normalization (no running statistics)."""
    _check_4d(x, "group_norm")
    xg, mean, rstd = group_norm_stats(x, groups, eps)
    xhat = ((xg - mean) * rstd).reshape(x.shape)
    c = x.shape[1]
    return xhat * gamma.reshape(1, c, 1, 1) + beta.reshape(1, c, 1, 1)
