"""Differentiable ops: forward through :mod:`redfuse.tensor`, VJPs by hand.

Binary ops accept two equal-shape operands, or one operand that is a Python
scalar or a 0-d array/Var (the only broadcasting allowed).
"""

from __future__ import annotations

import numpy as np

from . import tensor as K
from .autograd import Tape, Var


def _val(x):
    return x.value if isinstance(x, Var) else x


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    raise TypeError("op needs at least one Var operand")


def _is_scalar(x) -> bool:
    return np.ndim(_val(x)) == 0


def _check_pair(a, b, what):
    sa, sb = np.shape(_val(a)), np.shape(_val(b))
    if sa != sb and sa != () and sb != ():
        raise K.ShapeError(f"{what}: shape mismatch {sa} vs {sb}")


def _fit(g: np.ndarray, like) -> np.ndarray:
    """Reduce a cotangent onto a scalar operand's shape when it was broadcast."""
    shape = np.shape(_val(like))
    if g.shape == shape:
        return g
    return np.asarray(g.sum(), dtype=g.dtype).reshape(shape)


def _binary(name, a, b, value, da, db):
    tape = _tape_of(a, b)

    def vjp(g):
        return (
            _fit(da(g), a) if isinstance(a, Var) else None,
            _fit(db(g), b) if isinstance(b, Var) else None,
        )

    return tape.record(name, _inputs(a, b), value, _pack(vjp, a, b))


def _inputs(*xs):
    return [x for x in xs if isinstance(x, Var)]


def _pack(vjp, *xs):
    # drop cotangent slots of non-Var operands so they align with _inputs()
    mask = [isinstance(x, Var) for x in xs]

    def packed(g):
        return tuple(c for c, m in zip(vjp(g), mask) if m)

    return packed


# -- arithmetic ------------------------------------------------------------


def add(a, b) -> Var:
    _check_pair(a, b, "add")
    return _binary("add", a, b, np.add(_val(a), _val(b)), lambda g: g, lambda g: g)


def sub(a, b) -> Var:
    _check_pair(a, b, "sub")
    return _binary("sub", a, b, np.subtract(_val(a), _val(b)), lambda g: g, lambda g: -g)


def mul(a, b) -> Var:
    _check_pair(a, b, "mul")
    av, bv = _val(a), _val(b)
    return _binary("mul", a, b, np.multiply(av, bv), lambda g: g * bv, lambda g: g * av)


def div(a, b) -> Var:
    _check_pair(a, b, "div")
    av, bv = _val(a), _val(b)
    out = np.divide(av, bv)
    return _binary("div", a, b, out, lambda g: g / bv, lambda g: -g * out / bv)


def neg(x: Var) -> Var:
    return x.tape.record("neg", [x], -x.value, lambda g: (-g,))


def reciprocal(x: Var) -> Var:
    out = 1.0 / x.value
    return x.tape.record("reciprocal", [x], out, lambda g: (-g * out * out,))


def square(x: Var) -> Var:
    xv = x.value
    return x.tape.record("square", [x], xv * xv, lambda g: (2 * g * xv,))


def sqrt(x: Var) -> Var:
    out = K.sqrt(x.value)
    return x.tape.record("sqrt", [x], out, lambda g: (g / (2 * out),))


def absolute(x: Var) -> Var:
    xv = x.value
    return x.tape.record("abs", [x], np.abs(xv), lambda g: (g * np.sign(xv),))


def maximum(a, b) -> Var:
    """Elementwise max; ties send the gradient to ``a``."""
    _check_pair(a, b, "maximum")
    av, bv = _val(a), _val(b)
    take_a = av >= bv
    return _binary(
        "maximum", a, b, np.maximum(av, bv), lambda g: g * take_a, lambda g: g * ~take_a
    )


def sigmoid(x: Var) -> Var:
    out = K.sigmoid(x.value)
    return x.tape.record("sigmoid", [x], out, lambda g: (g * out * (1 - out),))


def silu(x: Var) -> Var:
    xv = x.value
    s = K.sigmoid(xv)
    return x.tape.record("silu", [x], xv * s, lambda g: (g * s * (1 + xv * (1 - s)),))


def clamp01(x: Var) -> Var:
    """Clamp to [0, 1]; the gradient passes wherever 0 <= x <= 1 (bounds inclusive)."""
    xv = x.value
    inside = (xv >= 0) & (xv <= 1)
    return x.tape.record("clamp01", [x], np.clip(xv, 0, 1), lambda g: (g * inside,))


# -- reductions ------------------------------------------------------------


def sum(x: Var) -> Var:  # noqa: A001
    xv = x.value
    return x.tape.record(
        "sum", [x], np.asarray(xv.sum(), dtype=xv.dtype), lambda g: (np.full_like(xv, g),)
    )


def mean(x: Var) -> Var:
    xv = x.value
    n = xv.size
    return x.tape.record(
        "mean",
        [x],
        np.asarray(xv.mean(), dtype=xv.dtype),
        lambda g: (np.full_like(xv, g / n),),
    )


def take(x: Var, k: int) -> Var:
    """The k-th entry of a 1-D Var as a 0-d Var."""
    xv = x.value

    def vjp(g):
        full = np.zeros_like(xv)
        full[k] = g
        return (full,)

    return x.tape.record("take", [x], np.asarray(xv[k]), vjp)


# -- network layers --------------------------------------------------------


def conv2d(x: Var, weight: Var, bias: Var | None = None, stride: int = 1, padding: int = 0) -> Var:
    xv, wv = x.value, weight.value
    out = K.conv2d(xv, wv, None if bias is None else bias.value, stride, padding)

    def vjp(g):
        gx, gw, gb = K.conv2d_backward(xv, wv, g, stride, padding)
        return (gx, gw) if bias is None else (gx, gw, gb)

    inputs = [x, weight] if bias is None else [x, weight, bias]
    return x.tape.record("conv2d", inputs, out, vjp)


def group_norm(x: Var, gamma: Var, beta: Var, groups: int, eps: float = 1e-5) -> Var:
    xv = x.value
    n, c, h, w = xv.shape
    xg, mu, rstd = K.group_norm_stats(xv, groups, eps)
    xhat = ((xg - mu) * rstd).reshape(xv.shape)
    gv = gamma.value.reshape(1, c, 1, 1)
    out = xhat * gv + beta.value.reshape(1, c, 1, 1)

    def vjp(g):
        g_gamma = (g * xhat).sum(axis=(0, 2, 3))
        g_beta = g.sum(axis=(0, 2, 3))
        gxhat = (g * gv).reshape(n, groups, -1)
        xh = xhat.reshape(n, groups, -1)
        gx = rstd * (gxhat - gxhat.mean(axis=2, keepdims=True) - xh * (gxhat * xh).mean(axis=2, keepdims=True))
        return gx.reshape(xv.shape), g_gamma, g_beta

    return x.tape.record("group_norm", [x, gamma, beta], out, vjp)


def pixel_shuffle(x: Var, r: int) -> Var:
    return x.tape.record("pixel_shuffle", [x], K.pixel_shuffle(x.value, r), lambda g: (K.pixel_unshuffle(g, r),))


def pixel_unshuffle(x: Var, r: int) -> Var:
    return x.tape.record("pixel_unshuffle", [x], K.pixel_unshuffle(x.value, r), lambda g: (K.pixel_shuffle(g, r),))


def split_channels(x: Var) -> tuple[Var, Var]:
    """Split NCHW along channels into equal halves."""
    c = x.shape[1]
    if c % 2:
        raise K.ShapeError(f"cannot split {c} channels into halves")
    h = c // 2
    xv = x.value

    def part(lo, hi):
        def vjp(g):
            full = np.zeros_like(xv)
            full[:, lo:hi] = g
            return (full,)

        return x.tape.record("split", [x], np.ascontiguousarray(xv[:, lo:hi]), vjp)

    return part(0, h), part(h, c)


def concat_channels(a: Var, b: Var) -> Var:
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise K.ShapeError(f"concat: incompatible shapes {a.shape} and {b.shape}")
    ca = a.shape[1]
    tape = _tape_of(a, b)
    out = np.concatenate([_val(a), _val(b)], axis=1)
    return tape.record("concat", [a, b], out, lambda g: (g[:, :ca], g[:, ca:]))


# -- fixed filters ---------------------------------------------------------


def gaussian_filter(x: Var, window: int, sigma: float) -> Var:
    return x.tape.record(
        "gaussian_filter",
        [x],
        K.gaussian_filter(x.value, window, sigma),
        lambda g: (K.gaussian_filter_adjoint(g, window, sigma),),
    )


def sobel_magnitude(x: Var, eps: float = 1e-12) -> Var:
    """sqrt(Sx^2 + Sy^2 + eps^2), smooth at zero gradient."""
    sx, sy = K.sobel(x.value)
    e2 = x.dtype.type(eps) ** 2
    mag = np.sqrt(sx * sx + sy * sy + e2)

    def vjp(g):
        return (K.sobel_adjoint(g * sx / mag, g * sy / mag),)

    return x.tape.record("sobel_magnitude", [x], mag, vjp)


def custom(tape: Tape, name: str, inputs: list[Var], value: np.ndarray, vjp) -> Var:
    """Record an op whose VJP is supplied by the caller (used by reversible spans)."""
    return tape.record(name, inputs, value, vjp)
