"""Fusion losses: SSIM, pixel L1 and maximum-gradient, summed unweighted.

All functions accept Vars (differentiable, recorded on their tape) or plain
arrays (evaluated without recording, returning floats). Images are NCHW in
[0, 1]; every norm is a mean over pixels (and batch).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .autograd import Tape, Var

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = (0.01 * 1.0) ** 2
SSIM_C2 = (0.03 * 1.0) ** 2
SOBEL_EPS = 1e-12


def _as_vars(*xs):
    tape = next((x.tape for x in xs if isinstance(x, Var)), None)
    if tape is None:
        tape = Tape(grad=False)
        return tuple(Var(np.asarray(x), tape) for x in xs), True
    return tuple(x if isinstance(x, Var) else tape.constant(x) for x in xs), False


def _out(v: Var, unwrap: bool):
    return float(v.value) if unwrap else v


def _check(*xs):
    shapes = {tuple(np.shape(x.value if isinstance(x, Var) else x)) for x in xs}
    if len(shapes) != 1:
        raise ValueError(f"loss inputs must share one shape, got {sorted(shapes)}")


def _ssim_map(a: Var, b: Var) -> Var:
    def blur(x):
        return ops.gaussian_filter(x, SSIM_WINDOW, SSIM_SIGMA)

    mu_a, mu_b = blur(a), blur(b)
    mu_aa, mu_bb, mu_ab = ops.square(mu_a), ops.square(mu_b), mu_a * mu_b
    s_aa = blur(ops.square(a)) - mu_aa
    s_bb = blur(ops.square(b)) - mu_bb
    s_ab = blur(a * b) - mu_ab
    num = (2 * mu_ab + SSIM_C1) * (2 * s_ab + SSIM_C2)
    den = (mu_aa + mu_bb + SSIM_C1) * (s_aa + s_bb + SSIM_C2)
    return num / den


def ssim_index(a, b):
    """Mean local SSIM (11x11 Gaussian window, sigma 1.5, L = 1)."""
    _check(a, b)
    (a, b), unwrap = _as_vars(a, b)
    return _out(ops.mean(_ssim_map(a, b)), unwrap)


def loss_ssim(i, v, f):
    """2 - (SSIM(i, f) + SSIM(v, f))."""
    _check(i, v, f)
    (i, v, f), unwrap = _as_vars(i, v, f)
    s = ops.mean(_ssim_map(i, f)) + ops.mean(_ssim_map(v, f))
    return _out(2.0 - s, unwrap)


def loss_l1(i, v, f):
    _check(i, v, f)
    (i, v, f), unwrap = _as_vars(i, v, f)
    return _out(ops.mean(ops.absolute(i - f)) + ops.mean(ops.absolute(v - f)), unwrap)


def loss_grad(i, v, f):
    """Mean |Sobel(f) - max(Sobel(v), Sobel(i))| over gradient-magnitude maps."""
    _check(i, v, f)
    (i, v, f), unwrap = _as_vars(i, v, f)
    target = ops.maximum(ops.sobel_magnitude(v, SOBEL_EPS), ops.sobel_magnitude(i, SOBEL_EPS))
    return _out(ops.mean(ops.absolute(ops.sobel_magnitude(f, SOBEL_EPS) - target)), unwrap)


@dataclass
class LossBreakdown:
    l_ssim: float
    l_1: float
    l_grad: float
    total: float
    total_var: Var | None = field(default=None, repr=False, compare=False)

    def as_dict(self) -> dict:
        return {"l_ssim": self.l_ssim, "l_1": self.l_1, "l_grad": self.l_grad, "total": self.total}


def loss_total(i, v, f) -> LossBreakdown:
    """Unweighted sum of the three losses; ``total_var`` is the scalar Var (on a tape when recording)."""
    _check(i, v, f)
    (i, v, f), _ = _as_vars(i, v, f)
    ls, l1, lg = loss_ssim(i, v, f), loss_l1(i, v, f), loss_grad(i, v, f)
    total = ls + l1 + lg
    return LossBreakdown(
        float(ls.value), float(l1.value), float(lg.value), float(total.value),
        total,
    )
