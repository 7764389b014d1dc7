"""Invertible coupling blocks and the per-step U-Net noise estimator.

A coupling block holds two sub-networks F and G acting on the two channel
halves of its input::

    forward:  y1 = x0;       x1 = F(x0) + y0;   y2 = x1;   x2 = G(x1) + y1
    inverse:  x1 = y2;       y1 = x2 - G(x1);   x0 = y1;   y0 = x1 - F(x0)

On a reversible tape a stack of blocks becomes a single node that keeps only
its output; its VJP rebuilds every block input by inversion and replays the
block on a short-lived sub-tape.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from . import tensor as K
from .autograd import STORE_ALL, MemoryMeter, Tape, Var
from .rng import SplitMix64

RECOMPUTE_TOL = 1e-3

SUBNET_PARAMS = ("conv1.weight", "conv1.bias", "norm.gamma", "norm.beta", "conv2.weight", "conv2.bias")
STACKS = ("down", "mid", "up")


class RecomputeError(FloatingPointError):
    """Inversion did not reproduce a block's retained output."""


@dataclass(frozen=True)
class EstimatorConfig:
    in_channels: int = 1
    width: int = 16
    blocks: int = 2  # coupling blocks per stack
    groups: int = 4

    def __post_init__(self):
        if self.width % (2 * self.groups):
            raise ValueError(f"width {self.width} must be a multiple of 2*groups={2 * self.groups}")
        if self.blocks < 0 or self.in_channels < 1:
            raise ValueError("blocks must be >= 0 and in_channels >= 1")

    def stack_channels(self, stack: str) -> int:
        return 2 * self.width if stack == "mid" else self.width


@dataclass(frozen=True)
class CouplingBlock:
    """Names the F/G parameters of one block inside a parameter dict."""

    prefix: str
    params: dict
    groups: int = 4

    def param_names(self) -> list[str]:
        return [f"{self.prefix}.{s}.{n}" for s in ("F", "G") for n in SUBNET_PARAMS]

    def _subnet(self, which: str, x: Var) -> Var:
        tape = x.tape
        pre = f"{self.prefix}.{which}"

        def p(n):
            return tape.param(f"{pre}.{n}", self.params[f"{pre}.{n}"])

        h = ops.conv2d(x, p("conv1.weight"), p("conv1.bias"), padding=1)
        h = ops.group_norm(h, p("norm.gamma"), p("norm.beta"), self.groups)
        h = ops.silu(h)
        return ops.conv2d(h, p("conv2.weight"), p("conv2.bias"), padding=1)

    def F(self, x: Var) -> Var:
        return self._subnet("F", x)

    def G(self, x: Var) -> Var:
        return self._subnet("G", x)


def _lift(arrays, tape):
    if tape is not None:
        return arrays, tape, False
    ev = Tape(grad=False)
    return tuple(Var(np.asarray(a), ev) for a in arrays), ev, True


def _check_halves(a, b, block: CouplingBlock, what: str):
    if a.shape != b.shape:
        raise K.ShapeError(f"{what}: stream shapes differ {a.shape} vs {b.shape}")
    w = block.params[f"{block.prefix}.F.conv1.weight"]
    if a.shape[1] != w.shape[1]:
        raise K.ShapeError(f"{what}: streams have {a.shape[1]} channels, block expects {w.shape[1]}")


def coupling_forward(x0, y0, block: CouplingBlock, tape: Tape | None = None):
    """(x0, y0) -> (x2, y2). Arrays in give arrays out; Vars stay on their tape."""
    _check_halves(x0, y0, block, "coupling_forward")
    (x0, y0), tape, unwrap = _lift((x0, y0), tape)
    y1 = x0
    x1 = block.F(x0) + y0
    y2 = x1
    x2 = block.G(x1) + y1
    return (x2.value, y2.value) if unwrap else (x2, y2)


def coupling_inverse(x2, y2, block: CouplingBlock, tape: Tape | None = None):
    """(x2, y2) -> (x0, y0), the exact algebraic inverse of coupling_forward."""
    _check_halves(x2, y2, block, "coupling_inverse")
    (x2, y2), tape, unwrap = _lift((x2, y2), tape)
    x1 = y2
    y1 = x2 - block.G(x1)
    x0 = y1
    y0 = x1 - block.F(x0)
    return (x0.value, y0.value) if unwrap else (x0, y0)


def coupling_backward_recompute(
    x2: np.ndarray,
    y2: np.ndarray,
    gx2: np.ndarray,
    gy2: np.ndarray,
    block: CouplingBlock,
    meter: MemoryMeter | None = None,
):
    """Backward through one block from its output alone.

    Returns ``(x0, y0, gx0, gy0, param_grads)``: the recovered inputs, their
    cotangents, and the gradients of the block's parameters.
    """
    x0, y0 = coupling_inverse(x2, y2, block)
    sub = Tape(mode=STORE_ALL, meter=meter or MemoryMeter())
    lx, ly = sub.leaf(x0, "x0"), sub.leaf(y0, "y0")
    ox, oy = coupling_forward(lx, ly, block, sub)
    err = max(float(np.max(np.abs(ox.value - x2))), float(np.max(np.abs(oy.value - y2))))
    if not err <= RECOMPUTE_TOL:
        sub.release()
        raise RecomputeError(
            f"block {block.prefix}: recomputed output differs by {err:.3g} (> {RECOMPUTE_TOL}); "
            "weights are numerically unstable for inversion"
        )
    root = ops.concat_channels(ox, oy)
    grads = sub.backward(root, np.concatenate([gx2, gy2], axis=1))
    return x0, y0, grads.pop("x0"), grads.pop("y0"), grads


def _halves(a: np.ndarray):
    c = a.shape[1] // 2
    return a[:, :c], a[:, c:]


def coupling_stack(x: Var, blocks: list[CouplingBlock]) -> Var:
    """Apply blocks in sequence to the channel halves of ``x``.

    On a recording reversible tape the whole stack is one node retaining only
    its output.
    """
    if not blocks:
        return x
    tape = x.tape
    if not (tape.grad and tape.reversible):
        for b in blocks:
            a, c = ops.split_channels(x)
            x2, y2 = coupling_forward(a, c, b, tape)
            x = ops.concat_channels(x2, y2)
        return x

    ev = Tape(grad=False)
    h = Var(x.value, ev)
    for b in blocks:
        a, c = ops.split_channels(h)
        x2, y2 = coupling_forward(a, c, b, ev)
        h = ops.concat_channels(x2, y2)
    out = h.value
    names = [n for b in blocks for n in b.param_names()]
    pvars = [tape.param(n, blocks[0].params[n]) for n in names]
    meter = tape.meter

    def vjp(g):
        y, gy = out, g
        pgrads = {}
        for b in reversed(blocks):
            x2, y2 = _halves(y)
            gx2, gy2 = _halves(gy)
            x0, y0, gx0, gy0, pg = coupling_backward_recompute(x2, y2, gx2, gy2, b, meter)
            pgrads.update(pg)
            y = np.concatenate([x0, y0], axis=1)
            gy = np.concatenate([gx0, gy0], axis=1)
        return (gy,) + tuple(pgrads[n] for n in names)

    return ops.custom(tape, "coupling_span", [x] + pvars, out, vjp)


# --------------------------------------------------------------------------
# noise estimator
# --------------------------------------------------------------------------


def estimator_blocks(params: dict, cfg: EstimatorConfig, t: int, stack: str) -> list[CouplingBlock]:
    return [CouplingBlock(f"est.{t}.{stack}.{j}", params, cfg.groups) for j in range(cfg.blocks)]


def estimator_param_shapes(cfg: EstimatorConfig, t: int) -> dict[str, tuple]:
    c, w = cfg.in_channels, cfg.width
    shapes = {
        f"est.{t}.in_proj.weight": (w, 4 * c, 1, 1),
        f"est.{t}.in_proj.bias": (w,),
        f"est.{t}.down_proj.weight": (2 * w, 4 * w, 1, 1),
        f"est.{t}.down_proj.bias": (2 * w,),
        f"est.{t}.up_proj.weight": (4 * w, 2 * w, 1, 1),
        f"est.{t}.up_proj.bias": (4 * w,),
        f"est.{t}.out_proj.weight": (4 * c, w, 1, 1),
        f"est.{t}.out_proj.bias": (4 * c,),
    }
    for stack in STACKS:
        h = cfg.stack_channels(stack) // 2
        for j in range(cfg.blocks):
            for s in ("F", "G"):
                pre = f"est.{t}.{stack}.{j}.{s}"
                shapes[f"{pre}.conv1.weight"] = (h, h, 3, 3)
                shapes[f"{pre}.conv1.bias"] = (h,)
                shapes[f"{pre}.norm.gamma"] = (h,)
                shapes[f"{pre}.norm.beta"] = (h,)
                shapes[f"{pre}.conv2.weight"] = (h, h, 3, 3)
                shapes[f"{pre}.conv2.bias"] = (h,)
    return shapes


def init_estimator_params(
    cfg: EstimatorConfig, steps, rng: SplitMix64, dtype=np.float32, zero_init: bool = True
) -> dict[str, np.ndarray]:
    """Parameters for every step index in ``steps`` (disjoint sets).

    Convolution kernels are N(0, 1/fan_in), shrunk where needed so the
    reshaped (out, in*k*k) kernel has spectral norm at most 1; this keeps
    the reversible chain from amplifying rounding error. Biases and norm
    shifts start at zero, norm scales at one. With ``zero_init`` the last
    conv of every F/G starts at zero, so each block begins as pure rewiring.
    """
    params = {}
    for t in steps:
        for name, shape in estimator_param_shapes(cfg, t).items():
            if name.endswith(".weight"):
                fan_in = int(np.prod(shape[1:]))
                zero = zero_init and name.endswith("conv2.weight")
                if zero:
                    vals = np.zeros(shape)
                else:
                    vals = rng.normal(int(np.prod(shape))).reshape(shape) / np.sqrt(fan_in)
                    vals /= max(1.0, np.linalg.norm(vals.reshape(shape[0], -1), 2))
            elif name.endswith(".gamma"):
                vals = np.ones(shape)
            else:
                vals = np.zeros(shape)
            params[name] = vals.astype(dtype)
    return params


def estimator_forward(f_t, t: int, params: dict, cfg: EstimatorConfig, tape: Tape | None = None):
    """Predict the noise for state ``f_t`` with the step-``t`` parameter set.

    Shape-preserving. Arrays in give an array out (no recording).
    """
    if f"est.{t}.in_proj.weight" not in params:
        raise ValueError(f"step index {t} has no parameter set")
    h_, w_ = f_t.shape[2], f_t.shape[3]
    if h_ % 4 or w_ % 4:
        raise K.ShapeError(f"estimator input {h_}x{w_} must be divisible by 4 (two 2x resampling levels)")
    (x,), tape, unwrap = _lift((f_t,), tape)

    def p(n):
        return tape.param(f"est.{t}.{n}", params[f"est.{t}.{n}"])

    h = ops.conv2d(ops.pixel_unshuffle(x, 2), p("in_proj.weight"), p("in_proj.bias"))
    skip = coupling_stack(h, estimator_blocks(params, cfg, t, "down"))
    m = ops.conv2d(ops.pixel_unshuffle(skip, 2), p("down_proj.weight"), p("down_proj.bias"))
    m = coupling_stack(m, estimator_blocks(params, cfg, t, "mid"))
    m = ops.pixel_shuffle(ops.conv2d(m, p("up_proj.weight"), p("up_proj.bias")), 2)
    u = coupling_stack(m + skip, estimator_blocks(params, cfg, t, "up"))
    out = ops.pixel_shuffle(ops.conv2d(u, p("out_proj.weight"), p("out_proj.bias")), 2)
    return out.value if unwrap else out
