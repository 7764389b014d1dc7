"""The reversible fusion chain.

States follow ``f_{t+1} = f_{t-1} + F_t(f_t)`` from ``f_0 = v``, ``f_1 = i``
up to ``f_T``; the fused image is ``w * f_T + (1 - w) * f_{T-1}``. With DDIM
on, ``F_t`` is the deterministic DDIM update applied to ``f_t`` with the
estimator's noise prediction; with DDIM off it is the raw prediction.

Reverse I (``reverse1``) keeps only the two final states during the forward
pass and rebuilds older states during backward with
``f_{t-1} = f_{t+1} - F_t(f_t)``. Reverse II (``reverse2``) makes the
estimator's coupling stacks recompute their activations the same way.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import ops
from . import tensor as K
from .autograd import REVERSIBLE, STORE_ALL, GradientSet, MemoryMeter, Tape, Var, merge_gradients
from .objective import LossBreakdown, loss_total
from .revnet import EstimatorConfig, estimator_forward, init_estimator_params
from .rng import SplitMix64

RECONSTRUCTION_TOL = 1e-2


class ReconstructionError(FloatingPointError):
    """Chain inversion drifted too far from the source images."""


class NonFiniteLossError(FloatingPointError):
    pass


# --------------------------------------------------------------------------
# alpha-bar schedule
# --------------------------------------------------------------------------


def initial_alpha_logits(T: int) -> np.ndarray:
    """Logits of the linear schedule 1 - 0.1 t, kept inside [0.01, 0.999]."""
    abar = np.clip(1.0 - 0.1 * np.arange(T + 1), 0.01, 0.999)
    return np.log(abar) - np.log1p(-abar)


def alpha_bars(logits: np.ndarray) -> np.ndarray:
    return K.sigmoid(np.asarray(logits))


# --------------------------------------------------------------------------
# model
# --------------------------------------------------------------------------


@dataclass
class FusionModel:
    params: dict[str, np.ndarray]
    T: int = 2
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)
    reverse1: bool = True
    reverse2: bool = True
    ddim: bool = True

    @classmethod
    def create(
        cls,
        T: int = 2,
        estimator: EstimatorConfig | None = None,
        seed: int | SplitMix64 = 0,
        dtype=np.float32,
        zero_init: bool = True,
        **flags,
    ) -> "FusionModel":
        if T < 1:
            raise ValueError(f"T must be >= 1, got {T}")
        estimator = estimator or EstimatorConfig()
        rng = seed if isinstance(seed, SplitMix64) else SplitMix64(seed)
        params = init_estimator_params(estimator, range(1, T), rng, dtype, zero_init)
        params["alpha_logits"] = initial_alpha_logits(T).astype(dtype)
        params["w"] = np.asarray(1.0, dtype=dtype)
        return cls(params, T, estimator, **flags)

    @property
    def dtype(self):
        return self.params["w"].dtype

    @property
    def w(self) -> float:
        return float(np.clip(self.params["w"], 0.0, 1.0))

    @property
    def tape_mode(self) -> str:
        return REVERSIBLE if self.reverse2 else STORE_ALL

    def with_flags(self, **flags) -> "FusionModel":
        return replace(self, **flags)

    def astype(self, dtype) -> "FusionModel":
        return replace(self, params={k: v.astype(dtype) for k, v in self.params.items()})


# --------------------------------------------------------------------------
# per-step transform
# --------------------------------------------------------------------------


def _sqrt(x):
    return x.sqrt() if isinstance(x, Var) else np.sqrt(x)


def _scalar(x) -> float:
    return float(x.value if isinstance(x, Var) else x)


def ddim_update(f_t, eps_hat, alpha_bar_t, alpha_bar_prev):
    """Deterministic DDIM step: sqrt(a_prev) * x0_hat + sqrt(1 - a_prev) * eps_hat,
    with x0_hat = (f_t - sqrt(1 - a_t) * eps_hat) / sqrt(a_t)."""
    at, ap = _scalar(alpha_bar_t), _scalar(alpha_bar_prev)
    if at == 0.0:
        raise ZeroDivisionError("ddim_update: alpha_bar_t is zero")
    if not (0.0 < at <= 1.0 and 0.0 < ap <= 1.0):
        raise ValueError(f"ddim_update: alpha bars must lie in (0, 1], got {at}, {ap}")
    if np.shape(f_t.value if isinstance(f_t, Var) else f_t) != np.shape(
        eps_hat.value if isinstance(eps_hat, Var) else eps_hat
    ):
        raise K.ShapeError("ddim_update: state and noise shapes differ")
    x0 = (f_t - _sqrt(1 - alpha_bar_t) * eps_hat) / _sqrt(alpha_bar_t)
    return _sqrt(alpha_bar_prev) * x0 + _sqrt(1 - alpha_bar_prev) * eps_hat


def step_transform(f_t: Var, t: int, model: FusionModel) -> Var:
    """F_t(f_t) on the tape of ``f_t``."""
    tape = f_t.tape
    eps = estimator_forward(f_t, t, model.params, model.estimator, tape)
    if not model.ddim:
        return eps
    abar = ops.sigmoid(tape.param("alpha_logits", model.params["alpha_logits"]))
    return ddim_update(f_t, eps, ops.take(abar, t), ops.take(abar, t - 1))


def _eval_step(f_t: np.ndarray, t: int, model: FusionModel) -> np.ndarray:
    return step_transform(Var(f_t, Tape(grad=False)), t, model).value


# --------------------------------------------------------------------------
# chain forward / reverse
# --------------------------------------------------------------------------


def _check_sources(v, i):
    sv = np.shape(v.value if isinstance(v, Var) else v)
    si = np.shape(i.value if isinstance(i, Var) else i)
    if sv != si:
        raise K.ShapeError(f"visible {sv} and infrared {si} shapes differ")


def chain_forward(v, i, model: FusionModel, meter: MemoryMeter | None = None):
    """Run the chain and return the endpoints ``(f_{T-1}, f_T)``.

    With Vars on a recording tape every state stays on the tape (store-all).
    With arrays nothing is recorded and only the current pair of states is
    held; ``meter`` (optional) is charged for exactly those states.
    """
    _check_sources(v, i)
    if isinstance(v, Var):
        f_prev, f_curr = v, i
        for t in range(1, model.T):
            f_prev, f_curr = f_curr, f_prev + step_transform(f_curr, t, model)
        return f_prev, f_curr

    meter = meter or MemoryMeter()
    f_prev, f_curr = np.asarray(v), np.asarray(i)
    h_prev, h_curr = meter.alloc(f_prev.nbytes), meter.alloc(f_curr.nbytes)
    for t in range(1, model.T):
        f_next = f_prev + _eval_step(f_curr, t, model)
        h_next = meter.alloc(f_next.nbytes)
        meter.free(h_prev)
        f_prev, f_curr, h_prev, h_curr = f_curr, f_next, h_curr, h_next
    meter.free(h_prev)
    meter.free(h_curr)
    return f_prev, f_curr


def chain_reverse(f_prev: np.ndarray, f_last: np.ndarray, model: FusionModel, sources=None):
    """Invert the chain from ``(f_{T-1}, f_T)`` back to ``(f_0, f_1)``.

    If ``sources=(v, i)`` is given, a reconstruction further than
    ``RECONSTRUCTION_TOL`` from them raises :class:`ReconstructionError`.
    """
    f_t, f_next = np.asarray(f_prev), np.asarray(f_last)
    for t in range(model.T - 1, 0, -1):
        f_t, f_next = f_next - _eval_step(f_t, t, model), f_t
    _check_reconstruction((f_t, f_next), sources)
    return f_t, f_next


def _check_reconstruction(recon, sources):
    if sources is None:
        return
    err = max(float(np.max(np.abs(r - np.asarray(s)))) for r, s in zip(recon, sources))
    if not err <= RECONSTRUCTION_TOL:
        raise ReconstructionError(
            f"chain inversion diverged: max reconstruction error {err:.3g} > {RECONSTRUCTION_TOL}"
        )


def block_reverse_backward(endpoints, endpoint_grads, model: FusionModel, meter: MemoryMeter | None = None, sources=None):
    """Backpropagate through the chain by inverting states instead of storing them.

    ``endpoints`` is ``(f_{T-1}, f_T)`` and ``endpoint_grads`` their
    cotangents. Walking t = T-1 .. 1, each step recovers ``f_{t-1}``, replays
    ``F_t(f_t)`` on a short-lived tape and applies its VJP:
    ``g_{t-1} = g_{t+1}`` and ``g_t += (dF_t/df_t)^T g_{t+1}``, while the
    parameter gradient is ``(dF_t/dw)^T g_{t+1}``.

    Returns ``(param_grads, (g_v, g_i), (f_0, f_1))``.
    """
    meter = meter or MemoryMeter()
    f_t, f_next = (np.asarray(e) for e in endpoints)
    g_t, g_next = (np.asarray(g) for g in endpoint_grads)
    h_t, h_next = meter.alloc(f_t.nbytes), meter.alloc(f_next.nbytes)
    grads: GradientSet = {}
    for t in range(model.T - 1, 0, -1):
        sub = Tape(mode=model.tape_mode, meter=meter)
        x = sub.leaf(f_t, "state")
        out = step_transform(x, t, model)
        f_prev = f_next - out.value
        h_prev = meter.alloc(f_prev.nbytes)
        step_grads = sub.backward(out, g_next)
        # (g_{t-1}, g_t) <- (g_{t+1}, g_t + J^T g_{t+1})
        g_t, g_next = g_next, g_t + step_grads.pop("state")
        grads = merge_gradients(grads, step_grads)
        meter.free(h_next)
        f_t, f_next, h_t, h_next = f_prev, f_t, h_prev, h_t
    meter.free(h_t)
    meter.free(h_next)
    _check_reconstruction((f_t, f_next), sources)
    return grads, (g_t, g_next), (f_t, f_next)


def combine_w(f_last, f_prev, w):
    """w * f_T + (1 - w) * f_{T-1}."""
    return w * f_last + (1 - w) * f_prev


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------


@dataclass
class StepResult:
    loss: LossBreakdown
    grads: GradientSet
    fused: np.ndarray
    memory: dict


def compute_gradients(model: FusionModel, v: np.ndarray, i: np.ndarray) -> StepResult:
    """One forward + backward pass; gradients include ``input.v`` and ``input.i``."""
    _check_sources(v, i)
    meter = MemoryMeter()
    if model.reverse1:
        f_prev, f_last = chain_forward(v, i, model, meter)
        head = Tape(mode=model.tape_mode, meter=meter)
        a, b = head.leaf(f_prev, "f_prev"), head.leaf(f_last, "f_last")
        w = ops.clamp01(head.param("w", model.params["w"]))
        fused = combine_w(b, a, w)
        loss = loss_total(head.constant(i), head.constant(v), fused)
        _guard(loss)
        grads = head.backward(loss.total_var)
        ends = (grads.pop("f_prev"), grads.pop("f_last"))
        chain_grads, (gv, gi), _ = block_reverse_backward(
            (f_prev, f_last), ends, model, meter, sources=(v, i)
        )
        grads = merge_gradients(grads, chain_grads)
    else:
        tape = Tape(mode=model.tape_mode, meter=meter)
        vl, il = tape.leaf(v, "input.v"), tape.leaf(i, "input.i")
        f_prev, f_last = chain_forward(vl, il, model)
        w = ops.clamp01(tape.param("w", model.params["w"]))
        fused = combine_w(f_last, f_prev, w)
        loss = loss_total(tape.constant(i), tape.constant(v), fused)
        _guard(loss)
        grads = tape.backward(loss.total_var)
        gv, gi = grads.pop("input.v"), grads.pop("input.i")
    grads["input.v"], grads["input.i"] = gv, gi
    return StepResult(loss, grads, fused.value, memory_snapshot(meter))


def memory_snapshot(meter: MemoryMeter) -> dict:
    meter.audit()
    return meter.report()


def _guard(loss: LossBreakdown):
    if not math.isfinite(loss.total):
        raise NonFiniteLossError(f"non-finite loss: {loss.as_dict()}")


def fuse(model: FusionModel, v: np.ndarray, i: np.ndarray) -> np.ndarray:
    """Inference: the unclamped fused image for a (batch of) source pair(s)."""
    f_prev, f_last = chain_forward(np.asarray(v, model.dtype), np.asarray(i, model.dtype), model)
    return combine_w(f_last, f_prev, model.dtype.type(model.w))


@dataclass
class Adam:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def update(self, params: dict, grads: GradientSet) -> dict:
        """Return new parameter arrays; inputs are left untouched."""
        self.step += 1
        bc1 = 1 - self.beta1**self.step
        bc2 = 1 - self.beta2**self.step
        out = dict(params)
        for k, p in params.items():
            g = grads.get(k)
            if g is None:
                continue
            dt = p.dtype.type
            m = self.m.get(k, np.zeros_like(p)) * dt(self.beta1) + g * dt(1 - self.beta1)
            v = self.v.get(k, np.zeros_like(p)) * dt(self.beta2) + g * g * dt(1 - self.beta2)
            self.m[k], self.v[k] = m, v
            upd = (m / dt(bc1)) / (np.sqrt(v / dt(bc2)) + dt(self.eps))
            out[k] = (p - dt(self.lr) * upd).astype(p.dtype)
        if "w" in out:
            out["w"] = np.clip(out["w"], 0, 1).astype(out["w"].dtype)
        return out


def train_step(v: np.ndarray, i: np.ndarray, model: FusionModel, opt: Adam) -> StepResult:
    """Forward, loss, backward (reversible or store-all per flags), Adam update."""
    result = compute_gradients(model, v, i)
    model.params = opt.update(model.params, result.grads)
    return result
