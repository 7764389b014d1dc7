"""Tape-based reverse-mode differentiation with activation byte accounting.

A :class:`Tape` records one node per differentiable op. Each node keeps its
output array ("retained activation") until the backward sweep has consumed
it; the bytes of all retained activations are tracked by a
:class:`MemoryMeter` that several tapes may share. Reversible code paths free
activations early and rebuild them by inversion, which is what the meter
makes visible.

Parameters are leaves whose bytes are not counted: they are weights, not
activations.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

GradientSet = dict  # parameter / leaf name -> gradient array

STORE_ALL = "store-all"
REVERSIBLE = "reversible"


class TapeError(RuntimeError):
    pass


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, node: "Node"):
        super().__init__(f"non-finite gradient produced by node #{node.id} ({node.op})")
        self.node_id = node.id
        self.op = node.op


class MemoryMeter:
    """Exact byte counter for retained activations, shared across tapes."""

    def __init__(self):
        self._live: dict[int, int] = {}
        self._ids = itertools.count()
        self.live_bytes = 0
        self.peak_bytes = 0

    def alloc(self, nbytes: int) -> int:
        handle = next(self._ids)
        self._live[handle] = nbytes
        self.live_bytes += nbytes
        self.peak_bytes = max(self.peak_bytes, self.live_bytes)
        return handle

    def free(self, handle: int) -> None:
        self.live_bytes -= self._live.pop(handle)

    @property
    def retained_count(self) -> int:
        return len(self._live)

    def audit(self) -> int:
        total = sum(self._live.values())
        if total != self.live_bytes:
            raise TapeError(f"memory audit failed: counter {self.live_bytes} != walk {total}")
        return total

    def report(self) -> dict:
        return {
            "live_bytes": self.live_bytes,
            "peak_bytes": self.peak_bytes,
            "retained_node_count": self.retained_count,
        }


@dataclass(eq=False)
class Node:
    id: int
    op: str
    inputs: tuple[int, ...]
    value: np.ndarray | None
    vjp: Callable | None
    kind: str = "op"  # op | constant | leaf | param
    name: str | None = None
    handle: int | None = None


@dataclass(eq=False)
class Var:
    """An array plus (optionally) the tape node that produced it."""

    value: np.ndarray
    tape: "Tape"
    node: int | None = None

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    @property
    def ndim(self):
        return self.value.ndim

    def __add__(self, other):
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return ops.sub(self, other)

    def __rsub__(self, other):
        return ops.add(ops.neg(self), other)

    def __mul__(self, other):
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return ops.div(self, other)

    def __rtruediv__(self, other):
        return ops.mul(ops.reciprocal(self), other)

    def __neg__(self):
        return ops.neg(self)

    def sqrt(self):
        return ops.sqrt(self)

    def sum(self):
        return ops.sum(self)

    def mean(self):
        return ops.mean(self)

    def __repr__(self):
        return f"Var(shape={self.shape}, dtype={self.dtype}, node={self.node})"


@dataclass
class Tape:
    """Ordered record of differentiable ops for one forward/backward episode.

    ``grad=False`` gives an evaluation-only tape: ops compute values but
    nothing is recorded or counted.
    """

    mode: str = STORE_ALL
    meter: MemoryMeter = field(default_factory=MemoryMeter)
    grad: bool = True
    nodes: list[Node] = field(default_factory=list)

    def __post_init__(self):
        if self.mode not in (STORE_ALL, REVERSIBLE):
            raise ValueError(f"unknown tape mode {self.mode!r}")
        self._params: dict[str, Var] = {}
        self._backward_started = False

    @property
    def reversible(self) -> bool:
        return self.mode == REVERSIBLE

    # -- recording -----------------------------------------------------

    def _append(self, op, inputs, value, vjp, kind, name=None, count=True) -> Var:
        if not self.grad:
            return Var(value, self)
        if self._backward_started:
            raise TapeError("cannot record on a tape whose backward pass has begun")
        for i in inputs:
            if i is not None and not (isinstance(i, int) and 0 <= i < len(self.nodes)):
                raise TapeError(f"op {op!r}: input node {i!r} does not exist on this tape")
        node = Node(len(self.nodes), op, tuple(inputs), value, vjp, kind, name)
        if count:
            node.handle = self.meter.alloc(value.nbytes)
        self.nodes.append(node)
        return Var(value, self, node.id)

    def record(self, op: str, inputs: Sequence[Var | int], value: np.ndarray, vjp: Callable | None) -> Var:
        """Append an op node. ``vjp(g)`` returns one cotangent (or None) per input."""
        # inputs produced off this tape carry no gradient (id None)
        ids = [
            (i.node if i.tape is self else None) if isinstance(i, Var) else i
            for i in inputs
        ]
        return self._append(op, ids, value, vjp, "op")

    def constant(self, value, name: str | None = None) -> Var:
        return self._append("constant", (), np.asarray(value), None, "constant", name)

    def leaf(self, value, name: str) -> Var:
        """A non-parameter input whose gradient is reported under ``name``."""
        return self._append("leaf", (), np.asarray(value), None, "leaf", name)

    def param(self, name: str, value: np.ndarray) -> Var:
        """Register (once per tape) a trainable parameter leaf."""
        if name in self._params:
            return self._params[name]
        var = self._append("param", (), value, None, "param", name, count=False)
        self._params[name] = var
        return var

    # -- accounting ----------------------------------------------------

    def free(self, node: Node) -> None:
        if node.handle is not None:
            self.meter.free(node.handle)
            node.handle = None
        node.value = None

    def audit(self) -> int:
        """Walk the tape and return bytes of retained non-parameter activations."""
        return sum(n.value.nbytes for n in self.nodes if n.handle is not None)

    @property
    def retained_node_count(self) -> int:
        return sum(1 for n in self.nodes if n.handle is not None)

    def release(self) -> None:
        """Drop every retained activation without differentiating."""
        for n in self.nodes:
            self.free(n)
        self._backward_started = True

    # -- backward ------------------------------------------------------

    def backward(self, root: Var, seed: np.ndarray | None = None) -> GradientSet:
        """Reverse sweep from ``root``; returns gradients of params and leaves.

        The tape is consumed: every activation is freed as soon as the sweep
        has passed its node.
        """
        if root.tape is not self or root.node is None:
            raise TapeError("backward root is not recorded on this tape")
        if self._backward_started:
            raise TapeError("tape already consumed")
        if seed is None:
            if root.value.size != 1:
                raise TapeError(f"seed required for non-scalar root of shape {root.shape}")
            seed = np.ones_like(root.value)
        seed = np.asarray(seed, dtype=root.dtype)
        if seed.shape != root.shape:
            raise TapeError(f"seed shape {seed.shape} != root shape {root.shape}")
        self._backward_started = True
        grads: dict[int, np.ndarray] = {root.node: seed}
        out: GradientSet = {}
        for node in reversed(self.nodes[: root.node + 1]):
            g = grads.pop(node.id, None)
            if g is not None:
                if node.kind in ("param", "leaf"):
                    out[node.name] = g
                elif node.vjp is not None:
                    in_grads = node.vjp(g)
                    for src, ig in zip(node.inputs, in_grads):
                        if ig is None or src is None:
                            continue
                        if not np.all(np.isfinite(ig)):
                            raise NonFiniteGradientError(node)
                        prev = grads.get(src)
                        grads[src] = ig if prev is None else prev + ig
            self.free(node)
        for node in self.nodes[root.node + 1 :]:
            self.free(node)
        return out


def memory_report(tape_or_meter: Tape | MemoryMeter) -> dict:
    meter = tape_or_meter.meter if isinstance(tape_or_meter, Tape) else tape_or_meter
    meter.audit()
    return meter.report()


def merge_gradients(*sets: GradientSet) -> GradientSet:
    out: GradientSet = {}
    for s in sets:
        for k, g in s.items():
            out[k] = g if k not in out else out[k] + g
    return out


# --------------------------------------------------------------------------
# finite-difference oracle
# --------------------------------------------------------------------------

COORDINATE_LIMIT = 10_000


def _rel_err(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), 1e-12)


def grad_check(
    fn: Callable[[Tape, dict], Var],
    params: dict[str, np.ndarray],
    h: float = 1e-6,
    *,
    names: Iterable[str] | None = None,
    analytic: GradientSet | None = None,
    probes: int = 6,
    seed: int = 0,
    sweep: str = "auto",
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn(tape, params)`` builds a scalar Var from the parameter arrays,
    registering them with ``tape.param``. Analytic gradients come from
    ``Tape.backward`` unless supplied. ``names`` limits the check to a
    subset. ``sweep`` picks per-coordinate differences ("coordinates") or
    random unit-direction probes ("directions"); "auto" probes only when the
    subset holds more than ``COORDINATE_LIMIT`` scalars. Probes stay well
    conditioned when single entries of the gradient are near zero, where a
    per-coordinate ratio mostly measures finite-difference roundoff.
    """
    if sweep not in ("auto", "coordinates", "directions"):
        raise ValueError(f"unknown sweep {sweep!r}")
    if not 1e-7 <= h <= 1e-4:
        raise ValueError(f"finite-difference step {h} outside [1e-7, 1e-4]")
    for k, v in params.items():
        if v.dtype != np.float64:
            raise ValueError(f"grad_check needs double precision; {k} is {v.dtype}")
    names = list(params) if names is None else list(names)

    def evaluate(p):
        val = float(fn(Tape(grad=False), p).value)
        if not np.isfinite(val):
            raise FloatingPointError("grad_check: non-finite function value")
        return val

    if analytic is None:
        tape = Tape()
        analytic = tape.backward(fn(tape, params))
    grad = {k: analytic.get(k, np.zeros_like(params[k])) for k in names}

    def shifted(k_delta):
        p = dict(params)
        for k, d in k_delta.items():
            p[k] = params[k] + d
        return p

    total = sum(params[k].size for k in names)
    worst = 0.0
    if sweep == "coordinates" or (sweep == "auto" and total <= COORDINATE_LIMIT):
        for k in names:
            for idx in np.ndindex(params[k].shape):
                e = np.zeros_like(params[k])
                e[idx] = h
                num = (evaluate(shifted({k: e})) - evaluate(shifted({k: -e}))) / (2 * h)
                worst = max(worst, _rel_err(float(grad[k][idx]), num))
        return worst
    rng = np.random.default_rng(seed)
    for _ in range(probes):
        direction = {k: rng.standard_normal(params[k].shape) for k in names}
        norm = np.sqrt(sum(float((d**2).sum()) for d in direction.values()))
        direction = {k: d / norm for k, d in direction.items()}
        num = (
            evaluate(shifted({k: h * d for k, d in direction.items()}))
            - evaluate(shifted({k: -h * d for k, d in direction.items()}))
        ) / (2 * h)
        ana = sum(float((grad[k] * direction[k]).sum()) for k in names)
        worst = max(worst, _rel_err(ana, num))
    return worst


from . import ops  # noqa: E402  (ops builds on Var/Tape)
