"""Reverse-mode automatic differentiation over dense float buffers.

Eager execution with an explicit tape: every differentiable op appends a
backward closure to the active ``Tape``, and ``backward`` replays the
closures in exact reverse execution order. Tensors wrap contiguous numpy
buffers; the only supported broadcasts are scalar-with-tensor and a
dedicated row-bias op for MLP layers. Gradients accumulate on leaf tensors
across backward passes until ``zero_grad``.

Training runs in float32 by default; tests switch to float64 via
``using_dtype`` so finite-difference checks have headroom.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import ContractError, NumericError, ShapeError

_state = threading.local()

DEFAULT_DTYPE = np.float32

# When True, every op validates that its output is finite and aborts with a
# diagnostic naming the op. Enabled by tests and by training loops.
DEBUG_CHECKS = False


def set_default_dtype(dtype) -> None:
    global DEFAULT_DTYPE
    DEFAULT_DTYPE = np.dtype(dtype).type


def default_dtype():
    return DEFAULT_DTYPE


@contextlib.contextmanager
def using_dtype(dtype):
    global DEFAULT_DTYPE
    prev = DEFAULT_DTYPE
    DEFAULT_DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        DEFAULT_DTYPE = prev


def set_debug_checks(enabled: bool) -> None:
    global DEBUG_CHECKS
    DEBUG_CHECKS = bool(enabled)


class Tensor:
    """A dense float buffer with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else DEFAULT_DTYPE)
        # ascontiguousarray would promote 0-d scalars to 1-d
        self.data = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ShapeError(f"gradient shape {g.shape} != data shape {self.data.shape}")
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self):
        req = ", requires_grad=True" if self.requires_grad else ""
        nm = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{req}{nm})"


def parameter(data, name: Optional[str] = None, dtype=None) -> Tensor:
    """A trainable leaf tensor."""
    return Tensor(data, requires_grad=True, name=name, dtype=dtype)


class Tape:
    """Ordered record of executed ops, consumed by exactly one backward pass."""

    __slots__ = ("nodes", "consumed")

    def __init__(self):
        self.nodes: list[tuple[str, Callable[[], None]]] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        stack = getattr(_state, "tapes", None)
        if stack is None:
            stack = _state.tapes = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _state.tapes.pop()
        return False

    def __len__(self) -> int:
        return len(self.nodes)


def active_tape() -> Optional[Tape]:
    stack = getattr(_state, "tapes", None)
    return stack[-1] if stack else None


def _finish(name: str, out: Tensor, inputs: Sequence[Tensor], backward_fn: Callable[[], None]) -> Tensor:
    if DEBUG_CHECKS and not np.isfinite(out.data).all():
        raise NumericError(f"non-finite values produced by op '{name}'")
    out.requires_grad = any(t.requires_grad for t in inputs)
    if out.requires_grad:
        tape = active_tape()
        if tape is not None:
            tape.nodes.append((name, backward_fn))
    return out


def _out_grad(out: Tensor) -> Optional[np.ndarray]:
    return out.grad


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate grads on every requires_grad tensor reachable from ``loss``.

    Gradients accumulate across calls until ``zero_grad``. The tape is
    consumed; reuse raises ``ContractError``.
    """
    if loss.data.shape != ():
        raise ContractError(f"backward expects a scalar loss, got shape {loss.data.shape}")
    if tape.consumed:
        raise ContractError("tape already consumed by a backward pass")
    tape.consumed = True
    loss.accumulate_grad(np.ones((), dtype=loss.data.dtype))
    for _name, fn in reversed(tape.nodes):
        fn()


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()


# ---------------------------------------------------------------------------
# ops


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of 2-D tensors; backward is g@b.T / a.T@g."""
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"inner dimensions disagree: {a.data.shape} @ {b.data.shape}")
    out = Tensor(a.data @ b.data)

    def bwd():
        g = _out_grad(out)
        if g is None:
            return
        if a.requires_grad:
            a.accumulate_grad(g @ b.data.T)
        if b.requires_grad:
            b.accumulate_grad(a.data.T @ g)

    return _finish("matmul", out, (a, b), bwd)


def _binary_shapes(a: Tensor, b: Tensor, op: str):
    # Scalar-with-tensor or same-shape only.
    if a.data.shape == b.data.shape or a.data.shape == () or b.data.shape == ():
        return
    raise ShapeError(f"{op}: incompatible shapes {a.data.shape} and {b.data.shape}")


def _reduce_to(g: np.ndarray, shape) -> np.ndarray:
    if shape == ():
        return np.asarray(g.sum(), dtype=g.dtype)
    return g


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "add")
    out = Tensor(a.data + b.data)

    def bwd():
        g = _out_grad(out)
        if g is None:
            return
        if a.requires_grad:
            a.accumulate_grad(_reduce_to(g, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_reduce_to(g, b.data.shape))

    return _finish("add", out, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "sub")
    out = Tensor(a.data - b.data)

    def bwd():
        g = _out_grad(out)
        if g is None:
            return
        if a.requires_grad:
            a.accumulate_grad(_reduce_to(g, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_reduce_to(-g, b.data.shape))

    return _finish("sub", out, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "mul")
    out = Tensor(a.data * b.data)

    def bwd():
        g = _out_grad(out)
        if g is None:
            return
        if a.requires_grad:
            a.accumulate_grad(_reduce_to(g * b.data, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_reduce_to(g * a.data, b.data.shape))

    return _finish("mul", out, (a, b), bwd)


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data)

    def bwd():
        g = _out_grad(out)
        if g is not None and a.requires_grad:
            a.accumulate_grad(-g)

    return _finish("neg", out, (a,), bwd)


def scale(a: Tensor, s: float) -> Tensor:
    """Multiply by a python constant (not differentiated w.r.t. ``s``)."""
    s = float(s)
    out = Tensor(a.data * np.asarray(s, dtype=a.data.dtype))

    def bwd():
        g = _out_grad(out)
        if g is not None and a.requires_grad:
            a.accumulate_grad(g * np.asarray(s, dtype=g.dtype))

    return _finish("scale", out, (a,), bwd)


def _unary(name: str, a: Tensor, value: np.ndarray, local_grad: Callable[[], np.ndarray]) -> Tensor:
    out = Tensor(value)

    def bwd():
        g = _out_grad(out)
        if g is not None and a.requires_grad:
            a.accumulate_grad(g * local_grad())

    return _finish(name, out, (a,), bwd)


def relu(a: Tensor) -> Tensor:
    return _unary("relu", a, np.maximum(a.data, 0), lambda: (a.data > 0).astype(a.data.dtype))


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid_np(a.data)
    return _unary("sigmoid", a, y, lambda: y * (1 - y))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _unary("exp", a, y, lambda: y)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _unary("tanh", a, y, lambda: 1 - y * y)


def sin(a: Tensor) -> Tensor:
    return _unary("sin", a, np.sin(a.data), lambda: np.cos(a.data))


def cos(a: Tensor) -> Tensor:
    return _unary("cos", a, np.cos(a.data), lambda: -np.sin(a.data))


_ELEMENTWISE = {"add": add, "mul": mul, "relu": relu, "sigmoid": sigmoid, "exp": exp, "tanh": tanh,
                "sub": sub, "neg": neg, "sin": sin, "cos": cos}


def elementwise(kind: str, *inputs) -> Tensor:
    """Dispatch by op name; see module docstring for the supported set."""
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ShapeError(f"unknown elementwise kind '{kind}'") from None
    return fn(*inputs)


def add_row(x: Tensor, b: Tensor) -> Tensor:
    """Row-broadcast bias: (m,n) + (n,). Backward sums the bias grad over rows."""
    if x.data.ndim != 2 or b.data.ndim != 1 or x.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"add_row: incompatible shapes {x.data.shape} and {b.data.shape}")
    out = Tensor(x.data + b.data[None, :])

    def bwd():
        g = _out_grad(out)
        if g is None:
            return
        if x.requires_grad:
            x.accumulate_grad(g)
        if b.requires_grad:
            b.accumulate_grad(g.sum(axis=0))

    return _finish("add_row", out, (x, b), bwd)


def tsum(a: Tensor) -> Tensor:
    out = Tensor(a.data.sum())

    def bwd():
        g = _out_grad(out)
        if g is not None and a.requires_grad:
            a.accumulate_grad(np.full_like(a.data, g))

    return _finish("sum", out, (a,), bwd)


def tmean(a: Tensor) -> Tensor:
    out = Tensor(a.data.mean())

    def bwd():
        g = _out_grad(out)
        if g is not None and a.requires_grad:
            a.accumulate_grad(np.full_like(a.data, g / a.data.size))

    return _finish("mean", out, (a,), bwd)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate 2-D tensors along axis 1; backward splits the grad."""
    if not parts or any(p.data.ndim != 2 for p in parts):
        raise ShapeError("concat_cols expects a nonempty list of 2-D tensors")
    rows = parts[0].data.shape[0]
    if any(p.data.shape[0] != rows for p in parts):
        raise ShapeError("concat_cols: row counts differ")
    out = Tensor(np.concatenate([p.data for p in parts], axis=1))
    offsets = np.cumsum([0] + [p.data.shape[1] for p in parts])

    def bwd():
        g = _out_grad(out)
        if g is None:
            return
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                p.accumulate_grad(g[:, lo:hi])

    return _finish("concat_cols", out, tuple(parts), bwd)


def custom_op(name: str, out_data: np.ndarray, inputs: Sequence[Tensor],
              backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]) -> Tensor:
    """Wrap an externally computed function as a tape node.

    ``backward_fn(g)`` must return one gradient array (or None) per input.
    Used to bridge the rasterizer and image losses, which have hand-derived
    backward passes, into a network's tape.
    """
    out = Tensor(out_data)

    def bwd():
        g = _out_grad(out)
        if g is None:
            return
        grads = backward_fn(g)
        if len(grads) != len(inputs):
            raise ContractError(f"custom op '{name}' returned {len(grads)} grads for {len(inputs)} inputs")
        for t, gi in zip(inputs, grads):
            if gi is not None and t.requires_grad:
                t.accumulate_grad(np.asarray(gi, dtype=t.data.dtype))

    return _finish(name, out, tuple(inputs), bwd)


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # Stable two-sided form.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_np(x):
    return _sigmoid_np(np.asarray(x))


def logit_np(p):
    p = np.asarray(p)
    return np.log(p / (1.0 - p))


# ---------------------------------------------------------------------------
# optimizer


class AdamState:
    """First/second moment buffers plus the shared step counter."""

    __slots__ = ("m", "v", "t", "beta1", "beta2", "eps")

    def __init__(self, params: Sequence[Tensor], beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps


def adam_step(params: Sequence[Tensor], state: AdamState, lr: float) -> None:
    """In-place bias-corrected Adam update; every param must carry a grad."""
    for p in params:
        if p.grad is None:
            raise ContractError(f"adam_step: parameter {p.name or '<unnamed>'} has no grad")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        mhat = m / c1
        vhat = v / c2
        p.data -= (lr * mhat / (np.sqrt(vhat) + state.eps)).astype(p.data.dtype)


class Adam:
    """Parameter-group optimizer built on ``adam_step``.

    Groups carry independent learning rates; ``set_lr_scale`` applies a
    shared multiplier (used for exponential decay schedules).
    """

    def __init__(self, groups: Sequence[dict]):
        # groups: [{"params": [...], "lr": float, "name": str}]
        self.groups = []
        for g in groups:
            params = list(g["params"])
            self.groups.append({
                "params": params,
                "lr": float(g["lr"]),
                "lr_scale": 1.0,
                "name": g.get("name", ""),
                "state": AdamState(params),
            })

    def parameters(self) -> list:
        return [p for g in self.groups for p in g["params"]]

    def zero_grad(self) -> None:
        zero_grad(self.parameters())

    def set_lr_scale(self, scale: float, group_name: Optional[str] = None) -> None:
        for g in self.groups:
            if group_name is None or g["name"] == group_name:
                g["lr_scale"] = float(scale)

    def step(self) -> None:
        # Same update as adam_step; params with no grad this step (disconnected
        # from the loss graph) are skipped rather than erroring.
        for g in self.groups:
            st = g["state"]
            if all(p.grad is None for p in g["params"]):
                continue
            st.t += 1
            c1 = 1.0 - st.beta1 ** st.t
            c2 = 1.0 - st.beta2 ** st.t
            lr = g["lr"] * g["lr_scale"]
            for p, m, v in zip(g["params"], st.m, st.v):
                if p.grad is None:
                    continue
                grad = p.grad
                m *= st.beta1
                m += (1 - st.beta1) * grad
                v *= st.beta2
                v += (1 - st.beta2) * grad * grad
                p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + st.eps)).astype(p.data.dtype)


def exp_decay(step: int, total: int, final_factor: float = 0.01) -> float:
    """Exponential schedule from 1.0 at step 0 to ``final_factor`` at ``total``."""
    if total <= 0:
        return 1.0
    frac = min(max(step / total, 0.0), 1.0)
    return float(final_factor ** frac)
