"""Reverse-mode automatic differentiation over dense float64 tensors.

The engine is intentionally small: it supports exactly the operations the
encoder/decoder networks and the contrastive / Dice losses need, records
them on an explicit :class:`Tape`, and replays the tape in reverse to
accumulate gradients.  numpy supplies the array arithmetic; the graph
bookkeeping is all local.

Conventions
-----------
* Everything is float64.  Checkpoints downcast to float32 at the I/O layer.
* Operations only record when (a) a tape is active and (b) at least one
  input has ``requires_grad``.  Calling ops outside a ``with Tape():``
  block is the fast inference path.
* Fused operations (losses, sampling) register through :func:`record` with
  a hand-written backward closure; those closures are what the finite
  difference suite in the tests exists to police.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Optional, Sequence

import numpy as np
from numba import njit

__all__ = [
    "Tensor",
    "Tape",
    "active_tape",
    "record",
    "backward",
    "finite_diff_check",
    "forward_op",
    "conv2d",
    "relu",
    "nearest_upsample_2x",
    "concat_channels",
    "global_avg_pool",
    "linear",
    "add",
    "mul_scalar",
    "dot",
    "exp",
    "log",
    "sum_all",
    "l2_normalize",
    "stack_rows",
]

_TLS = threading.local()


def _tape_stack() -> list:
    stack = getattr(_TLS, "stack", None)
    if stack is None:
        stack = []
        _TLS.stack = stack
    return stack


def active_tape() -> Optional["Tape"]:
    """The innermost tape currently recording on this thread, or None."""
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """A dense float64 array, optionally tracked on a tape.

    ``requires_grad`` marks leaves the caller wants gradients for;
    intermediate results inherit it from their inputs.  ``node_id`` and
    ``tape`` are set when the tensor is registered on a tape and are
    implementation details of the engine.
    """

    __slots__ = ("data", "requires_grad", "node_id", "tape")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.node_id: Optional[int] = None
        self.tape: Optional["Tape"] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """A copy with no tape attachment and no gradient requirement."""
        return Tensor(self.data.copy())

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Tensor(shape={tuple(self.data.shape)}, requires_grad={self.requires_grad})"


class _Node:
    """One tape entry: op kind, ids of tracked inputs, backward closure."""

    __slots__ = ("kind", "inputs", "backward", "shape")

    def __init__(self, kind: str, inputs: tuple, backward, shape: tuple):
        self.kind = kind
        self.inputs = inputs
        self.backward = backward  # None for leaves
        self.shape = shape


class Tape:
    """Ordered record of operations; inputs of a node always precede it.

    Use as a context manager::

        with Tape() as tape:
            loss = f(params)
        tape.backward(loss)
        g = tape.grad(params)

    ``gradients`` maps node id -> gradient Tensor after ``backward``.
    Leaves that the loss does not reach get explicit zero gradients.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.gradients: dict[int, Tensor] = {}
        self._leaf_ids: list[int] = []
        # leaves are keyed by object identity here, not on the tensor, so a
        # tensor can be a leaf on several tapes at once; the strong refs
        # keep id() values stable for this tape's lifetime
        self._watched: dict[int, int] = {}
        self._keepalive: list[Tensor] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        popped = _tape_stack().pop()
        if popped is not self:  # pragma: no cover - misuse guard
            raise RuntimeError("Tape context exited out of order")
        return False

    def watch(self, t: Tensor) -> int:
        """Register ``t`` as a leaf on this tape and return its node id."""
        nid = self._watched.get(id(t))
        if nid is not None:
            return nid
        node = _Node("leaf", (), None, tuple(t.data.shape))
        self.nodes.append(node)
        nid = len(self.nodes) - 1
        self._watched[id(t)] = nid
        self._keepalive.append(t)
        self._leaf_ids.append(nid)
        return nid

    def _input_id(self, t: Tensor) -> int:
        if t.tape is self and t.node_id is not None:
            return t.node_id  # intermediate produced on this tape
        if t.requires_grad:
            return self.watch(t)
        return -1  # constant input: no gradient flows

    def _record(self, kind: str, out: Tensor, inputs: Sequence[Tensor], backward) -> Tensor:
        ids = tuple(self._input_id(t) for t in inputs)
        node = _Node(kind, ids, backward, tuple(out.data.shape))
        self.nodes.append(node)
        out.node_id = len(self.nodes) - 1
        out.tape = self
        return out

    def backward(self, loss: Tensor) -> dict[int, Tensor]:
        """Accumulate d(loss)/d(leaf) for every leaf on this tape."""
        if loss.tape is not self or loss.node_id is None:
            raise ValueError("backward: loss tensor is not recorded on this tape")
        if loss.data.shape != ():
            raise ValueError(f"backward: loss must be scalar, got shape {loss.data.shape}")
        partial: dict[int, np.ndarray] = {loss.node_id: np.ones((), dtype=np.float64)}
        for nid in range(loss.node_id, -1, -1):
            node = self.nodes[nid]
            if node.backward is None:
                continue  # leaf: keep its accumulated gradient
            g = partial.pop(nid, None)
            if g is None:
                continue  # not reachable from the loss
            input_grads = node.backward(g)
            for iid, ig in zip(node.inputs, input_grads):
                if iid < 0 or ig is None:
                    continue
                if iid in partial:
                    partial[iid] = partial[iid] + ig
                else:
                    partial[iid] = ig
        self.gradients = {}
        for nid in self._leaf_ids:
            arr = partial.get(nid)
            if arr is None:
                arr = np.zeros(self.nodes[nid].shape, dtype=np.float64)
            self.gradients[nid] = Tensor(np.asarray(arr, dtype=np.float64))
        return self.gradients

    def grad(self, t: Tensor) -> np.ndarray:
        """Gradient array for ``t`` (zeros if the loss never reached it)."""
        nid = self._watched.get(id(t))
        if nid is None and t.tape is self:
            nid = t.node_id
        if nid is not None and nid in self.gradients:
            return self.gradients[nid].data
        return np.zeros(t.data.shape, dtype=np.float64)


def record(kind: str, out: Tensor, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    """Attach ``out`` to the active tape if any input is being tracked.

    ``backward(grad_out)`` must return one gradient array (or None) per
    input, positionally aligned.  This is the extension point fused ops
    (losses, region sampling) use to register custom backward rules.
    """
    needs = any(t.requires_grad for t in inputs)
    out.requires_grad = needs
    tape = active_tape()
    if tape is None or not needs:
        return out
    return tape._record(kind, out, inputs, backward)


def backward(loss: Tensor) -> dict[int, Tensor]:
    """Convenience wrapper: run backward on the tape that recorded ``loss``."""
    if loss.tape is None:
        raise ValueError("backward: loss was not recorded on any tape")
    return loss.tape.backward(loss)


# ---------------------------------------------------------------------------
# convolution


def _conv_out_len(n: int, stride: int) -> int:
    return (n - 1) // stride + 1


@njit(cache=True)
def _im2col_kernel(xd, stride, ho, wo):
    """Unfold 3x3 windows (zero pad 1) into (Ho*Wo, 9*C) columns."""
    h, w, c = xd.shape
    cols = np.zeros((ho * wo, 9 * c), dtype=np.float64)
    for oy in range(ho):
        iy0 = oy * stride - 1
        for ox in range(wo):
            ix0 = ox * stride - 1
            row = oy * wo + ox
            for dy in range(3):
                y = iy0 + dy
                if y < 0 or y >= h:
                    continue
                for dx in range(3):
                    x = ix0 + dx
                    if x < 0 or x >= w:
                        continue
                    base = (dy * 3 + dx) * c
                    for ch in range(c):
                        cols[row, base + ch] = xd[y, x, ch]
    return cols


@njit(cache=True)
def _col2im_kernel(dcols, stride, h, w, c, ho, wo):
    """Scatter column gradients back onto the (unpadded) input grid."""
    dx_out = np.zeros((h, w, c), dtype=np.float64)
    for oy in range(ho):
        iy0 = oy * stride - 1
        for ox in range(wo):
            ix0 = ox * stride - 1
            row = oy * wo + ox
            for dy in range(3):
                y = iy0 + dy
                if y < 0 or y >= h:
                    continue
                for dx in range(3):
                    x = ix0 + dx
                    if x < 0 or x >= w:
                        continue
                    base = (dy * 3 + dx) * c
                    for ch in range(c):
                        dx_out[y, x, ch] += dcols[row, base + ch]
    return dx_out


def _im2col(xd: np.ndarray, stride: int):
    h, w, c = xd.shape
    ho = _conv_out_len(h, stride)
    wo = _conv_out_len(w, stride)
    return _im2col_kernel(np.ascontiguousarray(xd), stride, ho, wo), ho, wo


def _col2im(dcols: np.ndarray, shape: tuple, stride: int) -> np.ndarray:
    h, w, c = shape
    ho = _conv_out_len(h, stride)
    wo = _conv_out_len(w, stride)
    return _col2im_kernel(np.ascontiguousarray(dcols), stride, h, w, c, ho, wo)


def conv2d(x: Tensor, w: Tensor, stride: int = 1) -> Tensor:
    """3x3 convolution with zero padding 1.

    ``x`` is (H, W, Cin), ``w`` is (3, 3, Cin, Cout), stride is 1 or 2.
    With stride 2 the output spatial size is floor((n - 1) / 2) + 1,
    i.e. ceil(n / 2).
    """
    if stride not in (1, 2):
        raise ValueError(f"conv2d: stride must be 1 or 2, got {stride}")
    xd, wd = x.data, w.data
    if xd.ndim != 3:
        raise ValueError(f"conv2d: input must be (H, W, C), got shape {xd.shape}")
    if wd.ndim != 4 or wd.shape[0] != 3 or wd.shape[1] != 3 or wd.shape[2] != xd.shape[2]:
        raise ValueError(
            f"conv2d: weight must be (3, 3, {xd.shape[2]}, Cout), got {wd.shape} "
            f"for input {xd.shape}"
        )
    h, w_, ci = xd.shape
    co = wd.shape[3]
    cols, ho, wo = _im2col(xd, stride)
    wmat = wd.reshape(9 * ci, co)
    y = (cols @ wmat).reshape(ho, wo, co)
    out = Tensor(y)

    def bwd(g):
        g2 = g.reshape(-1, co)
        gw = (cols.T @ g2).reshape(3, 3, ci, co) if w.requires_grad else None
        gx = _col2im(g2 @ wmat.T, (h, w_, ci), stride) if x.requires_grad else None
        return gx, gw

    return record("conv2d", out, (x, w), bwd)


# ---------------------------------------------------------------------------
# pointwise / shape ops


def relu(x: Tensor) -> Tensor:
    """max(x, 0); the subgradient at exactly 0 is taken as 0."""
    mask = x.data > 0.0
    out = Tensor(np.where(mask, x.data, 0.0))

    def bwd(g):
        return (np.where(mask, g, 0.0),)

    return record("relu", out, (x,), bwd)


def nearest_upsample_2x(x: Tensor) -> Tensor:
    """Repeat each pixel of an (H, W, C) map into a 2x2 block."""
    if x.data.ndim != 3:
        raise ValueError(f"nearest_upsample_2x: input must be (H, W, C), got {x.data.shape}")
    y = np.repeat(np.repeat(x.data, 2, axis=0), 2, axis=1)
    out = Tensor(y)
    h, w, c = x.data.shape

    def bwd(g):
        return (g.reshape(h, 2, w, 2, c).sum(axis=(1, 3)),)

    return record("nearest_upsample_2x", out, (x,), bwd)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the last (channel) axis; leading dims must match."""
    if a.data.ndim != b.data.ndim or a.data.shape[:-1] != b.data.shape[:-1]:
        raise ValueError(
            f"concat_channels: leading dimensions differ: {a.data.shape} vs {b.data.shape}"
        )
    out = Tensor(np.concatenate([a.data, b.data], axis=-1))
    ca = a.data.shape[-1]

    def bwd(g):
        return g[..., :ca], g[..., ca:]

    return record("concat_channels", out, (a, b), bwd)


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean of an (H, W, C) map -> (C,)."""
    if x.data.ndim != 3:
        raise ValueError(f"global_avg_pool: input must be (H, W, C), got {x.data.shape}")
    h, w, c = x.data.shape
    out = Tensor(x.data.mean(axis=(0, 1)))

    def bwd(g):
        return (np.broadcast_to(g / (h * w), (h, w, c)).copy(),)

    return record("global_avg_pool", out, (x,), bwd)


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """x @ w (+ b) over the last axis: (..., in) x (in, out) -> (..., out)."""
    xd, wd = x.data, w.data
    if wd.ndim != 2 or xd.ndim < 1 or xd.shape[-1] != wd.shape[0]:
        raise ValueError(f"linear: cannot multiply input {xd.shape} by weight {wd.shape}")
    n_out = wd.shape[1]
    y = xd @ wd
    if b is not None:
        if b.data.shape != (n_out,):
            raise ValueError(f"linear: bias must be ({n_out},), got {b.data.shape}")
        y = y + b.data
    out = Tensor(y)

    def bwd(g):
        g2 = g.reshape(-1, n_out)
        gx = (g @ wd.T) if x.requires_grad else None
        gw = (xd.reshape(-1, xd.shape[-1]).T @ g2) if w.requires_grad else None
        if b is None:
            return gx, gw
        gb = g2.sum(axis=0) if b.requires_grad else None
        return gx, gw, gb

    inputs = (x, w) if b is None else (x, w, b)
    return record("linear", out, inputs, bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise add. Also accepts a (C,) bias against an (..., C) tensor."""
    if a.data.shape == b.data.shape:
        out = Tensor(a.data + b.data)

        def bwd(g):
            return g, g

        return record("add", out, (a, b), bwd)
    if b.data.ndim == 1 and a.data.ndim >= 1 and a.data.shape[-1] == b.data.shape[0]:
        out = Tensor(a.data + b.data)
        c = b.data.shape[0]

        def bwd_bias(g):
            return g, g.reshape(-1, c).sum(axis=0)

        return record("add", out, (a, b), bwd_bias)
    raise ValueError(f"add: incompatible shapes {a.data.shape} and {b.data.shape}")


def mul_scalar(x: Tensor, value: float) -> Tensor:
    v = float(value)
    out = Tensor(x.data * v)

    def bwd(g):
        return (g * v,)

    return record("mul_scalar", out, (x,), bwd)


def dot(a: Tensor, b: Tensor) -> Tensor:
    """Inner product of two 1-D vectors -> scalar."""
    if a.data.ndim != 1 or b.data.ndim != 1 or a.data.shape != b.data.shape:
        raise ValueError(f"dot: needs equal-length 1-D vectors, got {a.data.shape} and {b.data.shape}")
    out = Tensor(np.dot(a.data, b.data))

    def bwd(g):
        ga = g * b.data if a.requires_grad else None
        gb = g * a.data if b.requires_grad else None
        return ga, gb

    return record("dot", out, (a, b), bwd)


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    if not np.all(np.isfinite(y)):
        raise ValueError(f"exp: non-finite result (max input {x.data.max():.3g})")
    out = Tensor(y)

    def bwd(g):
        return (g * y,)

    return record("exp", out, (x,), bwd)


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0.0):
        raise ValueError(f"log: requires strictly positive inputs (min input {x.data.min():.3g})")
    out = Tensor(np.log(x.data))

    def bwd(g):
        return (g / x.data,)

    return record("log", out, (x,), bwd)


def sum_all(x: Tensor) -> Tensor:
    """Sum of all elements -> scalar."""
    out = Tensor(x.data.sum())
    shape = x.data.shape

    def bwd(g):
        return (np.full(shape, float(g), dtype=np.float64),)

    return record("sum", out, (x,), bwd)


_L2_EPS = 1e-12


def l2_normalize(x: Tensor) -> Tensor:
    """x / sqrt(sum(x^2) + 1e-12) for a 1-D vector."""
    if x.data.ndim != 1:
        raise ValueError(f"l2_normalize: input must be 1-D, got shape {x.data.shape}")
    xd = x.data
    n = math.sqrt(float(xd @ xd) + _L2_EPS)
    y = xd / n
    out = Tensor(y)

    def bwd(g):
        return (g / n - xd * (float(xd @ g) / n**3),)

    return record("l2_normalize", out, (x,), bwd)


def stack_rows(rows: Sequence[Tensor]) -> Tensor:
    """Stack K same-length 1-D tensors into a (K, D) matrix.

    Engine-internal helper (not part of the forward_op registry); the
    contrastive losses use it to assemble mean-vector sets.
    """
    if not rows:
        raise ValueError("stack_rows: need at least one row")
    d = rows[0].data.shape
    if any(r.data.ndim != 1 or r.data.shape != d for r in rows):
        raise ValueError("stack_rows: rows must be 1-D and equally sized")
    out = Tensor(np.stack([r.data for r in rows], axis=0))

    def bwd(g):
        return tuple(g[k] for k in range(len(rows)))

    return record("stack_rows", out, tuple(rows), bwd)


# ---------------------------------------------------------------------------
# dispatcher


def _op_conv2d(inputs, attrs):
    return conv2d(inputs[0], inputs[1], stride=int(attrs.get("stride", 1)))


def _op_linear(inputs, attrs):
    return linear(*inputs)


def _op_mul_scalar(inputs, attrs):
    return mul_scalar(inputs[0], attrs["value"])


_OP_TABLE: dict[str, Callable] = {
    "conv2d": _op_conv2d,
    "relu": lambda inp, a: relu(inp[0]),
    "nearest_upsample_2x": lambda inp, a: nearest_upsample_2x(inp[0]),
    "concat_channels": lambda inp, a: concat_channels(inp[0], inp[1]),
    "global_avg_pool": lambda inp, a: global_avg_pool(inp[0]),
    "linear": _op_linear,
    "add": lambda inp, a: add(inp[0], inp[1]),
    "mul_scalar": _op_mul_scalar,
    "dot": lambda inp, a: dot(inp[0], inp[1]),
    "exp": lambda inp, a: exp(inp[0]),
    "log": lambda inp, a: log(inp[0]),
    "sum": lambda inp, a: sum_all(inp[0]),
    "l2_normalize": lambda inp, a: l2_normalize(inp[0]),
}


def forward_op(kind: str, inputs: Sequence[Tensor], attrs: Optional[dict] = None) -> Tensor:
    """Uniform entry point: apply the op named ``kind`` to ``inputs``."""
    if kind not in _OP_TABLE:
        raise ValueError(f"forward_op: unknown op kind '{kind}'")
    return _OP_TABLE[kind](list(inputs), attrs or {})


# ---------------------------------------------------------------------------
# verification


def finite_diff_check(f: Callable[[Tensor], Tensor], x, step: float = 1e-3) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must map one Tensor to a scalar Tensor.  The analytic gradient
    comes from a tape replay; the numeric one perturbs every coordinate by
    +/- ``step``.  The error metric per coordinate is
    |a - n| / max(1, |a|, |n|); the max over coordinates is returned.
    Raises ValueError on non-finite values of ``f`` anywhere it is probed.
    """
    if step <= 0:
        raise ValueError(f"finite_diff_check: step must be positive, got {step}")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    with Tape() as tape:
        xt = Tensor(base.copy(), requires_grad=True)
        y = f(xt)
    if not isinstance(y, Tensor) or y.data.shape != ():
        raise ValueError("finite_diff_check: f must return a scalar Tensor")
    if not np.isfinite(y.data):
        raise ValueError("finite_diff_check: f produced a non-finite value at the base point")
    tape.backward(y)
    analytic = tape.grad(xt)

    numeric = np.empty_like(base)
    flat = base.ravel()
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + step
        yp = float(f(Tensor(base)).data)
        flat[i] = saved - step
        ym = float(f(Tensor(base)).data)
        flat[i] = saved
        if not (np.isfinite(yp) and np.isfinite(ym)):
            raise ValueError(f"finite_diff_check: non-finite value of f at probe {i}")
        numeric.ravel()[i] = (yp - ym) / (2.0 * step)

    a = analytic.ravel()
    n = numeric.ravel()
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0
