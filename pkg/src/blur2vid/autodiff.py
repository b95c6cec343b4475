"""Reverse-mode automatic differentiation over a per-step operation tape.

Values are immutable rank-<=4 float tensors (float32 storage in training;
reductions accumulate in float64). A Tape lives for one training step: ops
executed while a tape is active append nodes, `Tape.backward` sweeps them in
reverse, and the tape is then discarded. The finite-difference checker casts
its inputs to float64 so the comparison is limited by truncation error, not
by storage precision.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from . import kernels


class Tensor:
    """Dense numeric array, optionally recorded on the active tape."""

    __slots__ = ("data", "node_id", "tape")

    def __init__(self, data, node_id: Optional[int] = None, tape: "Tape | None" = None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        elif arr.dtype == np.float16:
            arr = arr.astype(np.float32)
        if arr.ndim > 4:
            raise ValueError(f"tensor rank {arr.ndim} exceeds 4")
        self.data = arr
        self.node_id = node_id
        self.tape = tape

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = "" if self.node_id is None else f", node={self.node_id}"
        return f"Tensor(shape={self.data.shape}{tag})"


class Param:
    """Trainable array; lifted onto the active tape at most once per step.

    float32 in all model code; float64 is kept when given (the optimizer
    reference tests run in double precision).
    """

    __slots__ = ("value",)

    def __init__(self, value: np.ndarray):
        arr = np.asarray(value)
        if arr.dtype != np.float64:
            arr = arr.astype(np.float32)
        self.value = arr

    def __repr__(self) -> str:
        return f"Param(shape={self.value.shape})"


class Node:
    __slots__ = ("op", "input_ids", "backward")

    def __init__(self, op: str, input_ids: tuple[int, ...], backward):
        self.op = op
        self.input_ids = input_ids
        self.backward = backward


_ACTIVE: Optional["Tape"] = None


class Tape:
    """Append-only op record for one training step."""

    def __init__(self):
        self.nodes: list[Node] = []
        # id(obj) -> (obj, leaf Tensor); holding obj keeps ids stable
        self._leaves: dict[int, tuple[object, Tensor]] = {}

    def __enter__(self) -> "Tape":
        global _ACTIVE
        self._prev = _ACTIVE
        _ACTIVE = self
        return self

    def __exit__(self, *exc) -> None:
        global _ACTIVE
        _ACTIVE = self._prev
        self._prev = None

    def _add(self, op: str, input_ids: tuple[int, ...], backward) -> int:
        self.nodes.append(Node(op, input_ids, backward))
        return len(self.nodes) - 1

    def _leaf(self, obj: object, data: np.ndarray) -> Tensor:
        key = id(obj)
        hit = self._leaves.get(key)
        if hit is not None:
            return hit[1]
        t = Tensor(data, self._add("leaf", (), None), self)
        self._leaves[key] = (obj, t)
        return t

    def watch(self, param: Param) -> Tensor:
        """Lift a Param onto the tape (memoized per step)."""
        return self._leaf(param, param.value)

    def lift(self, t: Tensor) -> Tensor:
        """Return a tensor recorded on this tape, registering constants."""
        if t.tape is self:
            return t
        return self._leaf(t, t.data)

    def node_id_of(self, obj: object) -> Optional[int]:
        hit = self._leaves.get(id(obj))
        if hit is not None:
            return hit[1].node_id
        if isinstance(obj, Tensor) and obj.tape is self:
            return obj.node_id
        return None

    def backward(self, loss: Tensor) -> dict[int, Tensor]:
        """Gradients of a scalar loss w.r.t. every reachable node."""
        if loss.tape is not self or loss.node_id is None:
            raise ValueError("backward: tensor is not recorded on this tape")
        if loss.data.size != 1:
            raise ValueError(
                f"backward: loss must be scalar, got shape {loss.data.shape}")
        grads: list[Optional[np.ndarray]] = [None] * len(self.nodes)
        grads[loss.node_id] = np.ones_like(loss.data)
        for nid in range(loss.node_id, -1, -1):
            g = grads[nid]
            node = self.nodes[nid]
            if g is None or node.backward is None:
                continue
            for iid, ig in zip(node.input_ids, node.backward(g)):
                if ig is None:
                    continue
                grads[iid] = ig if grads[iid] is None else grads[iid] + ig
        return {i: Tensor(g) for i, g in enumerate(grads) if g is not None}


def active_tape() -> Optional[Tape]:
    return _ACTIVE


def lift(param: Param) -> Tensor:
    """Param -> Tensor on the active tape, or a constant tensor if none."""
    tape = _ACTIVE
    if tape is None:
        return Tensor(param.value)
    return tape.watch(param)


def record(op: str, out: np.ndarray, inputs: Sequence[Tensor],
           backward: Optional[Callable]) -> Tensor:
    """Create the result tensor of `op`, recording it if a tape is active.

    `backward(g)` must return one gradient (or None) per input, each shaped
    like that input. This is the extension point used by the nn and warp
    modules to register their own differentiable ops.
    """
    tape = _ACTIVE
    if tape is None:
        return Tensor(out)
    ids = tuple(tape.lift(t).node_id for t in inputs)
    return Tensor(out, tape._add(op, ids, backward), tape)


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.data.shape != b.data.shape:
        raise ValueError(
            f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("add", a, b)
    return record("add", a.data + b.data, (a, b), lambda g: (g, g))


def subtract(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("subtract", a, b)
    return record("subtract", a.data - b.data, (a, b), lambda g: (g, -g))


def multiply(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("multiply", a, b)
    ad, bd = a.data, b.data
    return record("multiply", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(x: Tensor, s: float) -> Tensor:
    s = float(s)
    return record("scalar-scale", x.data * s, (x,), lambda g: (g * s,))


def concat_channels(*xs: Tensor) -> Tensor:
    if len(xs) < 2:
        raise ValueError("concat-channels: needs at least two inputs")
    axis = xs[0].ndim - 3
    if axis < 0:
        raise ValueError("concat-channels: inputs must be rank 3 or 4")
    ref = xs[0].data.shape
    for x in xs[1:]:
        s = x.data.shape
        if len(s) != len(ref) or s[:axis] != ref[:axis] or s[axis + 1:] != ref[axis + 1:]:
            raise ValueError(
                f"concat-channels: shape mismatch {ref} vs {s}")
    sizes = [x.data.shape[axis] for x in xs]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        sl = [slice(None)] * g.ndim
        outs = []
        for k in range(len(sizes)):
            sl[axis] = slice(int(offsets[k]), int(offsets[k + 1]))
            outs.append(g[tuple(sl)])
        return tuple(outs)

    out = np.concatenate([x.data for x in xs], axis=axis)
    return record("concat-channels", out, xs, backward)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    axis = x.ndim - 3
    if axis < 0:
        raise ValueError("slice-channels: input must be rank 3 or 4")
    if not (0 <= start < stop <= x.data.shape[axis]):
        raise ValueError(
            f"slice-channels: range [{start}:{stop}] out of {x.data.shape[axis]} channels")
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(start, stop)
    sl = tuple(sl)

    def backward(g):
        full = np.zeros(x.data.shape, dtype=g.dtype)
        full[sl] = g
        return (full,)

    return record("slice-channels", x.data[sl].copy(), (x,), backward)


def pad_spatial(x: Tensor, pad: int) -> Tensor:
    if pad < 0:
        raise ValueError("pad-spatial: pad must be >= 0")
    widths = [(0, 0)] * (x.ndim - 2) + [(pad, pad), (pad, pad)]
    out = np.pad(x.data, widths)

    def backward(g):
        if pad == 0:
            return (g,)
        return (g[..., pad:-pad, pad:-pad],)

    return record("pad-spatial", out, (x,), backward)


def absolute(x: Tensor) -> Tensor:
    xd = x.data
    return record("absolute", np.abs(xd), (x,), lambda g: (g * np.sign(xd),))


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    xd = x.data
    out = np.where(xd > 0, xd, xd * slope)

    def backward(g):
        return (g * np.where(xd > 0, 1.0, slope).astype(g.dtype),)

    return record("leaky-relu", out, (x,), backward)


def relu(x: Tensor) -> Tensor:
    xd = x.data
    return record("relu", np.maximum(xd, 0), (x,),
                  lambda g: (g * (xd > 0),))


def sigmoid(x: Tensor) -> Tensor:
    out = kernels.sigmoid(x.data)
    return record("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return record("tanh", out, (x,), lambda g: (g * (1.0 - out * out),))


def reduce_sum(x: Tensor) -> Tensor:
    out = np.asarray(np.sum(x.data, dtype=np.float64)).astype(x.data.dtype)
    shape, dtype = x.data.shape, x.data.dtype

    def backward(g):
        return (np.full(shape, float(g), dtype=dtype),)

    return record("sum", out, (x,), backward)


def reduce_mean(x: Tensor) -> Tensor:
    n = x.data.size
    out = np.asarray(np.sum(x.data, dtype=np.float64) / n).astype(x.data.dtype)
    shape, dtype = x.data.shape, x.data.dtype

    def backward(g):
        return (np.full(shape, float(g) / n, dtype=dtype),)

    return record("mean", out, (x,), backward)


def resize_bilinear(x: Tensor, factor: float) -> Tensor:
    if x.ndim < 3:
        raise ValueError("bilinear-resize: input must be rank 3 or 4")
    if factor <= 0:
        raise ValueError("bilinear-resize: factor must be positive")
    h, w = x.data.shape[-2], x.data.shape[-1]
    out_hw = (max(1, round(h * factor)), max(1, round(w * factor)))
    out = kernels.resize(x.data, out_hw)

    def backward(g):
        return (kernels.resize_grad(g, (h, w)),)

    return record("bilinear-resize", out, (x,), backward)


def space_to_depth(x: Tensor, block: int) -> Tensor:
    if x.ndim < 3:
        raise ValueError("space-to-depth: input must be rank 3 or 4")
    h, w = x.data.shape[-2], x.data.shape[-1]
    if h % block or w % block:
        raise ValueError(
            f"space-to-depth: spatial size {(h, w)} not divisible by block {block}")
    out = kernels.space_to_depth(x.data, block)
    return record("space-to-depth", out, (x,),
                  lambda g: (kernels.depth_to_space(g, block),))


def depth_to_space(x: Tensor, block: int) -> Tensor:
    if x.ndim < 3:
        raise ValueError("depth-to-space: input must be rank 3 or 4")
    c = x.data.shape[-3]
    if c % (block * block):
        raise ValueError(
            f"depth-to-space: {c} channels not divisible by block^2 = {block * block}")
    out = kernels.depth_to_space(x.data, block)
    return record("depth-to-space", out, (x,),
                  lambda g: (kernels.space_to_depth(g, block),))


def spatial_diff(x: Tensor, axis: str) -> Tensor:
    """Forward difference along 'x' (width) or 'y' (height); replicate
    boundary, so the last column/row of the output is zero."""
    if axis not in ("x", "y"):
        raise ValueError(f"spatial-diff: axis must be 'x' or 'y', got {axis!r}")
    ax = -1 if axis == "x" else -2
    xd = x.data
    out = np.zeros_like(xd)
    if axis == "x":
        out[..., :, :-1] = xd[..., :, 1:] - xd[..., :, :-1]
    else:
        out[..., :-1, :] = xd[..., 1:, :] - xd[..., :-1, :]

    def backward(g):
        dx = np.zeros_like(g)
        if axis == "x":
            dx[..., :, 1:] += g[..., :, :-1]
            dx[..., :, :-1] -= g[..., :, :-1]
        else:
            dx[..., 1:, :] += g[..., :-1, :]
            dx[..., :-1, :] -= g[..., :-1, :]
        return (dx,)

    return record(f"spatial-diff-{axis}", out, (x,), backward)


# ---------------------------------------------------------------------------
# descriptor dispatch

_EVAL_OPS: dict[str, Callable] = {
    "add": add,
    "subtract": subtract,
    "multiply": multiply,
    "scalar-scale": scale,
    "concat-channels": concat_channels,
    "slice-channels": slice_channels,
    "pad-spatial": pad_spatial,
    "absolute": absolute,
    "leaky-relu": leaky_relu,
    "relu": relu,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "sum": reduce_sum,
    "mean": reduce_mean,
    "bilinear-resize": resize_bilinear,
    "space-to-depth": space_to_depth,
    "depth-to-space": depth_to_space,
}


def evaluate(op: str, inputs: Sequence[Tensor], **kwargs) -> Tensor:
    """Apply an op by descriptor name, recording it on the active tape."""
    fn = _EVAL_OPS.get(op)
    if fn is None:
        raise ValueError(f"unknown op descriptor: {op!r}")
    return fn(*inputs, **kwargs)


def op_descriptors() -> tuple[str, ...]:
    return tuple(_EVAL_OPS)


# ---------------------------------------------------------------------------
# finite-difference checking


def gradcheck(f: Callable[..., Tensor], inputs: Sequence[Tensor],
              epsilon: float = 1e-3) -> float:
    """Max relative error between tape gradients and central differences.

    Inputs are cast to float64 copies and perturbed in place; f is
    re-evaluated tape-free for the numeric side.
    """
    if epsilon <= 0:
        raise ValueError("gradcheck: epsilon must be positive")
    xs = [Tensor(np.array(t.data, dtype=np.float64)) for t in inputs]
    with Tape() as tape:
        loss = f(*xs)
        if loss.data.size != 1:
            raise ValueError("gradcheck: f must be scalar-valued")
        grads = tape.backward(loss)
    worst = 0.0
    for t in xs:
        nid = tape.node_id_of(t)
        analytic = (grads[nid].data if nid is not None and nid in grads
                    else np.zeros_like(t.data)).reshape(-1)
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            fp = float(f(*xs).data)
            flat[i] = orig - epsilon
            fm = float(f(*xs).data)
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * epsilon)
            ana = float(analytic[i])
            err = abs(ana - numeric) / max(abs(ana), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
