"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Tensors are plain C-contiguous float64 numpy arrays. A Tape records primitive
operations as they execute (define-by-run), so recorded order is already
topological; `backward` walks it once in reverse and returns gradients for
leaf nodes. The primitive set is just large enough for MLPs, a small CNN,
LSTM cells, and the finite-difference Hessian-vector product used to
differentiate gradient norms.

Conventions for non-smooth points: relu'(0) = 0, sign' = 0 everywhere,
maxpool ties break toward the lowest flat index inside the window.
"""

from __future__ import annotations

import numpy as np


class ShapeMismatchError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class TapeConsumedError(RuntimeError):
    pass


class ZeroGradientError(ValueError):
    """Gradient norm is zero where a normalized direction is required."""


def as_tensor(x) -> np.ndarray:
    """Coerce to a C-contiguous float64 array (the tensor convention here)."""
    return np.ascontiguousarray(x, dtype=np.float64)


def check_finite(value: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"non-finite values in {what}")
    return value


class Node:
    """One recorded primitive: cached forward value plus a backward closure.

    `backward_fn(adjoint)` yields (parent_node, gradient_contribution) pairs;
    leaves have no backward_fn. Constant operands are captured by value inside
    the closure and receive no gradient.
    """

    __slots__ = ("tape", "index", "kind", "value", "backward_fn")

    def __init__(self, tape, index, kind, value, backward_fn=None):
        self.tape = tape
        self.index = index
        self.kind = kind
        self.value = value
        self.backward_fn = backward_fn

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node({self.kind}, shape={self.value.shape})"


class Tape:
    """Append-only record of primitives; single-threaded while recording."""

    def __init__(self, check_finite: bool = True):
        self.nodes: list[Node] = []
        self.check_finite = check_finite
        self.consumed = False

    def leaf(self, value) -> Node:
        node = Node(self, len(self.nodes), "leaf", as_tensor(value))
        self.nodes.append(node)
        return node

    def record(self, kind: str, value: np.ndarray, backward_fn) -> Node:
        if self.check_finite:
            check_finite(value, f"output of '{kind}'")
        node = Node(self, len(self.nodes), kind, value, backward_fn)
        self.nodes.append(node)
        return node

    def release(self):
        """Drop recorded nodes so large intermediates can be collected."""
        self.nodes.clear()


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Node) else as_tensor(x)


def _tape_of(*operands) -> Tape:
    tape = None
    for op in operands:
        if isinstance(op, Node):
            if tape is None:
                tape = op.tape
            elif op.tape is not tape:
                raise ValueError("operands recorded on different tapes")
    if tape is None:
        raise ValueError("at least one operand must be a tape Node")
    return tape


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient over axes that numpy broadcasting expanded."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _pair_bwd(a, b, da_fn, db_fn):
    av_shape = value_of(a).shape
    bv_shape = value_of(b).shape

    def bwd(g):
        out = []
        if isinstance(a, Node):
            out.append((a, _unbroadcast(da_fn(g), av_shape)))
        if isinstance(b, Node):
            out.append((b, _unbroadcast(db_fn(g), bv_shape)))
        return out

    return bwd


# --- elementwise / linear primitives -------------------------------------

def add(a, b) -> Node:
    tape = _tape_of(a, b)
    out = value_of(a) + value_of(b)
    return tape.record("add", out, _pair_bwd(a, b, lambda g: g, lambda g: g))


def sub(a, b) -> Node:
    tape = _tape_of(a, b)
    out = value_of(a) - value_of(b)
    return tape.record("sub", out, _pair_bwd(a, b, lambda g: g, lambda g: -g))


def mul(a, b) -> Node:
    tape = _tape_of(a, b)
    av, bv = value_of(a), value_of(b)
    return tape.record("mul", av * bv, _pair_bwd(a, b, lambda g: g * bv, lambda g: g * av))


def scale(a, k: float) -> Node:
    tape = _tape_of(a)
    k = float(k)
    return tape.record("scale", value_of(a) * k, lambda g: [(a, g * k)])


def matmul(a, b) -> Node:
    tape = _tape_of(a, b)
    av, bv = value_of(a), value_of(b)
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise ShapeMismatchError(f"matmul shapes {av.shape} x {bv.shape}")
    return tape.record(
        "matmul", av @ bv,
        _pair_bwd(a, b, lambda g: g @ bv.T, lambda g: av.T @ g),
    )


def sigmoid(a) -> Node:
    tape = _tape_of(a)
    s = _sigmoid_val(value_of(a))
    return tape.record("sigmoid", s, lambda g: [(a, g * s * (1.0 - s))])


def _sigmoid_val(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def tanh(a) -> Node:
    tape = _tape_of(a)
    t = np.tanh(value_of(a))
    return tape.record("tanh", t, lambda g: [(a, g * (1.0 - t * t))])


def relu(a) -> Node:
    tape = _tape_of(a)
    av = value_of(a)
    mask = (av > 0).astype(np.float64)
    return tape.record("relu", av * mask, lambda g: [(a, g * mask)])


def sign(a) -> Node:
    tape = _tape_of(a)
    out = np.sign(value_of(a))
    return tape.record("sign", out, lambda g: [(a, np.zeros_like(g))])


def log_abs(a, eps: float = 1e-16) -> Node:
    """log(|x| + eps); derivative sign(x)/(|x| + eps)."""
    tape = _tape_of(a)
    av = value_of(a)
    denom = np.abs(av) + eps
    return tape.record("log_abs", np.log(denom), lambda g: [(a, g * np.sign(av) / denom)])


def concat(parts: list, axis: int = 0) -> Node:
    tape = _tape_of(*parts)
    vals = [value_of(p) for p in parts]
    out = np.concatenate(vals, axis=axis)
    sizes = [v.shape[axis] for v in vals]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        contribs = []
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if isinstance(p, Node):
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                contribs.append((p, g[tuple(sl)]))
        return contribs

    return tape.record("concat", out, bwd)


def slice_flat(a, start: int, stop: int, shape: tuple) -> Node:
    """Contiguous range of the row-major flat data, viewed with `shape`."""
    tape = _tape_of(a)
    av = value_of(a)
    if stop - start != int(np.prod(shape)):
        raise ShapeMismatchError(f"flat slice [{start}:{stop}] cannot fill shape {shape}")
    if stop > av.size:
        raise ShapeMismatchError(f"flat slice [{start}:{stop}] exceeds size {av.size}")
    out = av.reshape(-1)[start:stop].reshape(shape)

    def bwd(g):
        ga = np.zeros(av.size)
        ga[start:stop] = g.reshape(-1)
        return [(a, ga.reshape(av.shape))]

    return tape.record("slice", out, bwd)


def slice_axis(a, axis: int, start: int, stop: int) -> Node:
    tape = _tape_of(a)
    av = value_of(a)
    sl = [slice(None)] * av.ndim
    sl[axis] = slice(start, stop)
    sl = tuple(sl)
    out = av[sl]

    def bwd(g):
        ga = np.zeros_like(av)
        ga[sl] = g
        return [(a, ga)]

    return tape.record("slice", out, bwd)


# --- reductions / losses ---------------------------------------------------

def mse(pred, target) -> Node:
    tape = _tape_of(pred, target) if isinstance(target, Node) else _tape_of(pred)
    pv, tv = value_of(pred), value_of(target)
    if pv.shape != tv.shape:
        raise ShapeMismatchError(f"mse shapes {pv.shape} vs {tv.shape}")
    diff = pv - tv
    n = pv.size
    out = np.asarray((diff * diff).sum() / n)

    def bwd(g):
        base = (2.0 / n) * diff * g
        contribs = []
        if isinstance(pred, Node):
            contribs.append((pred, base))
        if isinstance(target, Node):
            contribs.append((target, -base))
        return contribs

    return tape.record("mse", out, bwd)


def sum_sq(a) -> Node:
    """Squared L2 norm, composed from mse + scale."""
    av = value_of(a)
    return scale(mse(a, np.zeros_like(av)), av.size)


def l2_norm(a) -> Node:
    tape = _tape_of(a)
    av = value_of(a)
    norm = float(np.sqrt((av * av).sum()))
    out = np.asarray(norm)

    def bwd(g):
        if norm == 0.0:
            return [(a, np.zeros_like(av))]
        return [(a, (g / norm) * av)]

    return tape.record("l2_norm", out, bwd)


def softmax_xent(logits, labels) -> Node:
    """Mean cross-entropy of softmax(logits) against integer labels."""
    tape = _tape_of(logits)
    lv = value_of(logits)
    y = np.asarray(labels, dtype=np.int64)
    if lv.ndim != 2 or y.shape != (lv.shape[0],):
        raise ShapeMismatchError(f"softmax_xent logits {lv.shape}, labels {y.shape}")
    z = lv - lv.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    batch = lv.shape[0]
    out = np.asarray(-logp[np.arange(batch), y].mean())

    def bwd(g):
        p = np.exp(logp)
        p[np.arange(batch), y] -= 1.0
        return [(logits, p * (float(g) / batch))]

    return tape.record("softmax_xent", out, bwd)


# --- structured primitives -------------------------------------------------

def conv2d(x, k) -> Node:
    """Valid cross-correlation, stride 1. x: (B,C,H,W), k: (F,C,kh,kw)."""
    tape = _tape_of(x, k)
    xv, kv = value_of(x), value_of(k)
    if xv.ndim != 4 or kv.ndim != 4 or xv.shape[1] != kv.shape[1]:
        raise ShapeMismatchError(f"conv2d shapes {xv.shape} * {kv.shape}")
    kh, kw = kv.shape[2], kv.shape[3]
    if kh > xv.shape[2] or kw > xv.shape[3]:
        raise ShapeMismatchError("kernel larger than input")
    windows = np.lib.stride_tricks.sliding_window_view(xv, (kh, kw), axis=(2, 3))
    out = np.einsum("bchwij,fcij->bfhw", windows, kv, optimize=True)

    def bwd(g):
        contribs = []
        if isinstance(k, Node):
            dk = np.einsum("bchwij,bfhw->fcij", windows, g, optimize=True)
            contribs.append((k, dk))
        if isinstance(x, Node):
            gpad = np.pad(g, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
            gwin = np.lib.stride_tricks.sliding_window_view(gpad, (kh, kw), axis=(2, 3))
            kflip = kv[:, :, ::-1, ::-1]
            dx = np.einsum("bfhwij,fcij->bchw", gwin, kflip, optimize=True)
            contribs.append((x, dx))
        return contribs

    return tape.record("conv2d", out, bwd)


def maxpool2d(x, size: int = 2) -> Node:
    """Non-overlapping max pooling; trailing rows/cols that do not fill a
    window are cropped. Ties pick the lowest flat index in the window."""
    tape = _tape_of(x)
    xv = value_of(x)
    b, c, h, w = xv.shape
    ho, wo = h // size, w // size
    if ho == 0 or wo == 0:
        raise ShapeMismatchError(f"maxpool2d window {size} exceeds input {xv.shape}")
    cropped = xv[:, :, : ho * size, : wo * size]
    tiles = cropped.reshape(b, c, ho, size, wo, size).transpose(0, 1, 2, 4, 3, 5)
    flat = tiles.reshape(b, c, ho, wo, size * size)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def bwd(g):
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, idx[..., None], g[..., None], axis=-1)
        gx = np.zeros_like(xv)
        gx[:, :, : ho * size, : wo * size] = (
            gflat.reshape(b, c, ho, wo, size, size).transpose(0, 1, 2, 4, 3, 5)
            .reshape(b, c, ho * size, wo * size)
        )
        return [(x, gx)]

    return tape.record("maxpool2d", out, bwd)


def lstm_cell(x, h, c, wx, wh, b) -> Node:
    """Fused LSTM cell; returns (N, 2H) = [new_h | new_c].

    Gate order along the 4H axis is (input, forget, candidate, output).
    Fusing the cell keeps tapes for long unrolls at a workable size.
    """
    tape = _tape_of(x, h, c, wx, wh, b)
    xv, hv, cv = value_of(x), value_of(h), value_of(c)
    wxv, whv, bv = value_of(wx), value_of(wh), value_of(b)
    hidden = hv.shape[1]
    if wxv.shape != (xv.shape[1], 4 * hidden) or whv.shape != (hidden, 4 * hidden):
        raise ShapeMismatchError(
            f"lstm_cell weights {wxv.shape}/{whv.shape} for input {xv.shape}, hidden {hidden}"
        )
    pre = xv @ wxv + hv @ whv + bv
    gi = _sigmoid_val(pre[:, :hidden])
    gf = _sigmoid_val(pre[:, hidden : 2 * hidden])
    gg = np.tanh(pre[:, 2 * hidden : 3 * hidden])
    go = _sigmoid_val(pre[:, 3 * hidden :])
    cn = gf * cv + gi * gg
    tn = np.tanh(cn)
    out = np.concatenate([go * tn, cn], axis=1)

    def bwd(g):
        gh, gc = g[:, :hidden], g[:, hidden:]
        dcn = gc + gh * go * (1.0 - tn * tn)
        dpre = np.concatenate(
            [
                dcn * gg * gi * (1.0 - gi),
                dcn * cv * gf * (1.0 - gf),
                dcn * gi * (1.0 - gg * gg),
                gh * tn * go * (1.0 - go),
            ],
            axis=1,
        )
        contribs = []
        if isinstance(x, Node):
            contribs.append((x, dpre @ wxv.T))
        if isinstance(h, Node):
            contribs.append((h, dpre @ whv.T))
        if isinstance(c, Node):
            contribs.append((c, dcn * gf))
        if isinstance(wx, Node):
            contribs.append((wx, xv.T @ dpre))
        if isinstance(wh, Node):
            contribs.append((wh, hv.T @ dpre))
        if isinstance(b, Node):
            contribs.append((b, dpre.sum(axis=0)))
        return contribs

    return tape.record("lstm_cell", out, bwd)


_PRIMITIVES = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "matmul": matmul,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "relu": relu,
    "conv2d": conv2d,
    "maxpool2d": maxpool2d,
    "softmax_xent": softmax_xent,
    "mse": mse,
    "l2_norm": l2_norm,
    "scale": scale,
    "concat": concat,
    "slice": slice_flat,
    "sign": sign,
    "log_abs": log_abs,
    "lstm_cell": lstm_cell,
}


def forward_primitive(kind: str, *operands, **kwargs) -> Node:
    """Dispatch a primitive by name; operands may be Nodes or constants."""
    if kind not in _PRIMITIVES:
        raise ValueError(f"unknown primitive kind '{kind}'")
    return _PRIMITIVES[kind](*operands, **kwargs)


def backward(tape: Tape, root: Node) -> dict[Node, np.ndarray]:
    """Reverse sweep from a scalar root; returns gradients for leaf nodes.

    Each recorded node is visited exactly once; the tape is single-use.
    """
    if root.tape is not tape:
        raise ValueError("root does not belong to this tape")
    if root.value.size != 1:
        raise ShapeMismatchError(f"backward root must be scalar, got shape {root.value.shape}")
    if tape.consumed:
        raise TapeConsumedError("tape already consumed by a previous backward pass")
    tape.consumed = True

    adjoints: dict[int, np.ndarray] = {root.index: np.ones_like(root.value)}
    leaf_grads: dict[Node, np.ndarray] = {}
    for node in reversed(tape.nodes[: root.index + 1]):
        g = adjoints.pop(node.index, None)
        if g is None:
            continue
        if node.backward_fn is None:
            leaf_grads[node] = g
            continue
        for parent, contrib in node.backward_fn(g):
            acc = adjoints.get(parent.index)
            adjoints[parent.index] = contrib if acc is None else acc + contrib
    return leaf_grads


def grad_norm_gradient(grad_fn, theta: np.ndarray, r: float | None = None) -> np.ndarray:
    """Gradient of the gradient norm, via a forward-difference HVP.

    Computes (H . g)/|g| as (grad(theta + r*v) - grad(theta))/r with
    v = g/|g|; r defaults to 1e-3 * (1 + |theta|).
    """
    theta = as_tensor(theta)
    g = as_tensor(grad_fn(theta))
    gn = float(np.sqrt((g * g).sum()))
    if gn == 0.0:
        raise ZeroGradientError("gradient norm is zero; direction undefined")
    if r is None:
        r = 1e-3 * (1.0 + float(np.sqrt((theta * theta).sum())))
    v = g / gn
    g_shift = as_tensor(grad_fn(theta + r * v))
    return (g_shift - g) / r
