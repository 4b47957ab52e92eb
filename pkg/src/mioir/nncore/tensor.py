"""Dense reverse-mode autodiff over numpy arrays.

Feature maps are channels-last, ``(N, H, W, C)``. A node is recorded only
when at least one input requires a gradient, so pure inference builds no
graph at all.
"""

from __future__ import annotations

import contextlib

import numpy as np
from numpy.lib.stride_tricks import as_strided

_state = {"dtype": np.float32, "nan_check": False}


def default_dtype():
    return _state["dtype"]


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype used for new tensors (``np.float64`` for gradient checks)."""
    old = _state["dtype"]
    _state["dtype"] = np.dtype(dtype).type
    try:
        yield
    finally:
        _state["dtype"] = old


def set_nan_check(enabled: bool) -> None:
    """Raise ``FloatingPointError`` as soon as an op produces a non-finite value."""
    _state["nan_check"] = bool(enabled)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad=False, parents=(), backward=None, op="leaf", name=None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(default_dtype())
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.parents = parents
        self._backward = backward
        self.op = op
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node.parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                if _state["nan_check"] and not np.all(np.isfinite(pg)):
                    raise FloatingPointError(f"non-finite gradient flowing out of {node.op}")
                key = id(p)
                grads[key] = pg if key not in grads else grads[key] + pg


def _topo_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=default_dtype()))


def parameter(data, name=None) -> Tensor:
    return Tensor(np.asarray(data, dtype=default_dtype()), requires_grad=True, name=name)


def _make(out, inputs, backward, op):
    if _state["nan_check"] and not np.all(np.isfinite(out)):
        raise FloatingPointError(f"non-finite value produced by {op}")
    if any(t.requires_grad for t in inputs):
        return Tensor(out, requires_grad=True, parents=tuple(inputs), backward=backward, op=op)
    return Tensor(out, op=op)


def _shape_error(op, msg):
    return ValueError(f"{op}: {msg}")


# ---------------------------------------------------------------------------
# elementwise


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise _shape_error("add", f"cannot broadcast {a.shape} with {b.shape}") from None

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), backward, "add")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError:
        raise _shape_error("mul", f"cannot broadcast {a.shape} with {b.shape}") from None

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), backward, "mul")


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0), (x,), lambda g: (g * mask,), "relu")


def leaky_relu(x, slope: float = 0.2) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    slope = x.data.dtype.type(slope)
    return _make(np.where(mask, x.data, x.data * slope), (x,), lambda g: (np.where(mask, g, g * slope),), "leaky_relu")


def mean(x) -> Tensor:
    x = as_tensor(x)
    n = x.data.size

    def backward(g):
        return (np.full(x.shape, g / n, dtype=x.data.dtype),)

    return _make(np.asarray(x.data.mean(dtype=np.float64), dtype=x.data.dtype), (x,), backward, "mean")


def slice_last(x, start: int, stop: int) -> Tensor:
    """``x[..., start:stop]``."""
    x = as_tensor(x)
    if not 0 <= start < stop <= x.shape[-1]:
        raise _shape_error("slice_last", f"bad range [{start}, {stop}) for last axis {x.shape[-1]}")

    def backward(g):
        full = np.zeros_like(x.data)
        full[..., start:stop] = g
        return (full,)

    return _make(x.data[..., start:stop], (x,), backward, "slice_last")


# ---------------------------------------------------------------------------
# layers


def dense(x, w, b) -> Tensor:
    """``x @ w + b`` with ``x: (N, D)``, ``w: (D, K)``, ``b: (K,)``."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise _shape_error("dense", f"x {x.shape}, w {w.shape}, b {b.shape}")

    def backward(g):
        gx = g @ w.data.T if x.requires_grad else None
        return gx, x.data.T @ g, g.sum(axis=0)

    return _make(x.data @ w.data + b.data, (x, w, b), backward, "dense")


def global_avg_pool(x) -> Tensor:
    """``(N, H, W, C) -> (N, C)``."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise _shape_error("global_avg_pool", f"expected (N, H, W, C), got {x.shape}")
    n, h, w, c = x.shape

    def backward(g):
        return (np.broadcast_to(g[:, None, None, :] / (h * w), x.shape).astype(x.data.dtype),)

    return _make(x.data.mean(axis=(1, 2)), (x,), backward, "global_avg_pool")


def channel_affine(f, s, b) -> Tensor:
    """Per-channel modulation ``f * s + b``.

    ``s`` and ``b`` are ``(C,)`` (shared over the batch) or ``(N, C)`` (one
    pair per sample).
    """
    f, s, b = as_tensor(f), as_tensor(s), as_tensor(b)
    if f.ndim != 4:
        raise _shape_error("channel_affine", f"features must be (N, H, W, C), got {f.shape}")
    n, _, _, c = f.shape
    if s.shape not in ((c,), (n, c)) or b.shape not in ((c,), (n, c)):
        raise _shape_error("channel_affine", f"scale {s.shape} / bias {b.shape} do not match features {f.shape}")

    def expand(t):
        return t.data if t.ndim == 1 else t.data[:, None, None, :]

    sd, bd = expand(s), expand(b)

    def reduce(g, t):
        return g.sum(axis=(0, 1, 2)) if t.ndim == 1 else g.sum(axis=(1, 2))

    def backward(g):
        gf = g * sd if f.requires_grad else None
        gs = reduce(g * f.data, s) if s.requires_grad else None
        gb = reduce(g, b) if b.requires_grad else None
        return gf, gs, gb

    return _make(f.data * sd + bd, (f, s, b), backward, "channel_affine")


def _pad_edge(x, p):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)), mode="edge")


def _unpad_edge(gp, p):
    """Adjoint of edge padding: fold the border gradients back onto the edges."""
    if p == 0:
        return gp
    g = gp[:, p:-p].copy()
    g[:, 0] += gp[:, :p].sum(axis=1)
    g[:, -1] += gp[:, -p:].sum(axis=1)
    out = g[:, :, p:-p].copy()
    out[:, :, 0] += g[:, :, :p].sum(axis=2)
    out[:, :, -1] += g[:, :, -p:].sum(axis=2)
    return out


def conv2d(x, w, b, stride: int = 1) -> Tensor:
    """2-D convolution (cross-correlation) with replicate padding ``k // 2``.

    ``x: (N, H, W, Cin)``, ``w: (k, k, Cin, Cout)``, ``b: (Cout,)``.
    """
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if stride not in (1, 2):
        raise _shape_error("conv2d", f"stride must be 1 or 2, got {stride}")
    if x.ndim != 4 or w.ndim != 4 or w.shape[0] != w.shape[1] or w.shape[0] % 2 == 0:
        raise _shape_error("conv2d", f"x {x.shape}, w {w.shape}")
    k, _, cin, cout = w.shape
    if x.shape[3] != cin or b.shape != (cout,):
        raise _shape_error("conv2d", f"x {x.shape} / w {w.shape} / b {b.shape} channel mismatch")
    n, h, wd, _ = x.shape
    p = k // 2
    xp = np.ascontiguousarray(_pad_edge(x.data, p))
    ho = (h + 2 * p - k) // stride + 1
    wo = (wd + 2 * p - k) // stride + 1
    s0, s1, s2, s3 = xp.strides
    cols = as_strided(xp, shape=(n, ho, wo, k, k, cin), strides=(s0, s1 * stride, s2 * stride, s1, s2, s3))
    cols = cols.reshape(n * ho * wo, k * k * cin)
    wmat = w.data.reshape(k * k * cin, cout)
    out = (cols @ wmat + b.data).reshape(n, ho, wo, cout)

    def backward(g):
        g2 = g.reshape(-1, cout)
        gw = (cols.T @ g2).reshape(w.shape)
        gb = np.ones(g2.shape[0], dtype=g2.dtype) @ g2
        gx = None
        if x.requires_grad:
            if stride == 1:
                # transposed convolution: zero-pad the upstream gradient and
                # correlate with the spatially flipped, channel-swapped kernel
                gz = np.pad(g, ((0, 0), (k - 1, k - 1), (k - 1, k - 1), (0, 0)))
                t0, t1, t2, t3 = gz.strides
                hp, wp = xp.shape[1], xp.shape[2]
                gcols = as_strided(gz, shape=(n, hp, wp, k, k, cout), strides=(t0, t1, t2, t1, t2, t3))
                wflip = w.data[::-1, ::-1].transpose(0, 1, 3, 2).reshape(k * k * cout, cin)
                gxp = (gcols.reshape(n * hp * wp, k * k * cout) @ wflip).reshape(xp.shape)
            else:
                dcols = (g2 @ wmat.T).reshape(n, ho, wo, k, k, cin)
                gxp = np.zeros_like(xp)
                for i in range(k):
                    for j in range(k):
                        gxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, :, :, i, j]
            gx = _unpad_edge(gxp, p)
        return gx, gw, gb

    return _make(out, (x, w, b), backward, "conv2d")


# ---------------------------------------------------------------------------
# losses


def l1_loss(pred, target) -> Tensor:
    """Mean absolute error; the subgradient at a tie is 0."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise _shape_error("l1_loss", f"pred {pred.shape} vs target {target.shape}")
    diff = pred.data - target.data
    n = diff.size

    def backward(g):
        sg = np.sign(diff) * (g / n)
        return sg, -sg

    val = np.asarray(np.abs(diff).mean(dtype=np.float64), dtype=pred.data.dtype)
    return _make(val, (pred, target), backward, "l1_loss")


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits, labels) -> Tensor:
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise _shape_error("softmax_cross_entropy", f"logits {logits.shape}, labels {labels.shape}")
    n, k = logits.shape
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        raise ValueError(f"softmax_cross_entropy: labels must lie in [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    nll = logsum - z[np.arange(n), labels]

    def backward(g):
        p = softmax(logits.data)
        p[np.arange(n), labels] -= 1.0
        return (p * (g / n),)

    val = np.asarray(nll.mean(dtype=np.float64), dtype=logits.data.dtype)
    return _make(val, (logits,), backward, "softmax_cross_entropy")
