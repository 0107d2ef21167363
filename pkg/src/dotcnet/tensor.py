"""Dense tensors with reverse-mode differentiation.

Only the handful of primitives the network needs are provided. Every op
returns a new :class:`Tensor`; if any input requires a gradient the result
remembers its parents and a closure that maps the output gradient to input
gradients. :func:`backward` walks the recorded graph in reverse topological
order and accumulates into the ``grad`` slot of leaf tensors.

Convolutions are evaluated in the frequency domain (real FFT, zero padded
to a linear-correlation size), which keeps the large Gabor kernels cheap.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.fft

from .errors import ConfigError, ShapeError


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        if arr.ndim > 4:
            raise ShapeError(f"tensors are limited to rank 4, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.op = "leaf"
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    def astype(self, dtype):
        """Leaf copy in another precision (gradient tracking preserved)."""
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def backward(self):
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}{flag})"

    # operator sugar for the few places that read better with it
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__


def _result(data, parents, backward_fn, op):
    out = Tensor(data)
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


# ---------------------------------------------------------------------------
# graph + backward


@dataclass
class Graph:
    """Nodes reachable from an output, inputs always listed before users."""

    nodes: list = field(default_factory=list)

    def index(self, tensor):
        for i, node in enumerate(self.nodes):
            if node is tensor:
                return i
        raise KeyError("tensor is not part of this graph")


def build_graph(output):
    order = []
    seen = set()
    stack = [(output, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return Graph(order)


def backward(loss, graph=None):
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every tracked leaf.

    Intermediate gradients live only for the duration of the call, so calling
    twice without zeroing doubles the leaf gradients and nothing else.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    if graph is None:
        graph = build_graph(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg


# ---------------------------------------------------------------------------
# convolution


def _fft_size(n, k):
    return scipy.fft.next_fast_len(n + k - 1, real=True)


def conv2d(x, w, bias=None):
    """Same-padded, stride-1 cross-correlation.

    ``x`` is (N, Cin, H, W), ``w`` is (Cout, Cin, k, k) with k odd. Kernels
    wider than the map are allowed; the zero padding absorbs them.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects rank-4 input and kernels, got {x.shape} and {w.shape}")
    n, cin, h, wd = x.shape
    cout, wcin, kh, kw = w.shape
    if wcin != cin:
        raise ConfigError(f"kernel expects {wcin} input channels, input has {cin}")
    if kh != kw or kh % 2 == 0:
        raise ConfigError(f"kernels must be square with odd size, got {kh}x{kw}")
    k = kh
    pad = (k - 1) // 2
    sh, sw = _fft_size(h, k), _fft_size(wd, k)
    dtype = np.result_type(x.dtype, w.dtype)

    xpad = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    xf = scipy.fft.rfft2(xpad, s=(sh, sw))
    wf = scipy.fft.rfft2(w.data, s=(sh, sw))
    yf = np.einsum("nchw,ochw->nohw", xf, np.conj(wf))
    out = scipy.fft.irfft2(yf, s=(sh, sw))[:, :, :h, :wd].astype(dtype)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (cout,):
            raise ShapeError(f"bias shape {bias.shape} does not match {cout} output channels")
        out = out + bias.data.reshape(1, cout, 1, 1)

    def _bw(g):
        gf = scipy.fft.rfft2(g, s=(sh, sw))
        gx = gw = gb = None
        if x.requires_grad:
            full = scipy.fft.irfft2(np.einsum("nohw,ochw->nchw", gf, wf), s=(sh, sw))
            gx = full[:, :, pad:pad + h, pad:pad + wd].astype(x.dtype)
        if w.requires_grad:
            corr = scipy.fft.irfft2(np.einsum("nchw,nohw->ochw", xf, np.conj(gf)), s=(sh, sw))
            gw = corr[:, :, :k, :k].astype(w.dtype)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3)).astype(bias.dtype)
        return gx, gw, gb

    parents = (x, w) if bias is None else (x, w, bias)
    return _result(out, parents, _bw, "conv2d")


# ---------------------------------------------------------------------------
# rotations and channel reductions


def rotate90(x, axis, clockwise=False):
    """Quarter turn of a (C, H, W) volume about its H or W axis.

    Anticlockwise about H maps (C, H, W) to (W, H, C); about W it maps
    (C, H, W) to (H, C, W). A rank-4 input is treated as a batch of rank-3
    volumes, the batch axis never moves.
    """
    x = as_tensor(x)
    if x.ndim not in (3, 4):
        raise ShapeError(f"rotate90 needs a (C,H,W) volume or a batch of them, got {x.shape}")
    if axis not in ("H", "W"):
        raise ValueError(f"axis must be 'H' or 'W', got {axis!r}")
    off = x.ndim - 3
    axes = (off, off + 2) if axis == "H" else (off, off + 1)
    turns = -1 if clockwise else 1
    out = np.rot90(x.data, turns, axes=axes)

    def _bw(g):
        return (np.rot90(g, -turns, axes=axes),)

    return _result(out, (x,), _bw, f"rotate90_{axis}")


def channel_softmax(x):
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"channel_softmax expects (N,C,H,W), got {x.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)

    def _bw(g):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return _result(y, (x,), _bw, "channel_softmax")


def channel_zpool(x):
    """Per-pixel [max, mean] over channels; ties route to the lowest index."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"channel_zpool expects (N,C,H,W), got {x.shape}")
    c = x.shape[1]
    idx = np.argmax(x.data, axis=1)[:, None]
    mx = np.take_along_axis(x.data, idx, axis=1)
    out = np.concatenate([mx, x.data.mean(axis=1, keepdims=True)], axis=1)

    def _bw(g):
        gx = np.broadcast_to(g[:, 1:2] / c, x.shape).copy()
        cur = np.take_along_axis(gx, idx, axis=1)
        np.put_along_axis(gx, idx, cur + g[:, 0:1], axis=1)
        return (gx,)

    return _result(out, (x,), _bw, "channel_zpool")


def channel_sum(x):
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"channel_sum expects (N,C,H,W), got {x.shape}")
    if x.shape[1] == 1:
        return x
    out = x.data.sum(axis=1, keepdims=True)

    def _bw(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(out, (x,), _bw, "channel_sum")


# ---------------------------------------------------------------------------
# elementwise


def _check_broadcast(a, b):
    if a.shape == b.shape:
        return
    if a.ndim == b.ndim == 4:
        sa, sb = a.shape, b.shape
        if sa[0] == sb[0] and sa[2:] == sb[2:] and (sa[1] == 1 or sb[1] == 1):
            return
    raise ShapeError(f"incompatible operand shapes {a.shape} and {b.shape}")


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    return g.sum(axis=1, keepdims=True)


def sigmoid(x):
    x = as_tensor(x)
    # tanh form avoids overflow warnings for large |x|
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))

    def _bw(g):
        return (g * y * (1.0 - y),)

    return _result(y, (x,), _bw, "sigmoid")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    out = a.data * b.data

    def _bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), _bw, "mul")


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    out = a.data + b.data

    def _bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(out, (a, b), _bw, "add")


def scale(x, c):
    x = as_tensor(x)
    c = float(c)
    out = x.data * x.data.dtype.type(c)

    def _bw(g):
        return (g * c,)

    return _result(out, (x,), _bw, "scale")


def tsum(x):
    x = as_tensor(x)
    out = np.asarray(x.data.sum())

    def _bw(g):
        return (np.full(x.shape, g, dtype=x.dtype),)

    return _result(out, (x,), _bw, "sum")


def mean(x):
    x = as_tensor(x)
    n = x.data.size
    out = np.asarray(x.data.mean())

    def _bw(g):
        return (np.full(x.shape, g / n, dtype=x.dtype),)

    return _result(out, (x,), _bw, "mean")


# ---------------------------------------------------------------------------
# dense layers and shape plumbing


def linear(x, weight, bias):
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.ndim != 2 or weight.ndim != 2 or bias.ndim != 1:
        raise ShapeError(f"linear expects (N,D), (D,E), (E,), got {x.shape}, {weight.shape}, {bias.shape}")
    if x.shape[1] != weight.shape[0] or weight.shape[1] != bias.shape[0]:
        raise ShapeError(f"linear dimension mismatch: {x.shape} @ {weight.shape} + {bias.shape}")
    out = x.data @ weight.data + bias.data

    def _bw(g):
        gx = g @ weight.data.T if x.requires_grad else None
        gw = x.data.T @ g if weight.requires_grad else None
        return gx, gw, g.sum(axis=0)

    return _result(out, (x, weight, bias), _bw, "linear")


def concat_channels(tensors):
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat_channels needs at least one tensor")
    if len(tensors) == 1:
        return tensors[0]
    ref = tensors[0].shape
    for t in tensors:
        if t.ndim != 4 or t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ShapeError(f"cannot concat {t.shape} with {ref} along channels")
    offsets = np.cumsum([0] + [t.shape[1] for t in tensors])
    out = np.concatenate([t.data for t in tensors], axis=1)

    def _bw(g):
        return tuple(g[:, offsets[i]:offsets[i + 1]] for i in range(len(tensors)))

    return _result(out, tuple(tensors), _bw, "concat")


def _partition_matrix(n, m):
    """(m, n) averaging matrix over a contiguous near-equal split of n cells."""
    edges = [(i * n) // m for i in range(m + 1)]
    mat = np.zeros((m, n))
    for i in range(m):
        lo, hi = edges[i], edges[i + 1]
        mat[i, lo:hi] = 1.0 / (hi - lo)
    return mat


def adaptive_avg_pool(x, out_grid):
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"adaptive_avg_pool expects (N,C,H,W), got {x.shape}")
    oh, ow = out_grid
    h, w = x.shape[2:]
    if oh > h or ow > w or oh < 1 or ow < 1:
        raise ConfigError(f"pool grid {out_grid} does not fit a {h}x{w} map")
    ph = _partition_matrix(h, oh).astype(x.dtype)
    pw = _partition_matrix(w, ow).astype(x.dtype)
    out = np.einsum("ih,nchw,jw->ncij", ph, x.data, pw)

    def _bw(g):
        return (np.einsum("ih,ncij,jw->nchw", ph, g, pw),)

    return _result(out, (x,), _bw, "adaptive_avg_pool")


def reshape(x, shape):
    x = as_tensor(x)
    out = x.data.reshape(shape)

    def _bw(g):
        return (g.reshape(x.shape),)

    return _result(out, (x,), _bw, "reshape")


def flatten(x):
    return reshape(x, (x.shape[0], -1))


def l2_normalize(x, eps=1e-12):
    """Row-wise unit-norm rows of an (N, D) matrix."""
    x = as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"l2_normalize expects (N,D), got {x.shape}")
    norm = np.maximum(np.sqrt((x.data * x.data).sum(axis=1, keepdims=True)), eps)
    y = x.data / norm

    def _bw(g):
        return ((g - y * (g * y).sum(axis=1, keepdims=True)) / norm,)

    return _result(y, (x,), _bw, "l2_normalize")
