"""Minimal reverse-mode autodiff over dense numpy arrays.

Image activations use a channels-leading (C, B, H, W) layout so the conv
im2col buffers and both backward GEMMs come out contiguous without extra
transposes. Arithmetic follows the dtype of the inputs: build graphs in
float32 for training and float64 for gradient verification.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data: np.ndarray, requires_grad: bool = False,
                 parents: tuple = (), backward=None):
        self.data = data
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g)
        else:
            self.grad += g

    def backward(self):
        """Reverse pass from this (scalar) tensor through the whole graph."""
        topo: list[Tensor] = []
        seen = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def param(data: np.ndarray) -> Tensor:
    return Tensor(np.asarray(data), requires_grad=True)


def const(data: np.ndarray) -> Tensor:
    return Tensor(np.asarray(data))


def _make(data, parents, backward) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=needs,
                  parents=tuple(p for p in parents),
                  backward=backward if needs else None)


def add(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)

    return _make(out_data, (a, b), backward)


def scale(x: Tensor, c) -> Tensor:
    """Multiply by a constant scalar or broadcastable array (no grad to c)."""
    c = np.asarray(c, dtype=x.dtype)
    out_data = x.data * c

    def backward(g):
        x._accumulate(g * c)

    return _make(out_data, (x,), backward)


def silu(x: Tensor) -> Tensor:
    sig = 1.0 / (1.0 + np.exp(-x.data))
    out_data = x.data * sig

    def backward(g):
        x._accumulate(g * (sig * (1.0 + x.data * (1.0 - sig))))

    return _make(out_data, (x,), backward)


def _im2col3(x: np.ndarray) -> np.ndarray:
    """(C, B, H, W) -> (C*9, B*H*W) patch matrix for a 3x3 same-pad window."""
    c, b, h, w = x.shape
    xp = np.zeros((c, b, h + 2, w + 2), dtype=x.dtype)
    xp[:, :, 1:-1, 1:-1] = x
    sc, sb, sh, sw = xp.strides
    win = as_strided(xp, shape=(c, 3, 3, b, h, w),
                     strides=(sc, sh, sw, sb, sh, sw))
    return win.reshape(c * 9, b * h * w)


def conv3x3(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Stride-1, pad-1 convolution. x: (Cin,B,H,W), w: (Cout,Cin,3,3), b: (Cout,)."""
    cin, bs, h, wd = x.shape
    cout = w.shape[0]
    if w.shape != (cout, cin, 3, 3):
        raise ValueError(f"conv3x3: weight {w.shape} incompatible with input {x.shape}")
    col = _im2col3(x.data)
    out_data = (w.data.reshape(cout, cin * 9) @ col).reshape(cout, bs, h, wd)
    out_data += b.data.reshape(-1, 1, 1, 1)

    def backward(g):
        gmat = g.reshape(cout, -1)
        if w.requires_grad:
            w._accumulate((gmat @ col.T).reshape(w.shape))
        if b.requires_grad:
            b._accumulate(g.sum(axis=(1, 2, 3)))
        if x.requires_grad:
            # full correlation with flipped kernels gives the input gradient
            wf = w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(cin, cout * 9)
            colg = _im2col3(g)
            x._accumulate((wf @ colg).reshape(x.shape))

    return _make(out_data, (x, w, b), backward)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x: (B, F) @ w: (F, O) + b: (O,)."""
    if x.data.shape[1] != w.data.shape[0]:
        raise ValueError(f"linear: {x.shape} @ {w.shape}")
    out_data = x.data @ w.data + b.data

    def backward(g):
        if w.requires_grad:
            w._accumulate(x.data.T @ g)
        if b.requires_grad:
            b._accumulate(g.sum(axis=0))
        if x.requires_grad:
            x._accumulate(g @ w.data.T)

    return _make(out_data, (x, w, b), backward)


def group_norm(x: Tensor, gamma: Tensor, beta: Tensor, groups: int,
               eps: float = 1e-5) -> Tensor:
    """Normalize per (group, sample) over (C/groups, H, W). x: (C,B,H,W)."""
    c, b, h, w = x.shape
    if c % groups:
        raise ValueError(f"group_norm: {c} channels not divisible by {groups} groups")
    cg = c // groups
    xg = x.data.reshape(groups, cg, b, h, w)
    mu = xg.mean(axis=(1, 3, 4), keepdims=True)
    xc = xg - mu
    var = (xc * xc).mean(axis=(1, 3, 4), keepdims=True)
    ivar = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.dtype))
    xhat = (xc * ivar).reshape(c, b, h, w)
    out_data = xhat * gamma.data.reshape(-1, 1, 1, 1) + beta.data.reshape(-1, 1, 1, 1)
    m = cg * h * w

    def backward(g):
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=(1, 2, 3)))
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=(1, 2, 3)))
        if x.requires_grad:
            dxhat = (g * gamma.data.reshape(-1, 1, 1, 1)).reshape(groups, cg, b, h, w)
            xh = xhat.reshape(groups, cg, b, h, w)
            s1 = dxhat.sum(axis=(1, 3, 4), keepdims=True)
            s2 = (dxhat * xh).sum(axis=(1, 3, 4), keepdims=True)
            dx = ivar / m * (m * dxhat - s1 - xh * s2)
            x._accumulate(dx.reshape(c, b, h, w))

    return _make(out_data, (x, gamma, beta), backward)


def avg_pool2(x: Tensor) -> Tensor:
    c, b, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"avg_pool2: odd spatial dims {x.shape}")
    out_data = x.data.reshape(c, b, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def backward(g):
        gb = np.broadcast_to(g[:, :, :, None, :, None] * np.asarray(0.25, x.dtype),
                             (c, b, h // 2, 2, w // 2, 2))
        x._accumulate(gb.reshape(c, b, h, w))

    return _make(out_data, (x,), backward)


def upsample_nearest2(x: Tensor) -> Tensor:
    c, b, h, w = x.shape
    out_data = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def backward(g):
        x._accumulate(g.reshape(c, b, h, 2, w, 2).sum(axis=(3, 5)))

    return _make(out_data, (x,), backward)


def concat(tensors: list[Tensor]) -> Tensor:
    """Concatenate along the channel axis (axis 0 of (C,B,H,W))."""
    out_data = np.concatenate([t.data for t in tensors], axis=0)
    sizes = [t.shape[0] for t in tensors]

    def backward(g):
        off = 0
        for t, s in zip(tensors, sizes):
            if t.requires_grad:
                t._accumulate(g[off:off + s])
            off += s

    return _make(out_data, tuple(tensors), backward)


def film(x: Tensor, sc: Tensor, sh: Tensor) -> Tensor:
    """Per-channel feature modulation: x * (1 + sc) + sh; sc, sh: (B, C)."""
    scT = sc.data.T[:, :, None, None]
    shT = sh.data.T[:, :, None, None]
    out_data = x.data * (1.0 + scT) + shT

    def backward(g):
        if x.requires_grad:
            x._accumulate(g * (1.0 + scT))
        if sc.requires_grad:
            sc._accumulate((g * x.data).sum(axis=(2, 3)).T)
        if sh.requires_grad:
            sh._accumulate(g.sum(axis=(2, 3)).T)

    return _make(out_data, (x, sc, sh), backward)


def split2(x: Tensor, axis: int = 1) -> tuple[Tensor, Tensor]:
    """Split into two equal halves along axis (used for FiLM scale/shift)."""
    n = x.shape[axis]
    if n % 2:
        raise ValueError(f"split2: axis {axis} of {x.shape} not even")
    half = n // 2
    sl_a = tuple(slice(None) if i != axis else slice(0, half)
                 for i in range(x.data.ndim))
    sl_b = tuple(slice(None) if i != axis else slice(half, n)
                 for i in range(x.data.ndim))

    def backward_a(g):
        full = np.zeros_like(x.data)
        full[sl_a] = g
        x._accumulate(full)

    def backward_b(g):
        full = np.zeros_like(x.data)
        full[sl_b] = g
        x._accumulate(full)

    a = _make(x.data[sl_a].copy(), (x,), backward_a)
    b = _make(x.data[sl_b].copy(), (x,), backward_b)
    return a, b


def embed_sum(table: Tensor, idx: np.ndarray, vocab: int) -> Tensor:
    """Sum of per-slot embeddings. table: (L*vocab, E), idx: (B, L) ints -> (B, E)."""
    bsz, slots = idx.shape
    flat = (np.arange(slots) * vocab)[None, :] + idx
    out_data = table.data[flat].sum(axis=1)

    def backward(g):
        if table.requires_grad:
            gt = np.zeros_like(table.data)
            np.add.at(gt, flat.reshape(-1),
                      np.repeat(g[:, None, :], slots, axis=1).reshape(-1, g.shape[-1]))
            table._accumulate(gt)

    return _make(out_data, (table,), backward)


def mse(pred: Tensor, target: np.ndarray) -> Tensor:
    diff = pred.data - target
    out_data = np.asarray((diff * diff).mean(), dtype=pred.dtype)

    def backward(g):
        pred._accumulate(g * 2.0 * diff / diff.size)

    return _make(out_data, (pred,), backward)


def sin_embedding(values: np.ndarray, dim: int, max_freq: float = 256.0,
                  dtype=np.float32) -> np.ndarray:
    """Sin/cos features of a scalar per sample. values: (B,) -> (B, dim)."""
    half = dim // 2
    freqs = np.exp(np.linspace(0.0, np.log(max_freq), half))
    ang = values[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1).astype(dtype)
