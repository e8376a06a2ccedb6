"""Dense tensors with reverse-mode differentiation and the 2D layer ops.

Image tensors are laid out (batch, channels, height, width). Every op builds
a node in a small tape graph; ``Tensor.backward`` walks the tape in reverse
topological order with a fixed traversal, so gradients are reproducible
bit-for-bit for a given graph. Tests run at float64, training at float32.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, ShapeError, StateError


class Tensor:
    """N-dimensional real array with an optional same-shape gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g)
        else:
            self.grad = self.grad + g

    def backward(self, grad):
        """Backpropagate ``grad`` (d loss / d self) through the recorded tape."""
        grad = np.asarray(grad, dtype=self.data.dtype)
        if grad.shape != self.data.shape:
            raise ShapeError(
                f"upstream gradient shape {grad.shape} != tensor shape {self.data.shape}"
            )
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(grad)
        for node in reversed(order):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)


def _result(data, parents, backward_fn):
    out = Tensor(data)
    out._parents = tuple(parents)
    out._backward_fn = backward_fn
    out.requires_grad = any(p.requires_grad for p in parents)
    return out


def _im2col(xp, kh, kw, H, W):
    # xp: padded (N, C, Hp, Wp); windows anchored at every output pixel
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # (N,C,H,W,kh,kw)
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5))  # (N,H,W,C,kh,kw)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, pad: int) -> Tensor:
    """Size-preserving zero-padded cross-correlation.

    ``weight`` is (Cout, Cin, kh, kw) with odd kh == kw and pad = (kh-1)//2.
    """
    N, Cin, H, W = x.data.shape
    Cout, Cw, kh, kw = weight.data.shape
    if Cw != Cin:
        raise ShapeError(f"conv2d: input has {Cin} channels, weight expects {Cw}")
    if bias.data.shape != (Cout,):
        raise ShapeError(f"conv2d: bias shape {bias.data.shape} != ({Cout},)")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ConfigError("conv2d: even kernel size cannot preserve spatial size")
    if pad != (kh - 1) // 2 or pad != (kw - 1) // 2:
        raise ConfigError(f"conv2d: pad={pad} is not size-preserving for {kh}x{kw}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = _im2col(xp, kh, kw, H, W).reshape(N * H * W, Cin * kh * kw)
    wmat = weight.data.reshape(Cout, -1)
    out = cols @ wmat.T + bias.data
    out = out.reshape(N, H, W, Cout).transpose(0, 3, 1, 2)

    def backward_fn(g):
        gm = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(N * H * W, Cout)
        weight._accumulate((gm.T @ cols).reshape(weight.data.shape))
        bias._accumulate(gm.sum(axis=0))
        gcols = (gm @ wmat).reshape(N, H, W, Cin, kh, kw)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + H, j:j + W] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        if pad:
            gx = gxp[:, :, pad:pad + H, pad:pad + W]
        else:
            gx = gxp
        x._accumulate(gx)

    return _result(out, (x, weight, bias), backward_fn)


class BatchNormState:
    """Running statistics holder for one batch-norm layer."""

    __slots__ = ("mean", "var", "initialized")

    def __init__(self, channels: int, dtype=np.float64):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)
        self.initialized = False


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5,
              mode: str = "train", running: BatchNormState | None = None,
              momentum: float = 0.9) -> Tensor:
    """Per-channel batch normalization over the (N, H, W) axes.

    Train mode uses batch statistics and updates ``running`` (keep factor
    ``momentum``); eval mode uses the recorded running statistics.
    """
    N, C, H, W = x.data.shape
    if gamma.data.shape != (C,) or beta.data.shape != (C,):
        raise ShapeError("batchnorm: gamma/beta must have one entry per channel")
    if mode not in ("train", "eval"):
        raise ConfigError(f"batchnorm: unknown mode {mode!r}")

    if mode == "train":
        if N * H * W < 2:
            raise ShapeError("batchnorm: train mode needs at least 2 values per channel")
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        if running is not None:
            if running.initialized:
                running.mean = momentum * running.mean + (1.0 - momentum) * mean
                running.var = momentum * running.var + (1.0 - momentum) * var
            else:
                running.mean = mean.copy()
                running.var = var.copy()
                running.initialized = True
    else:
        if running is None or not running.initialized:
            raise StateError("batchnorm: eval mode before any statistics recorded")
        mean = running.mean.astype(x.data.dtype)
        var = running.var.astype(x.data.dtype)

    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[None, :, None, None]) * inv[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def backward_fn(g):
        gamma._accumulate((g * xhat).sum(axis=(0, 2, 3)))
        beta._accumulate(g.sum(axis=(0, 2, 3)))
        gxhat = g * gamma.data[None, :, None, None]
        if mode == "train":
            m1 = gxhat.mean(axis=(0, 2, 3))
            m2 = (gxhat * xhat).mean(axis=(0, 2, 3))
            gx = inv[None, :, None, None] * (
                gxhat - m1[None, :, None, None] - xhat * m2[None, :, None, None]
            )
        else:
            gx = gxhat * inv[None, :, None, None]
        x._accumulate(gx)

    return _result(out, (x, gamma, beta), backward_fn)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0)

    def backward_fn(g):
        x._accumulate(g * mask)

    return _result(out, (x,), backward_fn)


def maxpool2(x: Tensor) -> Tensor:
    """2x2 non-overlapping max pool; ties route the gradient to the first
    element in row-major window order."""
    N, C, H, W = x.data.shape
    if H % 2 or W % 2:
        raise ShapeError(f"maxpool2: spatial extents must be even, got {H}x{W}")
    Ho, Wo = H // 2, W // 2
    win = x.data.reshape(N, C, Ho, 2, Wo, 2).transpose(0, 1, 2, 4, 3, 5).reshape(N, C, Ho, Wo, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward_fn(g):
        gwin = np.zeros((N, C, Ho, Wo, 4), dtype=g.dtype)
        np.put_along_axis(gwin, idx[..., None], g[..., None], axis=-1)
        gx = gwin.reshape(N, C, Ho, Wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(N, C, H, W)
        x._accumulate(gx)

    return _result(out, (x,), backward_fn)


def upconv2(x: Tensor, weight: Tensor) -> Tensor:
    """Transposed 2x2 convolution with stride 2: exact spatial doubling.

    ``weight`` is (Cin, Cout, 2, 2).
    """
    N, C, H, W = x.data.shape
    Cw, Cout, kh, kw = weight.data.shape
    if Cw != C:
        raise ShapeError(f"upconv2: input has {C} channels, weight expects {Cw}")
    if (kh, kw) != (2, 2):
        raise ConfigError("upconv2: kernel must be 2x2")
    out6 = np.einsum("nchw,cokl->nohkwl", x.data, weight.data, optimize=True)
    out = out6.reshape(N, Cout, 2 * H, 2 * W)

    def backward_fn(g):
        g6 = g.reshape(N, Cout, H, 2, W, 2)
        x._accumulate(np.einsum("nohkwl,cokl->nchw", g6, weight.data, optimize=True))
        weight._accumulate(np.einsum("nchw,nohkwl->cokl", x.data, g6, optimize=True))

    return _result(out, (x, weight), backward_fn)


def nearest_upsample2(x: Tensor) -> Tensor:
    """2x nearest-neighbor upsampling (alternative expanding-path head)."""
    N, C, H, W = x.data.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def backward_fn(g):
        gx = g.reshape(N, C, H, 2, W, 2).sum(axis=(3, 5))
        x._accumulate(gx)

    return _result(out, (x,), backward_fn)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    Na, Ca, Ha, Wa = a.data.shape
    Nb, Cb, Hb, Wb = b.data.shape
    if (Na, Ha, Wa) != (Nb, Hb, Wb):
        raise ShapeError(
            f"concat_channels: batch/spatial mismatch {a.data.shape} vs {b.data.shape}"
        )
    out = np.concatenate([a.data, b.data], axis=1)

    def backward_fn(g):
        a._accumulate(g[:, :Ca])
        b._accumulate(g[:, Ca:])

    return _result(out, (a, b), backward_fn)


def softmax_channels(x: Tensor) -> Tensor:
    """Per-pixel softmax over the channel axis, stabilized by max subtraction."""
    m = x.data.max(axis=1, keepdims=True)
    e = np.exp(x.data - m)
    p = e / e.sum(axis=1, keepdims=True)

    def backward_fn(g):
        dot = (g * p).sum(axis=1, keepdims=True)
        x._accumulate(p * (g - dot))

    return _result(p, (x,), backward_fn)
