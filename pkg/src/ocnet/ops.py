"""Neural network layers recorded on the differentiation tape.

Covers everything the architecture needs: strided 2-D convolution
(cross-correlation, no kernel flip), its transposed counterpart,
fully connected affine maps, ReLU/Tanh/Sigmoid activations, and
instance normalization for feature maps and feature vectors.

Convolutions are lowered to batched matrix products over an im2col
buffer, so the heavy lifting stays inside BLAS.  All functions are pure:
they read their inputs and append exactly one node to the tape.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Node, Tensor

INSTANCE_NORM_EPS = 1e-5


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of one (possibly transposed) square-kernel convolution."""

    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1
    padding: int = 0
    transposed: bool = False

    def __post_init__(self):
        if min(self.in_channels, self.out_channels, self.kernel, self.stride) < 1:
            raise ValueError(f"invalid conv spec {self}")
        if self.padding < 0:
            raise ValueError(f"negative padding in {self}")

    def out_size(self, size: int) -> int:
        """Output spatial size for an input of the given spatial size."""
        if self.transposed:
            out = (size - 1) * self.stride - 2 * self.padding + self.kernel
        else:
            out = (size + 2 * self.padding - self.kernel) // self.stride + 1
        if out < 1:
            raise ValueError(f"spec {self} degenerates on input size {size}")
        return out


def _im2col(xp: np.ndarray, k: int, s: int, ho: int, wo: int) -> np.ndarray:
    """Gather k x k patches at stride s from a padded [N,C,H,W] array.

    Returns [N, C, k, k, ho, wo]; loop order over (u, v) is fixed so the
    reduction order downstream is deterministic.
    """
    n, c = xp.shape[:2]
    cols = np.empty((n, c, k, k, ho, wo), dtype=xp.dtype)
    for u in range(k):
        for v in range(k):
            cols[:, :, u, v] = xp[:, :, u : u + s * (ho - 1) + 1 : s, v : v + s * (wo - 1) + 1 : s]
    return cols


def _col2im(cols: np.ndarray, out_shape: tuple, k: int, s: int, ho: int, wo: int) -> np.ndarray:
    """Adjoint of :func:`_im2col`: scatter-add patches back onto a canvas."""
    canvas = np.zeros(out_shape, dtype=cols.dtype)
    for u in range(k):
        for v in range(k):
            canvas[:, :, u : u + s * (ho - 1) + 1 : s, v : v + s * (wo - 1) + 1 : s] += cols[:, :, u, v]
    return canvas


def conv2d(x: Node, w: Node, b: Node | None, spec: ConvSpec) -> Node:
    """Strided cross-correlation: x [N,Cin,H,W], w [Cout,Cin,k,k], b [Cout].

    ``b`` may be None for bias-free layers (e.g. when a normalizer
    directly follows and would cancel it).
    """
    if spec.transposed:
        raise ValueError("conv2d called with a transposed spec")
    n, c_in, h, wd = x.shape
    k, s, p = spec.kernel, spec.stride, spec.padding
    if c_in != spec.in_channels:
        raise ValueError(f"conv2d: input has {c_in} channels, spec wants {spec.in_channels}")
    if tuple(w.shape) != (spec.out_channels, spec.in_channels, k, k):
        raise ValueError(f"conv2d: weight shape {list(w.shape)} does not match {spec}")
    if b is not None and tuple(b.shape) != (spec.out_channels,):
        raise ValueError(f"conv2d: bias shape {list(b.shape)} does not match {spec}")
    ho, wo = spec.out_size(h), spec.out_size(wd)

    xd = x.data
    xp = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p))) if p else xd
    cols = _im2col(xp, k, s, ho, wo)
    colsm = cols.reshape(n, c_in * k * k, ho * wo)
    wm = w.data.reshape(spec.out_channels, c_in * k * k)
    y = np.matmul(wm, colsm)
    if b is not None:
        y += b.data[:, None]
    out = y.reshape(n, spec.out_channels, ho, wo)

    xp_shape = xp.shape
    w_shape = w.shape

    def bwd(g):
        gm = g.reshape(n, spec.out_channels, ho * wo)
        gw = np.matmul(gm, colsm.transpose(0, 2, 1)).sum(axis=0).reshape(w_shape)
        dcols = np.matmul(wm.T, gm).reshape(n, c_in, k, k, ho, wo)
        gxp = _col2im(dcols, xp_shape, k, s, ho, wo)
        gx = gxp[:, :, p : p + h, p : p + wd] if p else gxp
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    inputs = (x, w) if b is None else (x, w, b)
    return x.tape.emit("conv2d", inputs, Tensor(out), bwd)


def conv_transpose2d(x: Node, w: Node, b: Node | None, spec: ConvSpec) -> Node:
    """Transposed convolution: x [N,Cin,H,W], w [Cin,Cout,k,k], b [Cout] or None.

    Scatters every input element through the kernel at the given stride
    and crops the padding; exact adjoint of :func:`conv2d` with the same
    kernel, stride, and padding.
    """
    if not spec.transposed:
        raise ValueError("conv_transpose2d called with a non-transposed spec")
    n, c_in, h, wd = x.shape
    k, s, p = spec.kernel, spec.stride, spec.padding
    if c_in != spec.in_channels:
        raise ValueError(
            f"conv_transpose2d: input has {c_in} channels, spec wants {spec.in_channels}"
        )
    if tuple(w.shape) != (spec.in_channels, spec.out_channels, k, k):
        raise ValueError(f"conv_transpose2d: weight shape {list(w.shape)} does not match {spec}")
    if b is not None and tuple(b.shape) != (spec.out_channels,):
        raise ValueError(f"conv_transpose2d: bias shape {list(b.shape)} does not match {spec}")
    ho, wo = spec.out_size(h), spec.out_size(wd)
    c_out = spec.out_channels
    hf, wf = (h - 1) * s + k, (wd - 1) * s + k

    xd = x.data
    xm = xd.reshape(n, c_in, h * wd)
    wm = w.data.reshape(c_in, c_out * k * k)
    t = np.matmul(wm.T, xm).reshape(n, c_out, k, k, h, wd)
    full = _col2im(t, (n, c_out, hf, wf), k, s, h, wd)
    out = full[:, :, p : p + ho, p : p + wo].copy()
    if b is not None:
        out += b.data[None, :, None, None]

    w_shape = w.shape

    def bwd(g):
        gfull = np.zeros((n, c_out, hf, wf), dtype=g.dtype)
        gfull[:, :, p : p + ho, p : p + wo] = g
        gcols = _im2col(gfull, k, s, h, wd).reshape(n, c_out * k * k, h * wd)
        gx = np.matmul(wm, gcols).reshape(n, c_in, h, wd)
        gw = np.matmul(xm, gcols.transpose(0, 2, 1)).sum(axis=0).reshape(w_shape)
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    inputs = (x, w) if b is None else (x, w, b)
    return x.tape.emit("conv_transpose2d", inputs, Tensor(out), bwd)


def fully_connected(x: Node, w: Node, b: Node) -> Node:
    """y = x w + b for x [N,Din], w [Din,Dout], b [Dout]."""
    xd, wdat = x.data, w.data
    if xd.ndim != 2 or wdat.ndim != 2 or xd.shape[1] != wdat.shape[0]:
        raise ValueError(
            f"fully_connected: incompatible shapes {list(x.shape)} x {list(w.shape)}"
        )
    if tuple(b.shape) != (wdat.shape[1],):
        raise ValueError(f"fully_connected: bias shape {list(b.shape)} != [{wdat.shape[1]}]")
    out = xd @ wdat + b.data

    def bwd(g):
        return g @ wdat.T, xd.T @ g, g.sum(axis=0)

    return x.tape.emit("fully_connected", (x, w, b), Tensor(out), bwd)


def relu(x: Node) -> Node:
    xd = x.data
    out = np.maximum(xd, 0)
    mask = (xd > 0).astype(xd.dtype)

    def bwd(g):
        return (g * mask,)

    return x.tape.emit("relu", (x,), Tensor(out), bwd)


def tanh(x: Node) -> Node:
    out = np.tanh(x.data)

    def bwd(g):
        return (g * (1.0 - out * out),)

    return x.tape.emit("tanh", (x,), Tensor(out), bwd)


def sigmoid(x: Node) -> Node:
    xd = x.data
    # Split by sign to avoid overflow in exp for large |x|.
    out = np.empty_like(xd)
    pos = xd >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    out[~pos] = ex / (1.0 + ex)

    def bwd(g):
        return (g * out * (1.0 - out),)

    return x.tape.emit("sigmoid", (x,), Tensor(out), bwd)


_ACTIVATIONS = {"relu": relu, "tanh": tanh, "sigmoid": sigmoid}


def apply_activation(kind: str, x: Node) -> Node:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}; expected one of {sorted(_ACTIVATIONS)}")
    return fn(x)


def _instance_norm(x: Node, axes: tuple[int, ...], eps: float, op: str) -> Node:
    xd = x.data
    dtype = xd.dtype
    m = 1
    for ax in axes:
        m *= xd.shape[ax]
    mean = xd.mean(axis=axes, keepdims=True)
    centered = xd - mean
    var = np.mean(centered * centered, axis=axes, keepdims=True)
    istd = 1.0 / np.sqrt(var + dtype.type(eps))
    out = centered * istd

    inv_m = dtype.type(1.0 / m)

    def bwd(g):
        g_mean = g.mean(axis=axes, keepdims=True)
        proj = np.sum(g * out, axis=axes, keepdims=True) * inv_m
        return (istd * (g - g_mean - out * proj),)

    return x.tape.emit(op, (x,), Tensor(out), bwd)


def instance_norm_2d(x: Node, eps: float = INSTANCE_NORM_EPS) -> Node:
    """Normalize each (sample, channel) plane of [N,C,H,W] to zero mean, unit variance."""
    if x.data.ndim != 4:
        raise ValueError(f"instance_norm_2d expects [N,C,H,W], got {list(x.shape)}")
    return _instance_norm(x, (2, 3), eps, "instance_norm_2d")


def instance_norm_vec(x: Node, eps: float = INSTANCE_NORM_EPS) -> Node:
    """Normalize each row of [N,D] to zero mean, unit variance."""
    if x.data.ndim != 2:
        raise ValueError(f"instance_norm_vec expects [N,D], got {list(x.shape)}")
    if x.shape[1] < 2:
        raise ValueError("instance_norm_vec needs at least 2 features per row")
    return _instance_norm(x, (1,), eps, "instance_norm_vec")
