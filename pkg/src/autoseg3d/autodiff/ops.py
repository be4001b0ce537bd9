"""Differentiable operators used by the segmentation network.

Layout convention for volumetric tensors is (batch, channels, x, y, z).
"""
import threading

import numpy as np

from .. import kernels
from .tensor import Tensor, as_tensor


class ShapeError(ValueError):
    pass


def _triple(v):
    if np.isscalar(v):
        return (int(v),) * 3
    v = tuple(int(i) for i in v)
    if len(v) != 3:
        raise ValueError(f"expected 3 per-axis values, got {v}")
    return v


def conv_output_extent(n, kernel, stride, padding):
    return (n + 2 * padding - kernel) // stride + 1


_scratch = threading.local()
_SCRATCH_SLOTS = 16


def _pad(arr, pad):
    """Zero-pad the spatial axes into a reused per-thread buffer.

    Only the interior is ever written, so the halo stays zero between calls.
    The result is valid until the next call with the same padded shape, which
    suits the kernels here: they consume it immediately and keep no reference.
    """
    if not any(pad):
        return np.ascontiguousarray(arr)
    shape = arr.shape[:2] + tuple(n + 2 * p for n, p in zip(arr.shape[2:], pad))
    cache = getattr(_scratch, "buffers", None)
    if cache is None:
        cache = _scratch.buffers = {}
    key = (shape, arr.dtype.str)
    buf = cache.pop(key, None)
    if buf is None:
        buf = np.zeros(shape, dtype=arr.dtype)
        while len(cache) >= _SCRATCH_SLOTS:
            cache.pop(next(iter(cache)))
    cache[key] = buf  # most recently used last
    px, py, pz = pad
    buf[:, :, px:shape[2] - px, py:shape[3] - py, pz:shape[4] - pz] = arr
    return buf


def conv3d(x, w, bias=None, stride=1, padding=0):
    """Cross-correlation of x (B, Ci, X, Y, Z) with w (Co, Ci, kx, ky, kz)."""
    stride, padding = _triple(stride), _triple(padding)
    if x.ndim != 5 or w.ndim != 5 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv3d: input {x.shape} incompatible with weights {w.shape}")
    kshape = w.shape[2:]
    out_ext = [conv_output_extent(n, k, s, p) for n, k, s, p in zip(x.shape[2:], kshape, stride, padding)]
    if min(out_ext) <= 0:
        raise ShapeError(f"conv3d: input {x.shape} too small for weights {w.shape} "
                         f"with stride {stride}, padding {padding}")
    if bias is not None and bias.shape != (w.shape[0],):
        raise ShapeError(f"conv3d: bias {bias.shape} does not match weights {w.shape}")

    xp = _pad(x.data, padding)
    wd = np.ascontiguousarray(w.data)
    out = kernels.conv3d_forward(xp, wd, stride)
    if bias is not None:
        out += bias.data.reshape(1, -1, 1, 1, 1)
    in_shape = x.shape
    padded_ext = xp.shape[2:]
    del xp
    xd = x.data

    def backward(g):
        g = np.ascontiguousarray(g)
        gx = gw = gb = None
        if x.requires_grad:
            if stride == (1, 1, 1) and all(p <= k - 1 for p, k in zip(padding, kshape)):
                # correlation with the flipped kernel lands directly on the unpadded input
                flipped = np.ascontiguousarray(wd[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))
                gx = kernels.conv3d_forward(_pad(g, [k - 1 - p for k, p in zip(kshape, padding)]),
                                            flipped, (1, 1, 1))
            else:
                gxp = kernels.conv3d_grad_input(g, wd, stride, padded_ext)
                px, py, pz = padding
                gx = gxp[:, :, px:px + in_shape[2], py:py + in_shape[3], pz:pz + in_shape[4]]
        if w.requires_grad:
            gw = kernels.conv3d_grad_weight(g, _pad(xd, padding), stride, kshape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3, 4))
        return gx, gw, gb

    parents = (x, w) if bias is None else (x, w, bias)
    return Tensor.from_op(out, parents, backward)


def conv_transpose3d(x, w, stride):
    """Non-overlapping transposed convolution, kernel equal to stride.

    w has shape (Ci, Co, sx, sy, sz); each output extent is input extent * stride.
    """
    stride = _triple(stride)
    if x.ndim != 5 or w.ndim != 5 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"conv_transpose3d: input {x.shape} incompatible with weights {w.shape}")
    if tuple(w.shape[2:]) != stride:
        raise ShapeError(f"conv_transpose3d: kernel {w.shape[2:]} must equal stride {stride}")
    B, _, X, Y, Z = x.shape
    Co = w.shape[1]
    sx, sy, sz = stride
    xd, wd = x.data, w.data
    t = np.tensordot(xd, wd, axes=([1], [0]))  # B X Y Z Co sx sy sz
    out = t.transpose(0, 4, 1, 5, 2, 6, 3, 7).reshape(B, Co, X * sx, Y * sy, Z * sz)

    def backward(g):
        g8 = g.reshape(B, Co, X, sx, Y, sy, Z, sz)
        gx = gw = None
        if x.requires_grad:
            gx = np.moveaxis(np.tensordot(g8, wd, axes=([1, 3, 5, 7], [1, 2, 3, 4])), 4, 1)
        if w.requires_grad:
            gw = np.tensordot(xd, g8, axes=([0, 2, 3, 4], [0, 2, 4, 6]))
        return gx, gw

    return Tensor.from_op(np.ascontiguousarray(out), (x, w), backward)


def instance_norm(x, gain, offset, eps=1e-5, detach_stats=False):
    """Per (sample, channel) spatial standardization followed by an affine map.

    With ``detach_stats`` the mean and variance are treated as constants in
    the backward pass, which isolates the purely local dependence of each
    output on its input window.
    """
    if x.ndim < 3:
        raise ShapeError(f"instance_norm: need (B, C, spatial...) input, got {x.shape}")
    B, C = x.shape[:2]
    if gain.shape != (C,) or offset.shape != (C,):
        raise ShapeError(f"instance_norm: gain {gain.shape}/offset {offset.shape} vs {C} channels")
    shape = x.shape
    x2 = np.ascontiguousarray(x.data).reshape(B * C, -1)
    y, mean, inv = kernels.instance_norm_forward(x2, gain.data, offset.data, C, eps)
    gd = gain.data

    def backward(g):
        g2 = np.ascontiguousarray(g).reshape(B * C, -1)
        if detach_stats:
            xhat = (x2 - mean[:, None]) * inv[:, None]
            sgx = np.sum(g2 * xhat, axis=1)
            sg = np.sum(g2, axis=1)
            gx = (g2 * (gd[np.arange(B * C) % C] * inv)[:, None]).astype(x2.dtype)
        else:
            gx, sgx, sg = kernels.instance_norm_backward(g2, x2, mean, inv, gd, C)
        ggain = sgx.reshape(B, C).sum(axis=0).astype(gd.dtype)
        goff = sg.reshape(B, C).sum(axis=0).astype(gd.dtype)
        return gx.reshape(shape), ggain, goff

    return Tensor.from_op(y.reshape(shape), (x, gain, offset), backward)


def leaky_relu(x, slope=0.01):
    shape = x.shape
    flat = np.ascontiguousarray(x.data).reshape(-1)
    out = kernels.leaky_relu_forward(flat, slope).reshape(shape)

    def backward(g):
        return (kernels.leaky_relu_backward(np.ascontiguousarray(g).reshape(-1), flat, slope).reshape(shape),)

    return Tensor.from_op(out, (x,), backward)


def softmax_channels(x):
    """Softmax over axis 1, stabilized by subtracting the channel maximum."""
    if x.ndim < 2 or x.shape[1] < 1:
        raise ShapeError(f"softmax_channels: need at least one channel, got {x.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (y * (g - np.sum(g * y, axis=1, keepdims=True)),)

    return Tensor.from_op(y, (x,), backward)


def concat(tensors, axis=1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        index = [slice(None)] * g.ndim
        grads = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            index[axis] = slice(lo, hi)
            grads.append(g[tuple(index)])
        return tuple(grads)

    return Tensor.from_op(out, tuple(tensors), backward)


def take(x, indices, axis=0):
    """Select entries along ``axis`` (gradient scattered back)."""
    indices = np.asarray(indices)
    shape = x.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(np.moveaxis(full, axis, 0), indices, np.moveaxis(g, axis, 0))
        return (full,)

    return Tensor.from_op(np.take(x.data, indices, axis=axis), (x,), backward)
