"""Pure numpy versions of the compiled kernels, same signatures and layouts."""
import numpy as np


def _tap(arr, kx, ky, kz, out_shape, stride):
    sx, sy, sz = stride
    ox, oy, oz = out_shape
    return arr[:, :,
               kx:kx + sx * (ox - 1) + 1:sx,
               ky:ky + sy * (oy - 1) + 1:sy,
               kz:kz + sz * (oz - 1) + 1:sz]


def conv3d_forward(x, w, stride):
    B, _, X, Y, Z = x.shape
    Co, _, KX, KY, KZ = w.shape
    out_shape = ((X - KX) // stride[0] + 1, (Y - KY) // stride[1] + 1, (Z - KZ) // stride[2] + 1)
    out = np.zeros((B, Co) + out_shape, dtype=x.dtype)
    if min(out_shape) <= 0:
        return out
    for kx in range(KX):
        for ky in range(KY):
            for kz in range(KZ):
                patch = _tap(x, kx, ky, kz, out_shape, stride)
                out += np.moveaxis(np.tensordot(w[:, :, kx, ky, kz], patch, axes=([1], [1])), 0, 1)
    return out


def conv3d_grad_input(g, w, stride, in_shape):
    B, _, OX, OY, OZ = g.shape
    _, Ci, KX, KY, KZ = w.shape
    gx = np.zeros((B, Ci) + tuple(in_shape), dtype=g.dtype)
    for kx in range(KX):
        for ky in range(KY):
            for kz in range(KZ):
                view = _tap(gx, kx, ky, kz, (OX, OY, OZ), stride)
                view += np.moveaxis(np.tensordot(w[:, :, kx, ky, kz], g, axes=([0], [1])), 0, 1)
    return gx


def conv3d_grad_weight(g, x, stride, kshape):
    Co = g.shape[1]
    Ci = x.shape[1]
    KX, KY, KZ = kshape
    out_shape = g.shape[2:]
    gw = np.zeros((Co, Ci, KX, KY, KZ), dtype=g.dtype)
    for kx in range(KX):
        for ky in range(KY):
            for kz in range(KZ):
                patch = _tap(x, kx, ky, kz, out_shape, stride)
                gw[:, :, kx, ky, kz] = np.tensordot(g, patch, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
    return gw


def instance_norm_forward(x, gain, offset, channels, eps):
    mean = x.mean(axis=1, dtype=np.float64)
    centered = x - mean[:, None].astype(x.dtype)
    var = np.mean(np.square(centered, dtype=np.float64), axis=1)
    inv = 1.0 / np.sqrt(var + eps)
    rows = np.arange(x.shape[0]) % channels
    scale = (inv * gain[rows]).astype(x.dtype)
    y = centered * scale[:, None] + offset[rows][:, None]
    return y, mean, inv


def instance_norm_backward(gy, x, mean, inv, gain, channels):
    V = x.shape[1]
    xhat = (x - mean[:, None]) * inv[:, None]
    sgx = np.sum(gy * xhat, axis=1)
    sg = np.sum(gy, axis=1, dtype=np.float64)
    rows = np.arange(x.shape[0]) % channels
    a = gain[rows] * inv
    gx = a[:, None] * (gy - (sg / V)[:, None] - xhat * (sgx / V)[:, None])
    return gx.astype(x.dtype), sgx, sg


def leaky_relu_forward(x, slope):
    return np.where(x >= 0, x, x * x.dtype.type(slope))


def leaky_relu_backward(g, x, slope):
    return np.where(x > 0, g, g * g.dtype.type(slope))


def warp_linear(vol, coords):
    n = np.array(vol.shape, dtype=np.float64).reshape(3, 1, 1, 1)
    c = np.clip(coords, 0.0, n - 1.0)
    lo = np.floor(c).astype(np.intp)
    hi = np.minimum(lo + 1, (n - 1).astype(np.intp))
    f = c - lo
    out = np.zeros(coords.shape[1:], dtype=np.float64)
    for ix, wx in ((lo[0], 1 - f[0]), (hi[0], f[0])):
        for iy, wy in ((lo[1], 1 - f[1]), (hi[1], f[1])):
            for iz, wz in ((lo[2], 1 - f[2]), (hi[2], f[2])):
                out += vol[ix, iy, iz] * (wx * wy * wz)
    return out.astype(vol.dtype)
