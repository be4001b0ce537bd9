# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops: direct 3D convolution, instance norm, leaky ReLU, warping.

Arrays are C-contiguous with the last axis fastest.  Every output element is
owned by exactly one loop iteration of the parallel range, and reductions run
in a fixed order, so results do not depend on the thread count.
"""
import numpy as np

from . import _pykernels
from cython.parallel cimport parallel, prange
from libc.math cimport sqrt, floor
from libc.stdlib cimport malloc, free


cdef extern from "microkernels.h" nogil:
    void mk_gather_row(int mr, Py_ssize_t n, Py_ssize_t ntaps, const float *const *src,
                       const float *w, float *const *dst)
    void mk_dot(int mr, int nt, Py_ssize_t r0, Py_ssize_t nrows, Py_ssize_t n, const float *const *g,
                Py_ssize_t gs, const float *const *src, Py_ssize_t ss, double *accd)
    enum: MK_DOT_M

DEF MR = 8
DEF DOT_T = 4
DEF LANES = 16

ctypedef fused real:
    float
    double


def conv3d_forward_any(real[:, :, :, :, ::1] x, real[:, :, :, :, ::1] w, stride):
    """Valid cross-correlation of a pre-padded input."""
    cdef Py_ssize_t B = x.shape[0], Ci = x.shape[1]
    cdef Py_ssize_t X = x.shape[2], Y = x.shape[3], Z = x.shape[4]
    cdef Py_ssize_t Co = w.shape[0], KX = w.shape[2], KY = w.shape[3], KZ = w.shape[4]
    cdef Py_ssize_t sx = stride[0], sy = stride[1], sz = stride[2]
    cdef Py_ssize_t OX = (X - KX) // sx + 1, OY = (Y - KY) // sy + 1, OZ = (Z - KZ) // sz + 1
    out_arr = np.zeros((B, Co, OX, OY, OZ), dtype=np.asarray(x).dtype)
    cdef real[:, :, :, :, ::1] o = out_arr
    cdef Py_ssize_t bo, b, ox, oy, oz, co, ci, kx, ky, kz
    cdef real *orow
    cdef real *irow
    cdef real w0, w1, w2, wv
    if OX <= 0 or OY <= 0 or OZ <= 0:
        return out_arr
    for bo in prange(B * OX, nogil=True, schedule="static"):
        b = bo // OX
        ox = bo % OX
        for oy in range(OY):
            for ci in range(Ci):
                for kx in range(KX):
                    for ky in range(KY):
                        irow = &x[b, ci, ox * sx + kx, oy * sy + ky, 0]
                        for co in range(Co):
                            orow = &o[b, co, ox, oy, 0]
                            if KZ == 3 and sz == 1:
                                w0 = w[co, ci, kx, ky, 0]
                                w1 = w[co, ci, kx, ky, 1]
                                w2 = w[co, ci, kx, ky, 2]
                                for oz in range(OZ):
                                    orow[oz] = orow[oz] + (w0 * irow[oz] + w1 * irow[oz + 1] + w2 * irow[oz + 2])
                            elif sz == 1:
                                for kz in range(KZ):
                                    wv = w[co, ci, kx, ky, kz]
                                    for oz in range(OZ):
                                        orow[oz] = orow[oz] + wv * irow[oz + kz]
                            else:
                                for kz in range(KZ):
                                    wv = w[co, ci, kx, ky, kz]
                                    for oz in range(OZ):
                                        orow[oz] = orow[oz] + wv * irow[oz * sz + kz]
    return out_arr


def conv3d_grad_input_any(real[:, :, :, :, ::1] g, real[:, :, :, :, ::1] w, stride, in_shape):
    """Gradient w.r.t. the padded input, scatter form (any stride)."""
    cdef Py_ssize_t B = g.shape[0], Co = g.shape[1]
    cdef Py_ssize_t OX = g.shape[2], OY = g.shape[3], OZ = g.shape[4]
    cdef Py_ssize_t Ci = w.shape[1], KX = w.shape[2], KY = w.shape[3], KZ = w.shape[4]
    cdef Py_ssize_t sx = stride[0], sy = stride[1], sz = stride[2]
    gx_arr = np.zeros((B, Ci) + tuple(in_shape), dtype=np.asarray(g).dtype)
    cdef real[:, :, :, :, ::1] gx = gx_arr
    cdef Py_ssize_t bc, b, ci, co, ox, oy, oz, kx, ky, kz
    cdef real *grow
    cdef real *irow
    cdef real wv
    for bc in prange(B * Ci, nogil=True, schedule="static"):
        b = bc // Ci
        ci = bc % Ci
        for ox in range(OX):
            for oy in range(OY):
                for co in range(Co):
                    grow = &g[b, co, ox, oy, 0]
                    for kx in range(KX):
                        for ky in range(KY):
                            irow = &gx[b, ci, ox * sx + kx, oy * sy + ky, 0]
                            for kz in range(KZ):
                                wv = w[co, ci, kx, ky, kz]
                                if sz == 1:
                                    for oz in range(OZ):
                                        irow[oz + kz] = irow[oz + kz] + wv * grow[oz]
                                else:
                                    for oz in range(OZ):
                                        irow[oz * sz + kz] = irow[oz * sz + kz] + wv * grow[oz]
    return gx_arr


def conv3d_grad_weight_any(real[:, :, :, :, ::1] g, real[:, :, :, :, ::1] x, stride, kshape):
    """Gradient w.r.t. the weights; x is the padded input."""
    cdef Py_ssize_t B = g.shape[0], Co = g.shape[1]
    cdef Py_ssize_t OX = g.shape[2], OY = g.shape[3], OZ = g.shape[4]
    cdef Py_ssize_t Ci = x.shape[1]
    cdef Py_ssize_t KX = kshape[0], KY = kshape[1], KZ = kshape[2]
    cdef Py_ssize_t sx = stride[0], sy = stride[1], sz = stride[2]
    acc_arr = np.zeros((Co, Ci, KX, KY, KZ), dtype=np.float64)
    cdef double[:, :, :, :, ::1] acc = acc_arr
    cdef Py_ssize_t b, co, ci, ox, oy, oz, kx, ky, kz
    cdef real *grow
    cdef real *irow
    cdef real s0, s1, s2, gv
    for co in prange(Co, nogil=True, schedule="static"):
        for b in range(B):
            for ox in range(OX):
                for oy in range(OY):
                    grow = &g[b, co, ox, oy, 0]
                    for ci in range(Ci):
                        for kx in range(KX):
                            for ky in range(KY):
                                irow = &x[b, ci, ox * sx + kx, oy * sy + ky, 0]
                                if KZ == 3 and sz == 1:
                                    s0 = 0
                                    s1 = 0
                                    s2 = 0
                                    for oz in range(OZ):
                                        gv = grow[oz]
                                        s0 = s0 + gv * irow[oz]
                                        s1 = s1 + gv * irow[oz + 1]
                                        s2 = s2 + gv * irow[oz + 2]
                                    acc[co, ci, kx, ky, 0] += s0
                                    acc[co, ci, kx, ky, 1] += s1
                                    acc[co, ci, kx, ky, 2] += s2
                                else:
                                    for kz in range(KZ):
                                        s0 = 0
                                        for oz in range(OZ):
                                            s0 = s0 + grow[oz] * irow[oz * sz + kz]
                                        acc[co, ci, kx, ky, kz] += s0
    return acc_arr.astype(np.asarray(g).dtype)


def instance_norm_forward(real[:, ::1] x, real[::1] gain, real[::1] offset,
                          Py_ssize_t channels, double eps):
    """x is (B*C, V).  Returns y, per-row mean and inverse std (float64)."""
    cdef Py_ssize_t R = x.shape[0], V = x.shape[1]
    y_arr = np.empty((R, V), dtype=np.asarray(x).dtype)
    mean_arr = np.empty(R, dtype=np.float64)
    inv_arr = np.empty(R, dtype=np.float64)
    cdef real[:, ::1] y = y_arr
    cdef double[::1] mean = mean_arr
    cdef double[::1] inv = inv_arr
    cdef Py_ssize_t r, i, c
    cdef double s, d, m, iv
    cdef real a, bb, mr
    for r in prange(R, nogil=True, schedule="static"):
        c = r % channels
        s = 0
        for i in range(V):
            s = s + x[r, i]
        m = s / V
        s = 0
        for i in range(V):
            d = x[r, i] - m
            s = s + d * d
        iv = 1.0 / sqrt(s / V + eps)
        mean[r] = m
        inv[r] = iv
        a = <real>(iv * gain[c])
        mr = <real>m
        bb = offset[c]
        for i in range(V):
            y[r, i] = (x[r, i] - mr) * a + bb
    return y_arr, mean_arr, inv_arr


def instance_norm_backward(real[:, ::1] gy, real[:, ::1] x, double[::1] mean,
                           double[::1] inv, real[::1] gain, Py_ssize_t channels):
    """Returns dx (B*C, V) plus per-row sums of gy*xhat and gy."""
    cdef Py_ssize_t R = x.shape[0], V = x.shape[1]
    gx_arr = np.empty((R, V), dtype=np.asarray(x).dtype)
    sgx_arr = np.empty(R, dtype=np.float64)
    sg_arr = np.empty(R, dtype=np.float64)
    cdef real[:, ::1] gx = gx_arr
    cdef double[::1] sgx = sgx_arr
    cdef double[::1] sg = sg_arr
    cdef Py_ssize_t r, i, c
    cdef double a, b, xh, m, iv
    cdef real ar, br, cr, mr, ivr
    for r in prange(R, nogil=True, schedule="static"):
        c = r % channels
        m = mean[r]
        iv = inv[r]
        a = 0
        b = 0
        for i in range(V):
            xh = (x[r, i] - m) * iv
            a = a + gy[r, i] * xh
            b = b + gy[r, i]
        sgx[r] = a
        sg[r] = b
        # dx = gain*inv*(gy - mean(gy) - xhat*mean(gy*xhat))
        ar = <real>(gain[c] * iv)
        br = <real>(b / V)
        cr = <real>(a / V * iv)
        mr = <real>m
        for i in range(V):
            gx[r, i] = ar * (gy[r, i] - br - (x[r, i] - mr) * cr)
    return gx_arr, sgx_arr, sg_arr


def leaky_relu_forward(real[::1] x, double slope):
    cdef Py_ssize_t n = x.shape[0], i
    y_arr = np.empty(n, dtype=np.asarray(x).dtype)
    cdef real[::1] y = y_arr
    cdef real s = <real>slope
    for i in range(n):
        y[i] = x[i] if x[i] >= 0 else s * x[i]
    return y_arr


def leaky_relu_backward(real[::1] g, real[::1] x, double slope):
    cdef Py_ssize_t n = x.shape[0], i
    gx_arr = np.empty(n, dtype=np.asarray(x).dtype)
    cdef real[::1] gx = gx_arr
    cdef real s = <real>slope
    for i in range(n):
        gx[i] = g[i] if x[i] > 0 else s * g[i]
    return gx_arr


def warp_linear(real[:, :, ::1] vol, double[:, :, :, ::1] coords):
    """Trilinear sampling at voxel coordinates (3, X, Y, Z); edges clamp."""
    cdef Py_ssize_t NX = vol.shape[0], NY = vol.shape[1], NZ = vol.shape[2]
    cdef Py_ssize_t X = coords.shape[1], Y = coords.shape[2], Z = coords.shape[3]
    out_arr = np.empty((X, Y, Z), dtype=np.asarray(vol).dtype)
    cdef real[:, :, ::1] out = out_arr
    cdef Py_ssize_t i, j, k, x0, y0, z0, x1, y1, z1
    cdef double cx, cy, cz, fx, fy, fz, v
    for i in prange(X, nogil=True, schedule="static"):
        for j in range(Y):
            for k in range(Z):
                cx = min(max(coords[0, i, j, k], 0.0), NX - 1.0)
                cy = min(max(coords[1, i, j, k], 0.0), NY - 1.0)
                cz = min(max(coords[2, i, j, k], 0.0), NZ - 1.0)
                x0 = <Py_ssize_t>floor(cx)
                y0 = <Py_ssize_t>floor(cy)
                z0 = <Py_ssize_t>floor(cz)
                x1 = min(x0 + 1, NX - 1)
                y1 = min(y0 + 1, NY - 1)
                z1 = min(z0 + 1, NZ - 1)
                fx = cx - x0
                fy = cy - y0
                fz = cz - z0
                v = ((vol[x0, y0, z0] * (1 - fz) + vol[x0, y0, z1] * fz) * (1 - fy)
                     + (vol[x0, y1, z0] * (1 - fz) + vol[x0, y1, z1] * fz) * fy) * (1 - fx) \
                    + ((vol[x1, y0, z0] * (1 - fz) + vol[x1, y0, z1] * fz) * (1 - fy)
                       + (vol[x1, y1, z0] * (1 - fz) + vol[x1, y1, z1] * fz) * fy) * fx
                out[i, j, k] = <real>v
    return out_arr


# --- float32 fast paths -------------------------------------------------------
#
# The input is phase-split along z: xs[b, c, x, y, p, q] holds x[b, c, x, y, q*sz + p],
# so tap kz of a stride-sz convolution reads the contiguous row xs[..., kz % sz, kz // sz:].

def phase_split(x, Py_ssize_t sz):
    """(B, C, X, Y, Z) -> (B, C, X, Y, sz, ceil(Z / sz)), zero-filled past Z."""
    B, C, X, Y, Z = x.shape
    cdef Py_ssize_t zp = (Z + sz - 1) // sz
    if sz == 1:
        return np.ascontiguousarray(x).reshape(B, C, X, Y, 1, Z)
    if x.dtype != np.float32:
        if zp * sz != Z:
            x = np.pad(x, ((0, 0), (0, 0), (0, 0), (0, 0), (0, zp * sz - Z)))
        return np.ascontiguousarray(x.reshape(B, C, X, Y, zp, sz).transpose(0, 1, 2, 3, 5, 4))
    cdef float[:, ::1] src = np.ascontiguousarray(x).reshape(-1, Z)
    out = np.zeros((B, C, X, Y, sz, zp), dtype=np.float32)
    cdef float[:, ::1] dst = out.reshape(-1, sz * zp)
    cdef Py_ssize_t rows = src.shape[0], nz = Z, r, j, p
    with nogil:
        for r in prange(rows, schedule="static"):
            for p in range(sz):
                for j in range(zp):
                    if j * sz + p < nz:
                        dst[r, p * zp + j] = src[r, j * sz + p]
    return out


def phase_merge(xs, Py_ssize_t Z):
    """Inverse of phase_split, cropped to Z."""
    B, C, X, Y, sz, zp = xs.shape
    if sz == 1:
        return np.ascontiguousarray(np.ascontiguousarray(xs).reshape(B, C, X, Y, zp)[..., :Z])
    if xs.dtype != np.float32:
        return np.ascontiguousarray(xs.transpose(0, 1, 2, 3, 5, 4).reshape(B, C, X, Y, zp * sz)[..., :Z])
    cdef float[:, ::1] src = np.ascontiguousarray(xs).reshape(-1, sz * zp)
    out = np.empty((B, C, X, Y, Z), dtype=np.float32)
    cdef float[:, ::1] dst = out.reshape(-1, Z)
    cdef Py_ssize_t rows = src.shape[0], nz = Z, np_ = zp, ns = sz, r, j, p
    with nogil:
        for r in prange(rows, schedule="static"):
            for p in range(ns):
                for j in range(np_):
                    if j * ns + p < nz:
                        dst[r, j * ns + p] = src[r, p * np_ + j]
    return out


def _pack_rows(wmat, Py_ssize_t rows_per_block):
    """(ntaps, R) -> concatenated per-block (ntaps, mr) panels and their offsets."""
    ntaps, R = wmat.shape
    panels, offsets, off = [], [], 0
    for r0 in range(0, R, rows_per_block):
        panel = np.ascontiguousarray(wmat[:, r0:r0 + rows_per_block], dtype=np.float32)
        panels.append(panel.ravel())
        offsets.append(off)
        off += panel.size
    return np.concatenate(panels), np.asarray(offsets, dtype=np.intp)


def conv3d_forward_f32(float[:, :, :, :, ::1] x, w, stride):
    cdef Py_ssize_t B = x.shape[0], Ci = x.shape[1], X = x.shape[2], Y = x.shape[3], Z = x.shape[4]
    cdef Py_ssize_t Co = w.shape[0], KX = w.shape[2], KY = w.shape[3], KZ = w.shape[4]
    cdef Py_ssize_t sx = stride[0], sy = stride[1], sz = stride[2]
    cdef Py_ssize_t OX = (X - KX) // sx + 1, OY = (Y - KY) // sy + 1, OZ = (Z - KZ) // sz + 1
    out_arr = np.zeros((B, Co, OX, OY, OZ), dtype=np.float32)
    if OX <= 0 or OY <= 0 or OZ <= 0:
        return out_arr
    xs_arr = phase_split(np.asarray(x), sz)
    cdef float[:, :, :, :, :, ::1] xs = xs_arr
    cdef float[:, :, :, :, ::1] o = out_arr
    # taps ordered (ci, kx, ky, kz); panel rows are output channels
    wmat = np.asarray(w, dtype=np.float32).transpose(1, 2, 3, 4, 0).reshape(-1, Co)
    packs_arr, offs_arr = _pack_rows(wmat, MR)
    cdef float[::1] packs = packs_arr
    cdef Py_ssize_t[::1] offs = offs_arr
    cdef Py_ssize_t ntaps = Ci * KX * KY * KZ, nblk = offs_arr.shape[0]
    cdef Py_ssize_t bo, b, ox, oy, ci, kx, ky, kz, t, blk, c0, m
    cdef int mr
    cdef const float **src
    cdef float **dst
    with nogil, parallel():
        src = <const float **> malloc(ntaps * sizeof(float *))
        dst = <float **> malloc(MR * sizeof(float *))
        for bo in prange(B * OX, schedule="static"):
            b = bo // OX
            ox = bo % OX
            for oy in range(OY):
                t = 0
                for ci in range(Ci):
                    for kx in range(KX):
                        for ky in range(KY):
                            for kz in range(KZ):
                                src[t] = &xs[b, ci, ox * sx + kx, oy * sy + ky, kz % sz, kz // sz]
                                t = t + 1
                for blk in range(nblk):
                    c0 = blk * MR
                    mr = <int> min(MR, Co - c0)
                    for m in range(mr):
                        dst[m] = &o[b, c0 + m, ox, oy, 0]
                    mk_gather_row(mr, OZ, ntaps, src, &packs[offs[blk]], dst)
        free(src)
        free(dst)
    return out_arr


def _class_packs(wd, stride):
    """Weight panels for grad-input, one set per (x parity, y parity, z phase) class,
    plus each class's tap list as (co, kx, ky, kz) rows in panel order."""
    Co, Ci, KX, KY, KZ = wd.shape
    sx, sy, sz = stride
    cls_packs, cls_offs, cls_taps = [], [], []
    total = 0
    for rx in range(sx):
        for ry in range(sy):
            for pz in range(sz):
                kxs = [k for k in range(KX) if k % sx == rx]
                kys = [k for k in range(KY) if k % sy == ry]
                kzs = [k for k in range(KZ) if k % sz == pz]
                sub = wd[:, :, kxs][:, :, :, kys][:, :, :, :, kzs]
                wmat = sub.transpose(0, 2, 3, 4, 1).reshape(-1, Ci)  # taps (co, kx, ky, kz)
                cls_taps.append([(co, kx, ky, kz) for co in range(Co) for kx in kxs for ky in kys for kz in kzs])
                if wmat.shape[0]:
                    packs, offs = _pack_rows(wmat, MR)
                else:
                    packs, offs = np.zeros(0, np.float32), np.zeros((Ci + MR - 1) // MR, np.intp)
                cls_packs.append(packs)
                cls_offs.append(offs + total)
                total += packs.size
    packs = np.concatenate(cls_packs) if total else np.zeros(1, np.float32)
    ntaps = [len(t) for t in cls_taps]
    taps = np.zeros((len(cls_taps), max(max(ntaps), 1), 4), dtype=np.intp)
    for c, t in enumerate(cls_taps):
        if t:
            taps[c, :len(t)] = t
    return packs, np.ascontiguousarray(np.stack(cls_offs), dtype=np.intp), ntaps, taps


def conv3d_grad_input_f32(float[:, :, :, :, ::1] g, w, stride, in_shape):
    """Gather form per input row and z phase; taps whose output index falls
    outside the grid point at a zero row."""
    cdef Py_ssize_t B = g.shape[0], Co = g.shape[1], OX = g.shape[2], OY = g.shape[3], OZ = g.shape[4]
    cdef Py_ssize_t Ci = w.shape[1], KX = w.shape[2], KY = w.shape[3], KZ = w.shape[4]
    cdef Py_ssize_t sx = stride[0], sy = stride[1], sz = stride[2]
    cdef Py_ssize_t X = in_shape[0], Y = in_shape[1], Z = in_shape[2]
    cdef Py_ssize_t ZP = (Z + sz - 1) // sz
    cdef Py_ssize_t padl = (KZ - 1) // sz
    cdef Py_ssize_t padr = max(ZP - OZ, 0)
    gp_arr = np.pad(np.asarray(g), ((0, 0), (0, 0), (0, 0), (0, 0), (padl, padr)))
    cdef float[:, :, :, :, ::1] gp = gp_arr
    zero_arr = np.zeros(ZP + padl + 1, dtype=np.float32)
    cdef float[::1] zero = zero_arr
    gxs_arr = np.zeros((B, Ci, X, Y, sz, ZP), dtype=np.float32)
    cdef float[:, :, :, :, :, ::1] gxs = gxs_arr

    packs_arr, offs_arr, cls_ntaps, taps_arr = _class_packs(np.asarray(w, dtype=np.float32), (sx, sy, sz))
    cdef float[::1] packs = packs_arr
    cdef Py_ssize_t[:, ::1] offs = offs_arr
    cdef Py_ssize_t[::1] ntaps_of = np.asarray(cls_ntaps, dtype=np.intp)
    cdef Py_ssize_t[:, :, ::1] taps = taps_arr
    cdef Py_ssize_t nblk = (Ci + MR - 1) // MR
    cdef Py_ssize_t maxtaps = taps_arr.shape[1]
    cdef Py_ssize_t bx, b, ix, iy, p, cls, co, kx, ky, kz, qx, qy, t, blk, c0, m
    cdef int mr
    cdef const float **src
    cdef float **dst
    with nogil, parallel():
        src = <const float **> malloc(maxtaps * sizeof(float *))
        dst = <float **> malloc(MR * sizeof(float *))
        for bx in prange(B * X, schedule="static"):
            b = bx // X
            ix = bx % X
            for iy in range(Y):
                for p in range(sz):
                    cls = ((ix % sx) * sy + iy % sy) * sz + p
                    if ntaps_of[cls] == 0:
                        continue
                    for t in range(ntaps_of[cls]):
                        co = taps[cls, t, 0]
                        kx = taps[cls, t, 1]
                        ky = taps[cls, t, 2]
                        kz = taps[cls, t, 3]
                        qx = (ix - kx) // sx
                        qy = (iy - ky) // sy
                        if ix - kx < 0 or iy - ky < 0 or qx >= OX or qy >= OY:
                            src[t] = &zero[0]
                        else:
                            src[t] = &gp[b, co, qx, qy, padl - kz // sz]
                    for blk in range(nblk):
                        c0 = blk * MR
                        mr = <int> min(MR, Ci - c0)
                        for m in range(mr):
                            dst[m] = &gxs[b, c0 + m, ix, iy, p, 0]
                        mk_gather_row(mr, ZP, ntaps_of[cls], src, &packs[offs[cls, blk]], dst)
        free(src)
        free(dst)
    return phase_merge(gxs_arr, Z)


def conv3d_grad_weight_f32(float[:, :, :, :, ::1] g, x, stride, kshape):
    cdef Py_ssize_t B = g.shape[0], Co = g.shape[1], OX = g.shape[2], OY = g.shape[3], OZ = g.shape[4]
    cdef Py_ssize_t Ci = x.shape[1]
    cdef Py_ssize_t KX = kshape[0], KY = kshape[1], KZ = kshape[2]
    cdef Py_ssize_t sx = stride[0], sy = stride[1], sz = stride[2]
    xs_arr = phase_split(np.asarray(x), sz)
    cdef float[:, :, :, :, :, ::1] xs = xs_arr
    cdef Py_ssize_t ntaps = Ci * KX * KY * KZ
    cdef Py_ssize_t ncb = (Co + MK_DOT_M - 1) // MK_DOT_M, ntb = (ntaps + DOT_T - 1) // DOT_T
    # one x-slab (all y rows of one x index) per call; rows sit ss floats apart
    cdef Py_ssize_t ss = sy * xs.shape[4] * xs.shape[5], gs = OZ
    # ragged tiles read zeros instead of taking a scalar path
    zero_arr = np.zeros(OY * max(ss, gs) + xs.shape[5] + LANES, dtype=np.float32)
    cdef float[::1] zero = zero_arr
    acc_arr = np.zeros((ncb, ntb, MK_DOT_M * DOT_T * LANES), dtype=np.float64)
    cdef double[:, :, ::1] acc = acc_arr
    cdef Py_ssize_t rb = max(1, 1024 // OZ)
    cdef Py_ssize_t nck = (OY + rb - 1) // rb
    cdef Py_ssize_t cb, tb, b, ox, ci, kx, ky, kz, t, c0, m, r0, ck
    cdef const float **src
    cdef const float **gr
    with nogil, parallel():
        src = <const float **> malloc(ntb * DOT_T * sizeof(float *))
        gr = <const float **> malloc(MK_DOT_M * sizeof(float *))
        for cb in prange(ncb, schedule="static"):
            c0 = cb * MK_DOT_M
            for t in range(ntaps, ntb * DOT_T):
                src[t] = &zero[0]
            for b in range(B):
                for ox in range(OX):
                    for m in range(MK_DOT_M):
                        if c0 + m < Co:
                            gr[m] = &g[b, c0 + m, ox, 0, 0]
                        else:
                            gr[m] = &zero[0]
                    t = 0
                    for ci in range(Ci):
                        for kx in range(KX):
                            for ky in range(KY):
                                for kz in range(KZ):
                                    src[t] = &xs[b, ci, ox * sx + kx, ky, kz % sz, kz // sz]
                                    t = t + 1
                    # row chunks small enough that g and the shared x rows stay cached
                    for ck in range(nck):
                        r0 = ck * rb
                        for tb in range(ntb):
                            mk_dot(MK_DOT_M, DOT_T, r0, min(rb, OY - r0), OZ, gr, gs, &src[tb * DOT_T], ss,
                                   &acc[cb, tb, 0])
        free(src)
        free(gr)
    # lanes summed in a fixed order, then scattered back to (co, tap)
    lanes = acc_arr.reshape(ncb, ntb, MK_DOT_M, DOT_T, LANES).sum(axis=4)
    full = lanes.transpose(0, 2, 1, 3).reshape(ncb * MK_DOT_M, ntb * DOT_T)[:Co, :ntaps]
    return full.reshape(Co, Ci, KX, KY, KZ).astype(np.float32)


def _f32(*arrays):
    return all(np.asarray(a).dtype == np.float32 for a in arrays)


# Below these row lengths the vector kernels spend more time on tails and
# panel setup than on arithmetic, and the BLAS-backed path is faster.
# Thresholds were calibrated with benchmarks/bench_kernels.py.
MIN_ROW_FORWARD = 16
MIN_ROW_GRAD_INPUT = 16
MIN_ROW_GRAD_WEIGHT = 32


def conv3d_forward(x, w, stride):
    """Valid cross-correlation of a pre-padded input."""
    if _f32(x, w):
        oz = (x.shape[4] - w.shape[4]) // stride[2] + 1
        if oz < MIN_ROW_FORWARD:
            return _pykernels.conv3d_forward(x, w, stride)
        return conv3d_forward_f32(x, w, tuple(stride))
    return conv3d_forward_any(x, w, stride)


def conv3d_grad_input(g, w, stride, in_shape):
    """Gradient w.r.t. the padded input."""
    if _f32(g, w):
        if in_shape[2] < MIN_ROW_GRAD_INPUT:
            return _pykernels.conv3d_grad_input(g, w, stride, in_shape)
        return conv3d_grad_input_f32(g, w, tuple(stride), tuple(in_shape))
    return conv3d_grad_input_any(g, w, stride, in_shape)


def conv3d_grad_weight(g, x, stride, kshape):
    """Gradient w.r.t. the weights; x is the padded input."""
    if _f32(g, x):
        if g.shape[4] < MIN_ROW_GRAD_WEIGHT:
            return _pykernels.conv3d_grad_weight(g, x, stride, kshape)
        return conv3d_grad_weight_f32(g, x, tuple(stride), tuple(kshape))
    return conv3d_grad_weight_any(g, x, stride, kshape)
