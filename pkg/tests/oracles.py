"""Slow, obviously-correct reference implementations used by the tests."""
import itertools

import numpy as np

from autoseg3d.autodiff import Tensor


def conv3d_loops(x, w, stride=(1, 1, 1), padding=(0, 0, 0)):
    """Direct cross-correlation by nested loops over output voxels, float64."""
    x = np.pad(np.asarray(x, np.float64), ((0, 0), (0, 0)) + tuple((p, p) for p in padding))
    w = np.asarray(w, np.float64)
    B, _, X, Y, Z = x.shape
    Co, _, kx, ky, kz = w.shape
    sx, sy, sz = stride
    OX, OY, OZ = (X - kx) // sx + 1, (Y - ky) // sy + 1, (Z - kz) // sz + 1
    out = np.zeros((B, Co, OX, OY, OZ))
    for i, j, k in itertools.product(range(OX), range(OY), range(OZ)):
        win = x[:, :, i * sx:i * sx + kx, j * sy:j * sy + ky, k * sz:k * sz + kz]
        out[:, :, i, j, k] = np.einsum("bcxyz,ocxyz->bo", win, w)
    return out


def numeric_grad(f, arr, eps=1e-6):
    """Central differences of the scalar function ``f`` with respect to ``arr`` (in place)."""
    grad = np.zeros_like(arr, dtype=np.float64)
    flat, gflat = arr.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        hi = f()
        flat[i] = old - eps
        lo = f()
        flat[i] = old
        gflat[i] = (hi - lo) / (2 * eps)
    return grad


def rel_error(analytic, numeric):
    analytic, numeric = np.asarray(analytic, np.float64), np.asarray(numeric, np.float64)
    scale = max(np.abs(numeric).max(), np.abs(analytic).max(), 1e-8)
    return float(np.abs(analytic - numeric).max() / scale)


def gradcheck(build, arrays, eps=1e-6):
    """Worst relative error between backward() and central differences.

    ``build`` maps a list of leaf Tensors to a scalar Tensor; ``arrays`` are
    float64 inputs, all of which are differentiated.
    """
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    build(leaves).backward()
    worst = 0.0
    for leaf, arr in zip(leaves, arrays):
        def f():
            return float(build([Tensor(a) for a in arrays]).data)

        num = numeric_grad(f, arr, eps)
        ana = leaf.grad if leaf.grad is not None else np.zeros_like(arr)
        worst = max(worst, rel_error(ana, num))
    return worst


def band_limited(dims, spacing, target, rng):
    """Sum of 1-3 plane waves, total amplitude 1, each with a wavelength of 24-48
    voxels of whichever grid is coarser along that axis."""
    grid = np.meshgrid(*[np.arange(n) * s for n, s in zip(dims, spacing)], indexing="ij")
    coarse = np.maximum(spacing, target)
    count = int(rng.integers(1, 4))
    img = np.zeros(dims)
    for _ in range(count):
        lam = rng.uniform(24, 48) * coarse
        k = rng.standard_normal(3)
        k /= np.linalg.norm(k)
        img += np.sin(2 * np.pi * sum(k[i] * grid[i] / lam[i] for i in range(3)) + rng.uniform(0, 2 * np.pi)) / count
    return img
