"""Resampling, normalization, patch sampling and on-the-fly augmentation.

Every stochastic function takes an explicit seed and is a pure function of
its inputs and that seed.
"""
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from . import kernels
from .volume import SegmentationMap, Spacing, Volume, round_half_up


@dataclass(frozen=True)
class AugmentationConfig:
    """Global augmentation constants, identical for every task."""

    noise_sigma_range: tuple = (0.0, 0.1)
    rotation_range_deg: float = 15.0
    scale_range: tuple = (0.85, 1.15)
    elastic_grid_points: int = 8
    elastic_sigma_mm: float = 12.0
    elastic_magnitude_mm: tuple = (0.0, 6.0)
    per_transform_probability: float = 0.15

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, doc):
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in doc.items()})


DEFAULT_AUGMENTATION = AugmentationConfig()


@dataclass(frozen=True, eq=False)
class PatchPair:
    image: np.ndarray  # float32, patch dims
    labels: np.ndarray  # uint8, patch dims
    case_id: int = -1
    origin: tuple = (0, 0, 0)  # in padded-scan voxels
    pad_before: tuple = (0, 0, 0)
    seed: object = None
    extra: dict = field(default_factory=dict)


# --- interpolation -----------------------------------------------------------

def _axis_coords(n_in, n_out):
    """Source coordinates for ``n_out`` samples spanning ``n_in`` voxels, corners aligned."""
    if n_out == 1 or n_in == 1:
        return np.full(n_out, (n_in - 1) / 2.0)
    return np.arange(n_out) * ((n_in - 1) / (n_out - 1))


def interp_linear(arr, out_shape):
    """Trilinear resize, applied as three separable linear passes (float64)."""
    out = np.asarray(arr, dtype=np.float64)
    for axis, m in enumerate(out_shape):
        n = out.shape[axis]
        if n == m:
            continue
        c = _axis_coords(n, m)
        lo = np.floor(c).astype(np.intp)
        hi = np.minimum(lo + 1, n - 1)
        f = (c - lo).reshape([-1 if a == axis else 1 for a in range(out.ndim)])
        out = np.take(out, lo, axis=axis) * (1.0 - f) + np.take(out, hi, axis=axis) * f
    return out


def interp_nearest(arr, out_shape):
    out = arr
    for axis, m in enumerate(out_shape):
        n = out.shape[axis]
        if n == m:
            continue
        idx = np.clip(np.floor(_axis_coords(n, m) + 0.5).astype(np.intp), 0, n - 1)
        out = np.take(out, idx, axis=axis)
    return out


def resampled_dims(dims, spacing, target):
    return tuple(max(1, round_half_up(n * s / t)) for n, s, t in zip(dims, spacing, target))


def resample(v, target, shape=None):
    """Resample to ``target`` spacing; trilinear for volumes, nearest for labels.

    ``shape`` overrides the output dims, which lets a caller return exactly
    to a previous grid.
    """
    target = Spacing.of(target)
    shape = resampled_dims(v.dims, v.spacing, target) if shape is None else tuple(int(s) for s in shape)
    if isinstance(v, Volume):
        if shape == v.dims and target == v.spacing:
            return Volume(v.data.copy(), target)
        return Volume(interp_linear(v.data, shape).astype(np.float32), target)
    if isinstance(v, SegmentationMap):
        return SegmentationMap(np.ascontiguousarray(interp_nearest(v.labels, shape)), target)
    raise TypeError(f"expected Volume or SegmentationMap, got {type(v).__name__}")


def normalize(v):
    """Z-score over the whole volume; constant volumes map to zeros."""
    data = v.data.astype(np.float64)
    std = max(float(data.std()), 1e-8)
    return Volume(((data - data.mean()) / std).astype(np.float32), v.spacing)


# --- patches -----------------------------------------------------------------

def reflect_pad(arr, before, after):
    """Mirror padding without repeating the edge voxel; iterates for wide pads."""
    widths = tuple(zip(before, after))
    if not any(b or a for b, a in widths):
        return arr
    return np.pad(arr, widths, mode="reflect")


def sample_patch(image, labels, patch_dims, rng_seed, case_id=-1):
    """Uniformly placed patch; axes shorter than the patch are reflect-padded."""
    img = image.data if isinstance(image, Volume) else np.asarray(image)
    lab = labels.labels if isinstance(labels, SegmentationMap) else np.asarray(labels)
    if img.shape != lab.shape:
        raise ValueError(f"image {img.shape} and labels {lab.shape} differ in dims")
    if isinstance(image, Volume) and isinstance(labels, SegmentationMap) and image.spacing != labels.spacing:
        raise ValueError("image and labels differ in spacing")
    rng = np.random.default_rng(rng_seed)
    deficit = [max(p - n, 0) for n, p in zip(img.shape, patch_dims)]
    before = [d // 2 for d in deficit]
    after = [d - b for d, b in zip(deficit, before)]
    img = reflect_pad(img, before, after)
    lab = reflect_pad(lab, before, after)
    origin = tuple(int(rng.integers(0, n - p + 1)) for n, p in zip(img.shape, patch_dims))
    window = tuple(slice(o, o + p) for o, p in zip(origin, patch_dims))
    return PatchPair(np.ascontiguousarray(img[window], dtype=np.float32),
                     np.ascontiguousarray(lab[window], dtype=np.uint8),
                     case_id, origin, tuple(before), rng_seed)


# --- augmentation ------------------------------------------------------------

def make_elastic_field(patch_dims, spacing, cfg=DEFAULT_AUGMENTATION, rng_seed=0, magnitude_mm=None):
    """Smooth random displacement field in voxels, shape (3, *patch_dims).

    The field is built in millimetres, so the same physical deformation is
    applied along every axis, then divided by the spacing per axis.
    """
    rng = np.random.default_rng(rng_seed)
    lo, hi = cfg.elastic_magnitude_mm
    magnitude = rng.uniform(lo, hi) if magnitude_mm is None else float(magnitude_mm)
    g = cfg.elastic_grid_points
    coarse = rng.standard_normal((3, g, g, g))
    spacing = tuple(Spacing.of(spacing))
    if magnitude == 0.0:
        return np.zeros((3,) + tuple(patch_dims))
    sigma = []
    for n, s in zip(patch_dims, spacing):
        cell_mm = max(n - 1, 1) * s / (g - 1)
        sigma.append(cfg.elastic_sigma_mm / cell_mm)
    smooth = np.stack([gaussian_filter(coarse[c], sigma=sigma, mode="reflect") for c in range(3)])
    rms = np.sqrt(np.mean(smooth ** 2))
    field_mm = smooth * (magnitude / rms) if rms > 0 else np.zeros_like(smooth)
    out = np.empty((3,) + tuple(patch_dims))
    for c in range(3):
        out[c] = interp_linear(field_mm[c], patch_dims) / spacing[c]
    return out


def rotation_matrix(angles_rad):
    ax, ay, az = angles_rad
    cx, sx, cy, sy, cz, sz = np.cos(ax), np.sin(ax), np.cos(ay), np.sin(ay), np.cos(az), np.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rx @ ry @ rz


def warp_nearest(labels, coords):
    idx = [np.clip(np.floor(coords[a] + 0.5).astype(np.intp), 0, labels.shape[a] - 1) for a in range(3)]
    return labels[idx[0], idx[1], idx[2]]


def augment(pair, spacing, cfg=DEFAULT_AUGMENTATION, rng_seed=0):
    """Random rotation, scaling, elastic deformation and gaussian noise.

    Spatial transforms are composed into one sampling grid in millimetres and
    applied in a single pass: trilinear for the image, nearest for labels.
    """
    rng = np.random.default_rng(rng_seed)
    p = cfg.per_transform_probability
    do_rotate, do_scale, do_elastic, do_noise = (rng.random() < p for _ in range(4))
    limit = np.deg2rad(cfg.rotation_range_deg)
    angles = rng.uniform(-limit, limit, size=3)
    scale = rng.uniform(*cfg.scale_range)
    elastic_seed = int(rng.integers(2 ** 63))
    noise_sigma = rng.uniform(*cfg.noise_sigma_range)
    noise_seed = int(rng.integers(2 ** 63))

    image, labels = pair.image, pair.labels
    dims = image.shape
    if do_rotate or do_scale or do_elastic:
        sp = np.array(tuple(Spacing.of(spacing))).reshape(3, 1)
        center = (np.array(dims, dtype=np.float64).reshape(3, 1) - 1) / 2
        grid = np.indices(dims, dtype=np.float64).reshape(3, -1)
        mm = (grid - center) * sp
        matrix = np.eye(3)
        if do_rotate:
            matrix = rotation_matrix(angles) @ matrix
        if do_scale:
            matrix = matrix * scale
        coords = (matrix @ mm) / sp + center
        coords = coords.reshape((3,) + dims)
        if do_elastic:
            coords += make_elastic_field(dims, spacing, cfg, elastic_seed)
        coords = np.ascontiguousarray(coords)
        image = kernels.warp_linear(np.ascontiguousarray(image), coords)
        labels = warp_nearest(labels, coords)
    if do_noise:
        noise = np.random.default_rng(noise_seed).standard_normal(dims) * noise_sigma
        image = (image + noise).astype(np.float32)
    applied = {"rotate": do_rotate, "scale": do_scale, "elastic": do_elastic, "noise": do_noise}
    return PatchPair(np.ascontiguousarray(image, dtype=np.float32), np.ascontiguousarray(labels, dtype=np.uint8),
                     pair.case_id, pair.origin, pair.pad_before, rng_seed, {"applied": applied})
