"""Synthetic sphere datasets for smoke tests and the end-to-end check."""
from pathlib import Path

import numpy as np

from .volume import SegmentationMap, Spacing, Volume, save_manifest, write_volume


def sphere_case(dims=(64, 64, 64), spacing=(1.0, 1.0, 2.0), seed=0, spheres=(1, 3),
                radius_mm=(7.0, 16.0), contrast=1.0, noise=0.3):
    """One volume with 1-3 bright spheres (label 1) in gaussian noise.

    Spheres are round in millimetres, so on an anisotropic grid they are
    ellipsoids in voxels.
    """
    rng = np.random.default_rng(seed)
    spacing = Spacing.of(spacing)
    sp = np.array(spacing.as_tuple())
    extent = np.array(dims) * sp
    grid = [np.arange(n) * s + s / 2 for n, s in zip(dims, sp)]
    xx, yy, zz = np.meshgrid(*grid, indexing="ij")
    mask = np.zeros(dims, dtype=bool)
    for _ in range(int(rng.integers(spheres[0], spheres[1] + 1))):
        # small volumes shrink the sphere so it still fits inside
        r = min(rng.uniform(*radius_mm), 0.45 * float(extent.min()))
        c = rng.uniform(r, extent - r)
        mask |= (xx - c[0]) ** 2 + (yy - c[1]) ** 2 + (zz - c[2]) ** 2 <= r * r
    image = contrast * mask + rng.standard_normal(dims) * noise
    return Volume(image.astype(np.float32), spacing), SegmentationMap(mask.astype(np.uint8), spacing)


def write_sphere_dataset(root, count, seed=0, name="spheres", **kwargs):
    """Write ``count`` cases plus ``manifest.json`` under ``root``; returns the manifest path."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    cases = []
    for i in range(count):
        image, labels = sphere_case(seed=(seed, i), **kwargs)
        write_volume(image, root / f"case{i:03d}_img.svf")
        write_volume(labels, root / f"case{i:03d}_lab.svf")
        cases.append((f"case{i:03d}_img.svf", f"case{i:03d}_lab.svf"))
    return save_manifest(root, name, cases)
