"""Volumes, label maps, the SVF file format, manifests and dataset fingerprints.

Arrays are indexed ``[x, y, z]``.  On disk the payload is x-fastest, which is
numpy's Fortran order for an ``(nx, ny, nz)`` array.
"""
import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"SVF1\n"
_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}


class FormatError(ValueError):
    """Malformed volume file, manifest or dataset."""


@dataclass(frozen=True)
class Spacing:
    sx: float
    sy: float
    sz: float

    def __post_init__(self):
        for name in ("sx", "sy", "sz"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float, np.floating, np.integer)) and math.isfinite(v) and v > 0):
                raise ValueError(f"spacing {name} must be positive and finite, got {v!r}")
            object.__setattr__(self, name, float(v))

    @classmethod
    def of(cls, values):
        if isinstance(values, Spacing):
            return values
        sx, sy, sz = values
        return cls(sx, sy, sz)

    def as_tuple(self):
        return (self.sx, self.sy, self.sz)

    def __iter__(self):
        return iter(self.as_tuple())

    def __getitem__(self, i):
        return self.as_tuple()[i]


def _check_dims(dims):
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or min(dims) < 1:
        raise ValueError(f"dims must be three positive integers, got {dims}")
    return dims


@dataclass(frozen=True, eq=False)
class Volume:
    """Scalar intensities on a grid, float32, indexed [x, y, z]."""

    data: np.ndarray
    spacing: Spacing

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float32)
        if arr.ndim != 3:
            raise ValueError(f"volume data must be 3D, got shape {arr.shape}")
        _check_dims(arr.shape)
        if not np.all(np.isfinite(arr)):
            raise ValueError("volume intensities must be finite")
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "spacing", Spacing.of(self.spacing))

    @property
    def dims(self):
        return self.data.shape


@dataclass(frozen=True, eq=False)
class SegmentationMap:
    """Class indices on a grid, uint8, indexed [x, y, z]; 0 is background."""

    labels: np.ndarray
    spacing: Spacing

    def __post_init__(self):
        arr = np.asarray(self.labels)
        if arr.dtype != np.uint8:
            if arr.size and (arr.min() < 0 or arr.max() > 255):
                raise ValueError("label values must fit in uint8")
            arr = arr.astype(np.uint8)
        if arr.ndim != 3:
            raise ValueError(f"label data must be 3D, got shape {arr.shape}")
        _check_dims(arr.shape)
        object.__setattr__(self, "labels", arr)
        object.__setattr__(self, "spacing", Spacing.of(self.spacing))

    @property
    def dims(self):
        return self.labels.shape

    @property
    def data(self):
        return self.labels


# --- SVF files ---------------------------------------------------------------

def write_volume(v, path):
    """Write a Volume or SegmentationMap as SVF."""
    if isinstance(v, Volume):
        dtype, arr = "f32", v.data
    elif isinstance(v, SegmentationMap):
        dtype, arr = "u8", v.labels
    else:
        raise TypeError(f"expected Volume or SegmentationMap, got {type(v).__name__}")
    header = json.dumps({
        "dims": [int(d) for d in arr.shape],
        "spacing": list(v.spacing.as_tuple()),
        "dtype": dtype,
        "layout": "x-fastest",
    }).encode("utf-8")
    payload = np.asarray(arr, dtype=_DTYPES[dtype]).tobytes(order="F")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        fh.write(payload)


def read_volume(path):
    raw = Path(path).read_bytes()
    if raw[:5] != MAGIC:
        raise FormatError(f"{path}: bad magic, not an SVF1 file")
    if len(raw) < 13:
        raise FormatError(f"{path}: truncated header length")
    (hlen,) = struct.unpack("<Q", raw[5:13])
    if 13 + hlen > len(raw):
        raise FormatError(f"{path}: header length {hlen} exceeds file size")
    try:
        header = json.loads(raw[13:13 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: header is not valid JSON ({exc})") from None
    if not isinstance(header, dict) or set(header) != {"dims", "spacing", "dtype", "layout"}:
        keys = sorted(header) if isinstance(header, dict) else header
        raise FormatError(f"{path}: header keys must be dims, spacing, dtype, layout; got {keys}")

    dims = header["dims"]
    if (not isinstance(dims, list) or len(dims) != 3
            or not all(isinstance(d, int) and not isinstance(d, bool) and d > 0 for d in dims)):
        raise FormatError(f"{path}: field 'dims' must be 3 positive integers, got {dims!r}")
    try:
        spacing = Spacing.of(header["spacing"])
    except (TypeError, ValueError):
        raise FormatError(f"{path}: field 'spacing' must be 3 positive finite reals, "
                          f"got {header['spacing']!r}") from None
    dtype = header["dtype"]
    if dtype not in _DTYPES:
        raise FormatError(f"{path}: field 'dtype' must be 'f32' or 'u8', got {dtype!r}")
    if header["layout"] != "x-fastest":
        raise FormatError(f"{path}: field 'layout' must be 'x-fastest', got {header['layout']!r}")

    payload = raw[13 + hlen:]
    count = dims[0] * dims[1] * dims[2]
    expected = count * _DTYPES[dtype].itemsize
    if len(payload) != expected:
        raise FormatError(f"{path}: payload has {len(payload)} bytes, dims {dims} with dtype "
                          f"{dtype} need {expected}")
    arr = np.frombuffer(payload, dtype=_DTYPES[dtype]).reshape(dims, order="F")
    if dtype == "f32":
        if not np.all(np.isfinite(arr)):
            raise FormatError(f"{path}: field 'data' contains non-finite intensities")
        return Volume(np.ascontiguousarray(arr, dtype=np.float32), spacing)
    return SegmentationMap(np.ascontiguousarray(arr), spacing)


# --- manifests ---------------------------------------------------------------

@dataclass(frozen=True)
class DatasetManifest:
    name: str
    cases: tuple  # of (image path, label path or None), absolute

    def __post_init__(self):
        if not self.cases:
            raise FormatError(f"manifest {self.name!r} lists no cases")

    @property
    def labelled(self):
        return all(label is not None for _, label in self.cases)


def load_manifest(path):
    """Load ``manifest.json`` (or a directory containing one)."""
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    if not path.is_file():
        raise FormatError(f"manifest not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(doc, dict) or not isinstance(doc.get("name"), str) or not isinstance(doc.get("cases"), list):
        raise FormatError(f"{path}: manifest needs a string 'name' and a 'cases' array")
    root = path.parent
    cases = []
    for i, case in enumerate(doc["cases"]):
        if not isinstance(case, dict) or not isinstance(case.get("image"), str):
            raise FormatError(f"{path}: case {i} needs an 'image' path string")
        label = case.get("label")
        if label is not None and not isinstance(label, str):
            raise FormatError(f"{path}: case {i} 'label' must be a path string")
        cases.append((str(root / case["image"]), None if label is None else str(root / label)))
    return DatasetManifest(doc["name"], tuple(cases))


def save_manifest(manifest_dir, name, cases):
    """Write ``manifest.json``; case paths are stored relative to ``manifest_dir``."""
    manifest_dir = Path(manifest_dir)
    entries = []
    for image, label in cases:
        entry = {"image": str(image)}
        if label is not None:
            entry["label"] = str(label)
        entries.append(entry)
    path = manifest_dir / "manifest.json"
    path.write_text(json.dumps({"name": name, "cases": entries}, indent=2))
    return path


# --- fingerprint -------------------------------------------------------------

@dataclass(frozen=True)
class DatasetFingerprint:
    median_spacing: Spacing
    median_shape: tuple
    class_count: int
    case_count: int

    def __post_init__(self):
        object.__setattr__(self, "median_spacing", Spacing.of(self.median_spacing))
        shape = tuple(int(s) for s in self.median_shape)
        if len(shape) != 3 or min(shape) < 1:
            raise ValueError(f"median_shape must be three integers >= 1, got {shape}")
        object.__setattr__(self, "median_shape", shape)
        if int(self.class_count) < 2:
            raise ValueError(f"class_count must be >= 2, got {self.class_count}")
        if int(self.case_count) < 1:
            raise ValueError(f"case_count must be >= 1, got {self.case_count}")

    def to_dict(self):
        return {
            "median_spacing": list(self.median_spacing.as_tuple()),
            "median_shape": list(self.median_shape),
            "class_count": int(self.class_count),
            "case_count": int(self.case_count),
        }

    @classmethod
    def from_dict(cls, doc):
        try:
            return cls(Spacing.of(doc["median_spacing"]), tuple(doc["median_shape"]),
                       int(doc["class_count"]), int(doc["case_count"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"invalid fingerprint: {exc}") from None


def round_half_up(x):
    return int(math.floor(x + 0.5))


def median(values):
    """Median; for an even count, the mean of the two middle values."""
    s = sorted(values)
    n = len(s)
    if n == 0:
        raise ValueError("median of empty sequence")
    mid = n // 2
    if n % 2:
        return s[mid]
    return (s[mid - 1] + s[mid]) / 2.0


def fingerprint_from_geometry(spacings, dims, labels_seen):
    """Fingerprint from per-case spacings, dims, and the set of observed labels."""
    med = tuple(median([s[i] for s in spacings]) for i in range(3))
    shape = []
    for i in range(3):
        extents = [round_half_up(d[i] * s[i] / med[i]) for d, s in zip(dims, spacings)]
        shape.append(max(1, round_half_up(median(extents))))
    labels_seen = sorted(set(int(v) for v in labels_seen))
    if labels_seen != list(range(len(labels_seen))):
        raise FormatError(f"labels must be consecutive integers from 0, observed {labels_seen}")
    if len(labels_seen) < 2:
        raise FormatError(f"need at least 2 classes (background + foreground), observed {labels_seen}")
    return DatasetFingerprint(Spacing.of(med), tuple(shape), max(labels_seen) + 1, len(spacings))


def compute_fingerprint(manifest):
    spacings, dims, seen = [], [], set()
    for image_path, label_path in manifest.cases:
        try:
            image = read_volume(image_path)
        except OSError as exc:
            raise FormatError(f"cannot read case {image_path}: {exc}") from None
        if not isinstance(image, Volume):
            raise FormatError(f"{image_path}: image must be f32")
        if label_path is not None:
            try:
                labels = read_volume(label_path)
            except OSError as exc:
                raise FormatError(f"cannot read case {label_path}: {exc}") from None
            if not isinstance(labels, SegmentationMap):
                raise FormatError(f"{label_path}: labels must be u8")
            if labels.dims != image.dims:
                raise FormatError(f"dims mismatch: image {image_path} {image.dims} vs labels {labels.dims}")
            seen.update(np.unique(labels.labels).tolist())
        spacings.append(image.spacing.as_tuple())
        dims.append(image.dims)
    if not seen:
        raise FormatError("no label maps in manifest; cannot determine class count")
    return fingerprint_from_geometry(spacings, dims, seen)
