"""Derive the full network/training configuration from a dataset fingerprint.

Nothing here is tuned per task: every number is a function of the median
shape, the median spacing and the class count.
"""
import json
from dataclasses import dataclass

from .volume import DatasetFingerprint, FormatError

MAX_DEPTH = 4
BOTTLENECK_MIN = 8  # voxels per axis at the deepest level
BASE_FEATURES = 6
TRAIN_CAP_FINE = 256
TRAIN_CAP_COARSE = 128
INFER_CAP_FINE = 512
INFER_CAP_COARSE = 128

DOWN = (3, 2)  # (kernel, stride)
KEEP = (1, 1)


def derive_depths(fingerprint):
    """Downsampling steps per axis: min(floor(shape / 8), 4)."""
    return tuple(min(int(s) // BOTTLENECK_MIN, MAX_DEPTH) for s in fingerprint.median_shape)


def derive_transitions(depths):
    """Per level transition, a per-axis (kernel, stride) pair."""
    return [tuple(DOWN if level < d else KEEP for d in depths) for level in range(max(depths, default=0))]


def coarse_axis(spacing):
    """Axis with the largest spacing; ties go to the later axis (z first)."""
    values = tuple(spacing)
    top = max(values)
    return max(i for i, v in enumerate(values) if v == top)


def derive_patch_sizes(depths, median_spacing):
    coarse = coarse_axis(median_spacing)
    train, infer = [], []
    for axis, d in enumerate(depths):
        natural = 2 ** (3 + d)
        # depth <= 4 means natural <= 128, so neither training clip can bind
        assert natural <= TRAIN_CAP_COARSE
        cap = TRAIN_CAP_COARSE if axis == coarse else TRAIN_CAP_FINE
        train.append(min(natural, cap))
        infer.append(INFER_CAP_COARSE if axis == coarse else INFER_CAP_FINE)
    return tuple(train), tuple(infer)


def layer_sequence(transitions):
    """Ordered per-axis (kernel, stride) list from the input to the deepest block."""
    conv3 = ((3, 1),) * 3
    layers = [conv3, conv3, conv3]  # stem + level-0 block
    for t in transitions:
        layers.append(tuple(t))
        layers.extend([conv3, conv3])
    return layers


def receptive_field_of(transitions):
    rf = [1, 1, 1]
    jump = [1, 1, 1]
    for layer in layer_sequence(transitions):
        for axis, (k, s) in enumerate(layer):
            rf[axis] += (k - 1) * jump[axis]
            jump[axis] *= s
    return tuple(rf)


def receptive_field(plan):
    return receptive_field_of(plan.transitions)


@dataclass(frozen=True)
class TaskPlan:
    depths: tuple
    levels: int
    transitions: tuple
    base_features: int
    channel_widths: tuple
    train_patch: tuple
    infer_patch_cap: tuple
    head_count: int
    receptive_field: tuple
    class_count: int
    fingerprint: DatasetFingerprint

    @property
    def median_spacing(self):
        return self.fingerprint.median_spacing

    def cumulative_strides(self, level):
        """Per-axis total downsampling factor from the input to ``level``."""
        factor = [1, 1, 1]
        for t in self.transitions[:level]:
            for axis, (_, s) in enumerate(t):
                factor[axis] *= s
        return tuple(factor)

    @property
    def divisor(self):
        return tuple(2 ** d for d in self.depths)

    def to_dict(self):
        return {
            "depths": list(self.depths),
            "levels": self.levels,
            "transitions": [[list(p) for p in t] for t in self.transitions],
            "base_features": self.base_features,
            "channel_widths": list(self.channel_widths),
            "train_patch": list(self.train_patch),
            "infer_patch_cap": list(self.infer_patch_cap),
            "head_count": self.head_count,
            "receptive_field": list(self.receptive_field),
            "class_count": self.class_count,
            "fingerprint": self.fingerprint.to_dict(),
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_dict(cls, doc):
        try:
            fp = DatasetFingerprint.from_dict(doc["fingerprint"])
            plan = cls(
                depths=tuple(int(d) for d in doc["depths"]),
                levels=int(doc["levels"]),
                transitions=tuple(tuple(tuple(int(v) for v in p) for p in t) for t in doc["transitions"]),
                base_features=int(doc["base_features"]),
                channel_widths=tuple(int(c) for c in doc["channel_widths"]),
                train_patch=tuple(int(p) for p in doc["train_patch"]),
                infer_patch_cap=tuple(int(p) for p in doc["infer_patch_cap"]),
                head_count=int(doc["head_count"]),
                receptive_field=tuple(int(r) for r in doc["receptive_field"]),
                class_count=int(doc["class_count"]),
                fingerprint=fp,
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"invalid plan: {exc}") from None
        if plan != make_plan(fp):
            raise FormatError("plan is inconsistent with its embedded fingerprint")
        return plan

    @classmethod
    def from_json(cls, text):
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise FormatError(f"plan is not valid JSON ({exc})") from None
        return cls.from_dict(doc)


def make_plan(fingerprint):
    depths = derive_depths(fingerprint)
    transitions = tuple(derive_transitions(depths))
    levels = max(depths) + 1
    train_patch, infer_cap = derive_patch_sizes(depths, fingerprint.median_spacing)
    return TaskPlan(
        depths=depths,
        levels=levels,
        transitions=transitions,
        base_features=BASE_FEATURES,
        channel_widths=tuple(BASE_FEATURES * 2 ** level for level in range(levels)),
        train_patch=train_patch,
        infer_patch_cap=infer_cap,
        head_count=max(max(depths) - 1, 1),
        receptive_field=receptive_field_of(transitions),
        class_count=fingerprint.class_count,
        fingerprint=fingerprint,
    )
