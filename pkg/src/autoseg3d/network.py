"""Encoder-decoder segmentation network built from a TaskPlan.

Each resolution level holds a residual block
``conv3 -> norm -> act -> conv3 -> norm (+ shortcut) -> act``.  Levels are
joined by per-axis strided 3x3x3 (or 1x1x1) convolutions on the way down and
by transposed convolutions with kernel equal to stride on the way up, so every
decoder level lines up voxel for voxel with its encoder level.
"""
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from .autodiff import (Parameter, ShapeError, Tensor, as_tensor, concat, conv3d, conv_transpose3d,
                       instance_norm, leaky_relu, softmax_channels, take)

LEAKY_SLOPE = 0.01
NORM_EPS = 1e-5


class Network:
    def __init__(self, plan, params, dtype=np.float32):
        self.plan = plan
        self.params = params
        self.dtype = np.dtype(dtype)

    @property
    def parameters(self):
        return list(self.params.values())

    def parameter_count(self):
        return int(sum(p.data.size for p in self.params.values()))

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    # building blocks --------------------------------------------------------

    def _norm_act(self, h, prefix, detach):
        p = self.params
        h = instance_norm(h, p[prefix + ".gain"], p[prefix + ".offset"], NORM_EPS, detach)
        return leaky_relu(h, LEAKY_SLOPE)

    def _block(self, h, prefix, detach):
        p = self.params
        y = conv3d(h, p[prefix + ".conv1.w"], padding=1)
        y = self._norm_act(y, prefix + ".norm1", detach)
        y = conv3d(y, p[prefix + ".conv2.w"], padding=1)
        y = instance_norm(y, p[prefix + ".norm2.gain"], p[prefix + ".norm2.offset"], NORM_EPS, detach)
        shortcut = h
        if prefix + ".proj.w" in p:
            shortcut = conv3d(h, p[prefix + ".proj.w"])
        return leaky_relu(y + shortcut, LEAKY_SLOPE)

    def encode(self, x, detach_norm_stats=False):
        """Encoder features per level, finest first."""
        plan, p = self.plan, self.params
        x = as_tensor(x, self.dtype)
        if x.ndim != 5 or x.shape[1] != 1:
            raise ShapeError(f"network input must be (B, 1, X, Y, Z), got {x.shape}")
        for axis, (n, d) in enumerate(zip(x.shape[2:], plan.divisor)):
            if n % d:
                raise ShapeError(f"input extent {n} on axis {axis} is not divisible by {d} "
                                 f"(plan depths {plan.depths}); pad before calling")
        h = conv3d(x, p["stem.conv.w"], padding=1)
        h = self._norm_act(h, "stem.norm", detach_norm_stats)
        feats = []
        for level in range(plan.levels):
            if level > 0:
                kernel = tuple(k for k, _ in plan.transitions[level - 1])
                stride = tuple(s for _, s in plan.transitions[level - 1])
                pad = tuple((k - 1) // 2 for k in kernel)
                h = conv3d(h, p[f"enc{level}.down.w"], stride=stride, padding=pad)
                h = self._norm_act(h, f"enc{level}.down.norm", detach_norm_stats)
            h = self._block(h, f"enc{level}.block", detach_norm_stats)
            feats.append(h)
        return feats

    def forward(self, x, detach_norm_stats=False):
        """Logits per head, head 0 at full input resolution."""
        plan, p = self.plan, self.params
        feats = self.encode(x, detach_norm_stats)
        heads = {}
        if plan.levels == 1:
            heads[0] = self._head(feats[0], 0)
        dec = feats[-1]
        for level in reversed(range(plan.levels - 1)):
            stride = tuple(s for _, s in plan.transitions[level])
            up = conv_transpose3d(dec, p[f"dec{level}.up.w"], stride)
            dec = self._block(concat([feats[level], up]), f"dec{level}.block", detach_norm_stats)
            if level < plan.head_count:
                heads[level] = self._head(dec, level)
        return [heads[h] for h in range(plan.head_count)]

    __call__ = forward

    def _head(self, h, index):
        return conv3d(h, self.params[f"head{index}.w"], self.params[f"head{index}.b"])

    def head_extents(self, input_extent):
        """Closed-form spatial extents of every head output."""
        out = []
        for h in range(self.plan.head_count):
            f = self.plan.cumulative_strides(h)
            out.append(tuple(n // s for n, s in zip(input_extent, f)))
        return out


def _layer_specs(plan):
    """(name, shape, kind) for every parameter in registration order."""
    widths, C = plan.channel_widths, plan.class_count
    specs = []

    def norm(prefix, ch):
        specs.append((prefix + ".gain", (ch,), "ones"))
        specs.append((prefix + ".offset", (ch,), "zeros"))

    def block(prefix, cin, cout):
        specs.append((prefix + ".conv1.w", (cout, cin, 3, 3, 3), "he"))
        norm(prefix + ".norm1", cout)
        specs.append((prefix + ".conv2.w", (cout, cout, 3, 3, 3), "he"))
        norm(prefix + ".norm2", cout)
        if cin != cout:
            specs.append((prefix + ".proj.w", (cout, cin, 1, 1, 1), "he"))

    specs.append(("stem.conv.w", (widths[0], 1, 3, 3, 3), "he"))
    norm("stem.norm", widths[0])
    for level in range(plan.levels):
        if level > 0:
            kernel = tuple(k for k, _ in plan.transitions[level - 1])
            specs.append((f"enc{level}.down.w", (widths[level], widths[level - 1]) + kernel, "he"))
            norm(f"enc{level}.down.norm", widths[level])
        block(f"enc{level}.block", widths[level], widths[level])
    for level in reversed(range(plan.levels - 1)):
        stride = tuple(s for _, s in plan.transitions[level])
        specs.append((f"dec{level}.up.w", (widths[level + 1], widths[level]) + stride, "he_transpose"))
        block(f"dec{level}.block", 2 * widths[level], widths[level])
    for h in range(plan.head_count):
        specs.append((f"head{h}.w", (C, widths[h], 1, 1, 1), "he"))
        specs.append((f"head{h}.b", (C,), "zeros"))
    return specs


def build(plan, seed=0, dtype=np.float32):
    """Instantiate the network; identical (plan, seed) give identical parameters."""
    rng = np.random.default_rng(seed)
    params = OrderedDict()
    for name, shape, kind in _layer_specs(plan):
        if kind == "ones":
            data = np.ones(shape)
        elif kind == "zeros":
            data = np.zeros(shape)
        else:
            fan_in = shape[0] if kind == "he_transpose" else int(np.prod(shape[1:]))
            data = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
        params[name] = Parameter(data.astype(dtype), name, init=kind)
    return Network(plan, params, dtype)


# --- losses ------------------------------------------------------------------

@dataclass(frozen=True)
class GdlConfig:
    eps: float = 1e-5

    def weights(self, class_count):
        # volume weighting disabled: every class weighs exactly 1
        return np.ones(class_count)


def _sum_sorted(t):
    """Sum a 1-D tensor in ascending value order, so the result ignores index order."""
    return take(t, np.argsort(t.data, kind="stable")).sum()


def generalized_dice_loss(probs, reference, cfg=GdlConfig()):
    """1 - (2 sum_l w_l sum_n r p + eps) / (sum_l w_l sum_n (r + p) + eps).

    ``probs`` (B, C, ...) is a Tensor of per-voxel class probabilities;
    ``reference`` is a one-hot array of the same shape.
    """
    reference = np.asarray(reference)
    if probs.shape != reference.shape:
        raise ShapeError(f"probabilities {probs.shape} and reference {reference.shape} differ")
    C = probs.shape[1]
    axes = (0,) + tuple(range(2, probs.ndim))
    ref = reference.astype(probs.dtype)
    w = cfg.weights(C).astype(probs.dtype)
    overlap = (probs * ref).sum(axis=axes) * w
    volume = (probs.sum(axis=axes) + ref.sum(axis=axes)) * w
    return 1.0 - (2.0 * _sum_sorted(overlap) + cfg.eps) / (_sum_sorted(volume) + cfg.eps)


def one_hot(labels, class_count, dtype=np.float32):
    """(B, X, Y, Z) integer labels -> (B, C, X, Y, Z)."""
    classes = np.arange(class_count).reshape(1, -1, 1, 1, 1)
    return (labels[:, None] == classes).astype(dtype)


def downsample_labels(labels, extent):
    """Nearest-neighbour reduction by an integer factor per axis (keeps index i*f)."""
    factors = []
    for n, m in zip(labels.shape[1:], extent):
        if m <= 0 or n % m:
            raise ShapeError(f"label extent {labels.shape[1:]} is not an integer multiple of {tuple(extent)}")
        factors.append(n // m)
    fx, fy, fz = factors
    return labels[:, ::fx, ::fy, ::fz]


def supervised_loss(head_logits, labels, class_count, cfg=GdlConfig(), per_head=None):
    """Unweighted mean of the Dice loss over all heads.

    ``labels`` is (B, X, Y, Z) at head-0 resolution.  If ``per_head`` is a
    list, each head's loss value is appended to it.
    """
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= class_count):
        raise ValueError(f"labels must lie in [0, {class_count}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    total = None
    for logits in head_logits:
        if logits.shape[1] != class_count:
            raise ShapeError(f"head has {logits.shape[1]} channels, expected {class_count}")
        target = one_hot(downsample_labels(labels, logits.shape[2:]), class_count, logits.dtype)
        loss = generalized_dice_loss(softmax_channels(logits), target, cfg)
        if per_head is not None:
            per_head.append(float(loss.data))
        total = loss if total is None else total + loss
    return total * (1.0 / len(head_logits))


def predict_probabilities(net, x):
    """Softmax of head 0 without recording a graph."""
    from .autodiff import no_grad

    with no_grad():
        return softmax_channels(net.forward(Tensor(x))[0]).data
