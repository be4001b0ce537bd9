"""Training loop, checkpoints, tiled inference and Dice evaluation."""
import json
import math
import os
import struct
import time
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import LrSchedule, Parameter, adam_step, no_grad, softmax_channels
from .datapipe import DEFAULT_AUGMENTATION, AugmentationConfig, augment, normalize, reflect_pad, resample, sample_patch
from .network import Network, build, supervised_loss
from .planner import TaskPlan
from .volume import FormatError, SegmentationMap, Volume, compute_fingerprint, read_volume

CHECKPOINT_MAGIC = b"SCK1\n"
CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    """Training cannot continue (non-finite loss, inconsistent resume state)."""


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 30000
    batch_size: int = 4
    seed: int = 0
    log_every: int = 1
    checkpoint_every: int = 0  # 0 disables periodic checkpoints
    checkpoint_path: str = None
    workers: int = 0  # patch producer threads; 0 produces inline
    augmentation: AugmentationConfig = DEFAULT_AUGMENTATION

    def __post_init__(self):
        if int(self.iterations) < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if int(self.batch_size) < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.log_every < 1 or self.checkpoint_every < 0 or self.workers < 0:
            raise ValueError("log_every must be >= 1; checkpoint_every and workers must be >= 0")


# --- checkpoints ---------------------------------------------------------------

@dataclass(eq=False)
class Checkpoint:
    plan: TaskPlan
    params: OrderedDict  # name -> {"data", "m", "v", "step"}
    step: int
    seed: int
    augmentation: AugmentationConfig = DEFAULT_AUGMENTATION
    batch_size: int = None
    version: int = CHECKPOINT_VERSION
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_network(cls, net, step, seed, augmentation=DEFAULT_AUGMENTATION, batch_size=None):
        params = OrderedDict()
        for name, p in net.params.items():
            params[name] = {"data": p.data.copy(), "m": p.m.copy(), "v": p.v.copy(), "step": int(p.step)}
        return cls(net.plan, params, int(step), int(seed), augmentation, batch_size)

    def to_network(self):
        net = build(self.plan, seed=0)
        if list(net.params) != list(self.params):
            raise FormatError("checkpoint parameters do not match the network built from its plan")
        for name, p in net.params.items():
            blob = self.params[name]
            if blob["data"].shape != p.data.shape:
                raise FormatError(f"checkpoint parameter {name} has shape {blob['data'].shape}, "
                                  f"expected {p.data.shape}")
            p.data = blob["data"].astype(np.float32)
            p.m = blob["m"].astype(np.float32)
            p.v = blob["v"].astype(np.float32)
            p.step = int(blob["step"])
        return net


def _header(ck):
    directory, offset = [], 0
    for name, blob in ck.params.items():
        nbytes = blob["data"].size * 4
        directory.append({
            "name": name,
            "shape": list(blob["data"].shape),
            "step": blob["step"],
            "offsets": {"value": offset, "m": offset + nbytes, "v": offset + 2 * nbytes},
            "nbytes": nbytes,
        })
        offset += 3 * nbytes
    return {
        "version": ck.version,
        "plan": ck.plan.to_dict(),
        "step": ck.step,
        "seed": ck.seed,
        "batch_size": ck.batch_size,
        "augmentation": ck.augmentation.to_dict(),
        "params": directory,
        "payload_bytes": offset,
    }


def save_checkpoint(ck, path):
    """Write atomically: a crash never leaves a truncated checkpoint behind."""
    path = Path(path)
    header = json.dumps(_header(ck), sort_keys=True).encode()
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for blob in ck.params.values():
            for slot in ("data", "m", "v"):
                f.write(np.ascontiguousarray(blob[slot], dtype="<f4").tobytes())
    os.replace(tmp, path)
    return path


def load_checkpoint(path):
    path = Path(path)
    raw = path.read_bytes()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    pos = len(CHECKPOINT_MAGIC)
    if len(raw) < pos + 8:
        raise FormatError(f"{path}: truncated header length")
    (hlen,) = struct.unpack_from("<Q", raw, pos)
    pos += 8
    if len(raw) < pos + hlen:
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(raw[pos:pos + hlen])
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: header is not valid JSON ({exc})") from None
    payload = memoryview(raw)[pos + hlen:]
    try:
        if header["version"] != CHECKPOINT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {header['version']}")
        if len(payload) != header["payload_bytes"]:
            raise FormatError(f"{path}: payload is {len(payload)} bytes, header says {header['payload_bytes']}")
        plan = TaskPlan.from_dict(header["plan"])
        params = OrderedDict()
        for entry in header["params"]:
            shape = tuple(int(s) for s in entry["shape"])
            count = int(np.prod(shape))
            if entry["nbytes"] != 4 * count:
                raise FormatError(f"{path}: parameter {entry['name']} size disagrees with its shape")
            blob = {"step": int(entry["step"])}
            for slot, key in (("data", "value"), ("m", "m"), ("v", "v")):
                off = int(entry["offsets"][key])
                if off < 0 or off + 4 * count > len(payload):
                    raise FormatError(f"{path}: parameter {entry['name']} lies outside the payload")
                blob[slot] = np.frombuffer(payload, dtype="<f4", count=count, offset=off).reshape(shape).astype(np.float32)
            params[entry["name"]] = blob
        return Checkpoint(plan, params, int(header["step"]), int(header["seed"]),
                          AugmentationConfig.from_dict(header["augmentation"]), header.get("batch_size"))
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"{path}: malformed checkpoint header ({exc})") from None


# --- training ------------------------------------------------------------------

def load_training_cases(manifest, plan):
    """Read, resample to the plan's median spacing, and normalize every case."""
    if not manifest.labelled:
        missing = [img for img, lab in manifest.cases if lab is None]
        raise FormatError(f"training needs labels for every case; missing for {missing[0]}"
                          + (f" and {len(missing) - 1} more" if len(missing) > 1 else ""))
    target = plan.median_spacing
    cases = []
    for image_path, label_path in manifest.cases:
        try:
            image, labels = read_volume(image_path), read_volume(label_path)
        except OSError as exc:
            raise FormatError(f"cannot read case {image_path}: {exc}") from None
        if not isinstance(image, Volume) or not isinstance(labels, SegmentationMap):
            raise FormatError(f"case {image_path}: expected an f32 image and a u8 label map")
        if image.dims != labels.dims:
            raise FormatError(f"case {image_path}: image dims {image.dims} != label dims {labels.dims}")
        if labels.labels.max() >= plan.class_count:
            raise FormatError(f"case {label_path}: label {labels.labels.max()} outside the plan's "
                              f"{plan.class_count} classes")
        cases.append((normalize(resample(image, target)), resample(labels, target)))
    return cases


def patch_seeds(seed, step, index):
    """Independent seeds for case choice, patch placement and augmentation."""
    return np.random.SeedSequence([int(seed), int(step), int(index)]).spawn(3)


def make_patch(cases, plan, seed, step, index, aug_cfg):
    case_seed, patch_seed, aug_seed = patch_seeds(seed, step, index)
    case_id = int(np.random.default_rng(case_seed).integers(len(cases)))
    image, labels = cases[case_id]
    pair = sample_patch(image, labels, plan.train_patch, patch_seed, case_id)
    return augment(pair, plan.median_spacing, aug_cfg, aug_seed)


def _batches(cases, plan, cfg, start):
    """Yield (step, patches) for steps start..iterations-1."""
    def one_step(step):
        return [make_patch(cases, plan, cfg.seed, step, b, cfg.augmentation) for b in range(cfg.batch_size)]

    if cfg.workers == 0:
        for step in range(start, cfg.iterations):
            yield step, one_step(step)
        return
    with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
        # a bounded lookahead of one step; order is fixed by the step index, not by completion
        pending = None
        for step in range(start, cfg.iterations):
            futures = pending or [pool.submit(make_patch, cases, plan, cfg.seed, step, b, cfg.augmentation)
                                  for b in range(cfg.batch_size)]
            pending = None
            if step + 1 < cfg.iterations:
                pending = [pool.submit(make_patch, cases, plan, cfg.seed, step + 1, b, cfg.augmentation)
                           for b in range(cfg.batch_size)]
            yield step, [f.result() for f in futures]


def train(manifest, plan, cfg=TrainConfig(), resume=None, log=None, cases=None):
    """Train for ``cfg.iterations`` total steps and return the final Checkpoint.

    ``resume`` continues from a Checkpoint; the result is bit-identical to an
    uninterrupted run with the same config.  ``log`` receives one dict per
    logged step.
    """
    fp = compute_fingerprint(manifest)
    if fp != plan.fingerprint:
        raise FormatError(f"plan was derived from a different dataset: plan fingerprint "
                          f"{plan.fingerprint.to_dict()} vs dataset {fp.to_dict()}")
    if cases is None:
        cases = load_training_cases(manifest, plan)
    schedule = LrSchedule()
    if resume is not None:
        if resume.plan != plan:
            raise TrainingError("resume checkpoint was trained under a different plan")
        if resume.seed != cfg.seed or (resume.batch_size is not None and resume.batch_size != cfg.batch_size):
            raise TrainingError(f"resume needs the original seed and batch size "
                                f"(checkpoint seed={resume.seed}, batch={resume.batch_size})")
        if resume.augmentation != cfg.augmentation:
            raise TrainingError("resume checkpoint used a different augmentation config")
        if resume.step > cfg.iterations:
            raise TrainingError(f"checkpoint is at step {resume.step}, beyond iterations={cfg.iterations}")
        net, start = resume.to_network(), resume.step
    else:
        net, start = build(plan, seed=cfg.seed), 0

    def checkpoint(step):
        return Checkpoint.from_network(net, step, cfg.seed, cfg.augmentation, cfg.batch_size)

    t_last = time.perf_counter()
    for step, patches in _batches(cases, plan, cfg, start):
        x = np.stack([p.image for p in patches])[:, None]
        y = np.stack([p.labels for p in patches])
        heads = []
        loss = supervised_loss(net.forward(x), y, plan.class_count, per_head=heads)
        value = float(loss.data)
        if not math.isfinite(value):
            raise TrainingError(f"non-finite loss {value} at step {step} (cases "
                                f"{[p.case_id for p in patches]}, per-head {heads})")
        loss.backward()
        lr = adam_step(net.parameters, schedule, step)
        net.zero_grad()
        done = step + 1
        if log is not None and (done % cfg.log_every == 0 or done == cfg.iterations):
            now = time.perf_counter()
            log({"step": done, "lr": lr, "loss": value,
                 "patches_per_sec": cfg.batch_size * cfg.log_every / max(now - t_last, 1e-9)})
            t_last = now
        if cfg.checkpoint_every and cfg.checkpoint_path and done % cfg.checkpoint_every == 0:
            save_checkpoint(checkpoint(done), cfg.checkpoint_path)
    return checkpoint(cfg.iterations)


# --- inference -----------------------------------------------------------------

def inference_patch(plan, extent, cap=None):
    """Per axis: the extent rounded up to the stride divisor, clipped to the cap."""
    cap = plan.infer_patch_cap if cap is None else tuple(cap)
    out = []
    for n, d, c in zip(extent, plan.divisor, cap):
        assert c >= d and c % d == 0, f"inference cap {c} is not a multiple of the divisor {d}"
        out.append(min(-(-n // d) * d, c))
    return tuple(out)


def tile_origins(extent, patch):
    """Grid-aligned origins along one axis; the last tile sits flush with the end."""
    if extent <= patch:
        return [0]
    origins = list(range(0, extent - patch, patch))
    origins.append(extent - patch)
    return origins


def predict_volume_probabilities(net, data, patch):
    """Average head-0 softmax over a flush-aligned tiling of ``data`` (X, Y, Z).

    Axes shorter than the patch are reflect-padded; returns probabilities
    (C, X, Y, Z) on the unpadded grid.
    """
    deficit = [max(p - n, 0) for n, p in zip(data.shape, patch)]
    before = [d // 2 for d in deficit]
    padded = reflect_pad(data, before, [d - b for d, b in zip(deficit, before)])
    C = net.plan.class_count
    total = np.zeros((C,) + padded.shape, dtype=np.float64)
    count = np.zeros(padded.shape, dtype=np.float64)
    grids = [tile_origins(n, p) for n, p in zip(padded.shape, patch)]
    with no_grad():
        for ox in grids[0]:
            for oy in grids[1]:
                for oz in grids[2]:
                    win = (slice(ox, ox + patch[0]), slice(oy, oy + patch[1]), slice(oz, oz + patch[2]))
                    x = np.ascontiguousarray(padded[win], dtype=np.float32)[None, None]
                    probs = softmax_channels(net.forward(x)[0]).data[0]
                    total[(slice(None),) + win] += probs
                    count[win] += 1.0
    probs = total / count
    crop = tuple(slice(b, b + n) for b, n in zip(before, data.shape))
    return probs[(slice(None),) + crop]


def predict(checkpoint, volume, patch_cap=None):
    """Segment ``volume``; output dims and spacing equal the input's exactly."""
    net = checkpoint.to_network() if isinstance(checkpoint, Checkpoint) else checkpoint
    if not isinstance(net, Network):
        raise TypeError("predict needs a Checkpoint or a Network")
    plan = net.plan
    work = normalize(resample(volume, plan.median_spacing))
    patch = inference_patch(plan, work.dims, patch_cap)
    probs = predict_volume_probabilities(net, work.data, patch)
    labels = np.argmax(probs, axis=0).astype(np.uint8)
    seg = SegmentationMap(labels, plan.median_spacing)
    return resample(seg, volume.spacing, volume.dims)


def evaluate(pred, ref, class_count=None):
    """Per-class hard Dice for classes >= 1 plus their mean under "mean_foreground".

    A class absent from both maps scores 1.0.
    """
    p = pred.labels if isinstance(pred, SegmentationMap) else np.asarray(pred)
    r = ref.labels if isinstance(ref, SegmentationMap) else np.asarray(ref)
    if p.shape != r.shape:
        raise ValueError(f"prediction dims {p.shape} differ from reference dims {r.shape}")
    if class_count is None:
        class_count = max(int(p.max(initial=0)), int(r.max(initial=0)), 1) + 1
    scores = {}
    for c in range(1, class_count):
        pc, rc = p == c, r == c
        denom = int(pc.sum()) + int(rc.sum())
        scores[c] = 1.0 if denom == 0 else 2.0 * int((pc & rc).sum()) / denom
    scores["mean_foreground"] = float(np.mean([scores[c] for c in range(1, class_count)]))
    return scores
