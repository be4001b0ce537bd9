"""Acceptance criteria, one test each.  Every test prints a PASS/FAIL line
(also collected under "acceptance criteria" at the end of the run)."""
import itertools
import json
import os
import time

import numpy as np
import pytest

from autoseg3d import cli, engine
from autoseg3d.autodiff import LrSchedule, Tensor, conv3d, conv_transpose3d, instance_norm, leaky_relu, softmax_channels
from autoseg3d.datapipe import make_elastic_field, resample
from autoseg3d.network import build, generalized_dice_loss, one_hot, supervised_loss
from autoseg3d.planner import derive_depths, derive_patch_sizes, derive_transitions, make_plan, receptive_field_of
from autoseg3d.synthetic import sphere_case, write_sphere_dataset
from autoseg3d.volume import DatasetFingerprint, SegmentationMap, Spacing, Volume, read_volume, write_volume
from oracles import band_limited, gradcheck

# training length for the end-to-end task; the loss is pooled over voxels, so
# Dice keeps improving long after the loss looks small
E2E_ITERATIONS = 200
E2E_SEED = 0
# determinism runs are shorter: each step is a pure function of (seed, step)
DET_ITERATIONS = 4


def _timed(fn):
    t0 = time.perf_counter()
    out = fn()
    return out, time.perf_counter() - t0


def _fingerprint(shape, spacing=(1, 1, 1)):
    return DatasetFingerprint(Spacing.of(spacing), tuple(shape), 2, 1)


# --- 1. depth formula -----------------------------------------------------------

DEPTH_TABLE = [
    ((1, 1, 1), (0, 0, 0)),
    ((7, 7, 7), (0, 0, 0)),
    ((8, 8, 8), (1, 1, 1)),
    ((15, 16, 17), (1, 2, 2)),
    ((23, 24, 25), (2, 3, 3)),
    ((31, 32, 33), (3, 4, 4)),
    ((64, 64, 64), (4, 4, 4)),
    ((1024, 1024, 1024), (4, 4, 4)),
    ((512, 512, 20), (4, 4, 2)),
    ((320, 256, 12), (4, 4, 1)),
    ((2, 100, 1000), (0, 4, 4)),
    ((9, 40, 3), (1, 4, 0)),
    ((39, 47, 63), (4, 4, 4)),
    ((16, 8, 4), (2, 1, 0)),
    ((200, 150, 30), (4, 4, 3)),
    ((1023, 6, 24), (4, 0, 3)),
    ((128, 128, 8), (4, 4, 1)),
    ((5, 5, 1024), (0, 0, 4)),
    ((18, 26, 34), (2, 3, 4)),
    ((96, 48, 14), (4, 4, 1)),
]


def test_depth_formula_table(report):
    def run():
        return [(shape, want, derive_depths(_fingerprint(shape))) for shape, want in DEPTH_TABLE]

    rows, secs = _timed(run)
    bad = [(s, w, g) for s, w, g in rows if tuple(g) != w]
    ok = len(rows) == 20 and not bad and secs < 1
    report("depth formula", ok, f"{len(rows) - len(bad)}/{len(rows)} exact, {secs:.3f}s")
    assert ok, bad


# --- 2. receptive field ------------------------------------------------------------

def _sensitivity_footprint(depths):
    """Extent of the inputs that reach the centre bottleneck voxel (norm statistics held fixed)."""
    plan = make_plan(_fingerprint([8 * d for d in depths]))
    assert plan.depths == tuple(depths)
    net = build(plan, seed=3, dtype=np.float64)
    rf = plan.receptive_field
    ext = tuple(((r + 2 * d) // d + 1) * d for r, d in zip(rf, plan.divisor))
    x = Tensor(np.random.default_rng(0).standard_normal((1, 1) + ext), requires_grad=True)
    deep = net.encode(x, detach_norm_stats=True)[-1]
    centre = tuple(n // 2 for n in deep.shape[2:])
    deep[(0, slice(None)) + centre].sum().backward()
    nz = np.nonzero(x.grad[0, 0])
    return rf, tuple(int(a.max() - a.min() + 1) for a in nz)


def test_receptive_field(report):
    def run():
        full = receptive_field_of(derive_transitions((4, 4, 4)))
        return full, _sensitivity_footprint((2, 2, 2))

    (full, (rf2, footprint)), secs = _timed(run)
    # three 3-wide convs, then per level a stride-2 3-wide transition and two 3-wide convs
    ok = full == (157, 157, 157) and rf2 == (37, 37, 37) and footprint == rf2 and secs < 120
    report("receptive field", ok, f"depth 4: {full}, depth 2 recurrence {rf2} vs measured {footprint}, {secs:.1f}s")
    assert ok


# --- 3. patch sizes -----------------------------------------------------------------

def test_patch_sizes(report):
    def run():
        return [derive_patch_sizes((4, 4, 4), (1, 1, 1)), derive_patch_sizes((4, 4, 2), (0.8, 0.8, 3.0)),
                derive_patch_sizes((2, 4, 4), (5.0, 1, 1)), derive_patch_sizes((3, 4, 4), (2.0, 2.0, 2.0))]

    got, secs = _timed(run)
    want = [((128, 128, 128), (512, 512, 128)), ((128, 128, 32), (512, 512, 128)),
            ((32, 128, 128), (128, 512, 512)), ((64, 128, 128), (512, 512, 128))]
    ok = got == want and secs < 1
    report("patch sizes", ok, f"train {got[0][0]} / {got[1][0]}, inference caps {got[1][1]} and {got[2][1]}, "
                              f"{secs:.3f}s")
    assert ok, got


# --- 4. learning-rate schedule -----------------------------------------------------

def test_lr_schedule(report):
    def run():
        lr = LrSchedule()
        steps = range(0, 29901, 100)
        exact = all(lr(t + 100) == 0.984 * lr(t) for t in steps)
        return lr(0), lr(1000), exact

    (lr0, lr1000, exact), secs = _timed(run)
    rel = abs(lr1000 - 0.0005 * 0.984 ** 10) / (0.0005 * 0.984 ** 10)
    ok = lr0 == 0.0005 and rel < 1e-6 and exact and secs < 1
    report("learning-rate schedule", ok, f"lr(0)={lr0!r}, lr(1000) rel err {rel:.1e}, "
                                         f"100-step ratio exact={exact}, {secs:.3f}s")
    assert ok


# --- 5. gradients -------------------------------------------------------------------

GRAD_TRIALS = 20


def _dims(rng, lo, hi):
    return tuple(int(v) for v in rng.integers(lo, hi + 1, 3))


def _case_conv3d(rng):
    k = tuple(int(v) for v in rng.choice([1, 3], 3))
    s = tuple(int(v) for v in rng.integers(1, 3, 3))
    p = tuple(int(rng.integers(0, 2)) if kk == 3 else 0 for kk in k)
    ext = tuple(max(e, kk) for e, kk in zip(_dims(rng, 2, 5), k))
    ci, co = int(rng.integers(1, 3)), int(rng.integers(1, 3))
    x, w, b = rng.standard_normal((1, ci) + ext), rng.standard_normal((co, ci) + k), rng.standard_normal(co)
    probe = rng.standard_normal(conv3d(Tensor(x), Tensor(w), Tensor(b), stride=s, padding=p).shape)
    return lambda t: (conv3d(t[0], t[1], t[2], stride=s, padding=p) * probe).sum(), [x, w, b]


def _case_conv_transpose(rng):
    s = tuple(int(v) for v in rng.integers(1, 3, 3))
    ci, co = int(rng.integers(1, 3)), int(rng.integers(1, 4))
    x = rng.standard_normal((int(rng.integers(1, 3)), ci) + _dims(rng, 1, 3))
    w = rng.standard_normal((ci, co) + s)
    probe = rng.standard_normal((x.shape[0], co) + tuple(n * st for n, st in zip(x.shape[2:], s)))
    return lambda t: (conv_transpose3d(t[0], t[1], s) * probe).sum(), [x, w]


def _case_instance_norm(rng):
    c = int(rng.integers(1, 4))
    x = rng.standard_normal((int(rng.integers(1, 3)), c) + _dims(rng, 1, 4)) * 2
    if x[0, 0].size == 1:
        x = np.concatenate([x, x + 1], axis=2)  # a single voxel has zero variance
    gain, offset = rng.uniform(0.5, 1.5, c), rng.standard_normal(c)
    probe = rng.standard_normal(x.shape)
    return lambda t: (instance_norm(t[0], t[1], t[2]) * probe).sum(), [x, gain, offset]


def _case_leaky(rng):
    x = rng.standard_normal((1, int(rng.integers(1, 4))) + _dims(rng, 1, 5))
    x[np.abs(x) < 1e-3] = 0.5  # keep the kink out of the difference stencil
    probe = rng.standard_normal(x.shape)
    return lambda t: (leaky_relu(t[0]) * probe).sum(), [x]


def _case_softmax(rng):
    x = rng.standard_normal((int(rng.integers(1, 3)), int(rng.integers(2, 5))) + _dims(rng, 1, 3))
    probe = rng.standard_normal(x.shape)
    return lambda t: (softmax_channels(t[0]) * probe).sum(), [x]


def _case_gdl(rng):
    c = int(rng.integers(2, 5))
    shape = (int(rng.integers(1, 3)),) + _dims(rng, 1, 4)
    p = rng.uniform(0.05, 1, (shape[0], c) + shape[1:])
    ref = one_hot(rng.integers(0, c, shape), c, np.float64)
    return lambda t: generalized_dice_loss(t[0], ref), [p]


def _case_supervised(rng):
    c = int(rng.integers(2, 4))
    heads = int(rng.integers(1, 4))
    base = tuple(int(v) * 2 ** (heads - 1) for v in rng.integers(1, 3, 3))
    logits = [rng.standard_normal((1, c) + tuple(n >> h for n in base)) for h in range(heads)]
    labels = rng.integers(0, c, (1,) + base)
    return lambda t: supervised_loss(t, labels, c), logits


OPERATORS = {
    "conv3d": _case_conv3d,
    "conv_transpose3d": _case_conv_transpose,
    "instance_norm": _case_instance_norm,
    "leaky_relu": _case_leaky,
    "softmax": _case_softmax,
    "GDL": _case_gdl,
    "supervised_loss": _case_supervised,
}


def test_gradient_suite(report):
    def run():
        worst = {}
        for op, make in OPERATORS.items():
            rng = np.random.default_rng(sum(map(ord, op)))
            worst[op] = max(gradcheck(*make(rng)) for _ in range(GRAD_TRIALS))
        return worst

    worst, secs = _timed(run)
    ok = all(v < 1e-4 for v in worst.values()) and secs < 300
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    report("gradient suite", ok, f"{GRAD_TRIALS} random shapes per operator, worst rel err: {detail}; {secs:.1f}s")
    assert ok, worst


# --- 6. Dice loss identities -------------------------------------------------------

def test_gdl_identities(report):
    rng = np.random.default_rng(6)

    def loss(p, ref):
        return float(generalized_dice_loss(Tensor(p), ref).data)

    def run():
        labels = rng.integers(0, 4, (2, 6, 5, 4))
        ref = one_hot(labels, 4, np.float64)
        perfect = loss(ref, ref)
        uniform = [loss(np.full((1, 2) + s, 0.5), one_hot(rng.integers(0, 2, (1,) + s), 2, np.float64))
                   for s in [(4, 4, 4), (3, 7, 2), (9, 1, 5)]]
        miss = loss(one_hot((labels + 1) % 4, 4, np.float64), ref)
        probs = softmax_channels(Tensor(rng.standard_normal((2, 4, 6, 5, 4)))).data
        base = loss(probs, ref)
        perms = [list(p) for p in itertools.permutations(range(4))]
        invariant = all(loss(probs[:, p], ref[:, p]) == base for p in perms)
        return perfect, uniform, miss, invariant, len(perms)

    (perfect, uniform, miss, invariant, n_perm), secs = _timed(run)
    ok = (perfect <= 1e-5 and all(abs(u - 0.5) <= 1e-6 for u in uniform) and miss >= 1 - 1e-5
          and invariant and secs < 10)
    report("Dice loss identities", ok, f"perfect {perfect:.1e}, uniform {max(uniform, key=lambda u: abs(u - .5)):.7f}, "
                                       f"miss {miss:.6f}, {n_perm} permutations exact={invariant}, {secs:.2f}s")
    assert ok


# --- 7. resampling ------------------------------------------------------------------

def test_resampling(report):
    def run():
        rng = np.random.default_rng(7)
        identity = True
        for _ in range(10):
            dims, sp = _dims(rng, 2, 20), rng.uniform(0.4, 4, 3)
            v = Volume(rng.standard_normal(dims).astype(np.float32), sp)
            m = SegmentationMap(rng.integers(0, 5, dims).astype(np.uint8), sp)
            identity &= resample(v, sp).data.tobytes() == v.data.tobytes()
            identity &= resample(m, sp).labels.tobytes() == m.labels.tobytes()
        shapes, worst = True, 0.0
        for _ in range(30):
            dims = _dims(rng, 12, 40)
            sp, tgt = rng.uniform(0.5, 3, 3), rng.uniform(0.5, 3, 3)
            v = Volume(band_limited(dims, sp, tgt, rng).astype(np.float32), sp)
            back = resample(resample(v, tgt), sp, dims)
            shapes &= back.dims == dims and back.spacing == v.spacing
            worst = max(worst, float(np.abs(back.data - v.data).max()))
        closed = 0
        for _ in range(100):
            present = rng.choice(8, size=int(rng.integers(1, 5)), replace=False)
            m = SegmentationMap(rng.choice(present, size=_dims(rng, 2, 16)).astype(np.uint8), rng.uniform(0.5, 2, 3))
            closed += set(np.unique(resample(m, rng.uniform(0.5, 2, 3)).labels)) <= set(present)
        return identity, shapes, worst, closed

    (identity, shapes, worst, closed), secs = _timed(run)
    ok = identity and shapes and worst < 0.02 and closed == 100 and secs < 60
    report("resampling", ok, f"identity bit-exact={identity}, round-trip shape exact={shapes}, "
                             f"band-limited max err {worst:.4f}, label closure {closed}/100, {secs:.1f}s")
    assert ok


# --- 8. elastic isotropy ------------------------------------------------------------

def test_elastic_isotropy(report):
    spacing = np.array([2.0, 1.0, 1.0])

    def run():
        acc = np.zeros(3)
        for seed in range(1000):
            field = make_elastic_field((16, 32, 32), tuple(spacing), rng_seed=seed)
            mm = field * spacing[:, None, None, None]
            acc += (mm ** 2).mean(axis=(1, 2, 3))
        return np.sqrt(acc / 1000)

    std, secs = _timed(run)
    ratios = [std[0] / std[1], std[0] / std[2], std[1] / std[2]]
    ok = all(0.95 <= r <= 1.05 for r in ratios) and secs < 120
    report("elastic isotropy", ok, f"mm std {np.round(std, 3).tolist()}, ratios "
                                   f"{[round(float(r), 3) for r in ratios]}, {secs:.1f}s")
    assert ok


# --- 9/10. synthetic task ------------------------------------------------------------

def _cli(*args):
    code = cli.main([str(a) for a in args])
    assert code == 0, f"autoseg3d {args[0]} exited {code}"


@pytest.fixture(scope="module")
def sphere_task(tmp_path_factory):
    """10 training volumes plus 3 held-out ones, 64^3 at spacing (1,1,2)."""
    root = tmp_path_factory.mktemp("spheres")
    write_sphere_dataset(root / "train", 10, seed=0)
    held = []
    for i in range(3):
        image, labels = sphere_case(seed=(1, i))
        write_volume(image, root / f"held{i}_img.svf")
        held.append((root / f"held{i}_img.svf", labels))
    return root, held


def _pipeline(root, held, out, iterations, seed):
    """fingerprint -> plan -> train -> predict; returns (checkpoint path, prediction paths)."""
    out.mkdir(parents=True, exist_ok=True)
    _cli("fingerprint", "--dataset", root / "train", "--out", out / "fingerprint.json")
    _cli("plan", "--fingerprint", out / "fingerprint.json", "--out", out / "plan.json")
    _cli("train", "--dataset", root / "train", "--plan", out / "plan.json", "--out", out / "model.ck",
         "--iters", iterations, "--batch", 2, "--seed", seed)
    preds = []
    for i, (img, _) in enumerate(held):
        preds.append(out / f"pred{i}.svf")
        _cli("predict", "--model", out / "model.ck", "--input", img, "--output", preds[-1])
    return out / "model.ck", preds


@pytest.mark.slow
def test_end_to_end_synthetic_task(report, sphere_task, capsys):
    root, held = sphere_task
    (ck, preds), secs = _timed(lambda: _pipeline(root, held, root / "e2e", E2E_ITERATIONS, E2E_SEED))
    log = [json.loads(line) for line in capsys.readouterr().out.splitlines() if line.startswith("{")]
    plan = json.loads((root / "e2e" / "plan.json").read_text())
    dice = [engine.evaluate(read_volume(p), ref)["mean_foreground"] for p, (_, ref) in zip(preds, held)]
    mean = float(np.mean(dice))
    cores = os.cpu_count()
    last_loss = next(r["loss"] for r in reversed(log) if "loss" in r)
    ok = mean >= 0.90 and E2E_ITERATIONS <= 2000 and secs <= 30 * 60
    report("end-to-end synthetic task", ok,
           f"plan depths {plan['depths']} patch {plan['train_patch']}, {E2E_ITERATIONS} iterations at batch 2, "
           f"final loss {last_loss:.4f}, held-out Dice {[round(d, 3) for d in dice]} mean {mean:.3f}, "
           f"{secs / 60:.1f} min on {cores} core(s)")
    assert ok


def test_determinism(report, sphere_task, tmp_path):
    root, held = sphere_task

    def run():
        a = _pipeline(root, held, tmp_path / "a", DET_ITERATIONS, 11)
        b = _pipeline(root, held, tmp_path / "b", DET_ITERATIONS, 11)
        same_ck = a[0].read_bytes() == b[0].read_bytes()
        same_pred = all(p.read_bytes() == q.read_bytes() for p, q in zip(a[1], b[1]))

        from autoseg3d.planner import TaskPlan
        from autoseg3d.volume import load_manifest
        manifest = load_manifest(root / "train")
        plan = TaskPlan.from_json((tmp_path / "a" / "plan.json").read_text())
        half = engine.train(manifest, plan, engine.TrainConfig(iterations=DET_ITERATIONS // 2, batch_size=2, seed=11))
        engine.save_checkpoint(half, tmp_path / "half.ck")
        resumed = engine.train(manifest, plan, engine.TrainConfig(iterations=DET_ITERATIONS, batch_size=2, seed=11),
                               resume=engine.load_checkpoint(tmp_path / "half.ck"))
        engine.save_checkpoint(resumed, tmp_path / "resumed.ck")
        same_resume = (tmp_path / "resumed.ck").read_bytes() == a[0].read_bytes()
        return same_ck, same_pred, same_resume

    (same_ck, same_pred, same_resume), secs = _timed(run)
    ok = same_ck and same_pred and same_resume
    report("determinism", ok, f"{DET_ITERATIONS}-iteration runs: checkpoints identical={same_ck}, "
                              f"predictions identical={same_pred}, resume at step {DET_ITERATIONS // 2} "
                              f"identical={same_resume}, {secs:.0f}s")
    assert ok


# --- 11. inference round trip -----------------------------------------------------------

def test_inference_round_trip(report):
    plan = make_plan(_fingerprint((16, 16, 16)))  # depths (2,2,2): stride divisor 4
    net = build(plan, seed=5)
    div = plan.divisor

    def run():
        rng = np.random.default_rng(11)
        good, small, tiled = 0, 0, 0
        for i in range(50):
            cap = None
            if i % 5 == 0:  # 2x2x1 tiles under a 16^3 cap
                dims, sp = (int(rng.integers(17, 33)), int(rng.integers(17, 33)), int(rng.integers(1, 17))), (1, 1, 1)
                cap = (16, 16, 16)
            elif i % 5 == 1:  # smaller than one stride divisor on some axis
                dims, sp = _dims(rng, 1, 3), tuple(rng.uniform(0.5, 1.5, 3))
            else:
                dims, sp = _dims(rng, 1, 24), tuple(rng.uniform(0.5, 2.0, 3))
            v = Volume(rng.standard_normal(dims).astype(np.float32), sp)
            work = resample(v, plan.median_spacing).dims
            patch = engine.inference_patch(plan, work, cap)
            tiles = [len(engine.tile_origins(n, p)) for n, p in zip(work, patch)]
            small += any(n < d for n, d in zip(work, div))
            tiled += tiles == [2, 2, 1]
            seg = engine.predict(net, v, patch_cap=cap)
            good += seg.dims == v.dims and seg.spacing == v.spacing and int(seg.labels.max()) < plan.class_count
        return good, small, tiled

    (good, small, tiled), secs = _timed(run)
    ok = good == 50 and small > 0 and tiled > 0 and secs < 300
    report("inference round trip", ok, f"{good}/50 geometry preserved ({small} below one stride divisor, "
                                       f"{tiled} tiled 2x2x1), {secs:.1f}s")
    assert ok
