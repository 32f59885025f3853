"""Acceptance suite: one test and one PASS/FAIL line per criterion.

Run alone with ``pytest tests/test_acceptance.py -v`` (the verdict lines are
printed even without ``-s``) or ``python tests/test_acceptance.py``.
"""
import time

import numpy as np
import pytest

from gradutil import gradient_report
from oracles import (
    confusion_enumerate,
    conv2d_loops,
    maxpool_windows,
    stitch_pixelwise,
    transposed_conv_zero_stuffing,
)
from test_graph import jitter, smooth_instance
from r2upp.blocks import BlockSpec, init_block, rrcl_block
from r2upp.cli import main
from r2upp.data import extract_patches, patch_grid, read_manifest, stitch_patches, synth_dataset, write_samples
from r2upp.graph import PRESETS, ArchitectureConfig, NestedUNet, count_parameters, forward, prune
from r2upp.metrics import all_metrics, hybrid_loss, total_loss
from r2upp.tensor import (
    Parameter,
    Tensor,
    _result,
    add,
    batchnorm,
    concat_channels,
    conv2d,
    maxpool_2x2,
    mean_of,
    relu,
    scale,
    sigmoid,
    slice_channels,
    upsample_2x,
)
from r2upp.trainer import TrainConfig, evaluate, fit

TITLES = {
    1: "parameter-count parity",
    2: "gradient correctness",
    3: "oracle equivalence",
    4: "depth embedding",
    5: "deep-supervision identity",
    6: "desk-scale learning",
    7: "patch count reproduction",
    8: "training determinism",
    9: "ensemble contract",
}


def verdict(capsys, number, ok, detail):
    with capsys.disabled():
        print(f"\n{'PASS' if ok else 'FAIL'} [{number}] {TITLES[number]}: {detail}")
    assert ok, detail


def wsum(y, w):
    return _result(np.array((y.data * w).sum()), [y], lambda g: [g * w], "wsum")


# ---------------------------------------------------------------------------
# 1
# ---------------------------------------------------------------------------

def test_acceptance_1_parameter_counts(capsys):
    start = time.perf_counter()
    rows, ok = [], True
    for key, (name, arch, ref) in PRESETS.items():
        n = count_parameters(arch)
        delta = n / ref - 1
        within = abs(delta) <= 0.10
        ok &= within
        label = f"{name} t={arch.t}" if arch.block_kind == "rrcl" else name
        rows.append(f"{label} {n / 1e6:.2f}M vs {ref / 1e6:.1f}M ({delta:+.1%}{'' if within else ' OUT'})")
    elapsed = time.perf_counter() - start
    ok &= elapsed < 1.0
    verdict(capsys, 1, ok, "; ".join(rows) + f"; {elapsed * 1e3:.0f} ms")


# ---------------------------------------------------------------------------
# 2
# ---------------------------------------------------------------------------

def primitive_cases(rng):
    """(name, loss_fn, [(name, tensor)]) for every differentiable primitive."""
    def t(shape, **kw):
        return Tensor(rng.normal(size=shape), requires_grad=True, **kw)

    def p(name, shape):
        return Parameter(name, rng.normal(size=shape))

    cases = []
    x, w, b = t((2, 2, 6, 6)), p("w", (3, 2, 3, 3)), p("b", 3)
    for stride, pad in ((1, 0), (1, 1), (2, 1)):
        up = rng.normal(size=conv2d(x, w, b, stride, pad).shape)
        cases.append((f"conv2d s{stride}p{pad}", lambda s=stride, q=pad, u=up: wsum(conv2d(x, w, b, s, q), u), [("x", x), ("w", w), ("b", b)]))
    xu, wu, bu = t((2, 3, 3, 4)), p("w", (3, 2, 2, 2)), p("b", 2)
    uu = rng.normal(size=(2, 2, 6, 8))
    cases.append(("upsample_2x", lambda: wsum(upsample_2x(xu, wu, bu), uu), [("x", xu), ("w", wu), ("b", bu)]))
    xp = t((2, 2, 6, 6))
    up_ = rng.normal(size=(2, 2, 3, 3))
    cases.append(("maxpool_2x2", lambda: wsum(maxpool_2x2(xp)[0], up_), [("x", xp)]))
    xb = t((2, 3, 4, 4))
    g, be = Parameter("g", rng.uniform(0.5, 1.5, size=3)), p("beta", 3)
    rm, rv = rng.normal(size=3), rng.uniform(0.5, 2.0, size=3)
    ub = rng.normal(size=xb.shape)
    for train in (True, False):
        cases.append((
            f"batchnorm {'train' if train else 'infer'}",
            lambda tr=train: wsum(batchnorm(xb, g, be, rm.copy(), rv.copy(), train=tr), ub),
            [("x", xb), ("gamma", g), ("beta", be)],
        ))
    xr = Tensor(rng.uniform(0.1, 1.0, size=(2, 3, 4, 4)) * rng.choice([-1.0, 1.0], size=(2, 3, 4, 4)), requires_grad=True)
    ur = rng.normal(size=xr.shape)
    cases.append(("relu", lambda: wsum(relu(xr), ur), [("x", xr)]))
    xs = t((2, 3, 4, 4))
    cases.append(("sigmoid", lambda: wsum(sigmoid(xs), ur), [("x", xs)]))
    a1, a2 = t((1, 2, 3, 3)), t((1, 3, 3, 3))
    uc = rng.normal(size=(1, 5, 3, 3))
    cases.append(("concat_channels", lambda: wsum(concat_channels([a1, a2]), uc), [("a", a1), ("b", a2)]))
    cases.append(("slice_channels", lambda: wsum(slice_channels(a2, 1, 3), uc[:, :2]), [("x", a2)]))
    b1, b2, b3 = t((1, 2, 3, 3)), t((1, 2, 3, 3)), t((1, 2, 3, 3))
    ua = rng.normal(size=b1.shape)
    cases.append(("add", lambda: wsum(add(b1, b2), ua), [("a", b1), ("b", b2)]))
    cases.append(("scale", lambda: wsum(scale(b1, -1.7), ua), [("x", b1)]))
    cases.append(("mean_of", lambda: wsum(mean_of([b1, b2, b3]), ua), [("a", b1), ("b", b2), ("c", b3)]))
    y = (rng.uniform(size=(2, 1, 4, 4)) > 0.5).astype(float)
    ph = Tensor(rng.uniform(0.05, 0.95, size=y.shape), requires_grad=True)
    cases.append(("hybrid_loss", lambda: hybrid_loss(y, ph), [("p", ph)]))
    heads = [Tensor(rng.uniform(0.05, 0.95, size=y.shape), requires_grad=True) for _ in range(2)]
    cases.append(("total_loss", lambda: total_loss(y, heads, [0.5, 1.5]), [("h1", heads[0]), ("h2", heads[1])]))
    return cases


def test_acceptance_2_gradients(capsys):
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = {}
    for name, fn, named in primitive_cases(rng):
        worst[name] = max(gradient_report(fn, named).values())
    for t in (1, 2):
        spec = BlockSpec("rrcl", 2, 3, t)
        params, _ = init_block(spec, np.random.default_rng(10 + t))
        for prm in params.values():
            prm.data[...] = rng.normal(scale=0.5, size=prm.data.shape)
        x = Tensor(rng.normal(size=(2, 2, 5, 5)), requires_grad=True)
        up = rng.normal(size=(2, 3, 5, 5))
        rep = gradient_report(lambda: wsum(rrcl_block(x, params, None, spec), up), [("x", x)] + list(params.items()))
        worst[f"rrcl_block t={t}"] = max(rep.values())
    cfg = ArchitectureConfig(depth=2, filters=(4, 8, 12), t=2)
    model, x, y = smooth_instance(cfg)

    def loss():
        res = model.forward(x, train=True)
        return total_loss(y, [res.heads[q] for q in sorted(res.heads)], [1.0, 1.0])

    rep = gradient_report(loss, [("input", x)] + [(p.name, p) for p in model.parameters()], max_entries=8)
    worst["D=2 end-to-end"] = max(rep.values())
    elapsed = time.perf_counter() - start
    bad = {k: v for k, v in worst.items() if not v <= 1e-4}
    ok = not bad and elapsed < 120
    detail = f"{len(worst)} checks, max rel err {max(worst.values()):.1e}, {elapsed:.1f} s"
    verdict(capsys, 2, ok, detail + (f", failing {bad}" if bad else ""))


# ---------------------------------------------------------------------------
# 3
# ---------------------------------------------------------------------------

def anchors_brute(length, size, stride, edge):
    out = [r for r in range(length - size + 1) if r % stride == 0]
    if edge and out[-1] + size < length:
        out.append(length - size)
    return out


def test_acceptance_3_oracles(capsys):
    start = time.perf_counter()
    rng = np.random.default_rng(31)
    errs = {"conv2d": 0.0, "maxpool": 0.0, "upsample": 0.0, "metrics": 0.0, "patches": 0.0}
    n = 120
    for _ in range(n):
        b, c, o = int(rng.integers(1, 3)), int(rng.integers(1, 4)), int(rng.integers(1, 4))
        h, w = int(rng.integers(3, 9)), int(rng.integers(3, 9))
        k, pad, stride = int(rng.choice([1, 3])), int(rng.integers(0, 2)), int(rng.choice([1, 2]))
        x, wt, bias = rng.normal(size=(b, c, h, w)), rng.normal(size=(o, c, k, k)), rng.normal(size=o)
        y = conv2d(Tensor(x), Tensor(wt), Tensor(bias), stride, pad).data
        errs["conv2d"] = max(errs["conv2d"], np.max(np.abs(y - conv2d_loops(x, wt, bias, stride, pad))))

        shape = (b, c, 2 * int(rng.integers(1, 5)), 2 * int(rng.integers(1, 5)))
        xp = rng.integers(0, 4, size=shape).astype(float) if rng.integers(0, 2) else rng.normal(size=shape)
        errs["maxpool"] = max(errs["maxpool"], np.max(np.abs(maxpool_2x2(Tensor(xp))[0].data - maxpool_windows(xp))))

        xu, wu, bu = rng.normal(size=(b, c, h // 2 + 1, w // 2 + 1)), rng.normal(size=(c, o, 2, 2)), rng.normal(size=o)
        yu = upsample_2x(Tensor(xu), Tensor(wu), Tensor(bu)).data
        errs["upsample"] = max(errs["upsample"], np.max(np.abs(yu - transposed_conv_zero_stuffing(xu, wu, bu))))

        g = rng.uniform(size=(h, w)) < rng.uniform()
        pr = rng.uniform(size=(h, w)) < rng.uniform()
        tp, tn, fp, fn = confusion_enumerate(g, pr)
        m = all_metrics(g.astype(np.uint8), pr.astype(np.uint8))
        ref = {
            "dice": 2 * tp / (2 * tp + fp + fn) if tp + fp + fn else 1.0,
            "iou": tp / (tp + fp + fn) if tp + fp + fn else 1.0,
            "accuracy": (tp + tn) / g.size,
            "sensitivity": tp / (tp + fn) if tp + fn else 1.0,
            "specificity": tn / (tn + fp) if tn + fp else 1.0,
        }
        errs["metrics"] = max(errs["metrics"], max(abs(m[key] - ref[key]) for key in ref))

        ph, pw = int(rng.integers(4, 16)), int(rng.integers(4, 16))
        size, pstride, edge = int(rng.integers(1, min(ph, pw) + 1)), int(rng.integers(1, 5)), bool(rng.integers(0, 2))
        img = rng.uniform(size=(ph, pw))
        grid, patches = extract_patches(img, size, pstride, edge)
        want = [(r, cc) for r in anchors_brute(ph, size, pstride, edge) for cc in anchors_brute(pw, size, pstride, edge)]
        if list(grid.anchors) != want:
            errs["patches"] = np.inf
        crops = np.stack([img[r : r + size, cc : cc + size] for r, cc in want])
        preds = rng.uniform(size=crops.shape)
        out, _ = stitch_patches(preds, grid)
        errs["patches"] = max(errs["patches"], np.max(np.abs(patches - crops)), np.max(np.abs(out - stitch_pixelwise(preds, want, (ph, pw), size))))
    elapsed = time.perf_counter() - start
    tol = {"conv2d": 1e-10, "maxpool": 0.0, "upsample": 1e-10, "metrics": 0.0, "patches": 1e-12}
    ok = all(errs[k] <= tol[k] for k in errs) and elapsed < 60
    detail = ", ".join(f"{k} {errs[k]:.1e}" for k in errs)
    verdict(capsys, 3, ok, f"{n} instances each; max abs err {detail}; {elapsed:.1f} s")


# ---------------------------------------------------------------------------
# 4
# ---------------------------------------------------------------------------

def test_acceptance_4_depth_embedding(capsys):
    cfg = ArchitectureConfig(depth=4, filters=(2, 4, 6, 8, 10), t=2)
    x = np.random.default_rng(4).uniform(size=(2, 1, 32, 32))
    ok, checked = True, 0
    for train in (False, True):
        full = jitter(NestedUNet(cfg, seed=8), 8).forward(x, train=train)
        for q in range(1, 5):
            model = jitter(NestedUNet(cfg, seed=8), 8)
            sub = forward(prune(model.plan, q), model, x, train=train)
            ok &= list(sub.heads) == [q] and sub.heads[q].data.tobytes() == full.heads[q].data.tobytes()
            checked += 1
    verdict(capsys, 4, ok, f"q=1..4 in train and inference mode, {checked} bit-exact comparisons")


# ---------------------------------------------------------------------------
# 5
# ---------------------------------------------------------------------------

def test_acceptance_5_deep_supervision(capsys):
    cfg = ArchitectureConfig(depth=4, filters=(2, 4, 6, 8, 10), t=2)
    rng = np.random.default_rng(5)
    x = rng.uniform(size=(2, 1, 16, 16))
    y = (rng.uniform(size=(2, 1, 16, 16)) > 0.5).astype(float)
    res = jitter(NestedUNet(cfg, seed=5), 5).forward(x, train=True)
    heads = [res.heads[q] for q in sorted(res.heads)]
    parts = [hybrid_loss(y, h).item() for h in heads]
    last = total_loss(y, heads, [0, 0, 0, 1]).item()
    both = total_loss(y, heads, [1, 1, 1, 1]).item()
    ok = last == parts[3] and both == parts[0] + parts[1] + parts[2] + parts[3]
    verdict(capsys, 5, ok, f"eta=(0,0,0,1): {last!r} vs {parts[3]!r}; eta=(1,1,1,1): {both!r} vs {sum(parts)!r}")


# ---------------------------------------------------------------------------
# 6
# ---------------------------------------------------------------------------

@pytest.mark.slow
def test_acceptance_6_desk_scale_learning(capsys):
    start = time.perf_counter()
    arch = ArchitectureConfig(depth=4, filters=(8, 16, 32, 64, 128), t=2)
    results = []
    for seed in range(5):
        data = synth_dataset(seed, 8, 64)
        model = NestedUNet(arch, seed=seed)
        res = fit(model, data, data, TrainConfig(learning_rate=3e-4, max_epochs=200, patience=200, batch_size=4, seed=seed, target_dice=0.95))
        dice = evaluate(model, data).mean["dice"]
        results.append((seed, len(res.history), dice))
    elapsed = time.perf_counter() - start
    reached = sum(d >= 0.95 for _, _, d in results)
    ok = reached == 5 and elapsed < 15 * 60
    runs = ", ".join(f"seed {s}: dice {d:.3f} after {e} epochs" for s, e, d in results)
    verdict(capsys, 6, ok, f"{reached}/5 seeds reach train dice >= 0.95 ({runs}); {elapsed / 60:.1f} min")


# ---------------------------------------------------------------------------
# 7
# ---------------------------------------------------------------------------

def test_acceptance_7_patch_counts(capsys):
    per_image = len(patch_grid((535, 535), 96, 5, edge_anchored=False).anchors)
    total = 20 * per_image
    verdict(capsys, 7, per_image == 7744 and total == 154880, f"{per_image} patches per image, {total} over 20 images")


# ---------------------------------------------------------------------------
# 8 and 9
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def two_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("accept")
    write_samples(root / "data", synth_dataset(11, 4, 32))
    manifest = root / "data" / "manifest.tsv"
    outs = []
    for k in range(2):
        out = root / f"run{k}"
        argv = ["train", "--seed", "3"]
        for kv in (
            "arch.filters=[4,6,8,10,12]",
            "trainer.max_epochs=3",
            "trainer.batch_size=2",
            f"data.train_manifest={manifest}",
            f"output_dir={out}",
        ):
            argv += ["--set", kv]
        assert main(argv) == 0
        outs.append(out)
    return manifest, outs


def test_acceptance_8_determinism(capsys, two_runs):
    _, (a, b) = two_runs
    same = {name: (a / name).read_bytes() == (b / name).read_bytes() for name in ("best.ckpt", "final.ckpt", "history.csv")}
    verdict(capsys, 8, all(same.values()), ", ".join(f"{k} {'identical' if v else 'DIFFERS'}" for k, v in same.items()))


def test_acceptance_9_ensemble(capsys, two_runs, tmp_path):
    manifest, (run, _) = two_runs
    image = read_manifest(manifest)[0].image_path
    maps = {}
    for mode in ("ensemble", "L1", "L2", "L3", "L4"):
        prefix = tmp_path / mode
        assert main(["predict", "--checkpoint", str(run / "best.ckpt"), "--image", str(image), "--mode", mode, "--out", str(prefix)]) == 0
        maps[mode] = np.load(f"{prefix}_prob.npy")
    err = np.max(np.abs(maps["ensemble"] - (maps["L1"] + maps["L2"] + maps["L3"] + maps["L4"]) / 4))
    spread = max(np.max(np.abs(maps[f"L{q}"] - maps["L4"])) for q in (1, 2, 3))
    verdict(capsys, 9, err <= 1e-12 and spread > 0, f"max |ensemble - mean(L1..L4)| = {err:.1e} (depth maps differ by up to {spread:.2f})")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q"]))
