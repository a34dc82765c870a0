"""Acceptance checks; each prints one ACCEPTANCE line with PASS/FAIL and the measured numbers."""
import csv
import filecmp
import json
import math
import subprocess
import sys
import time
from dataclasses import replace
from fractions import Fraction

import numpy as np
import pytest

from sgapgaze import autodiff as ad
from sgapgaze import model as model_mod
from sgapgaze.data import SplitSpec, split_by_driver
from sgapgaze.encoders import EncoderConfig
from sgapgaze.heads import attention_logits
from sgapgaze.homography import (
    DegeneracyError,
    InsufficientDataError,
    Correspondence,
    estimate_homography,
    transform_gaze_chain,
    write_correspondences,
)
from sgapgaze.metrics import (
    HD_BIN_EDGES,
    accuracy_from_counts,
    angular_error_deg,
    bin_edges,
    direction_loss,
    normalized_error_pct,
    pog_loss,
)
from sgapgaze.model import Batch, ModelConfig, forward, init_parameters
from sgapgaze.streams import gaussian_weights
from sgapgaze.synth import SynthConfig, generate_synthetic
from sgapgaze.training import TrainConfig, evaluate, prepare_synthetic, train

CLI = [sys.executable, "-m", "sgapgaze.cli"]


@pytest.fixture
def report(capsys):
    def emit(n, name, ok, detail=""):
        with capsys.disabled():
            print(f"\nACCEPTANCE {n} {name}: {'PASS' if ok else 'FAIL'} ({detail})")
    return emit


def run_cli(*args, cwd=None):
    return subprocess.run(CLI + [str(a) for a in args], capture_output=True, text=True, cwd=cwd)


def random_batch(rng, n, gate_p=0.8):
    c = rng.uniform(0, 6, size=(2 * n, 2))
    return Batch(
        face=rng.normal(size=(n, 3, 28, 28)),
        eyes=rng.normal(size=(2 * n, 3, 28, 28)),
        eye_weights=gaussian_weights(c, 7, 7, 1.2),
        scene=rng.normal(size=(n, 3, 28, 28)),
        i_c=rng.uniform(size=(n, 4)),
        gate=(rng.uniform(size=n) < gate_p).astype(np.float64),
        pog=rng.uniform(size=(n, 2)),
        gaze_vec=None,
        scene_size=np.tile([1280.0, 720.0], (n, 1)),
    )


def all_outputs(out):
    i = out.intent
    arrs = [i.z_face, i.z_eye, i.z_iris, i.z_gaze, out.g_hat]
    p = out.pog
    arrs += [p.alpha, p.p_hat, p.delta_p, p.p_final]
    return [a.data for a in arrs]


# ---------------------------------------------------------------------------
# 1 gradient check
# ---------------------------------------------------------------------------

def test_c1_gradcheck(tmp_path, report):
    t0 = time.perf_counter()
    r = run_cli("gradcheck", "--run-dir", tmp_path)
    dt = time.perf_counter() - t0
    groups = json.loads((tmp_path / "run.json").read_text())["groups"] if r.returncode in (0, 5) else []
    worst = max((g["max_rel_error"] for g in groups), default=float("inf"))
    ok = r.returncode == 0 and worst <= 1e-4 and dt <= 300 and len(groups) > 0
    report("C1", "gradcheck", ok, f"{len(groups)} groups, worst rel err {worst:.2e}, {dt:.0f} s")
    assert ok, r.stdout + r.stderr


# ---------------------------------------------------------------------------
# 2 random forward invariants
# ---------------------------------------------------------------------------

def test_c2_random_forwards(monkeypatch, report):
    cfg = ModelConfig(encoder=EncoderConfig.miniature())
    captured = []

    def attend(z, tokens, params, scaling="none"):
        logits = attention_logits(z, tokens, params, scaling)
        captured.append(logits.data)
        return ad.softmax(logits)

    monkeypatch.setattr(model_mod, "attend_scene", attend)
    key_scales = (1e-3, 1e-2, 1e-1, 1.0, 10.0)
    lams = (0.1, 0.5, 2.0)
    simplex = phat_out = pfinal_out = norm_err = 0.0
    shift_bad = 0
    float_shift_dev = 0.0
    n_total = 0
    lo, hi = 1 / 14, 13 / 14
    for k in range(40):
        rng = np.random.default_rng(1000 + k)
        params = init_parameters(cfg, seed=k)
        params["key.w"].data *= key_scales[k % len(key_scales)]
        params["res.lam"].data[...] = lams[k % len(lams)]
        captured.clear()
        with ad.no_grad():
            out = forward(params, random_batch(rng, 250), cfg)
        a, ph, pf, g = out.pog.alpha.data, out.pog.p_hat.data, out.pog.p_final.data, out.g_hat.data
        n_total += len(a)
        simplex = max(simplex, np.abs(a.sum(-1) - 1).max(), -a.min())
        phat_out = max(phat_out, lo - ph.min(), ph.max() - hi)
        pfinal_out = max(pfinal_out, -pf.min(), pf.max() - 1)
        norm_err = max(norm_err, np.abs(np.linalg.norm(g, axis=-1) - 1).max())
        logits = captured[0]
        assert np.array_equal(ad.softmax(ad.Tensor(logits)).data, a)
        # logits on a 2^-20 grid so that integer and dyadic shifts are exact additions
        q = np.round(logits * 2.0**20) / 2.0**20
        base = ad.softmax(ad.Tensor(q)).data
        for c in (1.0, -7.0, 64.0, -1000.0, 2.0**-20, 3.5):
            if not np.array_equal(ad.softmax(ad.Tensor(q + c)).data, base):
                shift_bad += 1
        c = rng.uniform(-50, 50)
        float_shift_dev = max(float_shift_dev, np.abs(ad.softmax(ad.Tensor(logits + c)).data - a).max())
    ok = (simplex <= 1e-6 and phat_out <= 0 and pfinal_out <= 0 and norm_err <= 1e-6
          and shift_bad == 0 and n_total == 10_000)
    report("C2", "random forwards", ok,
           f"n={n_total}, simplex dev {simplex:.1e}, p_hat outside hull by {max(phat_out, 0):.1e}, "
           f"p_final outside [0,1] by {max(pfinal_out, 0):.1e}, |g|-1 {norm_err:.1e}, "
           f"exact-shift mismatches {shift_bad}, arbitrary float shift max dev {float_shift_dev:.1e}")
    assert ok


# ---------------------------------------------------------------------------
# 3 gating
# ---------------------------------------------------------------------------

def test_c3_gating(report):
    cfg = ModelConfig(encoder=EncoderConfig.miniature())
    params = init_parameters(cfg, seed=3)
    rng = np.random.default_rng(3)
    b = random_batch(rng, 64, gate_p=0.0)
    with ad.no_grad():
        ref = all_outputs(forward(params, b, cfg))
    changed = 0
    for _ in range(20):
        b2 = replace(b, i_c=rng.uniform(-10, 10, size=b.i_c.shape))
        with ad.no_grad():
            got = all_outputs(forward(params, b2, cfg))
        changed += sum(x.tobytes() != y.tobytes() for x, y in zip(ref, got))
    # gradient into the iris branch is exactly zero as well
    for p in params.values():
        p.zero_grad()
    loss = ad.sum_(forward(params, b, cfg).pog.p_final)
    loss.backward()
    iris_grad = max(np.abs(params[k].grad).max() for k in params if k.startswith("iris_fc"))

    params["key.w"].data[...] = 0.0
    off_center = 0
    n_scenes = 0
    for s in range(4):
        bb = random_batch(np.random.default_rng(100 + s), 100)
        bb = replace(bb, scene=bb.scene * 10.0 ** (s - 1))
        with ad.no_grad():
            ph = forward(params, bb, cfg).pog.p_hat.data
        off_center += int(np.sum(ph != 0.5))
        n_scenes += len(ph)
    syn = generate_synthetic(5, 50, SynthConfig(samples_per_driver=10))
    tcfg = TrainConfig()
    with ad.no_grad():
        ph = forward(params, model_mod.collate(prepare_synthetic(syn, tcfg)), cfg).pog.p_hat.data
    off_center += int(np.sum(ph != 0.5))
    n_scenes += len(ph)
    ok = changed == 0 and iris_grad == 0.0 and off_center == 0
    report("C3", "gating", ok,
           f"iris perturbations changing outputs: {changed}; iris grad max {iris_grad}; "
           f"W_k=0 p_hat != (0.5,0.5) in {off_center} of {n_scenes} scenes")
    assert ok


# ---------------------------------------------------------------------------
# 4 Gaussian maps
# ---------------------------------------------------------------------------

def direct_gaussian(cx, cy, H, W, sigma):
    vals = [[math.exp(-((c - cx) ** 2 + (r - cy) ** 2) / (2 * sigma * sigma)) for c in range(W)] for r in range(H)]
    z = math.fsum(v for row in vals for v in row)
    return np.array([[v / z for v in row] for row in vals])


def test_c4_gaussian_maps(report):
    tcfg = TrainConfig()
    prepared = prepare_synthetic(generate_synthetic(11, 200, SynthConfig(samples_per_driver=20)), tcfg)
    maps = [s.eye_weights for s in prepared]
    rng = np.random.default_rng(4)
    for H, W in ((7, 7), (14, 14), (28, 28), (7, 12)):
        for sigma in (0.5, 1.2, 3.0, 10.0):
            c = rng.uniform([-1, -1], [W, H], size=(50, 2))
            maps.append(gaussian_weights(c, H, W, sigma))
    sums = np.concatenate([m.reshape(-1, m.shape[-2] * m.shape[-1]).sum(-1) for m in maps])
    sum_dev = np.abs(sums - 1).max()
    centers = list(rng.uniform(0, 6, size=(200, 2))) + [(0.0, 0.0), (3.0, 3.0), (6.0, 6.0), (2.5, 4.75)]
    direct_dev = max(np.abs(gaussian_weights(np.array(c), 7, 7, 1.2) - direct_gaussian(c[0], c[1], 7, 7, 1.2)).max()
                     for c in centers)
    ok = sum_dev <= 1e-9 and direct_dev <= 1e-12
    report("C4", "gaussian maps", ok, f"{len(sums)} maps, max |sum-1| {sum_dev:.1e}, 7x7 sigma 1.2 vs direct {direct_dev:.1e}")
    assert ok


# ---------------------------------------------------------------------------
# 5 metric arithmetic
# ---------------------------------------------------------------------------

def test_c5_metric_arithmetic(report):
    counts = (1803, 5144, 5476, 6802, 8219, 10183, 12470)
    printed = (14.34, 40.92, 43.56, 54.11, 65.38, 81.00, 99.19)
    got = accuracy_from_counts(counts, 12571)
    exact = [float(Fraction(100 * c, 12571)) for c in counts]
    mism = [(p, round(g, 2), f"{g:.4f}") for p, g in zip(printed, got) if round(g, 2) != p]
    pct = normalized_error_pct(104.73, 1280, 720)
    edges_ok = tuple(bin_edges(1280)) == (0, 183, 366, 549, 732, 915, 1098, 1280) == HD_BIN_EDGES
    bins = (60, 203, 908, 8458, 2574, 317, 51)
    ok_acc = not mism and got == exact
    ok = ok_acc and round(pct, 2) == 7.13 and edges_ok and sum(bins) == 12571
    report("C5", "metric arithmetic", ok,
           f"accuracy mismatches (printed, recomputed, 4dp): {mism or 'none'}; "
           f"104.73 px -> {pct:.4f}%; edges ok {edges_ok}; bin counts sum {sum(bins)}")
    assert ok


# ---------------------------------------------------------------------------
# 6 losses and angles
# ---------------------------------------------------------------------------

def test_c6_losses_and_angles(report):
    checks = []
    for a in np.eye(3):
        for s in (1, -1):
            u = s * a
            checks.append(direction_loss(ad.Tensor(u), ad.Tensor(-u)).item() == 2.0)
    rng = np.random.default_rng(6)
    # random directions whose squared norm is exactly 1 in floating point
    n_unit = 0
    while n_unit < 100:
        v = rng.normal(size=3)
        v /= np.linalg.norm(v)
        if np.sum(v * v) != 1.0:
            continue
        n_unit += 1
        checks.append(direction_loss(ad.Tensor(v), ad.Tensor(-v)).item() == 2.0)
    dl_ok = all(checks)
    ang = []
    for _ in range(100):
        x, y = rng.normal(size=2)
        u = np.array([x, y, 0.0])
        ang += [angular_error_deg(u, u) == 0.0, angular_error_deg(u, np.array([-y, x, 0.0])) == 90.0,
                angular_error_deg(u, -u) == 180.0]
    for i in range(3):
        e = np.eye(3)
        ang += [angular_error_deg(e[i], e[i]) == 0.0, angular_error_deg(e[i], e[(i + 1) % 3]) == 90.0,
                angular_error_deg(e[i], -e[i]) == 180.0]
    ang_ok = all(ang)
    beta = 0.02
    jump = 0.0
    for axis in (0, 1):
        for sign in (1, -1):
            d = np.zeros(2)
            d[axis] = sign * beta
            at = pog_loss(np.zeros(2), -d, beta).item()
            inside = pog_loss(np.zeros(2), -d * (1 - 1e-15), beta).item()
            outside = pog_loss(np.zeros(2), -d * (1 + 1e-15), beta).item()
            quad = beta * beta / (2 * beta)
            lin = beta - beta / 2
            jump = max(jump, abs(quad - lin), abs(inside - at), abs(outside - at))
    ok = dl_ok and ang_ok and jump <= 1e-12
    report("C6", "losses and angles", ok,
           f"opposite-vector loss == 2.0: {dl_ok}; 0/90/180 exact: {ang_ok}; smooth-L1 boundary jump {jump:.1e}")
    assert ok


# ---------------------------------------------------------------------------
# 7 homography
# ---------------------------------------------------------------------------

def random_h(rng):
    a = rng.uniform(-0.3, 0.3)
    s = rng.uniform(0.6, 1.6)
    sim = np.array([[s * np.cos(a), -s * np.sin(a), rng.uniform(-200, 200)],
                    [s * np.sin(a), s * np.cos(a), rng.uniform(-100, 100)], [0, 0, 1.0]])
    persp = np.array([[1, rng.uniform(-0.2, 0.2), 0], [0, 1, 0],
                      [rng.uniform(-2e-4, 2e-4), rng.uniform(-2e-4, 2e-4), 1.0]])
    h = sim @ persp
    return h / h[2, 2]


def project(h, pts):
    q = np.c_[pts, np.ones(len(pts))] @ h.T
    return q[:, :2] / q[:, 2:]


def test_c7_homography(tmp_path, report):
    rng = np.random.default_rng(7)
    rec = 0.0
    for _ in range(100):
        h = random_h(rng)
        src = rng.uniform([0, 0], [1280, 720], size=(20, 2))
        est = estimate_homography((src, project(h, src)))
        rec = max(rec, np.abs(est.h - h).max())
    # map-gaze chain, in-process and through the CLI
    h = random_h(rng)
    src = rng.uniform([0, 0], [1280, 720], size=(20, 2))
    dst = project(h, src)
    gaze = rng.uniform([0, 0], [1280, 720], size=(500, 2))
    truth = project(h, gaze)
    est = estimate_homography((src, dst))
    chain = max(math.hypot(m.x - t[0], m.y - t[1])
                for m, t in ((transform_gaze_chain(g, est, 1280, 720), t) for g, t in zip(gaze, truth)))
    write_correspondences([Correspondence(tuple(s), tuple(d), f"m{i}") for i, (s, d) in enumerate(zip(src, dst))],
                          tmp_path / "corr.csv")
    with open(tmp_path / "gaze.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", "x", "y"])
        for i, (x, y) in enumerate(gaze):
            w.writerow([i, repr(float(x)), repr(float(y))])
    r = run_cli("map-gaze", "--correspondences", tmp_path / "corr.csv", "--gaze", tmp_path / "gaze.csv",
                "--out", tmp_path / "out" / "mapped.csv")
    assert r.returncode == 0, r.stderr
    with open(tmp_path / "out" / "mapped.csv") as fh:
        rows = list(csv.DictReader(fh))
    cli_chain = max(math.hypot(float(row["x2"]) - t[0], float(row["y2"]) - t[1]) for row, t in zip(rows, truth))
    # degenerate inputs
    rejected = []
    t = np.linspace(0, 100, 10)
    line = np.c_[t, 0.5 * t + 3]
    cases = [
        ((line, line * 2), DegeneracyError),
        ((np.full((8, 2), 5.0), np.full((8, 2), 5.0)), DegeneracyError),
        ((src[:3], dst[:3]), InsufficientDataError),
    ]
    for pairs, exc in cases:
        try:
            estimate_homography(pairs)
            rejected.append(False)
        except exc:
            rejected.append(True)
    write_correspondences([Correspondence(tuple(s), tuple(d), f"m{i}") for i, (s, d) in enumerate(zip(line, line * 2))],
                          tmp_path / "line.csv")
    r2 = run_cli("map-gaze", "--correspondences", tmp_path / "line.csv", "--gaze", tmp_path / "gaze.csv",
                 "--out", tmp_path / "deg" / "mapped.csv")
    rejected.append(r2.returncode == 4 and not (tmp_path / "deg" / "mapped.csv").exists())
    ok = rec <= 1e-6 and chain < 1e-6 and r.returncode == 0 and cli_chain < 1e-6 and all(rejected)
    report("C7", "homography", ok,
           f"100 H max entry err {rec:.1e}; chain max err {chain:.1e} px (cli {cli_chain:.1e} px); "
           f"degenerate rejected {sum(rejected)}/{len(rejected)}")
    assert ok


# ---------------------------------------------------------------------------
# 8 end-to-end learning
# ---------------------------------------------------------------------------

@pytest.mark.slow
def test_c8_end_to_end(report):
    t0 = time.perf_counter()
    mc = np.random.default_rng(8).uniform(size=(1_000_000, 2))
    mc_base = float(np.hypot(*(mc - 0.5).T).mean())
    closed = (math.sqrt(2) + math.log(1 + math.sqrt(2))) / 6
    base_ok = abs(mc_base - 0.3826) < 1e-3 and abs(closed - 0.3826) < 5e-5
    baseline = 0.3826

    syn = generate_synthetic(2024, 2000, SynthConfig(samples_per_driver=100))
    recs = [r for r, _ in syn]
    drivers = sorted({r.driver_id for r in recs})
    spec = SplitSpec.ordered(drivers, 14, 3)
    tr_r, va_r, te_r = split_by_driver(recs, spec)
    by_id = {id(r): im for r, im in syn}
    cfg = TrainConfig(epochs=4, seed=0)
    prep = lambda rs: prepare_synthetic([(r, by_id[id(r)]) for r in rs], cfg)  # noqa: E731
    tr, te = prep(tr_r), prep(te_r)
    full = train(tr, cfg)
    err_full = evaluate(te, full.params, cfg, train_drivers=sorted(spec.train_drivers)).mean_norm_error
    bcfg = replace(cfg, scene_blind=True)
    blind = train(tr, bcfg)
    err_blind = evaluate(te, blind.params, bcfg, train_drivers=sorted(spec.train_drivers)).mean_norm_error
    center = float(np.mean([np.hypot(*(s.pog - 0.5)) for s in te]))
    dt = time.perf_counter() - t0
    ok = (base_ok and err_full < 0.10 and err_blind > err_full and dt <= 900
          and (len(tr_r), len(va_r), len(te_r)) == (1400, 300, 300))
    report("C8", "end-to-end learning", ok,
           f"test mean normalized error {err_full:.4f} (scene-blind {err_blind:.4f}); "
           f"uniform-square center baseline {baseline} (MC 1e6: {mc_base:.4f}, closed form {closed:.5f}); "
           f"center baseline on this test set {center:.4f}; {dt:.0f} s")
    assert ok


# ---------------------------------------------------------------------------
# 9 determinism
# ---------------------------------------------------------------------------

def same_tree(a, b):
    cmp = filecmp.dircmp(a, b)
    if cmp.left_only or cmp.right_only:
        return False
    _, mismatch, errors = filecmp.cmpfiles(a, b, cmp.common_files, shallow=False)
    return not mismatch and not errors and all(same_tree(a / d, b / d) for d in cmp.common_dirs)


def test_c9_determinism(tmp_path, report):
    for k in ("a", "b"):
        assert run_cli("synth", "--n", 60, "--seed", 9, "--per-driver", 10, "--out", tmp_path / k / "data").returncode == 0
    synth_same = same_tree(tmp_path / "a" / "data", tmp_path / "b" / "data")
    manifest = tmp_path / "a" / "data" / "manifest.jsonl"
    for k in ("a", "b"):
        r = run_cli("train", "--manifest", manifest, "--out", tmp_path / k / "run" / "model.ckpt",
                    "--epochs", 3, "--batch-size", 8)
        assert r.returncode == 0, r.stderr
    curve_a = (tmp_path / "a" / "run" / "loss_curve.csv").read_bytes()
    curve_same = curve_a == (tmp_path / "b" / "run" / "loss_curve.csv").read_bytes()
    ckpt_same = (tmp_path / "a" / "run" / "model.ckpt").read_bytes() == (tmp_path / "b" / "run" / "model.ckpt").read_bytes()
    for k in ("a", "b"):
        r = run_cli("eval", "--manifest", manifest, "--ckpt", tmp_path / "a" / "run" / "model.ckpt",
                    "--out", tmp_path / k / "eval")
        assert r.returncode == 0, r.stderr
        (tmp_path / k / "eval" / "run.json").unlink()
    eval_same = same_tree(tmp_path / "a" / "eval", tmp_path / "b" / "eval")
    ok = synth_same and curve_same and ckpt_same and eval_same
    report("C9", "determinism", ok,
           f"synth identical {synth_same}; loss curve identical {curve_same} ({curve_a.count(b'train')} epochs); "
           f"checkpoint identical {ckpt_same}; eval reports identical {eval_same}")
    assert ok
