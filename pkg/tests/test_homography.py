import numpy as np
import pytest

from sgapgaze.homography import (
    Correspondence,
    DegeneracyError,
    Homography,
    HorizonError,
    InsufficientDataError,
    apply_homography,
    estimate_homography,
    estimate_homography_ransac,
    read_correspondences,
    reprojection_error,
    transform_gaze_chain,
    write_correspondences,
)


def random_h(rng):
    """Ground truth built from a similarity, a shear and a mild perspective row."""
    a = rng.uniform(-0.3, 0.3)
    s = rng.uniform(0.6, 1.6)
    sim = np.array([[s * np.cos(a), -s * np.sin(a), rng.uniform(-200, 200)],
                    [s * np.sin(a), s * np.cos(a), rng.uniform(-100, 100)],
                    [0, 0, 1.0]])
    shear = np.array([[1, rng.uniform(-0.2, 0.2), 0], [0, 1, 0], [0, 0, 1.0]])
    persp = np.array([[1, 0, 0], [0, 1, 0], [rng.uniform(-2e-4, 2e-4), rng.uniform(-2e-4, 2e-4), 1.0]])
    h = sim @ shear @ persp
    return h / h[2, 2]


def project(h, pts):
    out = []
    for x, y in pts:
        u, v, w = h @ np.array([x, y, 1.0])
        out.append((u / w, v / w))
    return np.array(out)


def test_translation_from_square_corners():
    src = np.array([[0, 0], [1, 0], [1, 1], [0, 1.0]])
    dst = src + [3.0, -2.0]
    h = estimate_homography((src, dst))
    np.testing.assert_allclose(h.h, [[1, 0, 3], [0, 1, -2], [0, 0, 1]], atol=1e-9)
    assert reprojection_error(h, (src, dst))[1] < 1e-9


def test_recovers_random_h():
    for seed in range(20):
        rng = np.random.default_rng(seed)
        h = random_h(rng)
        src = rng.uniform([0, 0], [1280, 720], size=(20, 2))
        est = estimate_homography((src, project(h, src)))
        assert np.abs(est.h - h).max() <= 1e-6
        assert est.h[2, 2] == 1.0


def test_degenerate_inputs():
    with pytest.raises(DegeneracyError):
        estimate_homography((np.array([[0, 0], [1, 1], [2, 2], [5, 3.0]]), np.array([[0, 0], [1, 1], [2, 2], [5, 3.0]])))
    with pytest.raises(InsufficientDataError):
        estimate_homography((np.zeros((3, 2)), np.zeros((3, 2))))
    with pytest.raises(DegeneracyError):
        estimate_homography((np.ones((6, 2)), np.ones((6, 2))))
    # all points on one line
    t = np.linspace(0, 1, 8)
    line = np.c_[t, 2 * t]
    with pytest.raises(DegeneracyError):
        estimate_homography((line, line + 1))


def test_apply_examples():
    p = np.array([12.5, -3.0])
    np.testing.assert_array_equal(apply_homography(Homography(np.eye(3)), p), p)
    t = Homography(np.array([[1, 0, 4], [0, 1, -7], [0, 0, 1.0]]))
    np.testing.assert_allclose(apply_homography(t, p), p + [4, -7], atol=1e-15)
    with pytest.raises(HorizonError):
        apply_homography(Homography(np.array([[1, 0, 0], [0, 1, 0], [1, 0, 0.0]])), (0.0, 5.0))


def test_roundtrip_and_composition():
    rng = np.random.default_rng(3)
    h1, h2 = Homography(random_h(rng)), Homography(random_h(rng))
    pts = rng.uniform([0, 0], [1280, 720], size=(50, 2))
    np.testing.assert_allclose(apply_homography(h1.inverse(), apply_homography(h1, pts)), pts, atol=1e-9)
    np.testing.assert_allclose(apply_homography(h2, apply_homography(h1, pts)), apply_homography(h2 @ h1, pts), atol=1e-9)


def test_scale_invariance_of_estimate():
    rng = np.random.default_rng(5)
    h = random_h(rng)
    src = rng.uniform([0, 0], [1280, 720], size=(12, 2))
    dst = project(h, src)
    k = 1e-3
    small = estimate_homography((src * k, dst * k))
    s = np.diag([k, k, 1.0])
    expect = s @ h @ np.linalg.inv(s)
    np.testing.assert_allclose(small.h, expect / expect[2, 2], rtol=1e-6, atol=1e-9)


def test_gaze_chain():
    rng = np.random.default_rng(7)
    h = random_h(rng)
    src = rng.uniform([0, 0], [1280, 720], size=(20, 2))
    est = estimate_homography((src, project(h, src)))
    gaze = rng.uniform([0, 0], [1280, 720], size=(200, 2))
    truth = project(h, gaze)
    err = max(np.hypot(*(np.array([m.x, m.y]) - t)) for m, t in
              ((transform_gaze_chain(g, est, 1280, 720), t) for g, t in zip(gaze, truth)))
    assert err < 1e-6
    m = transform_gaze_chain((10.0, 10.0), Homography(np.eye(3)), 1280, 720)
    assert (m.x, m.y, m.in_frame) == (10.0, 10.0, True)
    m = transform_gaze_chain((-5.0, 10.0), Homography(np.eye(3)), 1280, 720)
    assert m.x == -5.0 and not m.in_frame


def test_reprojection_perturbed():
    rng = np.random.default_rng(9)
    h = random_h(rng)
    src = rng.uniform([0, 0], [1280, 720], size=(5, 2))
    dst = project(h, src)
    dst[2, 0] += 5.0
    mean, mx = reprojection_error(Homography(h), (src, dst))
    assert abs(mx - 5.0) < 1e-9 and mean >= 1.0


def test_ransac_rejects_outliers():
    rng = np.random.default_rng(11)
    h = random_h(rng)
    src = rng.uniform([0, 0], [1280, 720], size=(30, 2))
    dst = project(h, src)
    dst[:6] += rng.uniform(50, 200, size=(6, 2))
    est, mask = estimate_homography_ransac((src, dst), seed=0)
    assert not mask[:6].any() and mask[6:].all()
    assert np.abs(est.h - h).max() < 1e-6
    again, mask2 = estimate_homography_ransac((src, dst), seed=0)
    assert np.array_equal(again.h, est.h) and np.array_equal(mask, mask2)


def test_correspondence_csv_roundtrip(tmp_path):
    pairs = [Correspondence((0.1 * i, 3.0 + i), (7.0 / 3 * i, -1.5), f"m{i}") for i in range(5)]
    write_correspondences(pairs, tmp_path / "c.csv")
    assert read_correspondences(tmp_path / "c.csv") == pairs
    (tmp_path / "bad.csv").write_text("marker_id,src_x\nm0,1\n")
    with pytest.raises(ValueError):
        read_correspondences(tmp_path / "bad.csv")


def test_json_roundtrip():
    h = Homography(random_h(np.random.default_rng(0)))
    assert np.array_equal(Homography.from_json(h.to_json()).h, h.h)
