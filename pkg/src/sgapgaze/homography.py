"""Planar homographies for moving gaze points from a reference image into the scene camera."""
from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np


class InsufficientDataError(ValueError):
    pass


class DegeneracyError(ValueError):
    pass


class HorizonError(ValueError):
    """The homogeneous denominator vanished (point maps to infinity)."""


@dataclass(frozen=True)
class Correspondence:
    src: tuple[float, float]
    dst: tuple[float, float]
    id: str = ""


@dataclass(frozen=True)
class Homography:
    h: np.ndarray

    def __post_init__(self):
        h = np.asarray(self.h, dtype=np.float64)
        if h.shape != (3, 3):
            raise ValueError(f"homography must be 3x3, got {h.shape}")
        if abs(h[2, 2]) > 1e-12:
            h = h / h[2, 2]
        object.__setattr__(self, "h", h)

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.h))

    def __matmul__(self, other: "Homography") -> "Homography":
        return Homography(self.h @ other.h)

    def to_json(self) -> str:
        return json.dumps({"h": [float(v) for v in self.h.ravel()]})

    @classmethod
    def from_json(cls, text: str) -> "Homography":
        vals = json.loads(text)
        vals = vals["h"] if isinstance(vals, dict) else vals
        return cls(np.asarray(vals, dtype=np.float64).reshape(3, 3))


def apply_homography(h: Homography | np.ndarray, p) -> np.ndarray:
    """Map ``(x, y)`` or an ``(n, 2)`` array of points."""
    m = h.h if isinstance(h, Homography) else np.asarray(h, dtype=np.float64)
    pts = np.asarray(p, dtype=np.float64)
    flat = pts.reshape(-1, 2)
    hom = np.c_[flat, np.ones(len(flat))] @ m.T
    den = hom[:, 2]
    if np.any(np.abs(den) <= 1e-12):
        raise HorizonError("point maps to the line at infinity")
    return (hom[:, :2] / den[:, None]).reshape(pts.shape)


def _normalizer(pts: np.ndarray) -> np.ndarray:
    c = pts.mean(axis=0)
    d = np.linalg.norm(pts - c, axis=1).mean()
    if d <= 0:
        raise DegeneracyError("all points coincide")
    s = np.sqrt(2.0) / d
    return np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1.0]])


def _as_arrays(pairs) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(pairs, tuple) and len(pairs) == 2 and not isinstance(pairs[0], Correspondence):
        src, dst = pairs
    else:
        src = [c.src for c in pairs]
        dst = [c.dst for c in pairs]
    return np.asarray(src, dtype=np.float64).reshape(-1, 2), np.asarray(dst, dtype=np.float64).reshape(-1, 2)


def estimate_homography(pairs, cond_threshold: float = 1e8) -> Homography:
    """Normalized DLT least-squares fit from >= 4 correspondences.

    ``pairs`` is a sequence of :class:`Correspondence` or a ``(src, dst)`` tuple of arrays.
    """
    src, dst = _as_arrays(pairs)
    n = len(src)
    if n < 4:
        raise InsufficientDataError(f"need at least 4 correspondences, got {n}")
    ts, td = _normalizer(src), _normalizer(dst)
    s = np.c_[src, np.ones(n)] @ ts.T
    d = np.c_[dst, np.ones(n)] @ td.T
    a = np.zeros((2 * n, 9))
    x, y = s[:, 0], s[:, 1]
    u, v = d[:, 0], d[:, 1]
    a[0::2, 0:3] = -s
    a[0::2, 6:9] = s * u[:, None]
    a[1::2, 3:6] = -s
    a[1::2, 6:9] = s * v[:, None]
    _, sv, vt = np.linalg.svd(a)
    # the solution must be the unique null direction: 8 well-separated singular values
    if sv[7] <= sv[0] / cond_threshold:
        raise DegeneracyError(f"degenerate configuration (condition {sv[0] / max(sv[7], 1e-300):.3g})")
    hn = vt[-1].reshape(3, 3)
    h = np.linalg.inv(td) @ hn @ ts
    if abs(np.linalg.det(h)) < 1e-12 * np.abs(h).max() ** 3:
        raise DegeneracyError("estimated homography is singular")
    return Homography(h)


def reprojection_error(h: Homography, pairs) -> tuple[float, float]:
    src, dst = _as_arrays(pairs)
    if len(src) < 1:
        raise InsufficientDataError("need at least one correspondence")
    r = np.linalg.norm(apply_homography(h, src) - dst, axis=1)
    return float(r.mean()), float(r.max())


def estimate_homography_ransac(
    pairs, threshold: float = 3.0, iterations: int = 1000, seed: int = 0
) -> tuple[Homography, np.ndarray]:
    """Seeded RANSAC around the normalized DLT; returns the refit model and the inlier mask."""
    src, dst = _as_arrays(pairs)
    n = len(src)
    if n < 4:
        raise InsufficientDataError(f"need at least 4 correspondences, got {n}")
    rng = np.random.default_rng(seed)
    best = np.zeros(n, dtype=bool)
    for _ in range(iterations):
        idx = rng.choice(n, 4, replace=False)
        try:
            h = estimate_homography((src[idx], dst[idx]))
            r = np.linalg.norm(apply_homography(h, src) - dst, axis=1)
        except (DegeneracyError, HorizonError):
            continue
        inl = r < threshold
        if inl.sum() > best.sum():
            best = inl
    if best.sum() < 4:
        raise DegeneracyError("RANSAC found no consensus set of 4 or more points")
    return estimate_homography((src[best], dst[best])), best


@dataclass(frozen=True)
class MappedGaze:
    x: float
    y: float
    in_frame: bool


def transform_gaze_chain(gaze_ref, h_ref_to_scene: Homography, width: float, height: float) -> MappedGaze:
    """Reference-image gaze -> scene camera pixels; out-of-frame points are flagged, not clamped."""
    x, y = apply_homography(h_ref_to_scene, gaze_ref)
    return MappedGaze(float(x), float(y), bool(0 <= x <= width and 0 <= y <= height))


CORR_HEADER = ("marker_id", "src_x", "src_y", "dst_x", "dst_y")


def read_correspondences(path: str | os.PathLike) -> list[Correspondence]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(CORR_HEADER) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        out = []
        for row in reader:
            c = Correspondence(
                (float(row["src_x"]), float(row["src_y"])),
                (float(row["dst_x"]), float(row["dst_y"])),
                row["marker_id"],
            )
            if not np.all(np.isfinite(c.src + c.dst)):
                raise ValueError(f"{path}: non-finite coordinates for marker {c.id}")
            out.append(c)
    return out


def write_correspondences(pairs: Sequence[Correspondence], path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CORR_HEADER)
        for c in pairs:
            w.writerow([c.id] + [repr(float(v)) for v in (*c.src, *c.dst)])
