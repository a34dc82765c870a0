"""Synthetic face/scene pairs whose point of gaze is known exactly.

The scene holds a bright blob at the gaze point over structured clutter, and
both irises in the schematic face are displaced by ``gain * (p - 0.5)`` inside
their eye boxes, so the gaze can be read from either modality.
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import SampleRecord, write_manifest, write_ppm


@dataclass(frozen=True)
class SynthConfig:
    face_size: tuple[int, int] = (96, 96)      # (W, H)
    scene_size: tuple[int, int] = (256, 144)   # (W, H)
    eye_box: tuple[int, int] = (26, 16)        # (w, h)
    iris_gain: float = 0.8
    iris_radius: float = 3.0
    blob_sigma: float = 0.045                  # fraction of scene width
    clutter: float = 0.35
    focal_scale: tuple[float, float] = (1.2, 0.7)
    samples_per_driver: int = 100
    pog_range: tuple[float, float] = (0.1, 0.9)
    p_one_invalid: float = 0.10
    p_both_invalid: float = 0.02


@dataclass
class SyntheticImages:
    face: np.ndarray   # uint8 (H, W, 3)
    scene: np.ndarray  # uint8 (H, W, 3)


def iris_offset(pog, gain: float) -> tuple[float, float]:
    """Normalized within-box iris position for a gaze point."""
    u, v = pog
    return 0.5 + gain * (u - 0.5), 0.5 + gain * (v - 0.5)


def pog_from_iris(iris, gain: float) -> tuple[float, float]:
    cx, cy = iris
    return 0.5 + (cx - 0.5) / gain, 0.5 + (cy - 0.5) / gain


def gaze_vector(pog, focal_scale=(1.2, 0.7)) -> np.ndarray:
    u, v = pog
    g = np.array([(u - 0.5) * focal_scale[0], (v - 0.5) * focal_scale[1], 1.0])
    return g / np.linalg.norm(g)


def pog_from_vector(g, focal_scale=(1.2, 0.7)) -> tuple[float, float]:
    """Pinhole back-projection of a gaze vector onto the unit square."""
    return 0.5 + g[0] / g[2] / focal_scale[0], 0.5 + g[1] / g[2] / focal_scale[1]


def _driver_look(seed: int, d: int, cfg: SynthConfig) -> dict:
    rng = np.random.default_rng([seed, 1_000_003, d])
    fw, fh = cfg.face_size
    return {
        "skin": rng.uniform(120, 220, 3) * np.array([1.0, 0.85, 0.7]),
        "eye_y": fh * rng.uniform(0.36, 0.44),
        "eye_dx": fw * rng.uniform(0.17, 0.21),
        "bg": rng.uniform(30, 90, 3),
    }


def _disk(canvas: np.ndarray, cx: float, cy: float, rx: float, ry: float, color) -> None:
    h, w, _ = canvas.shape
    yy, xx = np.mgrid[0:h, 0:w]
    m = ((xx + 0.5 - cx) / rx) ** 2 + ((yy + 0.5 - cy) / ry) ** 2 <= 1.0
    canvas[m] = color


def render_face(boxes: dict, iris: tuple[float, float], look: dict, cfg: SynthConfig, rng) -> np.ndarray:
    fw, fh = cfg.face_size
    img = np.empty((fh, fw, 3))
    img[:] = look["bg"]
    img += rng.normal(0, 4, img.shape)
    _disk(img, fw / 2, fh / 2, fw * 0.36, fh * 0.46, look["skin"])
    for side in ("left", "right"):
        x, y, w, h = boxes[side]
        _disk(img, x + w / 2, y + h / 2, w / 2, h / 2, (235, 235, 235))
        _disk(img, x + iris[0] * w, y + iris[1] * h, cfg.iris_radius, cfg.iris_radius, (25, 20, 15))
    return np.clip(np.round(img), 0, 255).astype(np.uint8)


def render_scene(pog, cfg: SynthConfig, rng) -> np.ndarray:
    sw, sh = cfg.scene_size
    yy, xx = np.mgrid[0:sh, 0:sw] + 0.5
    base = np.zeros((sh, sw))
    for _ in range(4):
        kx, ky = rng.uniform(0.5, 3.0, 2) * 2 * np.pi
        ph = rng.uniform(0, 2 * np.pi)
        base += np.sin(kx * xx / sw + ky * yy / sh + ph)
    base = 0.5 + cfg.clutter * base / 8
    img = np.repeat(base[:, :, None], 3, axis=2) * np.array([0.55, 0.6, 0.7])
    for _ in range(rng.integers(2, 6)):  # dark box-shaped clutter
        w, h = rng.uniform(0.05, 0.2) * sw, rng.uniform(0.05, 0.2) * sh
        x0, y0 = rng.uniform(0, sw - w), rng.uniform(0.3 * sh, sh - h)
        img[int(y0) : int(y0 + h), int(x0) : int(x0 + w)] *= rng.uniform(0.3, 0.7)
    s = cfg.blob_sigma * sw
    blob = np.exp(-((xx - pog[0] * sw) ** 2 + (yy - pog[1] * sh) ** 2) / (2 * s * s))
    img = img * (1 - blob[:, :, None]) + blob[:, :, None] * np.array([1.0, 0.95, 0.6])
    img = img * 255 + rng.normal(0, 3, img.shape)
    return np.clip(np.round(img), 0, 255).astype(np.uint8)


def generate_synthetic(
    seed: int, n: int, cfg: SynthConfig = SynthConfig(), render: bool = True
) -> list[tuple[SampleRecord, SyntheticImages | None]]:
    """``n`` samples grouped into drivers of ``cfg.samples_per_driver``; deterministic in ``seed``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    lo, hi = cfg.pog_range
    pogs = rng.uniform(lo, hi, size=(n, 2))
    validity = rng.uniform(size=n)
    which = rng.integers(0, 2, size=n)
    jitter = rng.uniform(-2.0, 2.0, size=(n, 2))
    fw, fh = cfg.face_size
    bw, bh = cfg.eye_box
    looks: dict[int, dict] = {}
    out = []
    for i in range(n):
        d = i // cfg.samples_per_driver
        look = looks.setdefault(d, _driver_look(seed, d, cfg))
        pog = (float(pogs[i, 0]), float(pogs[i, 1]))
        cy = look["eye_y"] + jitter[i, 1]
        boxes = {}
        for side, sign in (("left", -1), ("right", 1)):
            cx = fw / 2 + sign * look["eye_dx"] + jitter[i, 0]
            boxes[side] = (float(cx - bw / 2), float(cy - bh / 2), float(bw), float(bh))
        off = iris_offset(pog, cfg.iris_gain)
        iris_px = {s: (b[0] + off[0] * b[2], b[1] + off[1] * b[3]) for s, b in boxes.items()}
        if validity[i] < cfg.p_both_invalid:
            iris_px = {"left": None, "right": None}
        elif validity[i] < cfg.p_both_invalid + cfg.p_one_invalid:
            iris_px[("left", "right")[which[i]]] = None
        rec = SampleRecord(
            driver_id=f"drv{d:03d}",
            face_path=f"faces/{i:06d}.ppm",
            scene_path=f"scenes/{i:06d}.ppm",
            gaze_norm=pog,
            eye_boxes=boxes,
            iris_centers=iris_px,
            gaze_vec=tuple(float(c) for c in gaze_vector(pog, cfg.focal_scale)),
            timestamp=i / 5.0,
            face_size=cfg.face_size,
            scene_size=cfg.scene_size,
        )
        imgs = None
        if render:
            r = np.random.default_rng([seed, i])
            imgs = SyntheticImages(render_face(boxes, off, look, cfg, r), render_scene(pog, cfg, r))
        out.append((rec, imgs))
    return out


def write_dataset(samples, out_dir: str | os.PathLike) -> Path:
    """Write PPM images and ``manifest.jsonl`` under ``out_dir``; returns the manifest path."""
    out = Path(out_dir)
    (out / "faces").mkdir(parents=True, exist_ok=True)
    (out / "scenes").mkdir(parents=True, exist_ok=True)
    for rec, imgs in samples:
        write_ppm(out / rec.face_path, imgs.face)
        write_ppm(out / rec.scene_path, imgs.scene)
    manifest = out / "manifest.jsonl"
    write_manifest([r for r, _ in samples], manifest)
    return manifest
