"""Manifest records, driver-level splits, and image decoding."""
from __future__ import annotations

import json
import logging
import math
import os
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

logger = logging.getLogger(__name__)

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class ManifestError(ValueError):
    """Malformed or invalid manifest content."""


class DecodeError(ValueError):
    """Unsupported or corrupt image file."""


Box = tuple[float, float, float, float]
Point = tuple[float, float]


@dataclass
class SampleRecord:
    driver_id: str
    face_path: str
    scene_path: str
    gaze_norm: Point
    eye_boxes: dict[str, Box | None] = field(default_factory=lambda: {"left": None, "right": None})
    iris_centers: dict[str, Point | None] = field(default_factory=lambda: {"left": None, "right": None})
    gaze_vec: tuple[float, float, float] | None = None
    timestamp: float = 0.0
    face_size: tuple[int, int] | None = None   # (W, H) px, used to bound-check eye boxes
    scene_size: tuple[int, int] | None = None  # (W, H) px

    def validate(self) -> None:
        u, v = self.gaze_norm
        if not (0.0 <= u <= 1.0 and 0.0 <= v <= 1.0):
            raise ManifestError(f"gaze_norm {self.gaze_norm} outside the unit square")
        if self.gaze_vec is not None:
            n = math.sqrt(sum(c * c for c in self.gaze_vec))
            if abs(n - 1.0) > 1e-6:
                raise ManifestError(f"gaze_vec has norm {n}, expected 1")
        for side in ("left", "right"):
            if side not in self.eye_boxes or side not in self.iris_centers:
                raise ManifestError(f"missing '{side}' entry")
            box = self.eye_boxes[side]
            if box is None:
                continue
            x, y, w, h = box
            if w <= 0 or h <= 0:
                raise ManifestError(f"{side} eye box has non-positive size")
            if self.face_size is not None:
                fw, fh = self.face_size
                if x < 0 or y < 0 or x + w > fw or y + h > fh:
                    raise ManifestError(f"{side} eye box {box} outside face image {self.face_size}")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "SampleRecord":
        def tup(x):
            return None if x is None else tuple(x)

        boxes = d.get("eye_boxes") or {}
        iris = d.get("iris_centers") or {}
        try:
            rec = cls(
                driver_id=str(d["driver_id"]),
                face_path=str(d["face_path"]),
                scene_path=str(d["scene_path"]),
                gaze_norm=tuple(d["gaze_norm"]),
                eye_boxes={s: tup(boxes.get(s)) for s in ("left", "right")},
                iris_centers={s: tup(iris.get(s)) for s in ("left", "right")},
                gaze_vec=tup(d.get("gaze_vec")),
                timestamp=float(d.get("timestamp", 0.0)),
                face_size=tup(d.get("face_size")),
                scene_size=tup(d.get("scene_size")),
            )
        except KeyError as e:
            raise ManifestError(f"missing field {e.args[0]!r}") from None
        except (TypeError, ValueError) as e:
            raise ManifestError(str(e)) from None
        return rec


def load_manifest(path: str | os.PathLike) -> list[SampleRecord]:
    """Read a JSON-lines manifest; unknown keys are ignored."""
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise ManifestError(f"{path}:{lineno}: {e.msg}") from None
            if not isinstance(obj, dict):
                raise ManifestError(f"{path}:{lineno}: expected a JSON object")
            try:
                rec = SampleRecord.from_json(obj)
                rec.validate()
            except ManifestError as e:
                raise ManifestError(f"{path}:{lineno}: {e}") from None
            records.append(rec)
    return records


def write_manifest(records: Iterable[SampleRecord], path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json(), sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SplitSpec:
    train_drivers: frozenset[str]
    val_drivers: frozenset[str]
    test_drivers: frozenset[str]

    def __post_init__(self):
        for name in ("train_drivers", "val_drivers", "test_drivers"):
            object.__setattr__(self, name, frozenset(getattr(self, name)))
        a, b, c = self.train_drivers, self.val_drivers, self.test_drivers
        if a & b or a & c or b & c:
            raise ManifestError(f"split sets overlap: {sorted((a & b) | (a & c) | (b & c))}")

    @classmethod
    def ordered(cls, drivers: Sequence[str], n_train: int, n_val: int) -> "SplitSpec":
        """First ``n_train`` drivers train, next ``n_val`` validate, the rest test."""
        drivers = list(drivers)
        return cls(
            frozenset(drivers[:n_train]),
            frozenset(drivers[n_train : n_train + n_val]),
            frozenset(drivers[n_train + n_val :]),
        )


def _driver_order(records: Sequence[SampleRecord]) -> list[str]:
    return sorted({r.driver_id for r in records})


def split_by_driver(
    records: Sequence[SampleRecord],
    spec: SplitSpec | tuple[float, float, float],
    seed: int = 0,
) -> tuple[list[SampleRecord], list[SampleRecord], list[SampleRecord]]:
    """Partition records so no driver spans two partitions.

    With a ratio triple the sorted driver list is shuffled by ``seed`` and cut;
    the input order of records never affects the result, and within each
    partition records keep their input order.
    """
    if not isinstance(spec, SplitSpec):
        ratios = np.asarray(spec, dtype=float)
        if ratios.shape != (3,) or np.any(ratios < 0) or ratios.sum() <= 0:
            raise ManifestError(f"bad split ratios {spec}")
        drivers = _driver_order(records)
        rng = np.random.default_rng(seed)
        drivers = [drivers[i] for i in rng.permutation(len(drivers))]
        n = len(drivers)
        ratios = ratios / ratios.sum()
        n_train = max(1, int(round(ratios[0] * n))) if n else 0
        n_val = min(int(round(ratios[1] * n)), n - n_train)
        if n == 1:
            logger.warning("only one driver present; all records go to the training split")
        spec = SplitSpec.ordered(drivers, n_train, n_val)
    parts: tuple[list, list, list] = ([], [], [])
    unassigned = set()
    for r in records:
        if r.driver_id in spec.train_drivers:
            parts[0].append(r)
        elif r.driver_id in spec.val_drivers:
            parts[1].append(r)
        elif r.driver_id in spec.test_drivers:
            parts[2].append(r)
        else:
            unassigned.add(r.driver_id)
    if unassigned:
        raise ManifestError(f"drivers not assigned to any split: {sorted(unassigned)}")
    return parts


# ---------------------------------------------------------------------------
# images
# ---------------------------------------------------------------------------

def _ppm_tokens(buf: bytes, count: int, pos: int) -> tuple[list[int], int]:
    out = []
    n = len(buf)
    while len(out) < count:
        while pos < n and (buf[pos : pos + 1].isspace() or buf[pos : pos + 1] == b"#"):
            if buf[pos : pos + 1] == b"#":
                while pos < n and buf[pos : pos + 1] not in (b"\n", b"\r"):
                    pos += 1
            else:
                pos += 1
        start = pos
        while pos < n and buf[pos : pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise DecodeError("truncated or malformed PPM header")
        out.append(int(buf[start:pos]))
    return out, pos


def decode_ppm(buf: bytes) -> np.ndarray:
    """Binary P6 -> uint8 array ``(H, W, 3)``."""
    if buf[:2] != b"P6":
        raise DecodeError("not a binary PPM (missing P6 magic)")
    (w, h, maxval), pos = _ppm_tokens(buf, 3, 2)
    if maxval != 255 or w < 1 or h < 1:
        raise DecodeError(f"unsupported PPM geometry {w}x{h} maxval {maxval}")
    pos += 1  # single whitespace byte after maxval
    need = w * h * 3
    raw = buf[pos : pos + need]
    if len(raw) != need:
        raise DecodeError(f"PPM payload truncated: {len(raw)} of {need} bytes")
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3).copy()


def encode_ppm(img: np.ndarray) -> bytes:
    img = np.asarray(img)
    if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("encode_ppm expects uint8 (H, W, 3)")
    h, w, _ = img.shape
    return b"P6\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(img).tobytes()


def read_image(path: str | os.PathLike) -> np.ndarray:
    """Decode to uint8 ``(H, W, 3)``.  PPM natively; other formats through Pillow."""
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as e:
        raise DecodeError(f"cannot read {path}: {e}") from None
    if buf[:2] == b"P6":
        return decode_ppm(buf)
    try:
        from PIL import Image

        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()
    except Exception as e:  # Pillow raises a zoo of types
        raise DecodeError(f"cannot decode {path}: {e}") from None


def write_ppm(path: str | os.PathLike, img: np.ndarray) -> None:
    Path(path).write_bytes(encode_ppm(img))


def to_chw(img: np.ndarray) -> np.ndarray:
    """uint8 ``(H, W, 3)`` -> float64 ``(3, H, W)`` in [0, 1]."""
    return np.asarray(img, dtype=np.float64).transpose(2, 0, 1) / 255.0


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centred bilinear resize of ``(C, H, W)`` (edge samples clamped)."""
    c, h, w = img.shape
    if h == out_h and w == out_w:
        return img.copy()

    def axis(n_in, n_out):
        pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        pos = np.clip(pos, 0.0, n_in - 1)
        i0 = np.floor(pos).astype(int)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, pos - i0

    y0, y1, fy = axis(h, out_h)
    x0, x1, fx = axis(w, out_w)
    top = img[:, y0][:, :, x0] * (1 - fx) + img[:, y0][:, :, x1] * fx
    bot = img[:, y1][:, :, x0] * (1 - fx) + img[:, y1][:, :, x1] * fx
    return top * (1 - fy)[:, None] + bot * fy[:, None]


def normalize(img: np.ndarray, mean=IMAGENET_MEAN, std=IMAGENET_STD) -> np.ndarray:
    m = np.asarray(mean, dtype=img.dtype)[:, None, None]
    s = np.asarray(std, dtype=img.dtype)[:, None, None]
    return (img - m) / s


def decode_and_normalize(
    path: str | os.PathLike,
    target: tuple[int, int],
    mean=IMAGENET_MEAN,
    std=IMAGENET_STD,
) -> np.ndarray:
    """Decode, bilinear-resize to ``target=(H, W)``, then channel-normalize."""
    img = to_chw(read_image(path))
    return normalize(resize_bilinear(img, *target), mean, std)


def prefetch(items: Iterable, fn: Callable, k: int = 4, workers: int = 2) -> Iterator:
    """Map ``fn`` over ``items`` with at most ``k`` results in flight; output order is input order."""
    if k < 1:
        raise ValueError("prefetch window must be >= 1")
    with ThreadPoolExecutor(max_workers=workers) as pool:
        pending: deque = deque()
        for item in items:
            pending.append(pool.submit(fn, item))
            if len(pending) >= k:
                yield pending.popleft().result()
        while pending:
            yield pending.popleft().result()
