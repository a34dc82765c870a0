"""Face, eye/iris and scene feature streams."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor
from .data import IMAGENET_MEAN, IMAGENET_STD, normalize, resize_bilinear
from .encoders import EncoderConfig, encode_hierarchical

PAD_VALUE = 114
NEUTRAL_IRIS = 0.5
GRID = 7


class ContractError(ValueError):
    """Input violates an operation's precondition."""


@dataclass(frozen=True)
class EyeObservation:
    eye_image: np.ndarray | None  # (3, h, w) in [0, 1]
    iris_center_norm: tuple[float, float] | None
    valid: bool
    side: str
    inferred: bool = False

    def __post_init__(self):
        if self.side not in ("left", "right"):
            raise ValueError(f"side must be 'left' or 'right', got {self.side!r}")
        if self.valid:
            c = self.iris_center_norm
            if c is None or not (0.0 <= c[0] <= 1.0 and 0.0 <= c[1] <= 1.0):
                raise ContractError(f"valid observation needs iris centre in [0,1]^2, got {c}")
        if self.eye_image is not None and min(self.eye_image.shape[-2:]) < 1:
            raise DimensionError("empty eye crop")


@dataclass
class GaussianWeightMap:
    weights: np.ndarray  # (H, W)
    sigma: float
    center: tuple[float, float]


@dataclass
class SceneTokens:
    tokens: Tensor     # (..., 49, D)
    centers: np.ndarray  # (49, 2) as (x, y)
    augmented: Tensor  # (..., 49, D + 1)


def pad_to_square(img: np.ndarray, fill: int = PAD_VALUE, target: int = 224) -> np.ndarray:
    """Resize the longest side to ``target`` and pad the other side symmetrically with ``fill/255``."""
    if img.ndim != 3 or img.shape[1] < 1 or img.shape[2] < 1:
        raise DimensionError(f"pad_to_square needs a non-empty (3, h, w) image, got {img.shape}")
    _, h, w = img.shape
    s = target / max(h, w)
    nh, nw = max(1, int(round(h * s))), max(1, int(round(w * s)))
    content = resize_bilinear(img, nh, nw)
    out = np.full((img.shape[0], target, target), fill / 255.0, dtype=content.dtype)
    top, left = (target - nh) // 2, (target - nw) // 2
    out[:, top : top + nh, left : left + nw] = content
    return out


def project_iris_to_map(iris_center_norm: tuple[float, float], H: int, W: int) -> tuple[float, float]:
    cx, cy = iris_center_norm
    if not (0.0 <= cx <= 1.0 and 0.0 <= cy <= 1.0):
        raise ValueError(f"iris centre {iris_center_norm} outside [0,1]^2")
    return cx * (W - 1), cy * (H - 1)


def gaussian_weights(centers: np.ndarray, H: int, W: int, sigma: float) -> np.ndarray:
    """Vectorised normalized Gaussian maps for ``centers (..., 2)`` in map coordinates (x=column)."""
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    centers = np.asarray(centers, dtype=np.float64)
    cx = centers[..., 0, None, None]
    cy = centers[..., 1, None, None]
    cols = np.arange(W, dtype=np.float64)[None, :]
    rows = np.arange(H, dtype=np.float64)[:, None]
    logits = -((cols - cx) ** 2 + (rows - cy) ** 2) / (2.0 * sigma * sigma)
    logits = logits - logits.max(axis=(-2, -1), keepdims=True)
    g = np.exp(logits)
    return g / g.sum(axis=(-2, -1), keepdims=True)


def gaussian_weight_map(center: tuple[float, float], H: int, W: int, sigma: float = 1.2) -> GaussianWeightMap:
    return GaussianWeightMap(gaussian_weights(np.asarray(center), H, W, sigma), sigma, tuple(center))


def weighted_gap(projected: Tensor, weights: np.ndarray) -> Tensor:
    """GAP of the Gaussian-weighted map: mean over (H, W) of ``F(c, y, x) * G(y, x)``."""
    return ad.global_avg_pool(ad.channel_weight(projected, Tensor(weights.astype(projected.dtype))))


def iris_weighted_eye_embedding(
    obs: EyeObservation,
    cfg: EncoderConfig,
    params: dict[str, Tensor],
    prefix: str = "eye",
    sigma: float = 1.2,
    mean=IMAGENET_MEAN,
    std=IMAGENET_STD,
) -> Tensor:
    """Embedding of one eye crop weighted around its iris centre."""
    if not obs.valid:
        raise ContractError("eye embedding needs a valid (or gated) observation")
    img = pad_to_square(obs.eye_image, target=cfg.input_size[0])
    img = normalize(img, mean, std)
    fmap = encode_hierarchical(Tensor(img), cfg, params, prefix).projected[3]
    _, H, W = fmap.shape
    g = gaussian_weights(np.asarray(project_iris_to_map(obs.iris_center_norm, H, W)), H, W, sigma)
    return weighted_gap(fmap, g)


def infer_conjugate_iris(detected: EyeObservation, eye_image: np.ndarray | None = None) -> EyeObservation:
    """The other eye, with the same normalized within-box iris offset."""
    if not detected.valid:
        raise ContractError("conjugate inference needs a valid detected iris")
    if detected.inferred:
        raise ContractError("refusing to infer from an already inferred iris")
    other = "right" if detected.side == "left" else "left"
    return EyeObservation(eye_image, tuple(detected.iris_center_norm), True, other, inferred=True)


def resolve_iris(left: EyeObservation, right: EyeObservation) -> tuple[EyeObservation, EyeObservation, float]:
    """Fill in a missing iris from the other eye; gate is 0 only when neither is usable."""
    if left.valid and right.valid:
        return left, right, 1.0
    if left.valid:
        inf = infer_conjugate_iris(left, right.eye_image)
        return left, inf, 1.0
    if right.valid:
        inf = infer_conjugate_iris(right, left.eye_image)
        return inf, right, 1.0
    neutral = (NEUTRAL_IRIS, NEUTRAL_IRIS)
    return (
        replace(left, iris_center_norm=neutral, inferred=False),
        replace(right, iris_center_norm=neutral, inferred=False),
        0.0,
    )


def gate_iris_validity(left: EyeObservation, right: EyeObservation) -> tuple[np.ndarray, float]:
    """Iris vector ``[cxL, cyL, cxR, cyR]`` and the binary gate."""
    l, r, gate = resolve_iris(left, right)
    if gate == 0.0:
        return np.full(4, NEUTRAL_IRIS), 0.0
    return np.array([*l.iris_center_norm, *r.iris_center_norm], dtype=np.float64), gate


def grid_centers(n: int = GRID) -> np.ndarray:
    """Row-major cell midpoints ``(x, y)`` of an n x n partition of the unit square."""
    rows, cols = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    return np.stack([(cols.ravel() + 0.5) / n, (rows.ravel() + 0.5) / n], axis=1)


def scene_tokens(fmap: Tensor, dim: int | None = None) -> SceneTokens:
    """Flatten a ``(D, 7, 7)`` map (optionally batched) row-major into 49 tokens and append x_i."""
    if fmap.ndim not in (3, 4) or fmap.shape[-2:] != (GRID, GRID):
        raise DimensionError(f"scene map must be (D, 7, 7), got {fmap.shape}")
    if dim is not None and fmap.shape[-3] != dim:
        raise DimensionError(f"scene map has {fmap.shape[-3]} channels, expected {dim}")
    d = fmap.shape[-3]
    lead = fmap.shape[:-3]
    flat = ad.reshape(fmap, lead + (d, GRID * GRID))
    tokens = ad.transpose(flat, tuple(range(len(lead))) + (len(lead) + 1, len(lead)))
    centers = grid_centers()
    xs = np.broadcast_to(centers[:, 0:1], lead + (GRID * GRID, 1)).astype(fmap.dtype)
    augmented = ad.concat([tokens, Tensor(xs)], axis=-1)
    return SceneTokens(tokens, centers, augmented)


def unflatten_tokens(tokens: np.ndarray) -> np.ndarray:
    """Inverse of the token flattening: ``(49, D) -> (D, 7, 7)``."""
    return tokens.T.reshape(tokens.shape[1], GRID, GRID)
