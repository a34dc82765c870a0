"""End-to-end forward pass over prepared, batched samples."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import IMAGENET_MEAN, IMAGENET_STD, SampleRecord, normalize, resize_bilinear
from .encoders import EncoderConfig, encode_hierarchical, init_encoder, pyramid_gap, stage_shapes
from .heads import (
    GazeIntent,
    PoGPrediction,
    attend_scene,
    encode_eye_embedding,
    encode_face_embedding,
    encode_iris,
    finalize_pog,
    fuse_intent,
    init_heads,
    pog_expectation,
    predict_direction,
    residual_correction,
)
from .streams import (
    PAD_VALUE,
    EyeObservation,
    gate_iris_validity,
    gaussian_weights,
    pad_to_square,
    scene_tokens,
)

HEADS = ("direction", "pog", "both")


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    heads: str = "both"
    residual_axes: str = "both"
    attention_scaling: str = "none"
    sigma: float = 1.2
    lambda_init: float = 0.1
    mean: tuple[float, float, float] = IMAGENET_MEAN
    std: tuple[float, float, float] = IMAGENET_STD

    def __post_init__(self):
        if self.heads not in HEADS:
            raise ValueError(f"heads must be one of {HEADS}, got {self.heads!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder"] = self.encoder.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if "encoder" in d and isinstance(d["encoder"], dict):
            d["encoder"] = EncoderConfig.from_dict(d["encoder"])
        for k in ("mean", "std"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


def init_parameters(cfg: ModelConfig, seed: int, dtype=np.float64) -> dict[str, Tensor]:
    """Independent face / eye / scene streams plus heads, all derived from one seed."""
    face_ss, eye_ss, scene_ss, head_ss = np.random.SeedSequence(seed).spawn(4)
    enc = cfg.encoder
    params: dict[str, Tensor] = {}
    params.update(init_encoder(enc, np.random.default_rng(face_ss), "face", (1, 2, 3, 4), dtype))
    params.update(init_encoder(enc, np.random.default_rng(eye_ss), "eye", (4,), dtype))
    params.update(init_encoder(enc, np.random.default_rng(scene_ss), "scene", (4,), dtype))
    params.update(init_heads(np.random.default_rng(head_ss), enc.projection_dim, dtype, cfg.lambda_init))
    return params


# ---------------------------------------------------------------------------
# sample preparation
# ---------------------------------------------------------------------------

@dataclass
class PreparedSample:
    face: np.ndarray
    eye_left: np.ndarray
    eye_right: np.ndarray
    scene: np.ndarray
    i_c: np.ndarray
    gate: float
    eye_weights: np.ndarray  # (2, h4, w4): left, right
    pog: np.ndarray
    gaze_vec: np.ndarray | None
    scene_size: tuple[int, int]
    driver_id: str


@dataclass
class Batch:
    face: np.ndarray
    eyes: np.ndarray         # (2N, 3, H, W): all left crops then all right crops
    eye_weights: np.ndarray  # (2N, h4, w4)
    scene: np.ndarray
    i_c: np.ndarray
    gate: np.ndarray
    pog: np.ndarray
    gaze_vec: np.ndarray | None
    scene_size: np.ndarray   # (N, 2) as (W, H)

    def __len__(self) -> int:
        return self.face.shape[0]


def _crop(img: np.ndarray, box) -> np.ndarray:
    x, y, w, h = box
    _, H, W = img.shape
    x0, y0 = int(np.clip(round(x), 0, W - 1)), int(np.clip(round(y), 0, H - 1))
    x1, y1 = int(np.clip(round(x + w), x0 + 1, W)), int(np.clip(round(y + h), y0 + 1, H))
    return img[:, y0:y1, x0:x1]


def eye_observations(record: SampleRecord, face: np.ndarray) -> tuple[EyeObservation, EyeObservation]:
    obs = []
    for side in ("left", "right"):
        box = record.eye_boxes.get(side)
        iris = record.iris_centers.get(side)
        crop = _crop(face, box) if box is not None else None
        c = None
        if box is not None and iris is not None:
            x, y, w, h = box
            c = (float(np.clip((iris[0] - x) / w, 0, 1)), float(np.clip((iris[1] - y) / h, 0, 1)))
        obs.append(EyeObservation(crop, c, c is not None, side))
    return obs[0], obs[1]


def prepare_sample(record: SampleRecord, face: np.ndarray, scene: np.ndarray, cfg: ModelConfig) -> PreparedSample:
    """Turn one record and its decoded ``(3, H, W)`` [0, 1] images into network inputs."""
    h, w = cfg.encoder.input_size
    left, right = eye_observations(record, face)
    if left.eye_image is None or right.eye_image is None:
        # a missing crop is replaced by a flat fill image and the iris is gated off
        i_c, gate = np.full(4, 0.5), 0.0
    else:
        i_c, gate = gate_iris_validity(left, right)
    crops = []
    for o in (left, right):
        if o.eye_image is None:
            crops.append(np.full((3, h, h), PAD_VALUE / 255.0))
        else:
            crops.append(pad_to_square(o.eye_image, target=h))
    _, h4, w4 = stage_shapes(cfg.encoder)[3]
    centers = np.array([[i_c[0] * (w4 - 1), i_c[1] * (h4 - 1)], [i_c[2] * (w4 - 1), i_c[3] * (h4 - 1)]])
    norm = lambda im: normalize(im, cfg.mean, cfg.std)  # noqa: E731
    return PreparedSample(
        face=norm(resize_bilinear(face, h, w)),
        eye_left=norm(crops[0]),
        eye_right=norm(crops[1]),
        scene=norm(resize_bilinear(scene, h, w)),
        i_c=i_c,
        gate=gate,
        eye_weights=gaussian_weights(centers, h4, w4, cfg.sigma),
        pog=np.asarray(record.gaze_norm, dtype=np.float64),
        gaze_vec=None if record.gaze_vec is None else np.asarray(record.gaze_vec, dtype=np.float64),
        scene_size=tuple(record.scene_size or (scene.shape[2], scene.shape[1])),
        driver_id=record.driver_id,
    )


def collate(samples: list[PreparedSample], dtype=np.float64) -> Batch:
    st = lambda xs: np.stack(xs).astype(dtype)  # noqa: E731
    has_vec = all(s.gaze_vec is not None for s in samples)
    return Batch(
        face=st([s.face for s in samples]),
        eyes=st([s.eye_left for s in samples] + [s.eye_right for s in samples]),
        eye_weights=st([s.eye_weights[0] for s in samples] + [s.eye_weights[1] for s in samples]),
        scene=st([s.scene for s in samples]),
        i_c=st([s.i_c for s in samples]),
        gate=np.array([s.gate for s in samples], dtype=dtype),
        pog=st([s.pog for s in samples]),
        gaze_vec=st([s.gaze_vec for s in samples]) if has_vec else None,
        scene_size=np.array([s.scene_size for s in samples], dtype=np.float64),
    )


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------

@dataclass
class ModelOutput:
    intent: GazeIntent
    g_hat: Tensor | None
    pog: PoGPrediction | None


def forward(params: dict[str, Tensor], batch: Batch, cfg: ModelConfig) -> ModelOutput:
    enc = cfg.encoder
    n = len(batch)
    face_feats = pyramid_gap(encode_hierarchical(Tensor(batch.face), enc, params, "face"))
    z_face = encode_face_embedding(face_feats, params)

    eye_map = encode_hierarchical(Tensor(batch.eyes), enc, params, "eye").projected[3]
    e = ad.global_avg_pool(ad.channel_weight(eye_map, Tensor(batch.eye_weights)))
    z_eye = encode_eye_embedding(ad.take(e, 0, n), ad.take(e, n, 2 * n), params)

    z_iris = encode_iris(batch.i_c, batch.gate, params)
    intent = fuse_intent(z_face, z_eye, z_iris, params)

    g_hat = predict_direction(intent.z_gaze, params) if cfg.heads in ("direction", "both") else None
    pog = None
    if cfg.heads in ("pog", "both"):
        smap = encode_hierarchical(Tensor(batch.scene), enc, params, "scene").projected[3]
        tokens = scene_tokens(smap, enc.projection_dim)
        alpha = attend_scene(intent.z_gaze, tokens, params, cfg.attention_scaling)
        p_hat = pog_expectation(alpha, tokens.centers)
        delta = residual_correction(intent.z_gaze, params, cfg.residual_axes)
        pog = PoGPrediction(alpha, p_hat, delta, finalize_pog(p_hat, delta), g_hat)
    return ModelOutput(intent, g_hat, pog)
