"""Modality fusion into the gaze-intent query, direction head and scene-grid PoG head."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor
from .streams import SceneTokens


@dataclass
class GazeIntent:
    z_face: Tensor
    z_eye: Tensor
    z_iris: Tensor
    z_cat: Tensor
    z_gaze: Tensor


@dataclass
class PoGPrediction:
    alpha: Tensor
    p_hat: Tensor
    delta_p: Tensor
    p_final: Tensor
    g_hat: Tensor | None = None


def _xavier(rng: np.random.Generator, fan_out: int, fan_in: int, dtype) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_out, fan_in)).astype(dtype)


def init_heads(rng: np.random.Generator, dim: int, dtype=np.float64, lam: float = 0.1) -> dict[str, Tensor]:
    """Xavier-uniform linear maps, zero biases, unit LN gains, residual scale ``lam``."""
    p: dict[str, np.ndarray] = {}

    def mlp(name, fan_in):
        p[f"{name}.w"] = _xavier(rng, dim, fan_in, dtype)
        p[f"{name}.b"] = np.zeros(dim, dtype)
        p[f"{name}_ln.g"] = np.ones(dim, dtype)
        p[f"{name}_ln.b"] = np.zeros(dim, dtype)

    mlp("face_fc", 4 * dim)
    mlp("eye_fc", 2 * dim)
    mlp("iris_fc", 4)
    mlp("gaze_fc", 3 * dim)
    p["dir.w"] = _xavier(rng, 3, dim, dtype)
    p["dir.b"] = np.zeros(3, dtype)
    p["key.w"] = _xavier(rng, dim, dim + 1, dtype)
    p["res.w"] = _xavier(rng, 2, dim, dtype)
    p["res.lam"] = np.array(lam, dtype=dtype)
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in p.items()}


def _fc_ln(x: Tensor, params, name: str, eps: float = 1e-5) -> Tensor:
    h = ad.relu(ad.linear(x, params[f"{name}.w"], params[f"{name}.b"]))
    return ad.layer_norm(h, params[f"{name}_ln.g"], params[f"{name}_ln.b"], eps=eps)


def encode_face_embedding(features: list[Tensor], params) -> Tensor:
    if len(features) != 4:
        raise DimensionError(f"face embedding needs 4 stage vectors, got {len(features)}")
    return _fc_ln(ad.concat(features, axis=-1), params, "face_fc")


def encode_eye_embedding(e_left: Tensor, e_right: Tensor, params) -> Tensor:
    return _fc_ln(ad.concat([e_left, e_right], axis=-1), params, "eye_fc")


def encode_iris(i_c, gate, params) -> Tensor:
    """``gate * LN(ReLU(W i_c + b))``; ``gate`` is a scalar or one value per batch row."""
    i_c = ad.as_tensor(i_c, dtype=params["iris_fc.w"].dtype)
    if i_c.shape[-1] != 4:
        raise DimensionError(f"iris vector must have 4 entries, got {i_c.shape}")
    z = _fc_ln(i_c, params, "iris_fc")
    g = np.asarray(gate, dtype=z.dtype)
    mask = np.broadcast_to(g.reshape(g.shape + (1,) * (z.ndim - g.ndim)), z.shape)
    # select rather than multiply: a closed gate gives +0.0 whatever the sign of z
    off = Tensor(np.zeros(z.shape, dtype=z.dtype))
    return ad.where(mask != 0, ad.mul(z, Tensor(mask)), off)


def fuse_intent(z_face: Tensor, z_eye: Tensor, z_iris: Tensor, params) -> GazeIntent:
    for z in (z_eye, z_iris):
        if z.shape != z_face.shape:
            raise DimensionError(f"modality embeddings differ in shape: {z_face.shape} vs {z.shape}")
    z_cat = ad.concat([z_face, z_eye, z_iris], axis=-1)
    return GazeIntent(z_face, z_eye, z_iris, z_cat, _fc_ln(z_cat, params, "gaze_fc"))


def predict_direction(z_gaze: Tensor, params) -> Tensor:
    return ad.l2_normalize(ad.linear(z_gaze, params["dir.w"], params["dir.b"]))


def attention_logits(z_gaze: Tensor, tokens: SceneTokens, params, scaling: str = "none") -> Tensor:
    keys = ad.linear(tokens.augmented, params["key.w"])
    if keys.shape[-1] != z_gaze.shape[-1]:
        raise DimensionError(f"key dim {keys.shape[-1]} vs query dim {z_gaze.shape[-1]}")
    logits = ad.batched_dot(keys, z_gaze)
    if scaling == "inv_sqrt_d":
        logits = ad.scale(logits, 1.0 / np.sqrt(z_gaze.shape[-1]))
    elif scaling != "none":
        raise ValueError(f"unknown attention scaling {scaling!r}")
    return logits


def attend_scene(z_gaze: Tensor, tokens: SceneTokens, params, scaling: str = "none") -> Tensor:
    """Softmax over the 49 grid tokens of the query/key dot products."""
    return ad.softmax(attention_logits(z_gaze, tokens, params, scaling))


def _hull_clamp(p: Tensor, lo: np.ndarray, hi: np.ndarray) -> Tensor:
    """Clip to the token hull; only ever moves ``p`` by rounding error, so the gradient passes through."""
    return Tensor._result(np.clip(p.data, lo, hi), (p,), "hull_clamp", lambda g: (g,))


def pog_expectation(alpha: Tensor, centers: np.ndarray) -> Tensor:
    """``sum_i alpha_i c_i``, evaluated as ``mid + sum_i alpha_i (c_i - mid)``.

    The centred form makes a uniform alpha land on ``mid`` exactly (the offsets cancel
    pairwise), and the final clamp absorbs the few-ulp overshoot a saturated alpha whose
    sum rounds above 1 would otherwise produce.
    """
    c = np.asarray(centers, dtype=alpha.dtype)
    lo, hi = c.min(axis=0), c.max(axis=0)
    mid = (lo + hi) / 2
    off = Tensor(c - mid)
    if alpha.ndim == 1:
        s = ad.reshape(ad.matmul(ad.reshape(alpha, (1, -1)), off), (2,))
    else:
        s = ad.matmul(alpha, off)
    p = ad.add(s, Tensor(np.broadcast_to(mid, s.shape).copy()))
    return _hull_clamp(p, lo, hi)


def residual_correction(z_gaze: Tensor, params, axes: str = "both") -> Tensor:
    """``lam * tanh(W_p z)``; with ``axes='vertical'`` only the y component is kept."""
    d = ad.mul(params["res.lam"], ad.tanh(ad.linear(z_gaze, params["res.w"])))
    if axes == "vertical":
        d = ad.mul(d, Tensor(np.broadcast_to(np.array([0.0, 1.0], dtype=d.dtype), d.shape).copy()))
    elif axes != "both":
        raise ValueError(f"unknown residual axes {axes!r}")
    return d


def finalize_pog(p_hat: Tensor, delta_p: Tensor) -> Tensor:
    return ad.clip01(ad.add(p_hat, delta_p))
