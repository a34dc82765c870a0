"""Optimization loop, evaluation and checkpoint I/O."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import struct
from collections import Counter
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import SampleRecord, prefetch, read_image, to_chw
from .encoders import EncoderConfig
from .metrics import EvalReport, LossWeights, direction_loss, pog_loss, summarize
from .model import Batch, ModelConfig, PreparedSample, collate, forward, init_parameters, prepare_sample

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"SGAPCKPT"
CHECKPOINT_VERSION = 1
ENCODER_PRESETS = {"miniature": EncoderConfig.miniature, "resnet18": EncoderConfig}


class NumericalAbort(RuntimeError):
    """Training produced a non-finite loss or parameter."""


class SplitContamination(ValueError):
    """Evaluation data shares drivers with the training split."""


class CheckpointCorrupt(ValueError):
    pass


class CheckpointIncompatible(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    optimizer: str = "adam"
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    batch_size: int = 32
    epochs: int = 10
    seed: int = 0
    loss_weights: LossWeights = field(default_factory=LossWeights)
    heads: str = "both"
    encoder: EncoderConfig = field(default_factory=EncoderConfig.miniature)
    residual_axes: str = "both"
    attention_scaling: str = "none"
    smooth_l1_mode: str = "norm"
    dir_weight: float = 1.0
    pog_weight: float = 1.0
    sigma: float = 1.2
    lambda_init: float = 0.1
    scene_blind: bool = False
    dtype: str = "float32"
    split_ratios: tuple[float, float, float] = (0.7, 0.15, 0.15)
    split_seed: int = 0

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if isinstance(self.loss_weights, dict):
            object.__setattr__(self, "loss_weights", LossWeights(**self.loss_weights))
        if isinstance(self.encoder, str):
            if self.encoder not in ENCODER_PRESETS:
                raise ValueError(f"unknown encoder preset {self.encoder!r}; choose from {sorted(ENCODER_PRESETS)}")
            object.__setattr__(self, "encoder", ENCODER_PRESETS[self.encoder]())
        if isinstance(self.encoder, dict):
            object.__setattr__(self, "encoder", EncoderConfig.from_dict(self.encoder))
        object.__setattr__(self, "betas", tuple(self.betas))
        object.__setattr__(self, "split_ratios", tuple(self.split_ratios))
        for name, allowed in (
            ("residual_axes", ("both", "vertical")),
            ("attention_scaling", ("none", "inv_sqrt_d")),
            ("smooth_l1_mode", ("norm", "per_coordinate")),
            ("dtype", ("float32", "float64")),
        ):
            if getattr(self, name) not in allowed:
                raise ValueError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")
        self.model  # heads check lives in ModelConfig

    @property
    def model(self) -> ModelConfig:
        return ModelConfig(
            encoder=self.encoder,
            heads=self.heads,
            residual_axes=self.residual_axes,
            attention_scaling=self.attention_scaling,
            sigma=self.sigma,
            lambda_init=self.lambda_init,
        )

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder"] = self.encoder.to_dict()
        d["betas"] = list(self.betas)
        d["split_ratios"] = list(self.split_ratios)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------

class Adam:
    def __init__(self, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.lr, self.betas, self.eps = lr, betas, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, Tensor], names: Sequence[str]) -> None:
        b1, b2 = self.betas
        self.t += 1
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for k in names:
            p = params[k]
            g = p.grad
            m = self.m.get(k)
            if m is None:
                m = self.m[k] = np.zeros_like(p.data)
                self.v[k] = np.zeros_like(p.data)
            v = self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)

    def state(self) -> tuple[dict, dict[str, np.ndarray]]:
        arrays = {f"adam.m/{k}": v for k, v in self.m.items()}
        arrays.update({f"adam.v/{k}": v for k, v in self.v.items()})
        return {"kind": "adam", "t": self.t}, arrays

    def load(self, meta: dict, arrays: dict[str, np.ndarray]) -> None:
        self.t = int(meta.get("t", 0))
        for k, v in arrays.items():
            kind, name = k.split("/", 1)
            (self.m if kind == "adam.m" else self.v)[name] = v.copy()


class SGD:
    def __init__(self, lr=1e-2):
        self.lr = lr

    def step(self, params: dict[str, Tensor], names: Sequence[str]) -> None:
        for k in names:
            params[k].data -= (self.lr * params[k].grad).astype(params[k].dtype)

    def state(self):
        return {"kind": "sgd"}, {}

    def load(self, meta, arrays):
        pass


def make_optimizer(cfg: TrainConfig):
    if cfg.optimizer == "adam":
        return Adam(cfg.lr, cfg.betas, cfg.eps)
    return SGD(cfg.lr)


# ---------------------------------------------------------------------------
# data plumbing
# ---------------------------------------------------------------------------

def prepare_records(records: Sequence[SampleRecord], root: str | os.PathLike, cfg: TrainConfig, workers: int = 2) -> list[PreparedSample]:
    """Decode the images referenced by ``records`` (relative to ``root``) and prepare network inputs."""
    root = Path(root)
    mcfg = cfg.model

    def load(rec):
        face = to_chw(read_image(root / rec.face_path))
        scene = to_chw(read_image(root / rec.scene_path))
        return prepare_sample(rec, face, scene, mcfg)

    return list(prefetch(records, load, k=8, workers=workers))


def prepare_synthetic(samples, cfg: TrainConfig) -> list[PreparedSample]:
    mcfg = cfg.model
    return [prepare_sample(r, to_chw(im.face), to_chw(im.scene), mcfg) for r, im in samples]


def batch_loss(params, batch: Batch, cfg: TrainConfig) -> tuple[Tensor, float, float]:
    """Mean-reduced joint loss and its (direction, PoG) parts."""
    out = forward(params, batch, cfg.model)
    terms = []
    ld = lp = float("nan")
    if out.g_hat is not None and batch.gaze_vec is not None:
        l_dir = ad.mean(direction_loss(out.g_hat, batch.gaze_vec, cfg.loss_weights))
        ld = l_dir.item()
        terms.append(ad.scale(l_dir, cfg.dir_weight))
    if out.pog is not None:
        l_pog = ad.mean(pog_loss(out.pog.p_final, batch.pog, cfg.loss_weights.beta, cfg.smooth_l1_mode))
        lp = l_pog.item()
        terms.append(ad.scale(l_pog, cfg.pog_weight))
    if not terms:
        raise ValueError("no active head has supervision in this batch")
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return total, ld, lp


def frozen_names(cfg: TrainConfig) -> set[str]:
    return {"key.w"} if cfg.scene_blind else set()


def init_training_params(cfg: TrainConfig) -> dict[str, Tensor]:
    params = init_parameters(cfg.model, cfg.seed, cfg.np_dtype)
    if cfg.scene_blind:
        params["key.w"].data[...] = 0.0
    return params


@dataclass
class TrainResult:
    params: dict[str, Tensor]
    curve: list[dict]
    optimizer: object
    epochs_done: int


def _top_norms(params, names, attr: str, k: int = 5) -> str:
    """The ``k`` largest L2 norms of ``p.data`` or ``p.grad``; NaN sorts first."""
    norms = {n: float(np.linalg.norm(getattr(params[n], attr).astype(np.float64))) for n in names}
    order = sorted(norms.items(), key=lambda kv: (not np.isnan(kv[1]), -kv[1] if not np.isnan(kv[1]) else 0))
    return ", ".join(f"{n}={v:.3g}" for n, v in order[:k])


def train(
    samples: Sequence[PreparedSample],
    cfg: TrainConfig,
    val_samples: Sequence[PreparedSample] | None = None,
    params: dict[str, Tensor] | None = None,
    optimizer=None,
    start_epoch: int = 0,
    on_epoch: Callable[[int, dict[str, Tensor], object], None] | None = None,
) -> TrainResult:
    """Mini-batch training; the epoch order comes from a generator seeded by ``(seed, epoch)``."""
    if not samples:
        raise ValueError("training split is empty")
    params = params if params is not None else init_training_params(cfg)
    optimizer = optimizer if optimizer is not None else make_optimizer(cfg)
    frozen = frozen_names(cfg)
    names = [k for k in params if k not in frozen]
    dtype = cfg.np_dtype
    curve: list[dict] = []
    n = len(samples)
    for epoch in range(start_epoch, cfg.epochs):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        sums = np.zeros(2)
        counts = np.zeros(2)
        for bi, start in enumerate(range(0, n, cfg.batch_size)):
            batch = collate([samples[i] for i in order[start : start + cfg.batch_size]], dtype)
            for k in names:
                params[k].zero_grad()
            total, ld, lp = batch_loss(params, batch, cfg)
            if not np.isfinite(total.item()):
                raise NumericalAbort(
                    f"non-finite loss at epoch {epoch} batch {bi}; largest parameter norms: " + _top_norms(params, names, "data")
                )
            total.backward()
            optimizer.step(params, names)
            bad = [k for k in names if not np.all(np.isfinite(params[k].data))]
            if bad:
                raise NumericalAbort(
                    f"non-finite parameters after epoch {epoch} batch {bi}: {', '.join(bad[:5])}"
                    + (f" (+{len(bad) - 5} more)" if len(bad) > 5 else "")
                    + "; largest gradient norms: " + _top_norms(params, names, "grad")
                )
            for j, v in enumerate((ld, lp)):
                if np.isfinite(v):
                    sums[j] += v * len(batch)
                    counts[j] += len(batch)
        curve.append(_row(epoch, "train", sums, counts))
        if val_samples:
            curve.append(_row(epoch, "val", *_eval_losses(val_samples, params, cfg)))
        logger.info("epoch %d %s", epoch, curve[-1])
        if on_epoch is not None:
            on_epoch(epoch, params, optimizer)
    return TrainResult(params, curve, optimizer, cfg.epochs)


def _row(epoch, split, sums, counts) -> dict:
    val = [float(s / c) if c else float("nan") for s, c in zip(sums, counts)]
    return {"epoch": epoch, "split": split, "loss_dir": val[0], "loss_pog": val[1]}


def _eval_losses(samples, params, cfg: TrainConfig):
    sums, counts = np.zeros(2), np.zeros(2)
    with ad.no_grad():
        for start in range(0, len(samples), cfg.batch_size):
            batch = collate(list(samples[start : start + cfg.batch_size]), cfg.np_dtype)
            _, ld, lp = batch_loss(params, batch, cfg)
            for j, v in enumerate((ld, lp)):
                if np.isfinite(v):
                    sums[j] += v * len(batch)
                    counts[j] += len(batch)
    return sums, counts


def write_loss_curve(curve: Sequence[dict], path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "split", "loss_dir", "loss_pog"])
        for r in curve:
            w.writerow([r["epoch"], r["split"], repr(r["loss_dir"]), repr(r["loss_pog"])])


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@dataclass
class Predictions:
    p_final: np.ndarray
    p_hat: np.ndarray
    alpha: np.ndarray
    g_hat: np.ndarray | None


def predict(samples: Sequence[PreparedSample], params, cfg: TrainConfig, batch_size: int | None = None) -> Predictions:
    bs = batch_size or cfg.batch_size
    mcfg = cfg.model
    pf, ph, al, gh = [], [], [], []
    with ad.no_grad():
        for start in range(0, len(samples), bs):
            out = forward(params, collate(list(samples[start : start + bs]), cfg.np_dtype), mcfg)
            if out.pog is not None:
                pf.append(out.pog.p_final.data)
                ph.append(out.pog.p_hat.data)
                al.append(out.pog.alpha.data)
            if out.g_hat is not None:
                gh.append(out.g_hat.data)
    cat = lambda xs: np.concatenate(xs).astype(np.float64) if xs else None  # noqa: E731
    return Predictions(cat(pf), cat(ph), cat(al), cat(gh))


def evaluate(
    samples: Sequence[PreparedSample],
    params,
    cfg: TrainConfig,
    train_drivers: Sequence[str] | None = None,
) -> EvalReport:
    """Forward every sample and aggregate the PoG/direction metrics."""
    if not samples:
        raise ValueError("evaluation set is empty")
    if train_drivers is not None:
        overlap = sorted({s.driver_id for s in samples} & set(train_drivers))
        if overlap:
            raise SplitContamination(f"evaluation drivers also used for training: {overlap}")
    sizes = Counter(tuple(s.scene_size) for s in samples)
    if len(sizes) != 1:
        raise ValueError(f"evaluation needs one scene resolution, got {sorted(sizes)}")
    pred = predict(samples, params, cfg)
    gt = np.stack([s.pog for s in samples])
    gv = None
    if pred.g_hat is not None and all(s.gaze_vec is not None for s in samples):
        gv = np.stack([s.gaze_vec for s in samples])
    if pred.p_final is None:
        raise ValueError("evaluation needs the PoG head (heads = pog or both)")
    return summarize(pred.p_final, gt, next(iter(sizes)), pred.g_hat if gv is not None else None, gv)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    params: dict[str, Tensor]
    config: TrainConfig
    header: dict
    optimizer_meta: dict
    optimizer_arrays: dict[str, np.ndarray]


def _digest(buf: bytes) -> bytes:
    return hashlib.blake2b(buf, digest_size=8).digest()


def save_checkpoint(
    path: str | os.PathLike,
    params: dict[str, Tensor],
    cfg: TrainConfig,
    optimizer=None,
    extra: dict | None = None,
) -> None:
    """JSON header + length-prefixed float32 arrays + 64-bit checksum, written atomically."""
    opt_meta, opt_arrays = optimizer.state() if optimizer is not None else ({}, {})
    arrays = [(k, p.data) for k, p in params.items()] + sorted(opt_arrays.items())
    header = {
        "format_version": CHECKPOINT_VERSION,
        "config": cfg.to_dict(),
        "registry": [[k, list(p.shape)] for k, p in params.items()],
        "optimizer": opt_meta,
        "optimizer_registry": [[k, list(v.shape)] for k, v in sorted(opt_arrays.items())],
        **(extra or {}),
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    parts = [CHECKPOINT_MAGIC, struct.pack("<IQ", CHECKPOINT_VERSION, len(hbytes)), hbytes]
    for _, a in arrays:
        raw = np.ascontiguousarray(a, dtype="<f4").tobytes()
        parts += [struct.pack("<Q", len(raw)), raw]
    body = b"".join(parts)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(body + _digest(body))
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike, expected: dict[str, Sequence[int]] | None = None, dtype=None) -> Checkpoint:
    """Validate and read a checkpoint; never returns partially loaded parameters."""
    buf = Path(path).read_bytes()
    if len(buf) < len(CHECKPOINT_MAGIC) + 12 + 8 or buf[:8] != CHECKPOINT_MAGIC:
        raise CheckpointCorrupt(f"{path}: not a checkpoint or truncated header")
    body, digest = buf[:-8], buf[-8:]
    if _digest(body) != digest:
        raise CheckpointCorrupt(f"{path}: checksum mismatch (truncated or modified file)")
    version, hlen = struct.unpack_from("<IQ", body, 8)
    if version != CHECKPOINT_VERSION:
        raise CheckpointIncompatible(f"{path}: format version {version}, expected {CHECKPOINT_VERSION}")
    pos = 20
    header = json.loads(body[pos : pos + hlen])
    pos += hlen
    registry = [(k, tuple(s)) for k, s in header["registry"]]
    if expected is not None:
        exp = [(k, tuple(s)) for k, s in expected.items()]
        for i in range(max(len(exp), len(registry))):
            a = registry[i] if i < len(registry) else None
            b = exp[i] if i < len(exp) else None
            if a != b:
                name = (b or a)[0]
                raise CheckpointIncompatible(f"parameter registry mismatch at {name!r}: file {a}, expected {b}")
    entries = registry + [(k, tuple(s)) for k, s in header.get("optimizer_registry", [])]
    arrays: dict[str, np.ndarray] = {}
    for name, shape in entries:
        (n,) = struct.unpack_from("<Q", body, pos)
        pos += 8
        want = int(np.prod(shape, dtype=np.int64)) * 4
        if n != want or pos + n > len(body):
            raise CheckpointCorrupt(f"{path}: payload for {name!r} has {n} bytes, expected {want}")
        arrays[name] = np.frombuffer(body, dtype="<f4", count=n // 4, offset=pos).reshape(shape).copy()
        pos += n
    if pos != len(body):
        raise CheckpointCorrupt(f"{path}: {len(body) - pos} trailing bytes")
    cfg = TrainConfig.from_dict(header["config"])
    dt = np.dtype(dtype) if dtype is not None else cfg.np_dtype
    params = {k: Tensor(arrays[k].astype(dt), requires_grad=True, name=k) for k, _ in registry}
    opt_arrays = {k: arrays[k].astype(dt) for k, _ in entries[len(registry):]}
    return Checkpoint(params, cfg, header, header.get("optimizer", {}), opt_arrays)


def registry_of(params: dict[str, Tensor]) -> dict[str, tuple[int, ...]]:
    return {k: p.shape for k, p in params.items()}
