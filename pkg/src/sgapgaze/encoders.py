"""Convolutional stem + four residual stages with 1x1 channel projections."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor


@dataclass(frozen=True)
class StageConfig:
    blocks: int
    channels: int
    stride: int


@dataclass(frozen=True)
class EncoderConfig:
    stem_kernel: int = 7
    stem_stride: int = 2
    stem_channels: int = 64
    stem_pool: bool = True
    stages: tuple[StageConfig, ...] = (
        StageConfig(2, 64, 1),
        StageConfig(2, 128, 2),
        StageConfig(2, 256, 2),
        StageConfig(2, 512, 2),
    )
    projection_dim: int = 256
    input_size: tuple[int, int] = (224, 224)
    ln_eps: float = 1e-5

    def __post_init__(self):
        if len(self.stages) != 4:
            raise ValueError(f"encoder needs exactly 4 stages, got {len(self.stages)}")
        stages = tuple(s if isinstance(s, StageConfig) else StageConfig(*s) for s in self.stages)
        object.__setattr__(self, "stages", stages)
        object.__setattr__(self, "input_size", tuple(self.input_size))

    @classmethod
    def miniature(cls, projection_dim: int = 32) -> "EncoderConfig":
        """28x28 input, stage maps 28/14/7/7; small enough for gradient checks and CPU training."""
        return cls(
            stem_kernel=3,
            stem_stride=1,
            stem_channels=8,
            stem_pool=False,
            stages=(StageConfig(1, 8, 1), StageConfig(1, 16, 2), StageConfig(1, 32, 2), StageConfig(1, 64, 1)),
            projection_dim=projection_dim,
            input_size=(28, 28),
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stages"] = [list(asdict(s).values()) for s in self.stages]
        d["input_size"] = list(self.input_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        d = dict(d)
        if "stages" in d:
            d["stages"] = tuple(StageConfig(*s) if not isinstance(s, dict) else StageConfig(**s) for s in d["stages"])
        if "input_size" in d:
            d["input_size"] = tuple(d["input_size"])
        return cls(**d)


def _out(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def stage_shapes(cfg: EncoderConfig) -> list[tuple[int, int, int]]:
    """(C_l, H_l, W_l) for each stage, from stride arithmetic alone."""
    h, w = cfg.input_size
    k = cfg.stem_kernel
    h, w = _out(h, k, cfg.stem_stride, k // 2), _out(w, k, cfg.stem_stride, k // 2)
    if cfg.stem_pool:
        h, w = _out(h, 3, 2, 1), _out(w, 3, 2, 1)
    shapes = []
    for st in cfg.stages:
        h, w = _out(h, 3, st.stride, 1), _out(w, 3, st.stride, 1)
        shapes.append((st.channels, h, w))
    return shapes


def _kaiming(rng: np.random.Generator, shape: tuple[int, ...], dtype) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def init_encoder(
    cfg: EncoderConfig,
    rng: np.random.Generator,
    prefix: str,
    project_stages=(1, 2, 3, 4),
    dtype=np.float64,
) -> dict[str, Tensor]:
    """Kaiming-uniform conv weights, zero biases, unit LN gains."""
    p: dict[str, np.ndarray] = {}

    def conv(name, cout, cin, k):
        p[f"{name}.w"] = _kaiming(rng, (cout, cin, k, k), dtype)
        p[f"{name}.b"] = np.zeros(cout, dtype)

    def norm(name, c):
        p[f"{name}.g"] = np.ones(c, dtype)
        p[f"{name}.b"] = np.zeros(c, dtype)

    conv(f"{prefix}.stem", cfg.stem_channels, 3, cfg.stem_kernel)
    norm(f"{prefix}.stem_ln", cfg.stem_channels)
    cin = cfg.stem_channels
    for li, st in enumerate(cfg.stages, start=1):
        for bi in range(st.blocks):
            stride = st.stride if bi == 0 else 1
            base = f"{prefix}.layer{li}.{bi}"
            conv(f"{base}.conv1", st.channels, cin, 3)
            norm(f"{base}.ln1", st.channels)
            conv(f"{base}.conv2", st.channels, st.channels, 3)
            norm(f"{base}.ln2", st.channels)
            if stride != 1 or cin != st.channels:
                conv(f"{base}.skip", st.channels, cin, 1)
                norm(f"{base}.skip_ln", st.channels)
            cin = st.channels
        if li in project_stages:
            conv(f"{prefix}.proj{li}", cfg.projection_dim, st.channels, 1)
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in p.items()}


def _ln_channels(x: Tensor, params, name: str, eps: float) -> Tensor:
    return ad.layer_norm(x, params[f"{name}.g"], params[f"{name}.b"], eps=eps, axis=-3)


def _block(x: Tensor, params, base: str, stride: int, eps: float) -> Tensor:
    y = ad.conv2d(x, params[f"{base}.conv1.w"], params[f"{base}.conv1.b"], stride=stride, pad=1)
    y = ad.relu(_ln_channels(y, params, f"{base}.ln1", eps))
    y = ad.conv2d(y, params[f"{base}.conv2.w"], params[f"{base}.conv2.b"], stride=1, pad=1)
    y = _ln_channels(y, params, f"{base}.ln2", eps)
    if f"{base}.skip.w" in params:
        s = ad.conv2d(x, params[f"{base}.skip.w"], params[f"{base}.skip.b"], stride=stride, pad=0)
        s = _ln_channels(s, params, f"{base}.skip_ln", eps)
    else:
        s = x
    return ad.relu(ad.add(y, s))


@dataclass
class StagePyramid:
    maps: list[Tensor]
    projected: list[Tensor | None] = field(default_factory=list)


def _check_input(image: Tensor, cfg: EncoderConfig) -> None:
    want = (3,) + tuple(cfg.input_size)
    if image.shape[-3:] != want or image.ndim not in (3, 4):
        raise DimensionError(f"encoder expects {want} (optionally batched), got {image.shape}")


def encode_hierarchical(image: Tensor, cfg: EncoderConfig, params: dict[str, Tensor], prefix: str) -> StagePyramid:
    """Stage maps F_1..F_4 plus their 1x1 projections (None where a stage has no projection)."""
    _check_input(image, cfg)
    eps = cfg.ln_eps
    k = cfg.stem_kernel
    x = ad.conv2d(image, params[f"{prefix}.stem.w"], params[f"{prefix}.stem.b"], stride=cfg.stem_stride, pad=k // 2)
    x = ad.relu(_ln_channels(x, params, f"{prefix}.stem_ln", eps))
    if cfg.stem_pool:
        x = ad.max_pool2d(x, 3, 2, 1)
    maps, projected = [], []
    for li, st in enumerate(cfg.stages, start=1):
        for bi in range(st.blocks):
            x = _block(x, params, f"{prefix}.layer{li}.{bi}", st.stride if bi == 0 else 1, eps)
        maps.append(x)
        pw = params.get(f"{prefix}.proj{li}.w")
        projected.append(None if pw is None else ad.conv2d(x, pw, params[f"{prefix}.proj{li}.b"]))
    return StagePyramid(maps, projected)


def pyramid_gap(p: StagePyramid) -> list[Tensor]:
    """Global-average-pooled projected maps f_1..f_4."""
    if any(m is None for m in p.projected):
        raise ValueError("pyramid_gap needs projections for all four stages")
    return [ad.global_avg_pool(m) for m in p.projected]


def encode_spatial(image: Tensor, cfg: EncoderConfig, params: dict[str, Tensor], prefix: str) -> Tensor:
    """Projected stage-4 map, no pooling: ``(D, H_4, W_4)`` (or batched)."""
    pyr = encode_hierarchical(image, cfg, params, prefix)
    if pyr.projected[3] is None:
        raise ValueError(f"encoder '{prefix}' has no stage-4 projection")
    return pyr.projected[3]
