"""Dense-connection saliency encoder: toy backbone, context blocks, top-down
dense merging, sigmoid head, plus training and checkpoint I/O."""

from __future__ import annotations

import json
import logging
import math
import struct
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import metrics
from .dataio import augment, to_tensor
from .errors import CheckpointError, ConfigError, ContractError, TrainingDiverged
from .nn import (
    Parameter,
    Tape,
    Tensor,
    add,
    backward,
    bce_loss,
    bilinear_upsample,
    concat_channels,
    conv2d,
    maxpool2d,
    relu,
    sgd_step,
    sigmoid,
)

log = logging.getLogger(__name__)

CONNECTION_MODES = ("dense", "adjacent")
CHECKPOINT_MAGIC = b"SENETCKPT1"


@dataclass(frozen=True)
class EncoderConfig:
    num_stages: int = 4
    stage_channels: tuple[int, ...] = (8, 16, 32, 64)
    fusion_channels: int = 32
    connection_mode: str = "dense"
    context_block_enabled: bool = True
    input_size: tuple[int, int] = (64, 64)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "stage_channels", tuple(int(c) for c in self.stage_channels))
        object.__setattr__(self, "input_size", tuple(int(s) for s in self.input_size))
        self.validate()

    def validate(self) -> None:
        if self.num_stages < 2:
            raise ConfigError(f"num_stages must be >= 2, got {self.num_stages}")
        if len(self.stage_channels) != self.num_stages:
            raise ConfigError(
                f"stage_channels has {len(self.stage_channels)} entries, "
                f"num_stages is {self.num_stages}"
            )
        if any(c < 1 for c in self.stage_channels) or self.fusion_channels < 1:
            raise ConfigError("all channel counts must be >= 1")
        if self.connection_mode not in CONNECTION_MODES:
            raise ConfigError(f"connection_mode must be one of {CONNECTION_MODES}")
        if len(self.input_size) != 2 or min(self.input_size) < 1:
            raise ConfigError(f"input_size must be (H, W), got {self.input_size}")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must fit in an unsigned 64-bit integer")

    def to_json(self) -> str:
        """Canonical JSON (sorted keys, no whitespace)."""
        d = asdict(self)
        d["stage_channels"] = list(self.stage_channels)
        d["input_size"] = list(self.input_size)
        return json.dumps(d, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown encoder config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class EncoderModel:
    config: EncoderConfig
    params: dict[str, Parameter]

    def parameters(self) -> list[Parameter]:
        return [self.params[k] for k in sorted(self.params)]

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def __getitem__(self, name: str) -> Parameter:
        return self.params[name]

    def __call__(self, image) -> np.ndarray:
        """Inference as a predictor: image tensor [3,H,W] -> saliency [H,W]."""
        return forward(self, image).data[0]


def parameter_shapes(config: EncoderConfig) -> dict[str, tuple[int, ...]]:
    """Every parameter name and shape implied by ``config``, in creation order."""
    shapes: dict[str, tuple[int, ...]] = {}
    ch = config.stage_channels
    in_ch = 3
    for s, c in enumerate(ch, start=1):
        shapes[f"backbone.{s}.conv1.weight"] = (c, in_ch, 3, 3)
        shapes[f"backbone.{s}.conv1.bias"] = (c,)
        shapes[f"backbone.{s}.conv2.weight"] = (c, c, 3, 3)
        shapes[f"backbone.{s}.conv2.bias"] = (c,)
        in_ch = c
    if config.context_block_enabled:
        for s, c in enumerate(ch, start=1):
            shapes.update(context_block_shapes(f"context.{s}", c, c))
    L = config.num_stages
    for s in range(L - 1, 0, -1):
        shapes[f"fuse.{s}.weight"] = (config.fusion_channels, fuse_in_channels(config, s), 3, 3)
        shapes[f"fuse.{s}.bias"] = (config.fusion_channels,)
    shapes["head.weight"] = (1, config.fusion_channels, 1, 1)
    shapes["head.bias"] = (1,)
    return shapes


def context_block_shapes(prefix: str, in_ch: int, out_ch: int) -> dict[str, tuple[int, ...]]:
    shapes = {
        f"{prefix}.conv1.weight": (out_ch, in_ch, 3, 3),
        f"{prefix}.conv1.bias": (out_ch,),
        f"{prefix}.conv2.weight": (out_ch, out_ch, 3, 3),
        f"{prefix}.conv2.bias": (out_ch,),
    }
    if in_ch != out_ch:
        shapes[f"{prefix}.proj.weight"] = (out_ch, in_ch, 1, 1)
        shapes[f"{prefix}.proj.bias"] = (out_ch,)
    return shapes


def _merged_channels(config: EncoderConfig, stage: int) -> int:
    return config.stage_channels[-1] if stage == config.num_stages else config.fusion_channels


def fuse_in_channels(config: EncoderConfig, stage: int) -> int:
    """Input width of the fusion conv at ``stage`` (1-based)."""
    higher = range(stage + 1, config.num_stages + 1)
    if config.connection_mode == "adjacent":
        higher = range(stage + 1, stage + 2)
    return config.stage_channels[stage - 1] + sum(_merged_channels(config, j) for j in higher)


def init_parameters(shapes: dict[str, tuple[int, ...]], rng: np.random.Generator) -> dict[str, Parameter]:
    """Weights ~ N(0, 2/fan_in), biases zero; draws follow ``shapes`` order."""
    params = {}
    for name, shape in shapes.items():
        if name.endswith(".bias"):
            data = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            data = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)
        params[name] = Parameter(data, name=name)
    return params


def build_encoder(config: EncoderConfig, rng: np.random.Generator | None = None) -> EncoderModel:
    config.validate()
    if rng is None:
        rng = np.random.default_rng(config.seed)
    return EncoderModel(config, init_parameters(parameter_shapes(config), rng))


# ---------------------------------------------------------------------------
# forward pieces


def _conv(params, prefix: str, x: Tensor, pad: int = 1) -> Tensor:
    return conv2d(x, params[prefix + ".weight"], params[prefix + ".bias"], 1, pad)


def backbone_forward(model: EncoderModel, image: Tensor) -> list[Tensor]:
    cfg = model.config
    L = cfg.num_stages
    _, h, w = image.shape
    if h % 2 ** (L - 1) or w % 2 ** (L - 1):
        raise ConfigError(f"input {h}x{w} not divisible by 2^{L - 1}")
    feats = []
    x = image
    for s in range(1, L + 1):
        x = relu(_conv(model.params, f"backbone.{s}.conv1", x))
        x = relu(_conv(model.params, f"backbone.{s}.conv2", x))
        feats.append(x)
        if s < L:
            x = maxpool2d(x, 2)
    return feats


def context_block(f: Tensor, params: dict[str, Parameter], prefix: str) -> Tensor:
    """Residual refinement ``G(f) + P(f)``; ``P`` is a 1x1 projection if widths differ."""
    g = relu(_conv(params, prefix + ".conv1", f))
    g = _conv(params, prefix + ".conv2", g)
    skip = _conv(params, prefix + ".proj", f, pad=0) if prefix + ".proj.weight" in params else f
    return add(g, skip)


def dense_merge(xs: Sequence[Tensor], params: dict[str, Parameter], mode: str) -> Tensor:
    """Top-down merge; each stage concatenates upsampled already-merged higher stages."""
    L = len(xs)
    merged: list[Tensor | None] = [None] * L
    merged[L - 1] = xs[L - 1]
    for i in range(L - 2, -1, -1):
        _, h, w = xs[i].shape
        higher = range(i + 1, L) if mode == "dense" else range(i + 1, i + 2)
        parts = [xs[i]] + [bilinear_upsample(merged[j], h, w) for j in higher]
        merged[i] = relu(_conv(params, f"fuse.{i + 1}", concat_channels(parts)))
    return merged[0]


def head_logits(m1: Tensor, params: dict[str, Parameter], size: tuple[int, int]) -> Tensor:
    z = _conv(params, "head", m1, pad=0)
    return bilinear_upsample(z, *size)


def head(m1: Tensor, params: dict[str, Parameter], size: tuple[int, int]) -> Tensor:
    return sigmoid(head_logits(m1, params, size))


def _as_image_tensor(image) -> Tensor:
    t = image if isinstance(image, Tensor) else Tensor(image)
    if t.data.ndim != 3 or t.shape[0] != 3:
        raise ContractError(f"encoder expects an image tensor [3,H,W], got {t.shape}")
    return t


def forward_logits(model: EncoderModel, image) -> Tensor:
    image = _as_image_tensor(image)
    feats = backbone_forward(model, image)
    if model.config.context_block_enabled:
        xs = [context_block(f, model.params, f"context.{s}") for s, f in enumerate(feats, start=1)]
    else:
        xs = feats
    m1 = dense_merge(xs, model.params, model.config.connection_mode)
    return head_logits(m1, model.params, image.shape[1:])


def forward(model: EncoderModel, image) -> Tensor:
    """Saliency map [1,H,W] with values in (0, 1)."""
    return sigmoid(forward_logits(model, image))


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainHyper:
    lr: float = 1e-2
    epochs: int = 15
    momentum: float = 0.9
    weight_decay: float = 0.0005
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "TrainHyper":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown training keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainLog:
    loss: list[float] = field(default_factory=list)
    val_fmeasure: list[float] = field(default_factory=list)
    val_mae: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)

    def to_csv(self, include_time: bool = False) -> str:
        header = "epoch,mean_loss,val_fmeasure,val_mae"
        rows = [header + (",seconds" if include_time else "")]
        for e in range(len(self.loss)):
            row = f"{e + 1},{self.loss[e]!r},{self.val_fmeasure[e]!r},{self.val_mae[e]!r}"
            if include_time:
                row += f",{self.seconds[e]:.3f}"
            rows.append(row)
        return "\n".join(rows) + "\n"


def evaluate_model(model: EncoderModel, dataset) -> tuple[float, float]:
    """Mean F-measure (adaptive threshold) and MAE over ``(image, mask)`` pairs."""
    fs, maes = [], []
    for image, mask in dataset:
        pred = forward(model, to_tensor(image)).data[0]
        gt = np.asarray(mask, dtype=bool)
        fs.append(metrics.fmeasure_adaptive(pred, gt))
        maes.append(metrics.mae(pred, gt))
    return float(np.mean(fs)), float(np.mean(maes))


def train_step(model: EncoderModel, image: Tensor, target: np.ndarray, hyper: TrainHyper) -> float:
    params = model.parameters()
    with Tape():
        logits = forward_logits(model, image)
        loss = bce_loss(logits, target[None].astype(np.float64))
    value = float(loss.data)
    if not math.isfinite(value):
        raise TrainingDiverged(f"non-finite loss {value}")
    backward(loss)
    sgd_step(params, hyper.lr, hyper.momentum, hyper.weight_decay)
    return value


def train(model: EncoderModel, train_set, val_set, hyper: TrainHyper | None = None) -> TrainLog:
    """Per-sample SGD: augment, forward, BCE, backward, step.

    ``train_set``/``val_set`` are sequences of ``(uint8 image HxWx3, bool mask)``.
    """
    hyper = hyper or TrainHyper()
    if not len(train_set) or not len(val_set):
        raise ConfigError("train and validation sets must be non-empty")
    size = model.config.input_size
    for idx, (image, _) in enumerate(train_set):
        if tuple(np.shape(image)[:2]) != size:
            raise ConfigError(f"training image {idx} has size {np.shape(image)[:2]}, expected {size}")
    rng = np.random.default_rng(hyper.seed)
    out = TrainLog()
    for epoch in range(hyper.epochs):
        t0 = time.perf_counter()
        losses = []
        for i in rng.permutation(len(train_set)):
            image, mask = train_set[i]
            image, mask = augment(image, mask, rng)
            try:
                losses.append(train_step(model, to_tensor(image), np.asarray(mask), hyper))
            except TrainingDiverged as exc:
                raise TrainingDiverged(
                    f"epoch {epoch + 1}, sample {i}: {exc} (lr={hyper.lr}); "
                    "lower the learning rate"
                ) from None
        f, m = evaluate_model(model, val_set)
        out.loss.append(float(np.mean(losses)))
        out.val_fmeasure.append(f)
        out.val_mae.append(m)
        out.seconds.append(time.perf_counter() - t0)
        log.info(
            "epoch %d/%d loss=%.4f val_F=%.4f val_MAE=%.4f (%.1fs)",
            epoch + 1, hyper.epochs, out.loss[-1], f, m, out.seconds[-1],
        )
    return out


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: EncoderModel, path) -> None:
    cfg = model.config.to_json().encode("utf-8")
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", len(cfg)), cfg]
    for name in sorted(model.params):
        p = model.params[name]
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack(f"<{1 + p.data.ndim}I", p.data.ndim, *p.data.shape))
        chunks.append(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(
                f"{self.path}: corrupt checkpoint, truncated while reading {what} "
                f"at byte {self.pos}"
            )
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    @property
    def done(self) -> bool:
        return self.pos == len(self.buf)


def load_checkpoint(path, expected: EncoderConfig | None = None) -> EncoderModel:
    """Read a checkpoint; with ``expected`` given, parameters must match its shapes."""
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: cannot read checkpoint ({exc})") from exc
    r = _Reader(buf, path)
    if r.take(len(CHECKPOINT_MAGIC), "magic") != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a saliex checkpoint (bad magic)")
    n = r.u32("config length")
    try:
        config = EncoderConfig.from_dict(json.loads(r.take(n, "config").decode("utf-8")))
    except (ValueError, TypeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint config ({exc})") from exc

    stored: dict[str, np.ndarray] = {}
    while not r.done:
        name = r.take(r.u32("name length"), "parameter name").decode("utf-8")
        rank = r.u32(f"rank of {name}")
        dims = tuple(r.u32(f"dims of {name}") for _ in range(rank))
        count = int(np.prod(dims)) if dims else 1
        stored[name] = np.frombuffer(r.take(8 * count, f"values of {name}"), dtype="<f8").reshape(dims)

    target = expected if expected is not None else config
    shapes = parameter_shapes(target)
    for name, shape in shapes.items():
        if name not in stored:
            raise CheckpointError(f"{path}: parameter {name!r} missing from checkpoint")
        if stored[name].shape != shape:
            raise CheckpointError(
                f"{path}: parameter {name!r} has shape {stored[name].shape}, expected {shape}"
            )
    extra = sorted(set(stored) - set(shapes))
    if extra:
        raise CheckpointError(f"{path}: unexpected parameter {extra[0]!r} in checkpoint")
    if expected is not None and replace(expected, seed=0) != replace(config, seed=0):
        raise CheckpointError(f"{path}: checkpoint config {config} differs from expected {expected}")
    params = {name: Parameter(stored[name].astype(np.float64), name=name) for name in shapes}
    return EncoderModel(config, params)
