"""Training loop, alpha sampling, paired augmentation and test-time adaptation."""
from __future__ import annotations

import copy
import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .core import Frame, FramePair, VideoClip
from .flow import MotionEstimator
from .generator import GeneratorModel, save_checkpoint
from .losses import LossWeights, total_loss

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "mag", "color", "total", "alpha_mean", "wall_time")


@dataclass(frozen=True)
class TrainConfig:
    alpha_min: float = 1.0
    alpha_max: float = 16.0
    lambda_color: float = 10.0
    learning_rate: float = 3e-4
    batch_size: int = 40
    image_size: int = 512
    steps: int = 1000
    seed: int = 0
    crop_scale: tuple[float, float] = (0.7, 1.0)
    rotation_deg: tuple[float, float] = (-15.0, 15.0)
    flip_prob: float = 0.5
    color_jitter_strength: float = 0.3
    flow_iterations: int = 100  # sweeps per level for the estimator inside the loss
    checkpoint_every: int = 0

    def __post_init__(self):
        object.__setattr__(self, "crop_scale", tuple(self.crop_scale))
        object.__setattr__(self, "rotation_deg", tuple(self.rotation_deg))
        if not 1 <= self.alpha_min <= self.alpha_max:
            raise ValueError("need 1 <= alpha_min <= alpha_max")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        lo, hi = self.crop_scale
        if not 0 < lo <= hi <= 1:
            raise ValueError("crop_scale must lie within (0, 1]")
        if self.batch_size < 1 or self.image_size < 8:
            raise ValueError("batch_size must be >= 1 and image_size >= 8")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if not 0 <= self.flip_prob <= 1:
            raise ValueError("flip_prob must lie in [0, 1]")

    @classmethod
    def paper(cls, **kw) -> "TrainConfig":
        return cls(**kw)

    @classmethod
    def desk(cls, **kw) -> "TrainConfig":
        base = dict(batch_size=8, image_size=64, steps=2000, alpha_max=8.0, flow_iterations=50)
        base.update(kw)
        return cls(**base)


@dataclass(frozen=True)
class TTAConfig:
    steps: int = 100
    learning_rate: float = 1e-4
    crop_scale: tuple[float, float] = (0.9, 1.0)
    jitter_strength: float = 0.05
    alpha_min: float = 1.0
    alpha_max: float = 16.0
    batch_size: int = 4
    seed: int = 0
    flow_iterations: int = 100

    def __post_init__(self):
        object.__setattr__(self, "crop_scale", tuple(self.crop_scale))
        if self.steps < 0:
            raise ValueError("steps must be >= 0")

    def as_train_config(self, image_size: int) -> TrainConfig:
        return TrainConfig(
            alpha_min=self.alpha_min, alpha_max=self.alpha_max, learning_rate=self.learning_rate,
            batch_size=self.batch_size, image_size=image_size, steps=self.steps, seed=self.seed,
            crop_scale=self.crop_scale, rotation_deg=(0.0, 0.0), flip_prob=0.0,
            color_jitter_strength=self.jitter_strength, flow_iterations=self.flow_iterations,
        )


class TrainingError(RuntimeError):
    pass


def sample_alpha(cfg: TrainConfig, rng: np.random.Generator, size=None):
    """Log-uniform: ``log2(alpha) ~ U(log2(alpha_min), log2(alpha_max))``."""
    lo, hi = math.log2(cfg.alpha_min), math.log2(cfg.alpha_max)
    return np.exp2(rng.uniform(lo, hi, size=size)) if hi > lo else (
        cfg.alpha_min if size is None else np.full(size, cfg.alpha_min))


# -- augmentation -----------------------------------------------------------------------------


@dataclass(frozen=True)
class AugmentDraw:
    """One sampled transform; applying it to both frames keeps them consistent."""

    crop: tuple[int, int, int, int]  # top, left, height, width
    hflip: bool
    vflip: bool
    angle: float
    brightness: float
    contrast: float
    saturation: float


def draw_augmentation(h: int, w: int, cfg: TrainConfig, rng: np.random.Generator) -> AugmentDraw:
    scale = rng.uniform(*cfg.crop_scale)
    side = int(round(math.sqrt(scale) * min(h, w)))
    side = max(1, min(side, h, w))
    top = int(rng.integers(0, h - side + 1))
    left = int(rng.integers(0, w - side + 1))
    hflip = bool(rng.random() < cfg.flip_prob)
    vflip = bool(rng.random() < cfg.flip_prob)
    angle = float(rng.uniform(*cfg.rotation_deg))
    s = cfg.color_jitter_strength
    b, c, sat = (float(rng.uniform(1 - s, 1 + s)) for _ in range(3))
    return AugmentDraw((top, left, side, side), hflip, vflip, angle, b, c, sat)


def apply_augmentation(frames: torch.Tensor, draw: AugmentDraw, size: int) -> torch.Tensor:
    """Apply ``draw`` to a stack ``N x 3 x H x W`` of frames that belong together."""
    top, left, ch, cw = draw.crop
    h, w = frames.shape[-2:]
    if ch > h or cw > w:
        raise ValueError("crop larger than frame")
    x = frames[..., top:top + ch, left:left + cw]
    if (ch, cw) != (size, size):
        x = F.interpolate(x, size=(size, size), mode="bilinear", align_corners=False,
                          antialias=ch > size or cw > size)
    if draw.hflip:
        x = x.flip(-1)
    if draw.vflip:
        x = x.flip(-2)
    if draw.angle != 0.0:
        t = math.radians(draw.angle)
        theta = torch.tensor([[math.cos(t), -math.sin(t), 0.0], [math.sin(t), math.cos(t), 0.0]], dtype=x.dtype)
        grid = F.affine_grid(theta[None].expand(x.shape[0], -1, -1), list(x.shape), align_corners=False)
        x = F.grid_sample(x, grid, mode="bilinear", padding_mode="reflection", align_corners=False)
    if draw.brightness != 1.0:
        x = x * draw.brightness
    if draw.contrast != 1.0:
        # pivot on the first frame's mean so every frame gets the same affine map
        mean = x[0].mean()
        x = (x - mean) * draw.contrast + mean
    if draw.saturation != 1.0:
        gray = (0.299 * x[:, 0:1] + 0.587 * x[:, 1:2] + 0.114 * x[:, 2:3])
        x = (x - gray) * draw.saturation + gray
    return x.clamp(0.0, 1.0)


def augment_pair(pair: FramePair, cfg: TrainConfig, rng: np.random.Generator) -> FramePair:
    h, w = pair.ref.shape
    draw = draw_augmentation(h, w, cfg, rng)
    out = apply_augmentation(torch.cat([pair.ref.tensor(), pair.tgt.tensor()]), draw, cfg.image_size)
    return FramePair(Frame.from_tensor(out[0]), Frame.from_tensor(out[1]), pair_id=pair.pair_id)


def _augmented_batch(pairs: Sequence[FramePair], cfg: TrainConfig, rng: np.random.Generator):
    refs, tgts = [], []
    for p in pairs:
        h, w = p.ref.shape
        draw = draw_augmentation(h, w, cfg, rng)
        x = apply_augmentation(torch.cat([p.ref.tensor(), p.tgt.tensor()]), draw, cfg.image_size)
        refs.append(x[0])
        tgts.append(x[1])
    return torch.stack(refs), torch.stack(tgts)


# -- training ---------------------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: GeneratorModel
    log: list[dict] = field(default_factory=list)


class MetricsLog:
    """Append-only CSV of per-step losses."""

    def __init__(self, path=None):
        self.rows: list[dict] = []
        self.path = Path(path) if path else None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            if not self.path.exists():
                with open(self.path, "w", newline="") as f:
                    csv.writer(f).writerow(LOG_COLUMNS)

    def append(self, row: dict) -> None:
        self.rows.append(row)
        if self.path is not None:
            with open(self.path, "a", newline="") as f:
                csv.writer(f).writerow([row[c] for c in LOG_COLUMNS])


def make_optimizer(model: GeneratorModel, lr: float) -> torch.optim.Optimizer:
    return torch.optim.Adam(model.parameters(), lr=lr, betas=(0.9, 0.999), eps=1e-8)


def train_step(model: GeneratorModel, optimizer, ref: torch.Tensor, tgt: torch.Tensor, alphas: torch.Tensor,
               estimator: MotionEstimator, weights: LossWeights):
    model.train()
    gen = model(ref, tgt, alphas)
    report = total_loss(ref, tgt, gen, alphas, estimator, weights)
    if not torch.isfinite(report.total):
        raise TrainingError(
            f"non-finite loss (mag={float(report.mag)}, color={float(report.color)}); "
            f"alphas={alphas.tolist()}, ref range=({float(ref.min())}, {float(ref.max())}), "
            f"tgt range=({float(tgt.min())}, {float(tgt.max())})"
        )
    optimizer.zero_grad(set_to_none=True)
    report.total.backward()
    optimizer.step()
    return report


def train(model: GeneratorModel, dataset: Sequence[FramePair], cfg: TrainConfig, estimator: MotionEstimator,
          log_path=None, checkpoint_dir=None, on_step: Callable[[dict], None] | None = None) -> TrainResult:
    """Fit ``model`` in place. All randomness derives from ``cfg.seed``."""
    if not estimator.differentiable:
        raise ValueError(f"estimator {estimator.name!r} is not differentiable")
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    metrics = MetricsLog(log_path)
    if cfg.steps == 0:
        return TrainResult(model, metrics.rows)

    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    est = estimator.with_iterations(cfg.flow_iterations)
    weights = LossWeights(cfg.lambda_color)
    opt = make_optimizer(model, cfg.learning_rate)
    order = np.empty(0, np.int64)
    t0 = time.perf_counter()
    for step in range(cfg.steps):
        if order.size < cfg.batch_size:
            order = np.concatenate([order, rng.permutation(len(dataset))])
        idx, order = order[:cfg.batch_size], order[cfg.batch_size:]
        ref, tgt = _augmented_batch([dataset[i] for i in idx], cfg, rng)
        alphas = torch.as_tensor(sample_alpha(cfg, rng, size=len(idx)), dtype=ref.dtype)
        rep = train_step(model, opt, ref, tgt, alphas, est, weights)
        row = {"step": step, **rep.floats(), "alpha_mean": float(alphas.mean()),
               "wall_time": round(time.perf_counter() - t0, 3)}
        metrics.append(row)
        if on_step is not None:
            on_step(row)
        model.trained = True
        if checkpoint_dir and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
            save_checkpoint(model, Path(checkpoint_dir) / f"step_{step + 1:06d}.npz", {"step": step + 1})
    return TrainResult(model, metrics.rows)


def clip_pairs(clip: VideoClip) -> list[FramePair]:
    return [FramePair(clip[0], f, pair_id=f"frame{t}") for t, f in enumerate(clip.frames[1:], start=1)]


def tta(model: GeneratorModel, clip: VideoClip, cfg: TTAConfig, estimator: MotionEstimator,
        on_step=None) -> GeneratorModel:
    """Finetune a copy of ``model`` on (frame 0, frame t) pairs from the clip itself."""
    if len(clip) < 2:
        raise ValueError("clip needs at least 2 frames")
    adapted = copy.deepcopy(model)
    if cfg.steps == 0:
        return adapted
    h, w = clip.shape
    tcfg = cfg.as_train_config(image_size=min(h, w))
    was_trained = model.trained
    train(adapted, clip_pairs(clip), tcfg, estimator, on_step=on_step)
    adapted.trained = was_trained or adapted.trained
    return adapted


def save_run_config(cfg, path) -> None:
    Path(path).write_text(json.dumps(asdict(cfg), indent=2))


def load_run_config(cls, path, overrides: dict | None = None):
    text = Path(path).read_text() if path else "{}"
    if path and str(path).endswith((".yaml", ".yml")):
        import yaml

        data = yaml.safe_load(text) or {}
    else:
        data = json.loads(text)
    data.update(overrides or {})
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    return cls(**data)
