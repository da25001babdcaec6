"""Synthetic frame pairs with exact ground-truth motion, the benchmark suites, and curation.

Synthetic scenes are rendered analytically: textures are sums of low-frequency
sinusoids evaluated at pixel centres, and rectangular foreground mattes are
filtered analytically with a 2-px tent per axis, so any subpixel shift is
represented without resampling and the matte centroid moves by exactly the
requested displacement.

The red channel is flat inside each layer (background 0.1, foreground 0.9),
which makes it a linear readout of foreground coverage; texture lives in
green and blue.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch

from .core import (
    FlowField,
    Frame,
    FramePair,
    VideoClip,
    frame_paths,
    load_frame,
    read_flo,
    save_frame,
    write_flo,
)
from .flow import MotionEstimator, flow_percentiles

SUBPIXEL_LEVELS = 15
NOISE_GROUPS = 21
NOISE_EPS = 1e-3
# factor 1.0 gives sigma = 1/255 on mid-gray
NOISE_K = 1.0 / (255.0 * math.sqrt(0.5 + NOISE_EPS))

BG_RED = 0.1
FG_RED = 0.9


class Texture:
    """Smooth random RGB texture defined on the continuous plane."""

    def __init__(self, rng: np.random.Generator, n_waves: int = 12, max_freq: float = 0.12,
                 red_range=(0.1, 0.9), gb_range=(0.1, 0.9)):
        self.freqs = rng.uniform(-max_freq, max_freq, size=(3, n_waves, 2))
        self.phases = rng.uniform(0, 2 * np.pi, size=(3, n_waves))
        self.amps = rng.uniform(0.5, 1.0, size=(3, n_waves))
        self.ranges = [red_range, gb_range, gb_range]

    def __call__(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        out = np.empty(x.shape + (3,))
        for c in range(3):
            ang = 2 * np.pi * (x[..., None] * self.freqs[c, :, 0] + y[..., None] * self.freqs[c, :, 1]) + self.phases[c]
            # ~2.5 sigma of the wave sum maps to the range ends
            s = (self.amps[c] * np.sin(ang)).sum(-1) / (2.5 * np.sqrt(0.5 * (self.amps[c] ** 2).sum()))
            s = np.clip(s, -1.0, 1.0)
            lo, hi = self.ranges[c]
            out[..., c] = lo + (hi - lo) * 0.5 * (s + 1.0)
        return out


def _tent_cdf(u: np.ndarray) -> np.ndarray:
    u = np.clip(u, -1.0, 1.0)
    return np.where(u < 0, 0.5 * (u + 1) ** 2, 1.0 - 0.5 * (1 - u) ** 2)


def _edge_profile(lo: float, hi: float, n: int) -> np.ndarray:
    """Indicator of [lo, hi] filtered with a 2-px tent and sampled at pixel centres.

    The tent (box convolved with box) makes the sampled first moment exactly
    linear in a shift of the interval, so centroids move by the true offset.
    """
    c = np.arange(n, dtype=np.float64)
    return _tent_cdf(c - lo) - _tent_cdf(c - hi)


@dataclass
class SceneObject:
    x0: float
    y0: float
    width: float
    height: float
    texture: Texture

    def matte(self, h: int, w: int, dx: float = 0.0, dy: float = 0.0) -> np.ndarray:
        cx = _edge_profile(self.x0 + dx - 0.5, self.x0 + dx + self.width - 0.5, w)
        cy = _edge_profile(self.y0 + dy - 0.5, self.y0 + dy + self.height - 0.5, h)
        return cy[:, None] * cx[None, :]


@dataclass
class Scene:
    """Static textured background with translating textured rectangles."""

    size: int
    background: Texture
    objects: list[SceneObject] = field(default_factory=list)

    def render(self, offsets: Sequence[tuple[float, float]] | None = None):
        """Returns ``(image HxWx3, [matte per object])`` for the given per-object offsets."""
        n = self.size
        offsets = offsets or [(0.0, 0.0)] * len(self.objects)
        ys, xs = np.mgrid[0:n, 0:n].astype(np.float64)
        img = self.background(xs, ys)
        mattes = []
        for obj, (dx, dy) in zip(self.objects, offsets):
            m = obj.matte(n, n, dx, dy)
            # texture moves with the object: sample it in object coordinates
            tex = obj.texture(xs - dx, ys - dy)
            img = img * (1 - m[..., None]) + tex * m[..., None]
            mattes.append(m)
        return img, mattes


def random_scene(rng: np.random.Generator, size: int, n_objects: int = 1, obj_size: float | None = None,
                 margin: float = 12.0) -> Scene:
    bg = Texture(rng, red_range=(BG_RED, BG_RED))
    scene = Scene(size, bg)
    obj_size = obj_size or size * 0.3
    slots = n_objects
    for i in range(n_objects):
        w = obj_size * rng.uniform(0.85, 1.15)
        h = obj_size * rng.uniform(0.85, 1.15)
        # objects get separate horizontal slots so they never overlap
        lo = margin + i * (size - 2 * margin) / slots
        hi = margin + (i + 1) * (size - 2 * margin) / slots - w
        x0 = rng.uniform(lo, max(lo, hi))
        y0 = rng.uniform(margin, max(margin, size - margin - h))
        scene.objects.append(SceneObject(x0, y0, w, h, Texture(rng, red_range=(FG_RED, FG_RED))))
    return scene


@dataclass(frozen=True)
class SyntheticSpec:
    kind: str = "subpixel"  # subpixel | noise
    motion_px: float = 0.5
    target_magnified_px: float = 10.0
    noise_factor: float = 0.0
    size: int = 64
    texture_seed: int = 0
    angle_deg: float = 0.0  # direction of motion, 0 = +x
    object_fraction: float = 0.3  # foreground side length relative to the frame

    def __post_init__(self):
        if self.kind not in ("subpixel", "noise"):
            raise ValueError(f"unknown synthetic kind {self.kind!r}")
        if self.motion_px < 0 or self.noise_factor < 0:
            raise ValueError("motion_px and noise_factor must be >= 0")
        if self.size < 16:
            raise ValueError("size must be >= 16")

    @property
    def alpha(self) -> float:
        return self.target_magnified_px / self.motion_px if self.motion_px > 0 else float("inf")

    @property
    def motion_vector(self) -> tuple[float, float]:
        a = math.radians(self.angle_deg)
        return self.motion_px * math.cos(a), self.motion_px * math.sin(a)


def add_photon_noise(img: np.ndarray, factor: float, rng: np.random.Generator) -> np.ndarray:
    if factor == 0:
        return img
    sigma = factor * NOISE_K * np.sqrt(img + NOISE_EPS)
    return np.clip(img + sigma * rng.standard_normal(img.shape), 0.0, 1.0)


def synthesize(spec: SyntheticSpec, rng: np.random.Generator | None = None) -> FramePair:
    """Render a reference/target pair plus ground-truth flow and ground-truth magnified frame.

    Scene content comes from ``spec.texture_seed``; ``rng`` only drives noise.
    """
    rng = rng if rng is not None else np.random.default_rng(spec.texture_seed + 1)
    scene = random_scene(np.random.default_rng(spec.texture_seed), spec.size,
                         obj_size=spec.object_fraction * spec.size, margin=spec.target_magnified_px + 2)
    mx, my = spec.motion_vector
    ref, (matte,) = scene.render([(0.0, 0.0)])
    tgt, _ = scene.render([(mx, my)])
    magnified = None
    if spec.motion_px > 0:
        k = spec.target_magnified_px / spec.motion_px
        magnified, _ = scene.render([(k * mx, k * my)])
    ref = add_photon_noise(ref, spec.noise_factor, rng)
    tgt = add_photon_noise(tgt, spec.noise_factor, rng)
    flow = np.zeros((spec.size, spec.size, 2), np.float32)
    support = matte >= 0.5
    flow[support] = (mx, my)
    return FramePair(
        Frame(ref),
        Frame(tgt),
        FlowField(flow),
        pair_id=f"{spec.kind}-m{spec.motion_px:.4f}-n{spec.noise_factor:.4g}-s{spec.texture_seed}",
        fg_matte=matte,
        gt_magnified=None if magnified is None else Frame(magnified),
        gt_alpha=spec.alpha if magnified is not None else None,
    )


def render_clip(scene: Scene, trajectories: Sequence[Sequence[tuple[float, float]]], fps: float = 30.0):
    """``trajectories[t][i]`` is object i's offset in frame t. Returns ``(clip, mattes per frame)``."""
    frames, mattes = [], []
    for offs in trajectories:
        img, m = scene.render(offs)
        frames.append(Frame(img))
        mattes.append(m)
    return VideoClip(tuple(frames), fps=fps), mattes


# -- desk training data -----------------------------------------------------------------------


def translating_pairs(n: int, seed: int, size: int = 64, motion_range=(0.25, 1.0),
                      object_fraction: float = 0.5) -> list[FramePair]:
    """Noise-free pairs of textured rectangles moving by a random subpixel amount in a random direction.

    The foreground covers about a quarter of the frame by default; with much
    smaller objects the moving pixels barely register in a frame-averaged loss.
    """
    rng = np.random.default_rng(seed)
    pairs = []
    for i in range(n):
        spec = SyntheticSpec(
            motion_px=float(rng.uniform(*motion_range)),
            angle_deg=float(rng.uniform(0, 360)),
            size=size,
            texture_seed=int(rng.integers(2**31)),
            target_magnified_px=8.0,
            object_fraction=object_fraction,
        )
        pair = synthesize(spec)
        pairs.append(FramePair(pair.ref, pair.tgt, pair.gt_flow, f"train-{seed}-{i}", pair.fg_matte))
    return pairs


def weighted_centroid(w: np.ndarray) -> np.ndarray:
    ys, xs = np.mgrid[0:w.shape[0], 0:w.shape[1]]
    s = w.sum()
    if s <= 0:
        return np.array([np.nan, np.nan])
    return np.array([(w * xs).sum() / s, (w * ys).sum() / s])


def foreground_weight(img: np.ndarray) -> np.ndarray:
    """Foreground coverage read off the red channel."""
    r = np.asarray(img)[..., 0]
    return np.clip((r - BG_RED) / (FG_RED - BG_RED), 0.0, 1.0)


def foreground_centroid(img, region: np.ndarray | None = None) -> np.ndarray:
    a = img.data if isinstance(img, Frame) else np.asarray(img)
    w = foreground_weight(a)
    if region is not None:
        w = w * region
    return weighted_centroid(w)


# -- benchmark ---------------------------------------------------------------------------------


def subpixel_levels() -> np.ndarray:
    return np.geomspace(0.04, 1.0, SUBPIXEL_LEVELS)


def noise_factors() -> np.ndarray:
    return np.geomspace(0.01, 100.0, NOISE_GROUPS)


def benchmark_specs(size: int = 64, pairs_per_group: int = 2, seed: int = 0):
    """Yield ``(suite, group, SyntheticSpec, noise_seed)`` for both suites."""
    rng = np.random.default_rng(seed)
    for g, m in enumerate(subpixel_levels()):
        for _ in range(pairs_per_group):
            yield "subpixel", g, SyntheticSpec("subpixel", float(m), 10.0, 0.0, size,
                                               int(rng.integers(2**31)), float(rng.uniform(0, 360))), int(rng.integers(2**31))
    for g, nf in enumerate(noise_factors()):
        for _ in range(pairs_per_group):
            m = float(rng.uniform(0.1, 2.0))
            yield "noise", g, SyntheticSpec("noise", m, 10.0, float(nf), size,
                                            int(rng.integers(2**31)), float(rng.uniform(0, 360))), int(rng.integers(2**31))


def build_benchmark(out_dir, size: int = 64, pairs_per_group: int = 2, seed: int = 0) -> list[dict]:
    """Write both suites under ``out_dir`` and return the manifest records.

    Layout: ``<suite>/g<group>/p<index>/{ref,tgt,gt_mag}.png`` (16-bit) and
    ``gt_flow.flo``; ``manifest.jsonl`` holds one record per pair.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    counters: dict[tuple[str, int], int] = {}
    for suite, group, spec, noise_seed in benchmark_specs(size, pairs_per_group, seed):
        idx = counters.get((suite, group), 0)
        counters[(suite, group)] = idx + 1
        pair = synthesize(spec, np.random.default_rng(noise_seed))
        rel = Path(suite) / f"g{group:02d}" / f"p{idx:02d}"
        d = out / rel
        d.mkdir(parents=True, exist_ok=True)
        save_frame(pair.ref, d / "ref.png", bits=16)
        save_frame(pair.tgt, d / "tgt.png", bits=16)
        save_frame(pair.gt_magnified, d / "gt_mag.png", bits=16)
        write_flo(pair.gt_flow, d / "gt_flow.flo")
        rec = {
            "pair_id": f"{suite}-g{group:02d}-p{idx:02d}",
            "suite": suite,
            "group": group,
            "alpha": spec.alpha,
            "motion_px": spec.motion_px,
            "angle_deg": spec.angle_deg,
            "noise_factor": spec.noise_factor,
            "noise_k": NOISE_K,
            "target_magnified_px": spec.target_magnified_px,
            "texture_seed": spec.texture_seed,
            "ref": str(rel / "ref.png"),
            "tgt": str(rel / "tgt.png"),
            "gt_magnified": str(rel / "gt_mag.png"),
            "gt_flow": str(rel / "gt_flow.flo"),
        }
        records.append(rec)
    with open(out / "manifest.jsonl", "w") as f:
        for r in records:
            f.write(json.dumps(r) + "\n")
    return records


def load_manifest(path) -> list[dict]:
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


def load_benchmark(root) -> list[tuple[dict, FramePair]]:
    root = Path(root)
    out = []
    for rec in load_manifest(root / "manifest.jsonl"):
        pair = FramePair(
            load_frame(root / rec["ref"]),
            load_frame(root / rec["tgt"]),
            read_flo(root / rec["gt_flow"]),
            pair_id=rec["pair_id"],
            gt_magnified=load_frame(root / rec["gt_magnified"]),
            gt_alpha=rec["alpha"],
        )
        out.append((rec, pair))
    return out


# -- curation -------------------------------------------------------------------------------------


@dataclass(frozen=True)
class FilterThresholds:
    p999_max: float = 20.0
    p80_max: float = 2.0
    p001_max: float = 0.1
    mse_min: float = 10.0  # on the 0-255 scale

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not v > 0:
                raise ValueError(f"{k} must be positive")


@dataclass(frozen=True)
class CurationRecord:
    pair_id: str
    ref: str
    tgt: str
    stride: int
    p001: float
    p80: float
    p999: float
    mse: float
    accepted: bool
    reject_reason: str  # "" | p999 | p80 | p001 | mse_too_low
    failed: tuple[str, ...] = ()


def failed_tests(p001: float, p80: float, p999: float, mse: float, th: FilterThresholds) -> list[str]:
    out = []
    if not p999 <= th.p999_max:
        out.append("p999")
    if not p80 <= th.p80_max:
        out.append("p80")
    if not p001 <= th.p001_max:
        out.append("p001")
    if not mse >= th.mse_min:
        out.append("mse_too_low")
    return out


def mse_255(a: Frame, b: Frame) -> float:
    d = (a.data.astype(np.float64) - b.data.astype(np.float64)) * 255.0
    return float(np.mean(d * d))


def sample_pairs(n_frames: int, stride: int) -> list[tuple[int, int]]:
    if stride not in (1, 5):
        raise ValueError("stride must be 1 or 5")
    if n_frames < stride + 1:
        raise ValueError(f"need at least {stride + 1} frames for stride {stride}, got {n_frames}")
    if stride == 1:
        return [(i, i + 1) for i in range(0, n_frames - 1, 2)]
    return [(i, i + stride) for i in range(0, n_frames - stride, stride)]


def curate(frames_dir, stride: int = 1, thresholds: FilterThresholds = FilterThresholds(),
           estimator: MotionEstimator | None = None, manifest_path=None) -> list[CurationRecord]:
    """Score sampled pairs from a frame directory and keep those with small, non-trivial motion."""
    from .flow import builtin_variational

    estimator = estimator or builtin_variational()
    paths = frame_paths(frames_dir)
    records = []
    for i, j in sample_pairs(len(paths), stride):
        a, b = load_frame(paths[i]), load_frame(paths[j])
        if a.shape != b.shape:
            raise ValueError(f"{paths[i].name} and {paths[j].name} differ in size")
        with torch.no_grad():
            flow = estimator(a.tensor(), b.tensor())
        p001, p80, p999 = flow_percentiles(flow, [0.01, 80.0, 99.9])
        mse = mse_255(a, b)
        failed = failed_tests(p001, p80, p999, mse, thresholds)
        records.append(CurationRecord(
            pair_id=f"{paths[i].stem}-{paths[j].stem}-s{stride}",
            ref=str(paths[i]), tgt=str(paths[j]), stride=stride,
            p001=p001, p80=p80, p999=p999, mse=mse,
            accepted=not failed, reject_reason=failed[0] if failed else "", failed=tuple(failed),
        ))
    if manifest_path is not None:
        write_curation_manifest(records, manifest_path)
    return records


def write_curation_manifest(records: Iterable[CurationRecord], path) -> None:
    with open(path, "w") as f:
        for r in records:
            d = asdict(r)
            d["failed"] = list(r.failed)
            f.write(json.dumps(d) + "\n")
