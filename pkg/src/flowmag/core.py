"""Frames, flow fields, alpha maps, clips and their file formats.

Arrays are stored channel-last in numpy (``H x W x C``); the compute modules
work on batched channel-first torch tensors (``B x C x H x W``). The helpers
``image_tensor`` / ``flow_tensor`` / ``alpha_tensor`` convert either way of
passing data into that layout.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import cv2
import numpy as np
import torch
from PIL import Image

FLO_MAGIC = b"PIEH"
MIN_SIZE = 8


class FormatError(ValueError):
    """Raised for malformed image, flow or clip files."""


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Frame:
    """RGB image with values in [0, 1], shape ``(H, W, 3)``."""

    data: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.data, dtype=np.float32)
        if a.ndim != 3 or a.shape[2] != 3:
            raise ValueError(f"frame must be HxWx3, got shape {a.shape}")
        if a.shape[0] < MIN_SIZE or a.shape[1] < MIN_SIZE:
            raise ValueError(f"frame must be at least {MIN_SIZE}x{MIN_SIZE}, got {a.shape[:2]}")
        if not np.all(np.isfinite(a)) or a.min() < 0.0 or a.max() > 1.0:
            raise ValueError("frame values must lie in [0, 1]")
        object.__setattr__(self, "data", _readonly(a))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape[:2]

    def tensor(self) -> torch.Tensor:
        return torch.from_numpy(self.data.copy()).permute(2, 0, 1)[None]

    @classmethod
    def from_tensor(cls, t: torch.Tensor) -> "Frame":
        t = t.detach()
        if t.ndim == 4:
            t = t[0]
        return cls(t.clamp(0, 1).permute(1, 2, 0).cpu().numpy())


@dataclass(frozen=True)
class FlowField:
    """Per-pixel displacement ``(u, v)`` in pixels, x right / y down, shape ``(H, W, 2)``."""

    data: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.data, dtype=np.float32)
        if a.ndim != 3 or a.shape[2] != 2:
            raise ValueError(f"flow must be HxWx2, got shape {a.shape}")
        if not np.all(np.isfinite(a)):
            raise ValueError("flow contains non-finite values")
        object.__setattr__(self, "data", _readonly(a))

    @property
    def u(self) -> np.ndarray:
        return self.data[..., 0]

    @property
    def v(self) -> np.ndarray:
        return self.data[..., 1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape[:2]

    def magnitude(self) -> np.ndarray:
        return np.hypot(self.u.astype(np.float64), self.v.astype(np.float64))

    def tensor(self) -> torch.Tensor:
        return torch.from_numpy(self.data.copy()).permute(2, 0, 1)[None]

    @classmethod
    def from_tensor(cls, t: torch.Tensor) -> "FlowField":
        t = t.detach()
        if t.ndim == 4:
            t = t[0]
        return cls(t.permute(1, 2, 0).cpu().numpy())

    @classmethod
    def constant(cls, height: int, width: int, u: float, v: float) -> "FlowField":
        a = np.empty((height, width, 2), np.float32)
        a[..., 0] = u
        a[..., 1] = v
        return cls(a)


@dataclass(frozen=True)
class AlphaMap:
    """Per-pixel non-negative magnification factor, shape ``(H, W)``."""

    data: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.data, dtype=np.float32)
        if a.ndim != 2:
            raise ValueError(f"alpha map must be HxW, got shape {a.shape}")
        if not np.all(np.isfinite(a)) or a.min() < 0:
            raise ValueError("alpha values must be finite and >= 0")
        object.__setattr__(self, "data", _readonly(a))

    @classmethod
    def constant(cls, height: int, width: int, alpha: float) -> "AlphaMap":
        return cls(np.full((height, width), alpha, np.float32))

    @classmethod
    def from_mask(cls, mask: np.ndarray, alpha: float, outside: float = 1.0) -> "AlphaMap":
        mask = np.asarray(mask, bool)
        return cls(np.where(mask, alpha, outside).astype(np.float32))

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def is_constant(self) -> bool:
        return bool(np.all(self.data == self.data.flat[0]))

    def tensor(self) -> torch.Tensor:
        return torch.from_numpy(self.data.copy())[None, None]


@dataclass(frozen=True)
class FramePair:
    ref: Frame
    tgt: Frame
    gt_flow: FlowField | None = None
    pair_id: str = ""
    # coverage of the moving foreground in the reference frame (synthetic data only)
    fg_matte: np.ndarray | None = field(default=None, compare=False)
    # the exactly magnified target, when known (synthetic data only)
    gt_magnified: Frame | None = None
    gt_alpha: float | None = None

    def __post_init__(self):
        if self.ref.shape != self.tgt.shape:
            raise ValueError(f"ref {self.ref.shape} and tgt {self.tgt.shape} differ in size")
        if self.gt_flow is not None and self.gt_flow.shape != self.ref.shape:
            raise ValueError("gt_flow dimensions do not match the frames")


@dataclass(frozen=True)
class VideoClip:
    frames: tuple[Frame, ...]
    fps: float = 30.0

    def __post_init__(self):
        frames = tuple(self.frames)
        if len(frames) < 2:
            raise ValueError("a clip needs at least 2 frames")
        shape = frames[0].shape
        if any(f.shape != shape for f in frames):
            raise ValueError("all frames in a clip must share dimensions")
        object.__setattr__(self, "frames", frames)

    def __len__(self) -> int:
        return len(self.frames)

    def __getitem__(self, i: int) -> Frame:
        return self.frames[i]

    @property
    def shape(self) -> tuple[int, int]:
        return self.frames[0].shape


# -- tensor coercion -----------------------------------------------------------------


def image_tensor(x, dtype=None) -> torch.Tensor:
    """Coerce a Frame / HxWx3 array / CxHxW or BxCxHxW tensor to BxCxHxW."""
    if isinstance(x, Frame):
        t = x.tensor()
    elif isinstance(x, torch.Tensor):
        t = x if x.ndim == 4 else x[None]
    else:
        a = np.asarray(x, dtype=np.float32)
        t = torch.from_numpy(a.copy()).permute(2, 0, 1)[None]
    return t if dtype is None else t.to(dtype)


def flow_tensor(x, dtype=None) -> torch.Tensor:
    """Coerce a FlowField / HxWx2 array / 2xHxW or Bx2xHxW tensor to Bx2xHxW."""
    if isinstance(x, FlowField):
        t = x.tensor()
    elif isinstance(x, torch.Tensor):
        t = x if x.ndim == 4 else x[None]
    else:
        a = np.asarray(x, dtype=np.float32)
        t = torch.from_numpy(a.copy()).permute(2, 0, 1)[None]
    return t if dtype is None else t.to(dtype)


def alpha_tensor(x, like: torch.Tensor | None = None) -> torch.Tensor:
    """Coerce a scalar / AlphaMap / HxW array / tensor to something broadcastable as Bx1xHxW."""
    if isinstance(x, AlphaMap):
        t = x.tensor()
    elif isinstance(x, torch.Tensor):
        t = x
        if t.ndim == 1:
            t = t.view(-1, 1, 1, 1)
        elif t.ndim == 2:
            t = t[None, None]
        elif t.ndim == 3:
            t = t[:, None]
    elif np.ndim(x) == 0:
        t = torch.tensor(float(x)).view(1, 1, 1, 1)
    else:
        t = torch.from_numpy(np.asarray(x, np.float32).copy())[None, None]
    if like is not None:
        t = t.to(like.dtype)
    return t


# -- image I/O ------------------------------------------------------------------------


def load_frame(path) -> Frame:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    a = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if a is None:
        raise FormatError(f"cannot decode image {path}")
    if a.ndim != 3 or a.shape[2] != 3:
        raise FormatError(f"{path}: expected an RGB image, got shape {a.shape}")
    if a.dtype == np.uint8:
        scale = 255.0
    elif a.dtype == np.uint16:
        scale = 65535.0
    else:
        raise FormatError(f"{path}: unsupported sample type {a.dtype}")
    return Frame(a[..., ::-1].astype(np.float32) / np.float32(scale))


def save_frame(frame: Frame, path, bits: int = 8) -> None:
    a = frame.data if isinstance(frame, Frame) else np.asarray(frame)
    if bits not in (8, 16):
        raise ValueError("bits must be 8 or 16")
    top = 255 if bits == 8 else 65535
    q = np.round(np.clip(a, 0, 1) * top).astype(np.uint8 if bits == 8 else np.uint16)
    if not cv2.imwrite(str(path), np.ascontiguousarray(q[..., ::-1])):
        raise OSError(f"failed to write {path}")


def load_mask(path) -> np.ndarray:
    """Single-channel PNG mask; values >= 128 are inside."""
    with Image.open(path) as im:
        a = np.asarray(im.convert("L"))
    return a >= 128


def save_mask(mask: np.ndarray, path) -> None:
    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8), "L").save(path)


# -- Middlebury .flo ----------------------------------------------------------------------


def write_flo(flow, path) -> None:
    a = flow.data if isinstance(flow, FlowField) else np.asarray(flow, np.float32)
    if not np.all(np.isfinite(a)):
        raise ValueError("refusing to write non-finite flow")
    h, w = a.shape[:2]
    with open(path, "wb") as f:
        f.write(FLO_MAGIC)
        f.write(struct.pack("<ii", w, h))
        f.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def read_flo(path) -> FlowField:
    buf = Path(path).read_bytes()
    if len(buf) < 12 or buf[:4] != FLO_MAGIC:
        raise FormatError(f"{path}: bad .flo magic")
    w, h = struct.unpack("<ii", buf[4:12])
    if w <= 0 or h <= 0:
        raise FormatError(f"{path}: bad dimensions {w}x{h}")
    n = w * h * 2
    if len(buf) - 12 < n * 4:
        raise FormatError(f"{path}: truncated payload")
    a = np.frombuffer(buf, dtype="<f4", count=n, offset=12).reshape(h, w, 2)
    return FlowField(a.astype(np.float32))


# -- clips ------------------------------------------------------------------------------------

CLIP_META = "clip.json"


def save_clip(clip: VideoClip, out_dir, bits: int = 8) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i, fr in enumerate(clip.frames):
        save_frame(fr, out / f"{i:05d}.png", bits=bits)
    (out / CLIP_META).write_text(json.dumps({"fps": clip.fps, "frames": len(clip)}))


def frame_paths(frames_dir) -> list[Path]:
    d = Path(frames_dir)
    if not d.is_dir():
        raise FileNotFoundError(d)
    return sorted(p for p in d.iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg"))


def load_clip(frames_dir) -> VideoClip:
    d = Path(frames_dir)
    paths = frame_paths(d)
    fps = 30.0
    meta = d / CLIP_META
    if meta.exists():
        info = json.loads(meta.read_text())
        fps = float(info.get("fps", fps))
        if "frames" in info and info["frames"] != len(paths):
            raise FormatError(f"{d}: metadata says {info['frames']} frames, found {len(paths)}")
    return VideoClip(tuple(load_frame(p) for p in paths), fps=fps)


# -- y-t slices -------------------------------------------------------------------------------


def yt_slice(clip: VideoClip, x1: int, y1: int, x2: int, y2: int) -> np.ndarray:
    """Stack a 1-pixel-wide segment across time.

    Corners are upper-left ``(x1, y1)`` inclusive and bottom-right ``(x2, y2)``
    exclusive, so ``(180, 250)-(181, 310)`` is a vertical segment of 60 pixels.
    A vertical segment gives a ``length x frames x 3`` image (time runs along
    columns); a horizontal one gives ``frames x length x 3``.
    """
    h, w = clip.shape
    if not (x1 < x2 and y1 < y2):
        raise ValueError(f"bottom-right corner ({x2},{y2}) is exclusive and must exceed ({x1},{y1})")
    if not (0 <= x1 and x2 <= w and 0 <= y1 and y2 <= h):
        raise ValueError(f"segment ({x1},{y1})-({x2},{y2}) outside {w}x{h} frame")
    dx, dy = x2 - x1, y2 - y1
    if dx == 1:
        return np.stack([f.data[y1:y2, x1] for f in clip.frames], axis=1)
    if dy == 1:
        return np.stack([f.data[y1, x1:x2] for f in clip.frames], axis=0)
    raise ValueError("segment must be axis-aligned with unit thickness")
