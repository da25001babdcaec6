"""The magnification network: alpha embedding, U-Net, and (targeted, recursive) inference."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import AlphaMap, Frame, VideoClip, alpha_tensor, image_tensor

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class GeneratorConfig:
    levels: int = 5
    base_filters: int = 64
    embed_dim: int = 32
    min_freq_exp: float = -3.0
    max_freq_exp: float = 7.0

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.base_filters < 1:
            raise ValueError("base_filters must be >= 1")
        if self.embed_dim < 2 or self.embed_dim % 2:
            raise ValueError("embed_dim must be a positive even number")

    @property
    def input_channels(self) -> int:
        return 6 + self.embed_dim

    @property
    def size_multiple(self) -> int:
        return 2 ** (self.levels - 1)

    @classmethod
    def paper(cls) -> "GeneratorConfig":
        return cls()

    @classmethod
    def desk(cls) -> "GeneratorConfig":
        return cls(levels=3, base_filters=16)


PRESETS = {"paper": GeneratorConfig.paper, "desk": GeneratorConfig.desk}


def frequencies(config: GeneratorConfig) -> torch.Tensor:
    n = config.embed_dim // 2
    return torch.logspace(config.min_freq_exp, config.max_freq_exp, n, base=2.0, dtype=torch.float64)


def embed_alpha(alpha, config: GeneratorConfig) -> torch.Tensor:
    """Sinusoidal embedding ``[sin(f1 a), cos(f1 a), sin(f2 a), ...]``.

    ``alpha`` may be a scalar or a tensor of any shape; the embedding is
    appended as a trailing dimension of size ``embed_dim``.
    """
    a = torch.as_tensor(alpha, dtype=torch.float64)
    if (a < 0).any() or not torch.isfinite(a).all():
        raise ValueError("alpha must be finite and >= 0")
    ang = a[..., None] * frequencies(config)
    return torch.stack([ang.sin(), ang.cos()], dim=-1).flatten(-2).float()


def tile_embedding(alpha, h: int, w: int, config: GeneratorConfig, mask=None) -> torch.Tensor:
    """Embedding channels of size ``h x w``.

    A scalar (or a per-batch vector) is tiled spatially; an alpha map embeds
    each pixel's own value. ``mask`` multiplies the stack, zeroing the
    embedding outside the target region.
    """
    if h < 1 or w < 1:
        raise ValueError("target size must be positive")
    a = alpha_tensor(alpha).to(torch.float64)
    if a.shape[-2:] not in ((1, 1), (h, w)):
        raise ValueError(f"alpha map {tuple(a.shape[-2:])} does not match {h}x{w}")
    emb = embed_alpha(a[:, 0], config).permute(0, 3, 1, 2)  # B x E x h' x w'
    emb = emb.expand(-1, -1, h, w)
    if mask is not None:
        m = torch.as_tensor(np.asarray(mask, np.float32)) if not isinstance(mask, torch.Tensor) else mask.float()
        while m.ndim < 4:
            m = m[None]
        emb = emb * m
    return emb


class DoubleConv(nn.Sequential):
    def __init__(self, cin: int, cout: int, mid: int | None = None):
        mid = mid or cout
        super().__init__(
            nn.Conv2d(cin, mid, 3, padding=1, bias=False),
            nn.BatchNorm2d(mid),
            nn.ReLU(inplace=True),
            nn.Conv2d(mid, cout, 3, padding=1, bias=False),
            nn.BatchNorm2d(cout),
            nn.ReLU(inplace=True),
        )


class Up(nn.Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.conv = DoubleConv(cin, cout, cin // 2)

    def forward(self, x, skip):
        x = F.interpolate(x, size=skip.shape[-2:], mode="bilinear", align_corners=True)
        return self.conv(torch.cat([skip, x], dim=1))


class GeneratorModel(nn.Module):
    """U-Net mapping ``(ref, tgt, embed(alpha))`` to the magnified target.

    Encoder widths double per level from ``base_filters``; the deepest level is
    halved so the first decoder block sees matching skip/upsampled widths,
    which with the default config gives 17.3M parameters.
    """

    def __init__(self, config: GeneratorConfig | None = None):
        super().__init__()
        self.config = cfg = config or GeneratorConfig()
        b, L = cfg.base_filters, cfg.levels
        enc = [b * 2**i for i in range(L)]
        if L > 1:
            enc[-1] //= 2
        self.inc = DoubleConv(cfg.input_channels, enc[0])
        self.downs = nn.ModuleList(DoubleConv(enc[i - 1], enc[i]) for i in range(1, L))
        ups = []
        prev = enc[-1]
        for i in range(L - 2, -1, -1):
            out = enc[i] // 2 if i > 0 else b
            ups.append(Up(prev + enc[i], out))
            prev = out
        self.ups = nn.ModuleList(ups)
        self.outc = nn.Conv2d(prev, 3, kernel_size=1)
        self.trained = False

    @property
    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters() if p.requires_grad)

    def net(self, x: torch.Tensor) -> torch.Tensor:
        skips = [self.inc(x)]
        for down in self.downs:
            skips.append(down(F.max_pool2d(skips[-1], 2)))
        x = skips.pop()
        for up in self.ups:
            x = up(x, skips.pop())
        return torch.sigmoid(self.outc(x))

    def forward(self, ref, tgt, alpha, mask=None) -> torch.Tensor:
        ref = image_tensor(ref)
        tgt = image_tensor(tgt).to(ref.dtype)
        if ref.shape != tgt.shape:
            raise ValueError(f"frame shapes differ: {tuple(ref.shape)} vs {tuple(tgt.shape)}")
        h, w = ref.shape[-2:]
        emb = tile_embedding(alpha, h, w, self.config, mask).to(ref)
        if emb.shape[0] != ref.shape[0]:
            emb = emb.expand(ref.shape[0], -1, -1, -1)
        x = torch.cat([ref, tgt, emb], dim=1)
        m = self.config.size_multiple
        ph, pw = (-h) % m, (-w) % m
        if ph or pw:
            mode = "reflect" if ph < h and pw < w else "replicate"
            x = F.pad(x, (0, pw, 0, ph), mode=mode)
        return self.net(x)[..., :h, :w]


def build_generator(preset: str | GeneratorConfig = "paper") -> GeneratorModel:
    cfg = preset if isinstance(preset, GeneratorConfig) else PRESETS[preset]()
    return GeneratorModel(cfg)


def forward(model: GeneratorModel, ref: Frame, tgt: Frame, alpha, mask=None) -> Frame:
    """Frame-level inference pass (batch-norm in running-statistics mode)."""
    if isinstance(alpha, AlphaMap) and alpha.shape != ref.shape:
        raise ValueError(f"alpha map {alpha.shape} does not match frames {ref.shape}")
    was = model.training
    model.eval()
    try:
        with torch.no_grad():
            out = model(ref.tensor(), tgt.tensor(), alpha, mask)
    finally:
        model.train(was)
    return Frame.from_tensor(out)


# -- recursion ------------------------------------------------------------------------------


def decompose_alpha(alpha: float, max_single: float = 16.0) -> list[float]:
    """Per-pass factors whose product is ``alpha``; only factors above ``max_single`` are split."""
    if not math.isfinite(alpha) or alpha < 0:
        raise ValueError("alpha must be finite and >= 0")
    if max_single <= 1:
        raise ValueError("max_single must exceed 1")
    if alpha <= max_single:
        return [alpha]
    k = math.ceil(math.log(alpha) / math.log(max_single) - 1e-12) - 1
    return [max_single] * k + [alpha / max_single**k]


def _pass_maps(alpha: np.ndarray, max_single: float) -> list[np.ndarray]:
    flat = [decompose_alpha(float(a), max_single) for a in alpha.ravel()]
    n = max(len(f) for f in flat)
    # pixels that need fewer passes sit at alpha=1 (no further motion) for the extra ones
    padded = np.array([f + [1.0] * (n - len(f)) for f in flat], np.float32)
    return [padded[:, j].reshape(alpha.shape) for j in range(n)]


def magnify_video(model: GeneratorModel, clip: VideoClip, alpha, max_single: float = 16.0,
                  mask=None, on_pass=None) -> VideoClip:
    """Magnify every frame against frame 0, recursing where alpha exceeds ``max_single``.

    ``alpha`` is a scalar or an AlphaMap. With ``mask`` given the embedding is
    masked (zero outside) instead of embedding a per-pixel map.
    """
    if not getattr(model, "trained", False):
        raise ValueError("model has not been trained")
    if not isinstance(clip, VideoClip):
        raise ValueError("expected a VideoClip")
    if isinstance(alpha, AlphaMap):
        if alpha.shape != clip.shape:
            raise ValueError(f"alpha map {alpha.shape} does not match clip {clip.shape}")
        if alpha.is_constant():
            passes = decompose_alpha(float(alpha.data.flat[0]), max_single)
        else:
            passes = [AlphaMap(p) for p in _pass_maps(alpha.data, max_single)]
    else:
        passes = decompose_alpha(float(alpha), max_single)

    ref = clip[0]
    out = [ref]
    for frame in clip.frames[1:]:
        cur = frame
        for a in passes:
            cur = forward(model, ref, cur, a, mask)
            if on_pass is not None:
                on_pass(a)
        out.append(cur)
    return VideoClip(tuple(out), fps=clip.fps)


# -- checkpoints -------------------------------------------------------------------------------


def save_checkpoint(model: GeneratorModel, path, extra: dict | None = None) -> None:
    state = model.state_dict()
    manifest, chunks, offset = [], [], 0
    for name, t in state.items():
        a = t.detach().cpu().numpy()
        manifest.append({"name": name, "shape": list(a.shape), "dtype": str(a.dtype), "offset": offset})
        chunks.append(a.astype(np.float64).ravel())
        offset += a.size
    header = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "trained": bool(model.trained),
        "manifest": manifest,
        "extra": extra or {},
    }
    flat = np.concatenate(chunks) if chunks else np.zeros(0)
    with open(path, "wb") as f:
        np.savez(f, header=np.frombuffer(json.dumps(header).encode(), np.uint8), params=flat)


def load_checkpoint(path) -> GeneratorModel:
    with np.load(path) as z:
        header = json.loads(bytes(z["header"]).decode())
        flat = z["params"]
    if header.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {header.get('version')}")
    model = GeneratorModel(GeneratorConfig(**header["config"]))
    state = {}
    for entry in header["manifest"]:
        n = int(np.prod(entry["shape"], dtype=np.int64))
        a = flat[entry["offset"]: entry["offset"] + n].astype(entry["dtype"]).reshape(entry["shape"])
        state[entry["name"]] = torch.from_numpy(a)
    model.load_state_dict(state)
    model.trained = header["trained"]
    return model


def checkpoint_extra(path) -> dict:
    with np.load(path) as z:
        return json.loads(bytes(z["header"]).decode()).get("extra", {})
