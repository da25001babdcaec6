"""Motion estimators and flow statistics.

The built-in estimator is a coarse-to-fine Horn-Schunck solver unrolled for a
fixed number of Jacobi sweeps, so the whole map from frames to flow is a
finite chain of differentiable torch ops and can sit inside a training loss.
External estimators (RAFT, PWC-Net, ...) are wrapped through a subprocess
contract and are only usable for scoring.
"""
from __future__ import annotations

import os
import shlex
import subprocess
import tempfile
import threading
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .core import Frame, FlowField, flow_tensor, image_tensor, read_flo, save_frame
from .warp import backward_warp

MIN_LEVEL_SIZE = 4


@dataclass(frozen=True)
class VariationalFlowConfig:
    iterations: int = 100  # Jacobi sweeps per pyramid level
    smoothness_weight: float = 0.5
    pyramid_levels: int = 3
    warps: int = 2  # re-linearisations per level; sweeps are split between them

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.smoothness_weight <= 0:
            raise ValueError("smoothness_weight must be > 0")
        if self.pyramid_levels < 1:
            raise ValueError("pyramid_levels must be >= 1")
        if self.warps < 1:
            raise ValueError("warps must be >= 1")


class MotionEstimator:
    """Maps ``(ref, tgt)`` batches to flow ``F`` with ``tgt(x + F(x)) ~ ref(x)``."""

    name = "estimator"
    differentiable = False
    iterations = 1

    def __call__(self, ref: torch.Tensor, tgt: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def with_iterations(self, iterations: int) -> "MotionEstimator":
        return self


def _central_gradients(img: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    p = F.pad(img, (1, 1, 1, 1), mode="replicate")
    ix = 0.5 * (p[..., 1:-1, 2:] - p[..., 1:-1, :-2])
    iy = 0.5 * (p[..., 2:, 1:-1] - p[..., :-2, 1:-1])
    return ix, iy


def _neighbour_mean(f: torch.Tensor) -> torch.Tensor:
    p = F.pad(f, (1, 1, 1, 1), mode="replicate")
    return 0.25 * (p[..., :-2, 1:-1] + p[..., 2:, 1:-1] + p[..., 1:-1, :-2] + p[..., 1:-1, 2:])


def _pyramid(img: torch.Tensor, levels: int) -> list[torch.Tensor]:
    pyr = [img]
    for _ in range(levels - 1):
        h, w = pyr[-1].shape[-2:]
        if min(h, w) // 2 < MIN_LEVEL_SIZE:
            break
        pyr.append(F.interpolate(pyr[-1], size=(h // 2, w // 2), mode="area"))
    return pyr[::-1]


class VariationalFlow(MotionEstimator):
    """Differentiable coarse-to-fine Horn-Schunck with a fixed sweep budget."""

    differentiable = True

    def __init__(self, config: VariationalFlowConfig | None = None, name: str = "variational"):
        self.config = config or VariationalFlowConfig()
        self.name = name

    @property
    def iterations(self) -> int:
        return self.config.iterations

    def with_iterations(self, iterations: int) -> "VariationalFlow":
        return VariationalFlow(replace(self.config, iterations=iterations), self.name)

    def __repr__(self):
        return f"VariationalFlow({self.config})"

    def __call__(self, ref, tgt) -> torch.Tensor:
        ref = image_tensor(ref)
        tgt = image_tensor(tgt).to(ref.dtype)
        if ref.shape[-2:] != tgt.shape[-2:]:
            raise ValueError(f"frame sizes differ: {tuple(ref.shape[-2:])} vs {tuple(tgt.shape[-2:])}")
        cfg = self.config
        lam = cfg.smoothness_weight
        n = max(ref.shape[0], tgt.shape[0])
        ref_pyr = _pyramid(ref, cfg.pyramid_levels)
        tgt_pyr = _pyramid(tgt, cfg.pyramid_levels)

        flow = None
        for r, t in zip(ref_pyr, tgt_pyr):
            h, w = r.shape[-2:]
            if flow is None:
                flow = r.new_zeros(n, 2, h, w)
            else:
                flow = 2.0 * F.interpolate(flow, size=(h, w), mode="bilinear", align_corners=False)
            rx, ry = _central_gradients(r)
            sweeps = [cfg.iterations // cfg.warps] * cfg.warps
            sweeps[-1] += cfg.iterations - sum(sweeps)
            for k in sweeps:
                if k == 0:
                    continue
                warped = backward_warp(t, flow)
                wx, wy = _central_gradients(warped)
                ix = 0.5 * (rx + wx)
                iy = 0.5 * (ry + wy)
                u0, v0 = flow[:, :1], flow[:, 1:]
                b = (warped - r) - ix * u0 - iy * v0
                a11 = lam + (ix * ix).sum(1, keepdim=True)
                a22 = lam + (iy * iy).sum(1, keepdim=True)
                a12 = (ix * iy).sum(1, keepdim=True)
                b1 = (ix * b).sum(1, keepdim=True)
                b2 = (iy * b).sum(1, keepdim=True)
                det = a11 * a22 - a12 * a12
                u, v = u0, v0
                for _ in range(k):
                    ru = lam * _neighbour_mean(u) - b1
                    rv = lam * _neighbour_mean(v) - b2
                    u = (a22 * ru - a12 * rv) / det
                    v = (a11 * rv - a12 * ru) / det
                flow = torch.cat([u, v], 1)
        return flow


class FixedFlow(MotionEstimator):
    """Returns a supplied flow regardless of the frames; used to inject ground truth."""

    name = "fixed"

    def __init__(self, flow, name: str = "fixed"):
        self.flow = flow_tensor(flow)
        self.name = name

    def __call__(self, ref, tgt) -> torch.Tensor:
        ref = image_tensor(ref)
        if ref.shape[-2:] != self.flow.shape[-2:]:
            raise ValueError("fixed flow does not match frame size")
        return self.flow.to(ref.dtype).expand(ref.shape[0], -1, -1, -1)


class ExternalFlow(MotionEstimator):
    """Wrap a command ``CMD {ref} {tgt} {out}`` that writes a Middlebury .flo file."""

    differentiable = False

    def __init__(self, command_template: str, name: str = "external", iterations: int = 20,
                 differentiable: bool = False, timeout: float | None = 600.0):
        if differentiable:
            raise ValueError("external estimators are not differentiable")
        for key in ("{ref}", "{tgt}", "{out}"):
            if key not in command_template:
                raise ValueError(f"command template must contain {key}")
        self.command_template = command_template
        self.name = name
        self.iterations = iterations
        self.timeout = timeout
        self._lock = threading.Lock()

    def with_iterations(self, iterations: int) -> "ExternalFlow":
        return ExternalFlow(self.command_template, self.name, iterations, timeout=self.timeout)

    def _scratch(self) -> str | None:
        d = os.environ.get("FLOWMAG_CACHE")
        if d:
            Path(d).mkdir(parents=True, exist_ok=True)
        return d or None

    def estimate_one(self, ref: Frame, tgt: Frame) -> FlowField:
        with self._lock, tempfile.TemporaryDirectory(dir=self._scratch()) as tmp:
            paths = {k: str(Path(tmp) / f"{k}.{ext}") for k, ext in (("ref", "png"), ("tgt", "png"), ("out", "flo"))}
            save_frame(ref, paths["ref"])
            save_frame(tgt, paths["tgt"])
            cmd = self.command_template.format(
                **{k: shlex.quote(v) for k, v in paths.items()}, iterations=self.iterations
            )
            proc = subprocess.run(cmd, shell=True, capture_output=True, text=True, timeout=self.timeout)
            if proc.returncode != 0:
                raise RuntimeError(f"flow command failed ({proc.returncode}): {proc.stderr.strip()[-500:]}")
            if not Path(paths["out"]).exists():
                raise RuntimeError("flow command did not write its output file")
            flow = read_flo(paths["out"])
        if flow.shape != ref.shape:
            raise RuntimeError(f"flow command returned {flow.shape}, expected {ref.shape}")
        return flow

    def __call__(self, ref, tgt) -> torch.Tensor:
        ref = image_tensor(ref)
        tgt = image_tensor(tgt)
        out = []
        for r, t in zip(ref, tgt):
            f = self.estimate_one(Frame.from_tensor(r), Frame.from_tensor(t))
            out.append(f.tensor())
        return torch.cat(out).to(ref.dtype)


def builtin_variational(config: VariationalFlowConfig | None = None, **kwargs) -> VariationalFlow:
    if config is None:
        config = VariationalFlowConfig(**kwargs)
    elif kwargs:
        config = replace(config, **kwargs)
    return VariationalFlow(config)


def external_adapter(command_template: str, **kwargs) -> ExternalFlow:
    return ExternalFlow(command_template, **kwargs)


def estimate(estimator: MotionEstimator, ref: Frame, tgt: Frame) -> FlowField:
    """Frame-level convenience wrapper returning a FlowField."""
    if ref.shape != tgt.shape:
        raise ValueError(f"frame sizes differ: {ref.shape} vs {tgt.shape}")
    with torch.no_grad():
        return FlowField.from_tensor(estimator(ref.tensor(), tgt.tensor()))


def flow_percentiles(flow, qs: Sequence[float]) -> list[float]:
    """Percentiles of per-pixel flow magnitude (linear interpolation between order statistics)."""
    if isinstance(flow, FlowField):
        mag = flow.magnitude()
    else:
        a = flow_tensor(flow).detach().double()
        mag = torch.linalg.vector_norm(a, dim=1).cpu().numpy()
    if mag.size == 0:
        raise ValueError("empty flow field")
    qs = np.asarray(qs, np.float64)
    if np.any((qs < 0) | (qs > 100)):
        raise ValueError("percentiles must lie in [0, 100]")
    return [float(x) for x in np.percentile(mag.ravel(), qs, method="linear")]
