"""Magnification loss, color loss and their weighted sum."""
from __future__ import annotations

from dataclasses import dataclass

import torch

from .core import alpha_tensor, flow_tensor, image_tensor
from .warp import backward_warp


@dataclass(frozen=True)
class LossWeights:
    lambda_color: float = 10.0

    def __post_init__(self):
        if self.lambda_color < 0:
            raise ValueError("lambda_color must be >= 0")


@dataclass
class LossReport:
    mag: torch.Tensor
    color: torch.Tensor
    total: torch.Tensor

    def floats(self) -> dict[str, float]:
        return {k: float(getattr(self, k).detach()) for k in ("mag", "color", "total")}


def _check_finite(*ts):
    for t in ts:
        if not torch.isfinite(t).all():
            raise ValueError("non-finite values in loss input")


def magnification_loss(f_src, f_gen, alpha) -> torch.Tensor:
    """Per-element mean of ``|alpha * f_src - f_gen|`` over pixels and both components."""
    f_src = flow_tensor(f_src)
    f_gen = flow_tensor(f_gen).to(f_src.dtype)
    a = alpha_tensor(alpha, like=f_src)
    if f_src.shape[-2:] != f_gen.shape[-2:]:
        raise ValueError("flow fields differ in size")
    _check_finite(f_src, f_gen, a)
    return (a * f_src - f_gen).abs().mean()


def color_loss(ref, tgt, gen, f_src, f_gen) -> torch.Tensor:
    """Mean absolute difference of tgt and gen after each is pulled back to the reference."""
    tgt = image_tensor(tgt)
    gen = image_tensor(gen).to(tgt.dtype)
    if ref is not None and image_tensor(ref).shape[-2:] != tgt.shape[-2:]:
        raise ValueError("frames differ in size")
    f_src = flow_tensor(f_src).to(tgt.dtype)
    f_gen = flow_tensor(f_gen).to(tgt.dtype)
    _check_finite(tgt, gen, f_src, f_gen)
    return (backward_warp(tgt, f_src) - backward_warp(gen, f_gen)).abs().mean()


def total_loss(ref, tgt, gen, alpha, estimator, weights: LossWeights = LossWeights(),
               f_src: torch.Tensor | None = None, training: bool = True) -> LossReport:
    """Full objective for a batch. Gradients reach ``gen`` only; the source flow is a constant target.

    ``f_src`` may be passed in when already computed for the batch.
    """
    if training and not estimator.differentiable:
        raise ValueError(f"estimator {estimator.name!r} is not differentiable; cannot train through it")
    ref = image_tensor(ref)
    tgt = image_tensor(tgt).to(ref.dtype)
    gen = image_tensor(gen).to(ref.dtype)
    if f_src is None:
        with torch.no_grad():
            f_src = estimator(ref, tgt)
    f_src = f_src.detach()
    f_gen = estimator(ref, gen)
    mag = magnification_loss(f_src, f_gen, alpha)
    col = color_loss(ref, tgt, gen, f_src, f_gen)
    return LossReport(mag, col, mag + weights.lambda_color * col)
