"""Backward (pull) warping for the losses and forward splatting for the warp baselines."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .core import Frame, FlowField, FramePair, flow_tensor, image_tensor

# softmax-splat sharpness: weight multiplies by e per 1/SPLAT_PRIORITY px of extra motion
SPLAT_PRIORITY = 4.0


def pixel_grid(h: int, w: int, dtype=torch.float32, device=None) -> torch.Tensor:
    ys, xs = torch.meshgrid(
        torch.arange(h, dtype=dtype, device=device),
        torch.arange(w, dtype=dtype, device=device),
        indexing="ij",
    )
    return torch.stack([xs, ys])[None]


def backward_warp(img, flow) -> torch.Tensor:
    """Sample ``img`` at ``x + flow(x)`` with bilinear interpolation and border clamping.

    Accepts Frames/FlowFields or batched tensors and returns a ``B x C x H x W`` tensor.
    Differentiable w.r.t. both arguments.
    """
    img = image_tensor(img)
    flow = flow_tensor(flow).to(img.dtype)
    if img.shape[-2:] != flow.shape[-2:]:
        raise ValueError(f"image {tuple(img.shape[-2:])} and flow {tuple(flow.shape[-2:])} differ in size")
    if not torch.isfinite(flow).all():
        raise ValueError("flow contains non-finite values")
    if img.shape[0] != flow.shape[0]:
        n = max(img.shape[0], flow.shape[0])
        img = img.expand(n, *img.shape[1:])
        flow = flow.expand(n, *flow.shape[1:])
    b, c, h, w = img.shape
    # explicit gather in pixel units: zero flow reproduces the input bit for bit
    pos = pixel_grid(h, w, img.dtype, img.device) + flow
    px = pos[:, 0].clamp(0, w - 1)
    py = pos[:, 1].clamp(0, h - 1)
    x0 = px.detach().floor().clamp(0, max(w - 2, 0))
    y0 = py.detach().floor().clamp(0, max(h - 2, 0))
    fx = (px - x0)[:, None]
    fy = (py - y0)[:, None]
    x0 = x0.long()
    y0 = y0.long()
    x1 = (x0 + 1).clamp(max=w - 1)
    y1 = (y0 + 1).clamp(max=h - 1)
    flat = img.reshape(b, c, h * w)

    def tap(yy, xx):
        return flat.gather(2, (yy * w + xx).reshape(b, 1, h * w).expand(b, c, h * w)).reshape(b, c, h, w)

    return ((1 - fx) * (1 - fy) * tap(y0, x0) + fx * (1 - fy) * tap(y0, x1)
            + (1 - fx) * fy * tap(y1, x0) + fx * fy * tap(y1, x1))


@dataclass(frozen=True)
class SplatResult:
    image: np.ndarray  # H x W x 3, holes hold 0
    hole_mask: np.ndarray  # H x W bool
    weight: np.ndarray  # accumulated splat weight (bilinear kernel only)


def _as_hw3(x) -> np.ndarray:
    if isinstance(x, Frame):
        return x.data.astype(np.float64)
    if isinstance(x, torch.Tensor):
        return image_tensor(x)[0].permute(1, 2, 0).detach().cpu().numpy().astype(np.float64)
    return np.asarray(x, np.float64)


def _as_hw2(x) -> np.ndarray:
    if isinstance(x, FlowField):
        return x.data.astype(np.float64)
    if isinstance(x, torch.Tensor):
        return flow_tensor(x)[0].permute(1, 2, 0).detach().cpu().numpy().astype(np.float64)
    return np.asarray(x, np.float64)


def forward_warp(img, flow, mode: str = "bilinear") -> SplatResult:
    """Push every source pixel ``x`` to ``x + flow(x)``.

    Collisions favour the source with the larger flow magnitude, so moving
    foreground lands on top of static background. ``nearest`` keeps exactly
    one winner per target (raster order breaks exact ties); ``bilinear``
    spreads each source over four neighbours with a softmax weight on
    magnitude. Splats that fall outside the frame are dropped.
    """
    im = _as_hw3(img)
    fl = _as_hw2(flow)
    if im.shape[:2] != fl.shape[:2]:
        raise ValueError(f"image {im.shape[:2]} and flow {fl.shape[:2]} differ in size")
    h, w, c = im.shape
    ys, xs = np.mgrid[0:h, 0:w]
    tx = (xs + fl[..., 0]).ravel()
    ty = (ys + fl[..., 1]).ravel()
    mag = np.hypot(fl[..., 0], fl[..., 1]).ravel()
    colors = im.reshape(-1, c)
    raster = np.arange(h * w)

    out = np.zeros((h * w, c))
    weight = np.zeros(h * w)
    if mode == "nearest":
        # floor(t + 0.5): halves round toward +inf, independent of numpy's banker's rounding
        rx = np.floor(tx + 0.5).astype(np.int64)
        ry = np.floor(ty + 0.5).astype(np.int64)
        ok = (rx >= 0) & (rx < w) & (ry >= 0) & (ry < h)
        src = raster[ok]
        dst = (ry * w + rx)[ok]
        order = np.lexsort((src, -mag[ok]))
        dst_sorted = dst[order]
        _, first = np.unique(dst_sorted, return_index=True)
        win_src = src[order][first]
        win_dst = dst_sorted[first]
        out[win_dst] = colors[win_src]
        np.add.at(weight, dst, 1.0)
    elif mode == "bilinear":
        x0 = np.floor(tx).astype(np.int64)
        y0 = np.floor(ty).astype(np.int64)
        fx = tx - x0
        fy = ty - y0
        prio = np.exp(SPLAT_PRIORITY * (mag - mag.max()))
        acc = np.zeros((h * w, c))
        acc_w = np.zeros(h * w)
        for dx, dy, k in (
            (0, 0, (1 - fx) * (1 - fy)),
            (1, 0, fx * (1 - fy)),
            (0, 1, (1 - fx) * fy),
            (1, 1, fx * fy),
        ):
            cx, cy = x0 + dx, y0 + dy
            ok = (cx >= 0) & (cx < w) & (cy >= 0) & (cy < h) & (k > 0)
            dst = (cy * w + cx)[ok]
            np.add.at(weight, dst, k[ok])
            pk = k[ok] * prio[ok]
            np.add.at(acc_w, dst, pk)
            np.add.at(acc, dst, colors[ok] * pk[:, None])
        filled = acc_w > 0
        out[filled] = acc[filled] / acc_w[filled, None]
    else:
        raise ValueError(f"unknown splat mode {mode!r}")

    holes = weight <= 0
    out[holes] = 0.0
    return SplatResult(out.reshape(h, w, c), holes.reshape(h, w), weight.reshape(h, w))


def inpaint(result: SplatResult) -> np.ndarray:
    """Fill holes from the outside in, each pass taking the mean of known 4-neighbours."""
    img = np.array(result.image, dtype=np.float64)
    holes = np.array(result.hole_mask, dtype=bool)
    if holes.all():
        raise ValueError("cannot inpaint an image that is entirely holes")
    while holes.any():
        known = ~holes
        total = np.zeros_like(img)
        count = np.zeros(holes.shape)
        # (slice into neighbour, slice into destination) for up/down/left/right
        for src, dst in (
            ((slice(1, None), slice(None)), (slice(None, -1), slice(None))),
            ((slice(None, -1), slice(None)), (slice(1, None), slice(None))),
            ((slice(None), slice(1, None)), (slice(None), slice(None, -1))),
            ((slice(None), slice(None, -1)), (slice(None), slice(1, None))),
        ):
            k = known[src]
            total[dst] += img[src] * k[..., None]
            count[dst] += k
        ring = holes & (count > 0)
        img[ring] = total[ring] / count[ring][:, None]
        holes &= ~ring
    return img


def warp_baseline(pair: FramePair, alpha: float, mode: str = "bilinear", estimator=None, flow=None) -> Frame:
    """Lagrangian baseline: splat the reference frame along ``alpha`` times the estimated motion.

    Pass ``flow`` to bypass the estimator (e.g. to inject ground truth).
    """
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    if flow is None:
        if estimator is None:
            raise ValueError("need an estimator or an explicit flow")
        from .flow import estimate

        flow = estimate(estimator, pair.ref, pair.tgt)
    fl = _as_hw2(flow) * alpha
    splat = forward_warp(pair.ref, fl, mode)
    return Frame(np.clip(inpaint(splat), 0, 1))
