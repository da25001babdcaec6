"""Motion error, magnification error, SSIM, evaluation sweeps and reports."""
from __future__ import annotations

import csv
import math
import warnings
from collections import defaultdict
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .core import Frame, FramePair, alpha_tensor, flow_tensor, image_tensor
from .flow import MotionEstimator

CSV_COLUMNS = ("method", "estimator", "alpha", "pair_id", "motion_error", "mag_error", "ssim")


class DegenerateMagnificationWarning(UserWarning):
    pass


@dataclass(frozen=True)
class MagErrorConfig:
    eps: float = 1e-6
    min_src_magnitude: float = 0.05

    def __post_init__(self):
        if self.eps <= 0 or self.min_src_magnitude <= 0:
            raise ValueError("eps and min_src_magnitude must be positive")


@dataclass(frozen=True)
class EvalRecord:
    pair_id: str
    method: str
    estimator: str
    alpha: float
    motion_error: float
    magnification_error: float
    ssim: float | None = None


def _flows(f_src, f_gen):
    a = flow_tensor(f_src).double()
    b = flow_tensor(f_gen).double()
    if a.shape[-2:] != b.shape[-2:]:
        raise ValueError("flow fields differ in size")
    if not (torch.isfinite(a).all() and torch.isfinite(b).all()):
        raise ValueError("non-finite flow")
    return a, b


def motion_error(f_src, f_gen, alpha) -> float:
    """Mean end-point error between ``alpha * f_src`` and ``f_gen``."""
    a, b = _flows(f_src, f_gen)
    al = alpha_tensor(alpha, like=a)
    if not torch.isfinite(al).all():
        raise ValueError("non-finite alpha")
    return float(torch.linalg.vector_norm(al * a - b, dim=1).mean())


def magnification_error_detail(f_src, f_gen, alpha, cfg: MagErrorConfig = MagErrorConfig()) -> tuple[float, int]:
    """``(mean |(|f_gen| / (|f_src| + eps)) - alpha|, number of pixels used)``."""
    a, b = _flows(f_src, f_gen)
    ma = torch.linalg.vector_norm(a, dim=1, keepdim=True)
    mb = torch.linalg.vector_norm(b, dim=1, keepdim=True)
    al = alpha_tensor(alpha, like=a).expand_as(ma)
    valid = ma >= cfg.min_src_magnitude
    n = int(valid.sum())
    if n == 0:
        return 0.0, 0
    dev = (mb / (ma + cfg.eps) - al).abs()
    return float(dev[valid].mean()), n


def magnification_error(f_src, f_gen, alpha, cfg: MagErrorConfig = MagErrorConfig()) -> float:
    value, n = magnification_error_detail(f_src, f_gen, alpha, cfg)
    if n == 0:
        warnings.warn("no pixel has source motion above the magnitude floor; magnification error set to 0",
                      DegenerateMagnificationWarning, stacklevel=2)
    return value


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> torch.Tensor:
    x = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-x * x / (2 * sigma * sigma))
    return g / g.sum()


def ssim(a, b, win_size: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03,
         data_range: float = 1.0) -> float:
    """Gaussian-windowed SSIM averaged over valid window positions and channels."""
    x = image_tensor(a).double()
    y = image_tensor(b).double()
    if x.shape != y.shape:
        raise ValueError(f"image shapes differ: {tuple(x.shape)} vs {tuple(y.shape)}")
    if min(x.shape[-2:]) < win_size:
        raise ValueError(f"images smaller than the {win_size}x{win_size} window")
    c = x.shape[1]
    g = _gaussian_window(win_size, sigma)
    kh = g.view(1, 1, 1, -1).repeat(c, 1, 1, 1)
    kv = g.view(1, 1, -1, 1).repeat(c, 1, 1, 1)

    def blur(t):
        return F.conv2d(F.conv2d(t, kh, groups=c), kv, groups=c)

    mx, my = blur(x), blur(y)
    sxx = blur(x * x) - mx * mx
    syy = blur(y * y) - my * my
    sxy = blur(x * y) - mx * my
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    s = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
    return float(s.mean())


# -- sweeps -------------------------------------------------------------------------------------

Method = Callable[[FramePair, float], Frame]


def identity_method(pair: FramePair, alpha: float) -> Frame:
    return pair.tgt


def model_method(model, max_single: float = 16.0) -> Method:
    from .core import VideoClip
    from .generator import magnify_video

    def run(pair: FramePair, alpha: float) -> Frame:
        return magnify_video(model, VideoClip((pair.ref, pair.tgt)), alpha, max_single)[1]

    return run


def baseline_method(mode: str, estimator: MotionEstimator | None = None, use_gt_flow: bool = False) -> Method:
    from .warp import warp_baseline

    def run(pair: FramePair, alpha: float) -> Frame:
        if use_gt_flow:
            return warp_baseline(pair, alpha, mode, flow=pair.gt_flow)
        return warp_baseline(pair, alpha, mode, estimator)

    return run


@dataclass
class Summary:
    method: str
    estimator: str
    alpha: float
    n: int
    motion_error_mean: float
    motion_error_sem: float
    mag_error_mean: float
    mag_error_sem: float
    ssim_mean: float | None
    ssim_sem: float | None
    missing: int = 0


def _mean_sem(xs: Sequence[float]) -> tuple[float, float]:
    a = np.asarray(xs, np.float64)
    if a.size == 0:
        return math.nan, math.nan
    sem = float(a.std(ddof=1) / math.sqrt(a.size)) if a.size > 1 else 0.0
    return float(a.mean()), sem


def evaluate(methods: Mapping[str, Method], pairs: Sequence[FramePair], alphas: Sequence[float],
             estimators: Sequence[MotionEstimator], mag_cfg: MagErrorConfig = MagErrorConfig(),
             gt_source: bool = False, eval_iterations: int | None = None):
    """Score every (method, pair, alpha, estimator) combination.

    With ``gt_source`` the target motion is ``alpha`` times the pair's ground-truth
    flow; otherwise the scoring estimator measures the input motion too.
    Method failures are recorded as missing rather than raised.

    Returns ``(records, summaries, missing)``.
    """
    records: list[EvalRecord] = []
    missing: list[tuple[str, str, float, str]] = []
    ests = [e.with_iterations(eval_iterations) if eval_iterations else e for e in estimators]
    src_cache: dict[tuple[int, str], torch.Tensor] = {}
    for pi, pair in enumerate(pairs):
        ref = pair.ref.tensor()
        for mname, method in methods.items():
            for alpha in alphas:
                try:
                    gen = method(pair, float(alpha))
                except Exception as e:  # noqa: BLE001 - a failing method must not sink the sweep
                    missing.append((mname, pair.pair_id, float(alpha), repr(e)))
                    continue
                s = None
                if pair.gt_magnified is not None and pair.gt_alpha is not None and math.isclose(pair.gt_alpha, alpha):
                    s = ssim(gen, pair.gt_magnified)
                for est in ests:
                    key = (pi, est.name)
                    with torch.no_grad():
                        if key not in src_cache:
                            if gt_source:
                                if pair.gt_flow is None:
                                    raise ValueError(f"pair {pair.pair_id} has no ground-truth flow")
                                src_cache[key] = pair.gt_flow.tensor().double()
                            else:
                                src_cache[key] = est(ref, pair.tgt.tensor()).double()
                        f_gen = est(ref, gen.tensor()).double()
                    f_src = src_cache[key]
                    records.append(EvalRecord(
                        pair.pair_id, mname, est.name + ("+gt" if gt_source else ""), float(alpha),
                        motion_error(f_src, f_gen, alpha),
                        magnification_error_detail(f_src, f_gen, alpha, mag_cfg)[0],
                        s,
                    ))
    summaries = summarize(records, methods, alphas, [e.name + ("+gt" if gt_source else "") for e in ests], missing)
    return records, summaries, missing


def summarize(records: Sequence[EvalRecord], methods=None, alphas=None, estimators=None, missing=()) -> list[Summary]:
    groups: dict[tuple[str, str, float], list[EvalRecord]] = defaultdict(list)
    for r in records:
        groups[(r.method, r.estimator, r.alpha)].append(r)
    keys = list(groups)
    if methods is not None and alphas is not None and estimators is not None:
        keys = [(m, e, float(a)) for m in methods for a in alphas for e in estimators]
    miss = defaultdict(int)
    for m, _, a, _ in missing:
        miss[(m, float(a))] += 1
    out = []
    for m, e, a in keys:
        rs = groups.get((m, e, a), [])
        me = _mean_sem([r.motion_error for r in rs])
        ma = _mean_sem([r.magnification_error for r in rs])
        ss = [r.ssim for r in rs if r.ssim is not None]
        sm = _mean_sem(ss) if ss else (None, None)
        out.append(Summary(m, e, a, len(rs), *me, *ma, *sm, missing=miss[(m, a)]))
    return out


# -- reports ------------------------------------------------------------------------------------


def write_records_csv(records: Sequence[EvalRecord], path, header_notes: Sequence[str] = ()) -> None:
    with open(path, "w", newline="") as f:
        for note in header_notes:
            f.write(f"# {note}\n")
        w = csv.writer(f)
        w.writerow(CSV_COLUMNS)
        for r in records:
            w.writerow([r.method, r.estimator, repr(r.alpha), r.pair_id, repr(r.motion_error),
                        repr(r.magnification_error), "" if r.ssim is None else repr(r.ssim)])


def read_records_csv(path) -> list[EvalRecord]:
    with open(path, newline="") as f:
        rows = csv.DictReader(line for line in f if not line.startswith("#"))
        return [
            EvalRecord(row["pair_id"], row["method"], row["estimator"], float(row["alpha"]),
                       float(row["motion_error"]), float(row["mag_error"]),
                       float(row["ssim"]) if row["ssim"] else None)
            for row in rows
        ]


@dataclass
class Report:
    csv_path: Path
    summary_path: Path
    plots: dict[str, Path]
    curves: dict[str, dict[str, tuple[list[float], list[float]]]]
    slices: list[Path]


def emit_report(records: Sequence[EvalRecord], out_dir, mag_cfg: MagErrorConfig = MagErrorConfig(),
                slices: Mapping[str, np.ndarray] | None = None) -> Report:
    """CSV of records, a summary CSV, one log-x plot per metric over alpha, optional y-t slice PNGs."""
    if not records:
        raise ValueError("no records to report")
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    from PIL import Image

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    notes = [f"magnification error over pixels with |f_src| >= {mag_cfg.min_src_magnitude} px, eps={mag_cfg.eps}"]
    csv_path = out / "records.csv"
    write_records_csv(records, csv_path, notes)

    sums = summarize(records)
    summary_path = out / "summary.csv"
    with open(summary_path, "w", newline="") as f:
        w = csv.writer(f)
        cols = [fl.name for fl in fields(Summary)]
        w.writerow(cols)
        for s in sums:
            w.writerow([getattr(s, c) for c in cols])

    metric_attrs = {"motion_error": "motion_error", "mag_error": "magnification_error", "ssim": "ssim"}
    curves: dict[str, dict[str, tuple[list[float], list[float]]]] = {}
    plots: dict[str, Path] = {}
    for metric, attr in metric_attrs.items():
        per_label: dict[str, dict[float, list[float]]] = defaultdict(lambda: defaultdict(list))
        for r in records:
            v = getattr(r, attr)
            if v is not None:
                per_label[f"{r.method} / {r.estimator}"][r.alpha].append(v)
        if not per_label:
            continue
        fig, ax = plt.subplots(figsize=(5, 3.5))
        curves[metric] = {}
        for label, by_alpha in per_label.items():
            xs = sorted(by_alpha)
            stats = [_mean_sem(by_alpha[x]) for x in xs]
            ys = [m for m, _ in stats]
            ax.errorbar(xs, ys, yerr=[s for _, s in stats], marker="o", capsize=3, label=label)
            curves[metric][label] = (xs, ys)
        ax.set_xscale("log", base=2)
        ax.set_xlabel("alpha")
        ax.set_ylabel(metric)
        ax.legend(fontsize=7)
        fig.tight_layout()
        p = out / f"{metric}.png"
        fig.savefig(p, dpi=100)
        plt.close(fig)
        plots[metric] = p

    slice_paths = []
    for name, img in (slices or {}).items():
        p = out / f"slice_{name}.png"
        Image.fromarray(np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)).save(p)
        slice_paths.append(p)
    return Report(csv_path, summary_path, plots, curves, slice_paths)
