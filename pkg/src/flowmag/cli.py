"""Command-line entry point: ``flowmag <verb> [options]``.

Every verb takes ``--config FILE`` (JSON or YAML) and ``--set key=value``
overrides; the effective config is written next to the outputs.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

VERBS = ("train", "magnify", "tta", "curate", "synth", "eval", "baseline", "slice")

# key -> (default, provenance) per config family; "reported" values come from the
# published method description, "chosen" values are this package's defaults
CONFIG_KEYS = {
    "train": {
        "alpha_min": (1.0, "reported"),
        "alpha_max": (16.0, "reported"),
        "lambda_color": (10.0, "reported"),
        "learning_rate": (3e-4, "reported"),
        "batch_size": (40, "reported"),
        "image_size": (512, "reported"),
        "steps": (1000, "chosen"),
        "crop_scale": ((0.7, 1.0), "reported"),
        "rotation_deg": ((-15.0, 15.0), "reported"),
        "flip_prob": (0.5, "reported"),
        "color_jitter_strength": (0.3, "chosen"),
        "flow_iterations": (100, "chosen"),
        "checkpoint_every": (0, "chosen"),
        "preset": ("paper", "chosen"),
        "flow_smoothness": (0.5, "chosen"),
        "flow_levels": (3, "chosen"),
    },
    "tta": {
        "steps": (100, "chosen"),
        "learning_rate": (1e-4, "chosen"),
        "crop_scale": ((0.9, 1.0), "chosen"),
        "jitter_strength": (0.05, "chosen"),
        "alpha_min": (1.0, "reported"),
        "alpha_max": (16.0, "reported"),
        "batch_size": (4, "chosen"),
        "flow_iterations": (100, "chosen"),
    },
    "curate": {
        "p999_max": (20.0, "reported"),
        "p80_max": (2.0, "reported"),
        "p001_max": (0.1, "reported"),
        "mse_min": (10.0, "reported"),
        "flow_iterations": (100, "chosen"),
    },
    "synth": {
        "size": (64, "chosen"),
        "pairs_per_group": (2, "chosen"),
    },
    "magnify": {
        "max_single": (16.0, "reported"),
        "dilate": (4, "chosen"),
    },
    "eval": {
        "eval_iterations": (100, "chosen"),
        "eps": (1e-6, "chosen"),
        "min_src_magnitude": (0.05, "chosen"),
    },
    "baseline": {
        "flow_iterations": (100, "chosen"),
    },
    "slice": {},
}


class UsageError(Exception):
    pass


def _keys_help(verb: str) -> str:
    keys = CONFIG_KEYS[verb]
    if not keys:
        return ""
    lines = ["config keys (--set key=value):"]
    for k, (default, prov) in keys.items():
        lines.append(f"  {k:<24} default={default!r:<14} [{prov}]")
    return "\n".join(lines)


def _parse_value(raw: str, default):
    if isinstance(default, bool):
        return raw.lower() in ("1", "true", "yes")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        return tuple(float(x) for x in raw.strip("()[]").split(","))
    return raw


def effective_config(verb: str, config_path, overrides) -> dict:
    keys = CONFIG_KEYS[verb]
    cfg = {k: v for k, (v, _) in keys.items()}
    if config_path:
        text = Path(config_path).read_text()
        if str(config_path).endswith((".yaml", ".yml")):
            import yaml

            data = yaml.safe_load(text) or {}
        else:
            data = json.loads(text)
        for k, v in data.items():
            if k not in keys:
                raise UsageError(f"unknown config key {k!r} for {verb}")
            cfg[k] = tuple(v) if isinstance(keys[k][0], tuple) else v
    for item in overrides or []:
        if "=" not in item:
            raise UsageError(f"override {item!r} is not key=value")
        k, raw = item.split("=", 1)
        if k not in keys:
            raise UsageError(f"unknown config key {k!r} for {verb}")
        try:
            cfg[k] = _parse_value(raw, keys[k][0])
        except ValueError as e:
            raise UsageError(f"bad value for {k}: {raw!r}") from e
    return cfg


def _echo_config(out_dir, verb: str, cfg: dict, args) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    extra = {k: v for k, v in vars(args).items() if k not in ("func", "set") and not callable(v)}
    (out / f"{verb}_config.json").write_text(json.dumps({"config": cfg, "args": extra}, indent=2, default=str))


def progress(event: str, **kw) -> None:
    print(json.dumps({"event": event, **kw}, default=float), flush=True)


def _estimator(iterations: int, smoothness: float = 0.5, levels: int = 3, command: str | None = None):
    from .flow import builtin_variational, external_adapter

    if command:
        return external_adapter(command, iterations=iterations)
    return builtin_variational(iterations=iterations, smoothness_weight=smoothness, pyramid_levels=levels)


def _load_pairs(path):
    """A benchmark directory (manifest.jsonl) or a curation manifest."""
    from .core import FramePair, load_frame
    from .data import load_benchmark, load_manifest

    p = Path(path)
    if (p / "manifest.jsonl").exists():
        return [pair for _, pair in load_benchmark(p)]
    recs = load_manifest(p)
    return [FramePair(load_frame(r["ref"]), load_frame(r["tgt"]), pair_id=r["pair_id"])
            for r in recs if r.get("accepted", True)]


# -- verbs --------------------------------------------------------------------------------------


def cmd_train(args, cfg):
    import torch

    from .generator import build_generator, save_checkpoint
    from .train import TrainConfig, train

    torch.manual_seed(args.seed)
    tkeys = {f.name for f in fields(TrainConfig)}
    tcfg = TrainConfig(**{**{k: v for k, v in cfg.items() if k in tkeys}, "seed": args.seed})
    if args.data:
        dataset = _load_pairs(args.data)
    else:
        from .data import translating_pairs

        dataset = translating_pairs(args.synthetic_pairs, seed=args.seed, size=tcfg.image_size)
    model = build_generator(cfg["preset"])
    est = _estimator(tcfg.flow_iterations, cfg["flow_smoothness"], cfg["flow_levels"])
    out = Path(args.out)
    _echo_config(out, "train", cfg, args)
    every = max(1, tcfg.steps // 20)
    res = train(model, dataset, tcfg, est, log_path=out / "metrics.csv", checkpoint_dir=out / "checkpoints",
                on_step=lambda r: progress("step", **r) if r["step"] % every == 0 else None)
    save_checkpoint(model, out / "model.npz", {"steps": tcfg.steps, "seed": tcfg.seed})
    progress("done", steps=len(res.log), checkpoint=str(out / "model.npz"))


def build_alpha(alpha: float, shape, mask_path=None, dilate: int = 4):
    from .core import AlphaMap, load_mask

    if mask_path is None:
        return alpha, None
    mask = load_mask(mask_path)
    if mask.shape != tuple(shape):
        raise ValueError(f"mask {mask.shape} does not match frames {tuple(shape)}")
    if dilate > 0:
        from scipy.ndimage import binary_dilation

        mask = binary_dilation(mask, iterations=dilate)
    return AlphaMap.from_mask(mask, alpha, 1.0), mask


def cmd_magnify(args, cfg):
    from .core import load_clip, save_clip
    from .generator import load_checkpoint, magnify_video

    model = load_checkpoint(args.checkpoint)
    clip = load_clip(args.input)
    alpha, mask = build_alpha(args.alpha, clip.shape, args.mask, cfg["dilate"])
    passes = []
    use_mask = mask if (mask is not None and args.targeting == "mask") else None
    if use_mask is not None:
        alpha = args.alpha
    out = magnify_video(model, clip, alpha, cfg["max_single"], mask=use_mask, on_pass=passes.append)
    save_clip(out, args.out)
    _echo_config(args.out, "magnify", cfg, args)
    progress("done", frames=len(out), passes_per_frame=len(passes) // max(1, len(clip) - 1), out=str(args.out))


def cmd_tta(args, cfg):
    from .core import load_clip
    from .generator import load_checkpoint, save_checkpoint
    from .train import TTAConfig, tta

    model = load_checkpoint(args.checkpoint)
    clip = load_clip(args.input)
    tcfg = TTAConfig(**{**cfg, "seed": args.seed})
    est = _estimator(tcfg.flow_iterations)
    adapted = tta(model, clip, tcfg, est,
                  on_step=lambda r: progress("step", **r) if r["step"] % 10 == 0 else None)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(adapted, args.out, {"tta_steps": tcfg.steps})
    _echo_config(Path(args.out).parent, "tta", cfg, args)
    progress("done", checkpoint=str(args.out))


def cmd_curate(args, cfg):
    from .data import FilterThresholds, curate

    th = FilterThresholds(**{k: cfg[k] for k in ("p999_max", "p80_max", "p001_max", "mse_min")})
    est = _estimator(cfg["flow_iterations"], command=args.flow_command)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    recs = curate(args.frames, args.stride, th, est, manifest_path=out)
    _echo_config(out.parent, "curate", cfg, args)
    progress("done", pairs=len(recs), accepted=sum(r.accepted for r in recs), manifest=str(out))


def cmd_synth(args, cfg):
    from .data import build_benchmark

    recs = build_benchmark(args.out, size=cfg["size"], pairs_per_group=cfg["pairs_per_group"], seed=args.seed)
    _echo_config(args.out, "synth", cfg, args)
    progress("done", pairs=len(recs), subpixel_groups=len({r["group"] for r in recs if r["suite"] == "subpixel"}),
             noise_groups=len({r["group"] for r in recs if r["suite"] == "noise"}))


def cmd_eval(args, cfg):
    from .evaluation import MagErrorConfig, baseline_method, emit_report, evaluate, identity_method, model_method
    from .generator import load_checkpoint

    pairs = _load_pairs(args.pairs)
    methods = {"identity": identity_method}
    for ck in args.checkpoint or []:
        methods[Path(ck).stem] = model_method(load_checkpoint(ck))
    scorer = _estimator(cfg["eval_iterations"], command=args.flow_command)
    for mode in args.baseline or []:
        methods[f"warp_{mode}"] = baseline_method(mode, scorer)
    mag_cfg = MagErrorConfig(cfg["eps"], cfg["min_src_magnitude"])
    records, summaries, missing = evaluate(methods, pairs, args.alpha, [scorer], mag_cfg, gt_source=args.gt_source)
    rep = emit_report(records, args.out, mag_cfg)
    _echo_config(args.out, "eval", cfg, args)
    for s in summaries:
        progress("summary", **asdict(s))
    progress("done", records=len(records), missing=len(missing), csv=str(rep.csv_path))


def cmd_baseline(args, cfg):
    from .core import VideoClip, load_clip, save_clip, FramePair
    from .warp import warp_baseline

    clip = load_clip(args.input)
    est = _estimator(cfg["flow_iterations"], command=args.flow_command)
    for alpha in args.alpha:
        frames = [clip[0]] + [warp_baseline(FramePair(clip[0], f), alpha, args.mode, est) for f in clip.frames[1:]]
        d = Path(args.out) / f"alpha_{alpha:g}"
        save_clip(VideoClip(tuple(frames), clip.fps), d)
        progress("alpha", alpha=alpha, out=str(d))
    _echo_config(args.out, "baseline", cfg, args)
    progress("done")


def cmd_slice(args, cfg):
    from PIL import Image

    from .core import load_clip, yt_slice

    clip = load_clip(args.input)
    img = yt_slice(clip, args.x1, args.y1, args.x2, args.y2)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.round(img * 255).astype(np.uint8)).save(args.out)
    progress("done", shape=list(img.shape), out=str(args.out))


# -- parser -------------------------------------------------------------------------------------


def _stride(raw: str) -> int:
    v = int(raw)
    if v not in (1, 5):
        raise argparse.ArgumentTypeError("stride must be 1 or 5")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="flowmag", description="Self-supervised Lagrangian motion magnification.")
    p.add_argument("--workers", type=int, default=1, help="cap on worker threads")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    def verb(name, func, help_):
        sp = sub.add_parser(name, help=help_, epilog=_keys_help(name),
                            formatter_class=argparse.RawDescriptionHelpFormatter)
        sp.add_argument("--config", help="JSON/YAML config file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override")
        sp.add_argument("--seed", type=int, default=0)
        sp.set_defaults(func=func)
        return sp

    sp = verb("train", cmd_train, "train a generator")
    sp.add_argument("--data", help="benchmark dir or curation manifest; synthetic translating textures if omitted")
    sp.add_argument("--synthetic-pairs", type=int, default=400)
    sp.add_argument("--out", required=True)

    sp = verb("magnify", cmd_magnify, "magnify a clip against its first frame")
    sp.add_argument("input", help="clip directory")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--alpha", type=float, required=True)
    sp.add_argument("--mask", help="PNG mask of the region to magnify")
    sp.add_argument("--dilate", type=int, help="mask dilation in pixels (overrides config)")
    sp.add_argument("--targeting", choices=("per-pixel", "mask"), default="per-pixel",
                    help="embed a per-pixel alpha map, or zero the embedding outside the mask")
    sp.add_argument("--out", required=True)

    sp = verb("tta", cmd_tta, "test-time adapt a checkpoint to a clip")
    sp.add_argument("input")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--out", required=True, help="adapted checkpoint path")

    sp = verb("curate", cmd_curate, "filter frame pairs from a frame directory")
    sp.add_argument("frames")
    sp.add_argument("--stride", type=_stride, default=1)
    sp.add_argument("--flow-command", help="external flow command template")
    sp.add_argument("--out", required=True, help="manifest path (.jsonl)")

    sp = verb("synth", cmd_synth, "write the synthetic subpixel and noise suites")
    sp.add_argument("--out", required=True)

    sp = verb("eval", cmd_eval, "score methods on frame pairs")
    sp.add_argument("pairs", help="benchmark dir or curation manifest")
    sp.add_argument("--checkpoint", action="append")
    sp.add_argument("--baseline", action="append", choices=("nearest", "bilinear"))
    sp.add_argument("--alpha", type=float, nargs="+", default=[1, 2, 4, 8, 16, 32, 64])
    sp.add_argument("--gt-source", action="store_true", help="use ground-truth input motion")
    sp.add_argument("--flow-command")
    sp.add_argument("--out", required=True)

    sp = verb("baseline", cmd_baseline, "forward-warp baseline over a clip")
    sp.add_argument("input")
    sp.add_argument("--alpha", type=float, nargs="+", required=True)
    sp.add_argument("--mode", choices=("nearest", "bilinear"), default="bilinear")
    sp.add_argument("--flow-command")
    sp.add_argument("--out", required=True)

    sp = verb("slice", cmd_slice, "extract a y-t slice")
    sp.add_argument("input")
    for k in ("x1", "y1", "x2", "y2"):
        sp.add_argument(k, type=int)
    sp.add_argument("--out", required=True)
    return p


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    import torch

    torch.set_num_threads(max(1, args.workers))
    try:
        cfg = effective_config(args.verb, args.config, args.set)
        if args.verb == "magnify" and args.dilate is not None:
            cfg["dilate"] = args.dilate
    except (UsageError, ValueError, OSError) as e:
        print(f"flowmag {args.verb}: usage error: {e}", file=sys.stderr)
        return 2
    try:
        args.func(args, cfg)
    except Exception as e:  # noqa: BLE001 - report, don't trace, at the CLI boundary
        logging.getLogger(__name__).debug("failure", exc_info=True)
        print(f"flowmag {args.verb}: error: {e}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run())
