"""Command-line front end: gen, rasterize, train, infer, pick, eval, plan.

Exit codes: 0 success, 2 usage error (argparse), 3 configuration error,
4 data/runtime error.
"""

from __future__ import annotations

import argparse
import os
import sys
import threading
from pathlib import Path

import numpy as np

from . import metric, nets, postproc, tiler, train as train_mod
from .config import ConfigError, PipelineConfig, load_config
from .coords import PickSet, rasterize_heatmap, read_picks, write_picks, PicksFormatError
from .losses import LOSSES
from .synthdata import PlacementError, SceneSpec, generate_tomogram
from .volgrid import Heatmap, Volume3D, VolumeError, read_heatmap, read_volume, write_heatmap, write_volume

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_DATA = 4


def _default_workers() -> int:
    return int(os.environ.get("TOMOPICK_THREADS", "1"))


def _load_cfg(args) -> PipelineConfig:
    cfg = load_config(args.config) if args.config else PipelineConfig()
    if getattr(args, "offset", None) is not None:
        cfg = PipelineConfig(
            spacing=cfg.spacing,
            offset=args.offset,
            classes=cfg.classes,
            window=cfg.window,
            xy_stride=cfg.xy_stride,
            pad_to=cfg.pad_to,
            z_window=cfg.z_window,
            z_stride=cfg.z_stride,
            nms_kernel=cfg.nms_kernel,
            edge_floor=cfg.edge_floor,
        )
    return cfg


def _parse_counts(spec: str, cfg: PipelineConfig) -> tuple[int, ...]:
    counts = {c.name: 0 for c in cfg.classes}
    for part in spec.split(","):
        if not part:
            continue
        name, _, num = part.partition("=")
        if name not in counts:
            raise ConfigError(f"unknown class {name!r} in --counts")
        counts[name] = int(num)
    return tuple(counts[c.name] for c in cfg.classes)


def _net_config(args, cfg: PipelineConfig, window_hw: int | None = None) -> nets.NetConfig:
    widths = tuple(int(w) for w in args.widths.split(","))
    return nets.NetConfig(
        variant=args.variant,
        in_depth=cfg.z_window if args.variant == "A" else 2 * cfg.z_window,
        window_hw=window_hw if window_hw is not None else cfg.window,
        class_count=len(cfg.classes),
        widths=widths,
        decoder_width=args.decoder_width,
        seed=args.seed,
        strided_depth_pool=getattr(args, "strided_depth_pool", False),
    )


def cmd_gen(args) -> int:
    cfg = _load_cfg(args)
    spec = SceneSpec(
        dims=tuple(args.dims),
        classes=cfg.classes,
        counts=_parse_counts(args.counts, cfg),
        noise_sigma=args.noise_sigma,
        min_separation=args.min_separation,
        seed=args.seed,
        spacing=cfg.spacing,
    )
    volume, picks = generate_tomogram(spec)
    write_volume(volume, args.out_volume)
    write_picks(picks, list(cfg.classes), args.out_picks)
    print(f"wrote {args.out_volume} ({volume.dims}) and {args.out_picks} ({len(picks)} picks)")
    return EXIT_OK


def cmd_rasterize(args) -> int:
    cfg = _load_cfg(args)
    picks = read_picks(args.picks, list(cfg.classes), cfg.spacing)
    hm = rasterize_heatmap(picks, list(cfg.classes), tuple(args.dims), offset=cfg.offset)
    write_heatmap(hm, args.out)
    print(f"wrote {args.out}: {hm.classes} channels at {hm.dims}")
    return EXIT_OK


def _scene_windows(volume, picks, cfg, ncfg):
    """Cut a scene into non-overlapping windows with rasterized targets; keep
    windows that contain signal, plus one background window."""
    target = rasterize_heatmap(picks, list(cfg.classes), volume.dims, offset=cfg.offset)
    window = (ncfg.in_depth, ncfg.window_hw, ncfg.window_hw)
    plan = tiler.WindowPlan.build(volume.dims, window, window)
    out = []
    background = None
    for z, y, x in plan.iter_origins():
        win = volume.values[z : z + window[0], y : y + window[1], x : x + window[2]]
        tgt = target.data[:, z : z + window[0], y : y + window[1], x : x + window[2]]
        if tgt.max() >= 0.5:
            out.append((win, tgt))
        elif background is None:
            background = (win, tgt)
    if not out and background is not None:
        out.append(background)
    return out


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    ncfg = _net_config(args, cfg, window_hw=args.window_hw)
    data_dir = Path(args.data)
    vols = sorted(data_dir.glob("*.vol"))
    if not vols:
        raise VolumeError(f"no .vol files in {data_dir}")
    dataset = []
    for vol_path in vols:
        picks_path = vol_path.with_suffix(".picks")
        if not picks_path.exists():
            raise PicksFormatError(f"missing picks file for {vol_path}")
        volume = read_volume(vol_path)
        picks = read_picks(picks_path, list(cfg.classes), cfg.spacing)
        dataset.extend(_scene_windows(volume, picks, cfg, ncfg))
    tcfg = train_mod.TrainConfig(
        epochs=args.epochs,
        base_lr=args.lr,
        warmup_epochs=args.warmup_epochs,
        weight_decay=args.weight_decay,
        batch_size=args.batch_size,
        seed=args.seed,
        loss=args.loss,
    )
    net = nets.build_net(ncfg)
    result = train_mod.train(dataset, net, tcfg)
    net.set_params(result.ema_weights if args.use_ema else result.weights)
    nets.save_weights(args.out, net)
    log_path = Path(args.out).with_suffix(".loss.txt")
    log_path.write_text("".join(f"{i} {v!r}\n" for i, v in enumerate(result.loss_history)))
    print(f"trained on {len(dataset)} windows for {args.epochs} epochs")
    if result.loss_history:
        print(f"loss: first {result.loss_history[0]:.6f} last {result.loss_history[-1]:.6f}")
    print(f"wrote {args.out} and {log_path}")
    return EXIT_OK


def _thread_local_predictor(path, ncfg):
    local = threading.local()

    def predict(window: np.ndarray) -> np.ndarray:
        net = getattr(local, "net", None)
        if net is None:
            net = nets.load_net(path, ncfg)
            local.net = net
        return net.forward(window)

    return predict


def cmd_infer(args) -> int:
    cfg = _load_cfg(args)
    volume = read_volume(args.volume)
    ncfg = _net_config(args, cfg)
    predictors = [_thread_local_predictor(p, ncfg) for p in args.checkpoints]
    xy_stride = args.xy_stride if args.xy_stride else cfg.xy_stride
    hm = tiler.tiled_inference(
        predictors,
        volume,
        window_hw=cfg.window,
        xy_stride=xy_stride,
        pad_to=cfg.pad_to,
        z_window=ncfg.in_depth,
        z_stride=cfg.z_stride,
        edge_floor=args.edge_floor if args.edge_floor is not None else cfg.edge_floor,
        use_blend=not args.no_blend_weight,
        workers=args.workers,
    )
    write_heatmap(hm, args.out)
    print(f"wrote {args.out}: ensemble of {len(predictors)} model(s)")
    return EXIT_OK


def cmd_pick(args) -> int:
    cfg = _load_cfg(args)
    hm = read_heatmap(args.heatmap)
    picks = postproc.extract_picks(hm, list(cfg.classes), kernel=cfg.nms_kernel, offset=cfg.offset)
    write_picks(picks, list(cfg.classes), args.out)
    print(f"wrote {args.out}: {len(picks)} picks")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _load_cfg(args)
    preds = read_picks(args.pred, list(cfg.classes), cfg.spacing)
    gts = read_picks(args.gt, list(cfg.classes), cfg.spacing)
    ev = metric.evaluate(preds, gts, list(cfg.classes))
    width = max(len(c.name) for c in cfg.classes)
    print(f"{'class':<{width}}  {'tp':>4} {'fp':>4} {'fn':>4}  {'prec':>7} {'recall':>7} {'fbeta':>7}")
    for cs in ev.per_class:
        m = cs.match
        print(
            f"{cs.name:<{width}}  {m.tp:>4} {m.fp:>4} {m.fn:>4}  "
            f"{cs.precision:>7.4f} {cs.recall:>7.4f} {cs.fbeta:>7.4f}"
        )
    print(f"weighted score: {ev.weighted:.6f}")
    for cs in ev.per_class:
        print(f"class.{cs.name}.fbeta={cs.fbeta!r}")
    print(f"weighted_score={ev.weighted!r}")
    return EXIT_OK


def cmd_plan(args) -> int:
    cfg = _load_cfg(args)
    d, h, w = args.dims
    xy_stride = args.xy_stride if args.xy_stride else cfg.xy_stride
    oy = tiler.plan_axis(cfg.pad_to, cfg.window, xy_stride)
    ox = tiler.plan_axis(cfg.pad_to, cfg.window, xy_stride)
    oz = tiler.plan_axis(d, cfg.z_window, cfg.z_stride)
    print(f"volume {d} x {h} x {w}, XY padded to {cfg.pad_to}")
    print(f"XY windows: {len(oy)} x {len(ox)} (window {cfg.window}, stride {xy_stride})")
    print(f"Z windows: {len(oz)} (window {cfg.z_window}, stride {cfg.z_stride})")
    for axis, origins in (("z", oz), ("y", oy), ("x", ox)):
        txt = " ".join(f"{o}{'*' if clamped else ''}" for o, clamped in origins)
        print(f"{axis} origins: {txt}")
    print("(* = final window clamped to the volume edge)")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tomopick", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, offset=False):
        p.add_argument("--config", help="pipeline config file")
        p.add_argument("--seed", type=int, default=0)
        if offset:
            p.add_argument("--offset", type=float, choices=[1.0, 0.5], default=None)

    p = sub.add_parser("gen", help="generate a synthetic tomogram + ground-truth picks")
    common(p, offset=True)
    p.add_argument("--dims", type=int, nargs=3, required=True, metavar=("D", "H", "W"))
    p.add_argument("--counts", required=True, help="name=N[,name=N...] particles per class")
    p.add_argument("--noise-sigma", type=float, default=0.05)
    p.add_argument("--min-separation", type=float, default=0.0)
    p.add_argument("--out-volume", required=True)
    p.add_argument("--out-picks", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("rasterize", help="rasterize picks into a target heatmap")
    common(p, offset=True)
    p.add_argument("--picks", required=True)
    p.add_argument("--dims", type=int, nargs=3, required=True, metavar=("D", "H", "W"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_rasterize)

    def net_flags(p):
        p.add_argument("--variant", choices=["A", "B"], default="A")
        p.add_argument("--widths", default="8,16,32,32")
        p.add_argument("--decoder-width", type=int, default=16)

    p = sub.add_parser("train", help="train a toy net on a directory of scenes")
    common(p, offset=True)
    net_flags(p)
    p.add_argument("--data", required=True, help="dir of paired .vol/.picks scene files")
    p.add_argument("--epochs", type=int, default=25)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--warmup-epochs", type=int, default=4)
    p.add_argument("--weight-decay", type=float, default=0.0)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--loss", choices=sorted(LOSSES), default="weighted")
    p.add_argument("--window-hw", type=int, default=32)
    p.add_argument("--use-ema", action="store_true", help="save EMA weights instead of raw")
    p.add_argument("--strided-depth-pool", action="store_true",
                   help="ablation: strided depth convs instead of pooling")
    p.add_argument("--out", required=True, help="output WTS1 checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="tiled sliding-window inference")
    common(p, offset=True)
    net_flags(p)
    p.add_argument("--volume", required=True)
    p.add_argument("checkpoints", nargs="+", help="one or more WTS1 checkpoints to ensemble")
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=_default_workers())
    p.add_argument("--xy-stride", type=int, default=0, help="override config stride")
    p.add_argument("--edge-floor", type=float, default=None)
    p.add_argument("--no-blend-weight", action="store_true")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("pick", help="extract picks from a heatmap")
    common(p, offset=True)
    p.add_argument("--heatmap", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pick)

    p = sub.add_parser("eval", help="score predicted picks against ground truth")
    common(p)
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("plan", help="print the window plan for a volume")
    common(p)
    p.add_argument("--dims", type=int, nargs=3, required=True, metavar=("D", "H", "W"))
    p.add_argument("--xy-stride", type=int, default=0)
    p.set_defaults(func=cmd_plan)

    return parser


def run(argv: list[str]) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if e.code is not None else EXIT_USAGE
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (VolumeError, PicksFormatError, PlacementError, nets.CheckpointError,
            train_mod.TrainingDivergedError, OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
