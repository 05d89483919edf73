"""Command-line entry point wiring all modules.

Every subcommand writes only under --out-dir and drops a JSON manifest of
its fully-resolved configuration next to its outputs, so any run can be
reproduced from the manifest alone.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import bench, distill, motion, nn, pipeline, videoio


def _write_config(args: argparse.Namespace, out_dir: Path, command: str) -> None:
    resolved = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    for k, v in resolved.items():
        if isinstance(v, Path):
            resolved[k] = str(v)
    (out_dir / f"{command.replace('-', '_')}_config.json").write_text(
        json.dumps(resolved, indent=2, default=str)
    )


def _parse_w(text: str):
    if text == "auto":
        return None
    return float(text)


def _parse_pair(text: str):
    parts = text.split(",")
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"expected two comma-separated numbers, got {text!r}")
    return float(parts[0]), float(parts[1])


def _int_list(text: str):
    return [int(p) for p in text.split(",") if p]


def _float_list(text: str):
    return [float(p) for p in text.split(",") if p]


def _str_list(text: str):
    return [p.strip() for p in text.split(",") if p.strip()]


# ---------------------------------------------------------------------------
# Dataset helpers shared by subcommands
# ---------------------------------------------------------------------------


def _dataset_dir(out_dir: Path) -> Path:
    return out_dir / "dataset"


def _label_of(manifest: videoio.DatasetManifest, clip_id: str) -> int:
    name = clip_id.rsplit("_", 1)[0]
    return list(manifest.class_names).index(name)


def _load_dataset(dataset_dir: Path):
    manifest = videoio.DatasetManifest.load(dataset_dir / "manifest.json")
    clips = []
    for path in sorted((dataset_dir / "clips").glob("*.mvs")):
        cc = videoio.read_container(path)
        cc.label = _label_of(manifest, cc.clip_id)
        clip = videoio.decoded_clip(cc)
        clips.append(clip)
    if not clips:
        raise FileNotFoundError(f"no .mvs clips under {dataset_dir / 'clips'}")
    return manifest, clips


def _experiment_config(args) -> pipeline.ExperimentConfig:
    kwargs = {}
    for field_name in ("steps", "teacher_steps", "batch_size", "eval_stride",
                       "block_size", "gop_length", "search_range", "temperature",
                       "scratch_lr", "finetune_lr", "teacher_lr", "dropout"):
        if hasattr(args, field_name) and getattr(args, field_name) is not None:
            kwargs[field_name] = getattr(args, field_name)
    if getattr(args, "stack", None) is not None:
        kwargs["stack_length"] = args.stack
    if hasattr(args, "w"):
        kwargs["w"] = args.w
    return pipeline.ExperimentConfig(**kwargs)


# ---------------------------------------------------------------------------
# Subcommand implementations
# ---------------------------------------------------------------------------


def cmd_dataset(args) -> int:
    out = Path(args.out_dir)
    ddir = _dataset_dir(out)
    (ddir / "clips").mkdir(parents=True, exist_ok=True)
    manifest, clips = videoio.generate_motionshapes(
        args.seed, args.clips_per_class, args.resolution, args.clip_length
    )
    gop = videoio.GopConfig(args.gop_length, args.block_size, args.search_range)
    for clip in clips:
        videoio.write_container(videoio.encode(clip, gop), ddir / "clips" / f"{clip.clip_id}.mvs")
    manifest.save(ddir / "manifest.json")
    _write_config(args, out, "dataset")
    train = len(manifest.clip_ids("train"))
    test = len(manifest.clip_ids("test"))
    print(f"wrote {len(clips)} clips ({train} train / {test} test) to {ddir}")
    return 0


def cmd_encode(args) -> int:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cc_in = videoio.read_container(args.infile)
    clip = videoio.decoded_clip(cc_in)
    gop = videoio.GopConfig(args.gop_length, args.block_size, args.search_range)
    cc = videoio.encode(clip, gop)
    cc.clip_id = cc_in.clip_id
    dest = out / (args.name or f"{cc_in.clip_id}_reencoded.mvs")
    videoio.write_container(cc, dest)
    _write_config(args, out, "encode")
    p_frames = sum(1 for t in cc.header.frame_types if t == videoio.FRAME_P)
    print(f"encoded {cc.header.frame_count} frames ({p_frames} predicted) -> {dest}")
    return 0


def cmd_decode(args) -> int:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cc = videoio.read_container(args.infile)
    fields = videoio.decode_motion_vectors(cc)
    filled = motion.fill_iframe_gaps(fields)
    _write_config(args, out, "decode")
    written = []
    if args.frames:
        frames = videoio.decode_frames(cc)
        for i, frame in enumerate(frames):
            path = out / f"{cc.clip_id}_f{i:04d}.pgm"
            videoio.write_pgm(frame.luma, path)
            written.append(path)
    if args.vectors_pgm:
        for i, fld in enumerate(filled):
            written += motion.export_field_pgm(fld, out / f"{cc.clip_id}_mv{i:04d}")
    p = sum(1 for f in fields if f.frame_type == videoio.FRAME_P)
    print(f"decoded {len(fields)} motion fields ({p} predicted, "
          f"{len(fields) - p} intra) from {args.infile}; wrote {len(written)} images")
    return 0


def cmd_train_teacher(args) -> int:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest, clips = _load_dataset(Path(args.dataset))
    cfg = _experiment_config(args)
    prepared = pipeline.prepare_dataset(manifest, clips, cfg.gop,
                                        with_flow=args.stream == "flow",
                                        flow_cache=out / "flow_cache",
                                        threads=args.threads)
    if args.stream == "flow":
        net, summary = pipeline.train_teacher(prepared, manifest, cfg, seed=args.seed)
    else:
        net, metrics = pipeline.train_spatial(prepared, manifest, cfg, seed=args.seed)
        report = pipeline.evaluate(net, [prepared[c] for c in manifest.clip_ids("test")],
                                   cfg.eval_stride, "rgb", cfg)
        summary = {"train_acc_window": metrics[-1]["train_acc_window"],
                   "test_acc": report.overall_accuracy}
    ckpt = out / (args.name or f"teacher_{args.stream}.nnw")
    nn.save_weights(net, ckpt)
    _write_config(args, out, "train-teacher")
    print(f"{args.stream} net -> {ckpt}  train_window "
          f"{summary['train_acc_window']:.3f}  test {summary['test_acc']:.3f}")
    return 0


def cmd_train_student(args) -> int:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest, clips = _load_dataset(Path(args.dataset))
    cfg = _experiment_config(args)
    strategy = distill.canonical_strategy(args.strategy)
    needs_teacher = strategy != "scratch"
    teacher = nn.load_weights(args.teacher) if args.teacher else None
    if needs_teacher and teacher is None:
        print("error: --teacher checkpoint required for transfer strategies",
              file=sys.stderr)
        return 1
    dcfg = distill.DistillConfig(cfg.temperature, cfg.w, strategy)
    prepared = pipeline.prepare_dataset(manifest, clips, cfg.gop,
                                        with_flow=dcfg.uses_soft_targets,
                                        flow_cache=out / "flow_cache",
                                        threads=args.threads)
    student, metrics = pipeline.train_mv_student(strategy, teacher, prepared,
                                                 manifest, cfg, args.seed)
    ev = pipeline.evaluate(student, [prepared[c] for c in manifest.clip_ids("test")],
                           cfg.eval_stride, "mv", cfg)
    ckpt = out / (args.name or f"student_{args.strategy.replace('+', '_')}_s{args.seed}.nnw")
    nn.save_weights(student, ckpt)
    distill.metrics_to_csv(metrics, out / (ckpt.stem + "_metrics.csv"))
    _write_config(args, out, "train-student")
    print(f"{strategy} student -> {ckpt}  test acc {ev.overall_accuracy:.3f}")
    return 0


def cmd_experiment(args) -> int:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest, clips = _load_dataset(Path(args.dataset))
    cfg = _experiment_config(args)
    _write_config(args, out, "experiment")
    report, teacher, prepared = pipeline.run_experiment(
        manifest, clips, args.strategies, args.seeds, cfg,
        flow_cache=out / "flow_cache", partial_csv=out / "experiment_partial.csv")
    nn.save_weights(teacher, out / "teacher_flow.nnw")
    report.to_csv(out / "experiment.csv")
    (out / "experiment.txt").write_text(report.table() + "\n")
    print(report.table())
    if args.temps:
        sweep = pipeline.run_temperature_sweep(
            manifest, clips, args.temps, args.seeds[0], cfg,
            prepared=prepared, teacher=teacher)
        with open(out / "temperature_sweep.csv", "w") as fh:
            fh.write("temperature,w,accuracy\n")
            for temp, acc in sorted(sweep.items()):
                fh.write(f"{temp},{temp * temp},{acc:.6f}\n")
        spread = (max(sweep.values()) - min(sweep.values())) * 100
        print(f"temperature sweep: "
              + ", ".join(f"T={t:g}->{a*100:.1f}%" for t, a in sorted(sweep.items()))
              + f"  (spread {spread:.1f} pts)")
    return 0


def cmd_eval(args) -> int:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest, clips = _load_dataset(Path(args.dataset))
    cfg = _experiment_config(args)
    net = nn.load_weights(args.checkpoint)
    need_flow = args.modality == "flow"
    prepared = pipeline.prepare_dataset(manifest, clips, cfg.gop, with_flow=need_flow,
                                        flow_cache=out / "flow_cache",
                                        threads=args.threads)
    test_clips = [prepared[c] for c in manifest.clip_ids("test")]
    if args.spatial_checkpoint:
        spatial = nn.load_weights(args.spatial_checkpoint)
        weights = pipeline.FusionWeights(*args.fusion)
        report = pipeline.evaluate((spatial, net), test_clips, args.stride,
                                   args.modality, cfg, weights)
    else:
        report = pipeline.evaluate(net, test_clips, args.stride, args.modality, cfg)
    _write_config(args, out, "eval")
    with open(out / "eval.csv", "w") as fh:
        fh.write("class,accuracy\n")
        for name, acc in zip(manifest.class_names, report.per_class_accuracy):
            fh.write(f"{name},{acc:.6f}\n")
        fh.write(f"overall,{report.overall_accuracy:.6f}\n")
    np.savetxt(out / "confusion.csv", report.confusion, fmt="%d", delimiter=",")
    print(f"evaluated {report.clips_evaluated} clips "
          f"({report.clips_skipped} skipped): overall {report.overall_accuracy:.3f}")
    return 0


def cmd_bench(args) -> int:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest, clips = _load_dataset(Path(args.dataset))
    cfg = _experiment_config(args)
    net = nn.load_weights(args.checkpoint)
    subset = clips[: args.clips]
    report = bench.bench_pipeline(subset, net, cfg, warmup=args.warmup,
                                  iters=args.iters, hardware_note=args.hardware_note)
    work = bench.build_workload(subset, cfg, net)
    for stage in ("mv_encode", "flow"):
        report.stages.append(bench.bench_stage(stage, work, args.warmup, args.iters))
    _write_config(args, out, "bench")
    report.to_csv(out / "bench.csv")
    (out / "bench.txt").write_text(report.table() + "\n")
    print(report.table())
    print(f"SAD evaluations during decode: {report.sad_evals_decode}")
    return 0


def _filter_mosaic(weight: np.ndarray, upscale: int = 6) -> np.ndarray:
    """conv weight (KH, KW, C, O) -> grayscale mosaic, one tile per filter.

    Channels are shown side by side inside a tile, paired (dx,dy) columns
    for even channel counts; each filter is min-max normalized on its own,
    flat filters land at mid-gray.
    """
    kh, kw, c, o = weight.shape
    pair = 2 if c % 2 == 0 and c >= 2 else 1
    groups = c // pair
    tiles = []
    for fi in range(o):
        f = weight[:, :, :, fi]
        lo, hi = float(f.min()), float(f.max())
        if hi - lo < 1e-12:
            norm = np.full(f.shape, 0.5)
        else:
            norm = (f - lo) / (hi - lo)
        cols = []
        for g in range(groups):
            for p in range(pair):
                cols.append(norm[:, :, g * pair + p])
                cols.append(np.full((kh, 1), 0.25))  # thin separator
        tile = np.hstack(cols[:-1])
        tiles.append(tile)
    per_row = int(np.ceil(np.sqrt(o)))
    th, tw = tiles[0].shape
    rows = int(np.ceil(o / per_row))
    canvas = np.full((rows * (th + 1) + 1, per_row * (tw + 1) + 1), 0.1)
    for i, tile in enumerate(tiles):
        r, col = divmod(i, per_row)
        y, x = 1 + r * (th + 1), 1 + col * (tw + 1)
        canvas[y : y + th, x : x + tw] = tile
    img = (np.clip(canvas, 0, 1) * 255).astype(np.uint8)
    return np.kron(img, np.ones((upscale, upscale), np.uint8))


def cmd_viz_filters(args) -> int:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    net = nn.load_weights(args.checkpoint)
    layer = None
    for l in net.layers:
        if l.name == args.layer:
            layer = l
            break
    if layer is None or not isinstance(layer, nn.Conv2d):
        print(f"error: layer {args.layer!r} is not a convolution in this checkpoint",
              file=sys.stderr)
        return 1
    mosaic = _filter_mosaic(layer.weight.value)
    dest = out / (args.name or f"{Path(args.checkpoint).stem}_{args.layer}.pgm")
    videoio.write_pgm(mosaic, dest)
    _write_config(args, out, "viz-filters")
    print(f"{layer.weight.value.shape[3]} filters -> {dest} ({mosaic.shape[1]}x{mosaic.shape[0]})")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _add_train_flags(p, teacher_steps=False):
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--stack", type=int, default=None, help="stacked transitions per window")
    p.add_argument("--block-size", type=int, default=None)
    p.add_argument("--gop-length", type=int, default=None)
    p.add_argument("--search-range", type=int, default=None)
    p.add_argument("--eval-stride", type=int, default=None)
    p.add_argument("--dropout", type=float, default=None)
    p.add_argument("--scratch-lr", type=float, default=None)
    p.add_argument("--finetune-lr", type=float, default=None)
    p.add_argument("--teacher-lr", type=float, default=None)
    if teacher_steps:
        p.add_argument("--teacher-steps", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="mvaction",
        description="Compressed-domain action recognition at desk scale: "
                    "block-motion codec emulation, two-stream CNNs, and "
                    "teacher-student transfer.",
    )
    sub = ap.add_subparsers(dest="command", required=True)

    pd = sub.add_parser("dataset", help="generate the MotionShapes dataset")
    pdsub = pd.add_subparsers(dest="dataset_command", required=True)
    pg = pdsub.add_parser("gen", help="synthesize clips and write MVS1 containers")
    pg.add_argument("--seed", type=int, default=7)
    pg.add_argument("--clips-per-class", type=int, default=50)
    pg.add_argument("--resolution", type=int, default=64)
    pg.add_argument("--clip-length", type=int, default=24)
    pg.add_argument("--gop-length", type=int, default=8)
    pg.add_argument("--block-size", type=int, default=8)
    pg.add_argument("--search-range", type=int, default=7)
    pg.add_argument("--out-dir", default="out")
    pg.set_defaults(func=cmd_dataset)

    pe = sub.add_parser("encode", help="re-encode a container with new GOP settings")
    pe.add_argument("--in", dest="infile", required=True)
    pe.add_argument("--gop-length", type=int, default=8)
    pe.add_argument("--block-size", type=int, default=16)
    pe.add_argument("--search-range", type=int, default=7)
    pe.add_argument("--name", default=None)
    pe.add_argument("--out-dir", default="out")
    pe.set_defaults(func=cmd_encode)

    pdec = sub.add_parser("decode", help="read back motion fields (and frames) from a container")
    pdec.add_argument("--in", dest="infile", required=True)
    pdec.add_argument("--frames", action="store_true", help="also write frame PGMs")
    pdec.add_argument("--vectors-pgm", action="store_true", help="write MV field PGMs")
    pdec.add_argument("--out-dir", default="out")
    pdec.set_defaults(func=cmd_decode)

    ptt = sub.add_parser("train-teacher", help="train the flow teacher (or the appearance stream)")
    ptt.add_argument("--dataset", required=True, help="dataset directory (manifest + clips)")
    ptt.add_argument("--stream", choices=("flow", "rgb"), default="flow")
    ptt.add_argument("--seed", type=int, default=1)
    ptt.add_argument("--threads", type=int, default=1)
    ptt.add_argument("--name", default=None)
    ptt.add_argument("--out-dir", default="out")
    _add_train_flags(ptt, teacher_steps=True)
    ptt.set_defaults(func=cmd_train_teacher)

    pts = sub.add_parser("train-student", help="train an MV student under a transfer strategy")
    pts.add_argument("--dataset", required=True)
    pts.add_argument("--teacher", default=None, help="teacher NNW1 checkpoint")
    pts.add_argument("--strategy", default="ti+st",
                     choices=("scratch", "ti", "st", "ti+st"))
    pts.add_argument("--temp", dest="temperature", type=float, default=None)
    pts.add_argument("--w", type=_parse_w, default=None,
                     help="soft-loss weight; 'auto' means temperature squared")
    pts.add_argument("--seed", type=int, default=1)
    pts.add_argument("--threads", type=int, default=1)
    pts.add_argument("--name", default=None)
    pts.add_argument("--out-dir", default="out")
    _add_train_flags(pts)
    pts.set_defaults(func=cmd_train_student)

    px = sub.add_parser("experiment", help="run the strategy x seed accuracy matrix")
    px.add_argument("--dataset", required=True)
    px.add_argument("--strategies", type=_str_list, default=["scratch", "st", "ti", "ti+st"])
    px.add_argument("--seeds", type=_int_list, default=[1, 2, 3])
    px.add_argument("--temp", dest="temperature", type=float, default=None)
    px.add_argument("--w", type=_parse_w, default=None)
    px.add_argument("--temps", type=_float_list, default=None,
                    help="also sweep these softening temperatures (w follows T^2)")
    px.add_argument("--out-dir", default="out")
    _add_train_flags(px, teacher_steps=True)
    px.set_defaults(func=cmd_experiment)

    pev = sub.add_parser("eval", help="evaluate checkpoint(s) on the test split")
    pev.add_argument("--dataset", required=True)
    pev.add_argument("--checkpoint", required=True)
    pev.add_argument("--spatial-checkpoint", default=None)
    pev.add_argument("--fusion", type=_parse_pair, default=(1.0, 2.0),
                     help="spatial,temporal score weights")
    pev.add_argument("--modality", choices=("mv", "flow", "rgb"), default="mv")
    pev.add_argument("--stride", type=int, default=4)
    pev.add_argument("--threads", type=int, default=1)
    pev.add_argument("--out-dir", default="out")
    _add_train_flags(pev)
    pev.set_defaults(func=cmd_eval)

    pb = sub.add_parser("bench", help="throughput per stage plus end-to-end")
    pb.add_argument("--dataset", required=True)
    pb.add_argument("--checkpoint", required=True)
    pb.add_argument("--clips", type=int, default=8)
    pb.add_argument("--iters", type=int, default=5)
    pb.add_argument("--warmup", type=int, default=2)
    pb.add_argument("--threads", type=int, default=1)
    pb.add_argument("--hardware-note", default="")
    pb.add_argument("--out-dir", default="out")
    _add_train_flags(pb)
    pb.set_defaults(func=cmd_bench)

    pv = sub.add_parser("viz-filters", help="render first-layer filters as a PGM mosaic")
    pv.add_argument("--checkpoint", required=True)
    pv.add_argument("--layer", default="conv1")
    pv.add_argument("--name", default=None)
    pv.add_argument("--out-dir", default="out")
    pv.set_defaults(func=cmd_viz_filters)
    return ap


def run(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (videoio.ContainerError, videoio.DecodeError, nn.CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
