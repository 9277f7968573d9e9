"""Command-line entrypoints: generate-data, train, infer, eval, serve."""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

CHECKPOINT_ENV = "SKETCHANIM_CHECKPOINT"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sketchanim")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", help="write a procedural sprite corpus")
    p.add_argument("--size", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--frames", type=int, default=16)
    p.add_argument("--width", type=int, default=32)
    p.add_argument("--height", type=int, default=32)
    p.add_argument("--sprites-min", type=int, default=1)
    p.add_argument("--sprites-max", type=int, default=4)
    p.add_argument("--sprite-size-min", type=int, default=None)
    p.add_argument("--sprite-size-max", type=int, default=None)

    p = sub.add_parser("train", help="train a model on a corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=20000)
    p.add_argument("--lr", type=float, default=2e-5)
    p.add_argument("--batch-size", type=int, default=1)
    p.add_argument("--weight-decay", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument(
        "--ablation",
        default="full",
        choices=["full", "no_instance_attention", "no_canvas_guidance", "no_decoupled_control"],
    )
    p.add_argument("--blocks", type=int, default=6)
    p.add_argument("--hidden-dim", type=int, default=128)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--probe-every", type=int, default=0)
    p.add_argument("--checkpoint-every", type=int, default=1000)

    p = sub.add_parser("infer", help="colorize a sketch clip")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--canvas", required=True, help="canvas spec document (JSON)")
    p.add_argument("--instances", default=None, help="directory of <id>.png instance images")
    p.add_argument("--sketches", required=True, help="directory of sketch frames (PNG)")
    p.add_argument("--caption", default="")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--w-bg", type=float, default=None)
    p.add_argument("--w-text", type=float, default=None)
    p.add_argument("--w-inst", action="append", default=[], metavar="I=V")
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="score generated clips against ground truth")
    p.add_argument("--gen", required=True)
    p.add_argument("--truth", required=True)

    p = sub.add_parser("serve", help="run the inference HTTP service")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--port", type=int, default=8077)
    p.add_argument("--host", default="127.0.0.1")

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handler = {
        "generate-data": _cmd_generate_data,
        "train": _cmd_train,
        "infer": _cmd_infer,
        "eval": _cmd_eval,
        "serve": _cmd_serve,
    }[args.command]
    try:
        return handler(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def _cmd_generate_data(args) -> int:
    from .data_factory import write_corpus

    manifest = write_corpus(
        args.out,
        size=args.size,
        seed=args.seed,
        width=args.width,
        height=args.height,
        frames=args.frames,
        min_sprites=args.sprites_min,
        max_sprites=args.sprites_max,
        min_size=args.sprite_size_min,
        max_size=args.sprite_size_max,
    )
    print(f"wrote {args.size} samples; manifest at {manifest}")
    return 0


def _cmd_train(args) -> int:
    from .data_factory import read_manifest
    from .training import TrainConfig, model_config_for_corpus, train

    config = TrainConfig(
        learning_rate=args.lr,
        steps=args.steps,
        batch_size=args.batch_size,
        weight_decay=args.weight_decay,
        seed=args.seed,
        ablation=args.ablation,
        probe_every=args.probe_every,
        checkpoint_every=args.checkpoint_every,
    )
    manifest = read_manifest(args.corpus)
    model_config = model_config_for_corpus(
        manifest, blocks=args.blocks, hidden_dim=args.hidden_dim, heads=args.heads
    )
    final = train(config, args.corpus, args.out, model_config)
    print(f"final checkpoint: {final}")
    return 0


def _resolve_checkpoint(arg_value):
    path = arg_value or os.environ.get(CHECKPOINT_ENV)
    if not path:
        raise ValueError(
            f"no checkpoint given; pass --checkpoint or set {CHECKPOINT_ENV}"
        )
    if not Path(path).exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return path


def _load_png(path: Path) -> np.ndarray:
    from PIL import Image

    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0


def _save_png(path: Path, array: np.ndarray):
    from PIL import Image

    arr = np.round(np.clip(array, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(arr).save(path)


def _cmd_infer(args) -> int:
    from .backbone import build_conditions, load_checkpoint, sample
    from .canvas import InstanceImage, InstanceSet, spec_from_document
    from .latent_codec import PixelVideo

    model, _ = load_checkpoint(_resolve_checkpoint(args.checkpoint))
    doc_path = Path(args.canvas)
    doc = json.loads(doc_path.read_text())
    spec = spec_from_document(
        doc, load_image=lambda p: _load_png((doc_path.parent / p) if not Path(p).is_absolute() else Path(p))
    )

    instances = InstanceSet()
    if args.instances:
        inst_dir = Path(args.instances)
        for png in sorted(inst_dir.glob("*.png")):
            if png.name.endswith(".mask.png"):
                continue
            mask_path = inst_dir / f"{png.stem}.mask.png"
            mask = None
            if mask_path.exists():
                from PIL import Image

                mask = np.asarray(Image.open(mask_path).convert("L")) > 127
            instances.add(png.stem, InstanceImage(image=_load_png(png), mask=mask))
    missing = [p.instance_id for p in spec.placements if p.instance_id not in instances]
    if missing:
        raise ValueError(f"placements reference unknown instance ids: {missing}")

    sketch_paths = sorted(Path(args.sketches).glob("*.png"))
    if not sketch_paths:
        raise FileNotFoundError(f"no sketch frames in {args.sketches}")
    sketches = PixelVideo(frames=np.stack([_load_png(p) for p in sketch_paths]))

    overrides = {}
    if args.w_bg is not None:
        overrides["bg"] = args.w_bg
    if args.w_text is not None:
        overrides["text"] = args.w_text
    if args.w_inst:
        inst = {}
        for item in args.w_inst:
            if "=" not in item:
                raise ValueError(f"--w-inst expects I=V, got {item!r}")
            idx, value = item.split("=", 1)
            inst[int(idx)] = float(value)
        overrides["inst"] = inst

    cond = build_conditions(
        model, spec, instances, sketches, args.caption, weight_overrides=overrides or None
    )
    video = sample(model, cond, sketches.frames.shape[0], seed=args.seed, num_steps=args.steps)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for t, frame in enumerate(video.frames):
        _save_png(out_dir / f"frame_{t:03d}.png", frame)
    print(f"wrote {video.frames.shape[0]} frames to {out_dir}")
    return 0


def _load_clips(root: Path) -> list[np.ndarray]:
    """Accept either a corpus layout (sample_*/frames/*.png) or a directory
    of clip subdirectories of PNG frames."""
    root = Path(root)
    clips = []
    subdirs = sorted(d for d in root.iterdir() if d.is_dir())
    for d in subdirs:
        frame_dir = d / "frames" if (d / "frames").is_dir() else d
        paths = sorted(frame_dir.glob("*.png"))
        if paths:
            clips.append(np.stack([_load_png(p) for p in paths]))
    if not clips:
        paths = sorted(root.glob("*.png"))
        if paths:
            clips.append(np.stack([_load_png(p) for p in paths]))
    if not clips:
        raise FileNotFoundError(f"no clips found under {root}")
    return clips


def _cmd_eval(args) -> int:
    from .metrics import render_report, report

    gen = _load_clips(Path(args.gen))
    truth = _load_clips(Path(args.truth))
    print(render_report(report(gen, truth)))
    return 0


def _cmd_serve(args) -> int:
    import uvicorn

    from .server import create_app

    app = create_app(checkpoint_path=_resolve_checkpoint(args.checkpoint))
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


if __name__ == "__main__":
    sys.exit(main())
