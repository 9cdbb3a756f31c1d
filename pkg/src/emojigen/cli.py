"""Command-line entry points over the shared pipeline.

Exit codes: 0 success, 1 pipeline failure (diagnostic on stderr),
2 usage error (argparse).
"""

from __future__ import annotations

import argparse
import json
import sys

from . import lm, pipeline, sampler, segmentation, vq_codec
from .errors import EmojigenError


def _print(obj) -> None:
    print(json.dumps(obj, ensure_ascii=False, indent=2, default=str))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="emojigen", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--run-dir", default=None, help="run directory (or EMOJIGEN_RUN_DIR)")
        return p

    p = add("prepare-data", "validate a manifest and pin the run configuration")
    p.add_argument("--manifest", required=True)
    p.add_argument("--side", type=int, default=32, help="training image side length")

    p = add("train-codec", "train the VQ codec on the prepared dataset")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)

    p = add("pretrain-lm", "train the base model on synthetic glyphs")
    p.add_argument("--n", type=int, default=200, help="synthetic records to generate")
    p.add_argument("--epochs", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--layers", type=int, default=4)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--width", type=int, default=128)
    p.add_argument("--t-text", type=int, default=32)

    p = add("finetune", "fine-tune on the emoji set with freezing + weighted loss")
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--batch", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--start-lr", type=float, default=4e-7)
    p.add_argument("--max-lr", type=float, default=1e-5)
    p.add_argument("--final-lr", type=float, default=2e-8)
    p.add_argument("--warmup", type=float, default=0.1)
    p.add_argument("--clip", type=float, default=1.0)
    p.add_argument("--w-text", type=float, default=1.0)
    p.add_argument("--w-image", type=float, default=1000.0)

    p = add("generate", "sample a batch of emoji images for a caption")
    p.add_argument("--caption", required=True)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--top-k", type=int, default=2048)
    p.add_argument("--top-p", type=float, default=0.995)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--out", default=None, help="generation name under generated/")

    p = add("segment", "convert a generated image to an RGBA sticker")
    p.add_argument("--image", required=True, help="path, absolute or run-dir-relative")
    p.add_argument("--threshold", type=float, default=0.99)

    p = add("rerank", "order a generation batch by caption loss (trains the inverse model on demand)")
    p.add_argument("--gen", required=True, help="generation name under generated/")
    p.add_argument("--no-train", action="store_true", help="fail instead of training a missing inverse model")

    p = add("eval-fid", "Fréchet feature distance between two image sets")
    p.add_argument("--set-a", required=True, help="manifest or directory of PNGs")
    p.add_argument("--set-b", required=True)

    p = add("train-seg", "train the segmentation model with pseudo-labeling")
    p.add_argument("--pool", default=None, help="directory of unlabeled PNGs")
    p.add_argument("--inject", default=None, help="directory of hand-authored NAME.png/NAME_mask.png pairs")
    p.add_argument("--threshold", type=float, default=0.99)
    p.add_argument("--max-rounds", type=int, default=10)
    p.add_argument("--plateau-frac", type=float, default=0.01)
    p.add_argument("--epochs-per-round", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--side", type=int, default=64)

    p = add("export-pack", "bundle RGBA stickers into a 512x512 pack")
    p.add_argument("--name", required=True)
    p.add_argument("--images", nargs="+", required=True)
    p.add_argument("--export-side", type=int, default=512)

    p = add("serve", "start the HTTP job service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8715)

    return parser


def run_command(args: argparse.Namespace):
    paths = pipeline.resolve_run_dir(args.run_dir)
    cmd = args.command
    if cmd == "prepare-data":
        return pipeline.prepare_data(paths, args.manifest, side=args.side)
    if cmd == "train-codec":
        cfg = vq_codec.CodecTrainConfig(epochs=args.epochs, batch_size=args.batch, seed=args.seed)
        return pipeline.train_codec(paths, cfg)
    if cmd == "pretrain-lm":
        dims = {"n_layers": args.layers, "n_heads": args.heads, "width": args.width, "t_text": args.t_text}
        return pipeline.pretrain_lm(paths, n=args.n, epochs=args.epochs, seed=args.seed, lm_dims=dims)
    if cmd == "finetune":
        cfg = lm.LmTrainConfig(
            epochs=args.epochs, batch_size=args.batch, seed=args.seed,
            start_lr=args.start_lr, max_lr=args.max_lr, final_lr=args.final_lr,
            warmup_frac=args.warmup, clip_norm=args.clip,
            weights=lm.LossWeights(args.w_text, args.w_image),
        )
        return pipeline.finetune(paths, cfg)
    if cmd == "generate":
        cfg = sampler.SamplingConfig(seed=args.seed, batch=args.batch, top_k=args.top_k,
                                     top_p=args.top_p, temperature=args.temperature)
        return pipeline.generate(paths, args.caption, cfg, out_name=args.out)
    if cmd == "segment":
        return pipeline.segment_image(paths, args.image, threshold=args.threshold)
    if cmd == "rerank":
        return pipeline.rerank(paths, args.gen, train_if_missing=not args.no_train)
    if cmd == "eval-fid":
        return pipeline.eval_fid(paths, args.set_a, args.set_b)
    if cmd == "train-seg":
        cfg = segmentation.PseudoLabelConfig(
            threshold=args.threshold, max_rounds=args.max_rounds, plateau_frac=args.plateau_frac,
            train=segmentation.SegTrainConfig(epochs=args.epochs_per_round, seed=args.seed),
        )
        return pipeline.train_seg(paths, pool_dir=args.pool, inject_dir=args.inject, cfg=cfg, side=args.side)
    if cmd == "export-pack":
        return pipeline.export_pack(paths, args.name, args.images, export_side=args.export_side)
    if cmd == "serve":
        from .service import serve

        serve(args.run_dir, host=args.host, port=args.port)
        return {"status": "stopped"}
    raise AssertionError(f"unhandled command {cmd}")


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        result = run_command(args)
    except (EmojigenError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    _print(result)
    return 0


if __name__ == "__main__":
    sys.exit(main())
