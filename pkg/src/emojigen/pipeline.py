"""Run-directory orchestration shared by the CLI and the HTTP service.

A run directory accumulates everything one experiment produces:

    config.json                 dataset manifest path, image side, stats
    data/base/                  synthetic pretraining glyphs
    checkpoints/*.ckpt          codec, lm_base, lm_finetuned, lm_inverse, seg, vocab
    metrics/*.jsonl             loss curves and journals
    generated/<name>/           PNGs + generation manifest
    packs/<name>/               RGBA stickers + provenance
    jobs.journal                job store append-only log
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import dataset, evaluation, imaging, lm, sampler, segmentation, vq_codec
from .checkpoint import checkpoint_id, load_checkpoint, save_checkpoint
from .errors import ConfigurationError, InvalidArgumentError
from .imaging import ImageBuffer

RUN_DIR_ENV = "EMOJIGEN_RUN_DIR"

CHECKPOINTS = ("codec", "lm_base", "lm_finetuned", "lm_inverse", "seg", "vocab")


class RunPaths:
    def __init__(self, root):
        self.root = Path(root)

    @property
    def config(self) -> Path:
        return self.root / "config.json"

    @property
    def data(self) -> Path:
        return self.root / "data"

    @property
    def checkpoints(self) -> Path:
        return self.root / "checkpoints"

    @property
    def metrics(self) -> Path:
        return self.root / "metrics"

    @property
    def generated(self) -> Path:
        return self.root / "generated"

    @property
    def packs(self) -> Path:
        return self.root / "packs"

    @property
    def jobs_journal(self) -> Path:
        return self.root / "jobs.journal"

    def checkpoint(self, name: str) -> Path:
        return self.checkpoints / f"{name}.ckpt"

    def ensure(self) -> "RunPaths":
        for p in (self.root, self.data, self.checkpoints, self.metrics, self.generated, self.packs):
            p.mkdir(parents=True, exist_ok=True)
        return self


def resolve_run_dir(arg: str | None) -> RunPaths:
    root = arg or os.environ.get(RUN_DIR_ENV)
    if not root:
        raise ConfigurationError(f"no run directory: pass --run-dir or set {RUN_DIR_ENV}")
    return RunPaths(root).ensure()


def _write_jsonl(path, rows) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")


def _read_jsonl(path) -> list[dict]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rows.append(json.loads(line))
    return rows


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _load_run_config(paths: RunPaths) -> dict:
    if not paths.config.is_file():
        raise ConfigurationError(f"{paths.config} missing; run prepare-data first")
    return json.loads(paths.config.read_text(encoding="utf-8"))


def _require_checkpoint(paths: RunPaths, name: str) -> Path:
    p = paths.checkpoint(name)
    if not p.is_file():
        raise ConfigurationError(f"checkpoint {name!r} missing at {p}; train it first")
    return p


# --- data ---------------------------------------------------------------


def prepare_data(paths: RunPaths, manifest: str, side: int = 32) -> dict:
    """Validate the manifest, record caption statistics, pin the run config."""
    manifest_path = Path(manifest).resolve()
    records = dataset.load_manifest(manifest_path)
    stats = dataset.caption_stats(records)
    config = {
        "manifest": str(manifest_path),
        "side": side,
        "records": stats.total,
        "unique_captions": stats.unique_captions,
        "word_histogram": {str(k): v for k, v in sorted(stats.word_histogram.items())},
        "train_records": sum(1 for r in records if r.split == "train"),
        "val_records": sum(1 for r in records if r.split == "val"),
    }
    paths.config.write_text(json.dumps(config, ensure_ascii=False, indent=2), encoding="utf-8")
    return config


def _load_records(paths: RunPaths, split: str | None = None):
    config = _load_run_config(paths)
    manifest = Path(config["manifest"])
    records = dataset.load_manifest(manifest)
    if split:
        records = [r for r in records if r.split == split]
    return records, manifest.parent, int(config["side"])


# --- training stages ----------------------------------------------------


def train_codec(paths: RunPaths, cfg: vq_codec.CodecTrainConfig | None = None,
                codec_cfg: vq_codec.CodecConfig | None = None) -> dict:
    cfg = cfg or vq_codec.CodecTrainConfig()
    records, base_dir, side = _load_records(paths, split="train")
    codec_cfg = codec_cfg or vq_codec.CodecConfig(input_side=side)
    images = dataset.load_training_images(records, base_dir, side)
    model = vq_codec.CodecModel(codec_cfg)
    curve = vq_codec.train_codec(model, images, cfg)
    usage = vq_codec.codebook_usage(model, images)
    vq_codec.save_codec(paths.checkpoint("codec"), model, {"codebook_usage": usage})
    _write_jsonl(paths.metrics / "codec_curve.jsonl", curve)
    final = curve[-1]
    return {"epochs": cfg.epochs, "final_psnr": final["psnr"], "final_loss": final["eval_loss"],
            "codebook_usage": usage, "checkpoint": str(paths.checkpoint("codec"))}


def _encode_image_targets(codec: vq_codec.CodecModel, images: list[ImageBuffer]) -> list[np.ndarray]:
    return [vq_codec.encode_indices(codec, img).reshape(-1) for img in images]


def _build_sequences(records, images, codec, vocab, lm_cfg: lm.LmConfig, inverse: bool = False):
    seqs = []
    targets = _encode_image_targets(codec, images)
    for rec, grid in zip(records, targets):
        text_ids = dataset.encode_caption(vocab, rec.caption, lm_cfg.t_text)
        image_ids = grid.astype(np.int64) + lm_cfg.text_vocab_size
        if inverse:
            seqs.append(dataset.compose_inverse_sequence(image_ids, text_ids))
        else:
            seqs.append(dataset.compose_sequence(text_ids, image_ids))
    return seqs


def pretrain_lm(paths: RunPaths, n: int = 200, epochs: int = 8, seed: int = 0,
                lm_dims: dict | None = None) -> dict:
    """Train the base model on the synthetic glyph set (the stand-in for
    general-domain pretraining), and pin the shared vocabulary."""
    codec = vq_codec.load_codec(_require_checkpoint(paths, "codec"))
    records, base_dir, side = _load_records(paths)
    base_records = dataset.make_synthetic_base_set(seed, n, paths.data / "base")
    vocab = dataset.build_vocab(list(records) + base_records)
    save_checkpoint(paths.checkpoint("vocab"), vocab.to_arrays(), {"kind": "vocab"})

    dims = {"n_layers": 4, "n_heads": 4, "width": 128, "t_text": 32}
    dims.update(lm_dims or {})
    lm_cfg = lm.LmConfig(
        text_vocab_size=vocab.size,
        image_vocab_size=codec.cfg.codebook_size,
        t_image=codec.cfg.grid**2,
        seed=seed,
        **dims,
    )
    model = lm.TransformerLm(lm_cfg)
    images = dataset.load_training_images(base_records, paths.data / "base", side)
    seqs = _build_sequences(base_records, images, codec, vocab, lm_cfg)
    cfg = lm.LmTrainConfig(epochs=epochs, batch_size=8, seed=seed,
                           start_lr=1e-4, max_lr=2e-3, final_lr=1e-5)
    metrics = lm.train_lm(model, lm.no_freeze_mask(model), seqs, cfg)
    lm.save_lm(paths.checkpoint("lm_base"), model, {"stage": "base"})
    _write_jsonl(paths.metrics / "pretrain.jsonl", metrics)
    return {"steps": len(metrics), "first_loss": metrics[0]["loss"], "last_loss": metrics[-1]["loss"],
            "checkpoint": str(paths.checkpoint("lm_base"))}


def load_vocab(paths: RunPaths) -> dataset.Vocabulary:
    tensors, _meta = load_checkpoint(_require_checkpoint(paths, "vocab"))
    return dataset.Vocabulary.from_arrays(tensors)


def finetune(paths: RunPaths, cfg: lm.LmTrainConfig | None = None) -> dict:
    """Fine-tune the base model on the emoji set with the frozen
    attention/feedforward mask and image-weighted loss."""
    cfg = cfg or lm.LmTrainConfig()
    codec = vq_codec.load_codec(_require_checkpoint(paths, "codec"))
    model = lm.load_lm(_require_checkpoint(paths, "lm_base"))
    vocab = load_vocab(paths)
    records, base_dir, side = _load_records(paths, split="train")
    images = dataset.load_training_images(records, base_dir, side)
    seqs = _build_sequences(records, images, codec, vocab, model.cfg)
    mask = lm.default_finetune_mask(model)
    metrics = lm.train_lm(model, mask, seqs, cfg)
    lm.save_lm(paths.checkpoint("lm_finetuned"), model, {"stage": "finetuned"})
    _write_jsonl(paths.metrics / "finetune.jsonl", metrics)
    return {"steps": len(metrics), "first_loss": metrics[0]["loss"], "last_loss": metrics[-1]["loss"],
            "frozen_tensors": len(mask.frozen_names()),
            "checkpoint": str(paths.checkpoint("lm_finetuned"))}


def train_inverse(paths: RunPaths, cfg: lm.LmTrainConfig | None = None) -> dict:
    """Train the image-first captioning model used for reranking."""
    codec = vq_codec.load_codec(_require_checkpoint(paths, "codec"))
    vocab = load_vocab(paths)
    base = lm.load_lm(_require_checkpoint(paths, "lm_base"))
    model = lm.TransformerLm(replace(base.cfg, seed=base.cfg.seed + 17))
    records, base_dir, side = _load_records(paths, split="train")
    images = dataset.load_training_images(records, base_dir, side)
    seqs = _build_sequences(records, images, codec, vocab, model.cfg, inverse=True)
    cfg = cfg or lm.LmTrainConfig(epochs=30, batch_size=8, seed=7,
                                  start_lr=1e-4, max_lr=2e-3, final_lr=1e-5,
                                  weights=lm.LossWeights(1.0, 1.0))
    metrics = lm.train_lm(model, lm.no_freeze_mask(model), seqs, cfg)
    lm.save_lm(paths.checkpoint("lm_inverse"), model, {"stage": "inverse"})
    _write_jsonl(paths.metrics / "inverse.jsonl", metrics)
    return {"steps": len(metrics), "last_loss": metrics[-1]["loss"],
            "checkpoint": str(paths.checkpoint("lm_inverse"))}


# --- generation ---------------------------------------------------------


def _next_generation_name(paths: RunPaths) -> str:
    existing = {p.name for p in paths.generated.iterdir() if p.is_dir()} if paths.generated.is_dir() else set()
    i = 1
    while f"gen-{i:04d}" in existing:
        i += 1
    return f"gen-{i:04d}"


def generate(paths: RunPaths, caption: str, config: sampler.SamplingConfig, out_name: str | None = None) -> dict:
    codec = vq_codec.load_codec(_require_checkpoint(paths, "codec"))
    model = lm.load_lm(_require_checkpoint(paths, "lm_finetuned"))
    vocab = load_vocab(paths)
    name = out_name or _next_generation_name(paths)
    out_dir = paths.generated / name
    out_dir.mkdir(parents=True, exist_ok=True)
    results = sampler.generate(model, codec, vocab, caption, config)
    rows = []
    files = []
    for i, (img, grid) in enumerate(results):
        fname = f"img_{i:02d}.png"
        imaging.write_png(img, out_dir / fname)
        digest = _sha256(out_dir / fname)
        rows.append({
            "index": i,
            "file": fname,
            "caption": caption,
            "seed": config.seed,
            "top_k": config.top_k,
            "top_p": config.top_p,
            "temperature": config.temperature,
            "grid": grid.reshape(-1).tolist(),
            "grid_hash": evaluation.grid_hash(grid),
            "png_sha256": digest,
        })
        files.append({"path": f"generated/{name}/{fname}", "sha256": digest})
    _write_jsonl(out_dir / "manifest.jsonl", rows)
    return {"name": name, "dir": str(out_dir), "manifest": str(out_dir / "manifest.jsonl"),
            "files": files, "grid_hashes": [r["grid_hash"] for r in rows], "caption": caption}


def rerank(paths: RunPaths, gen_name: str, train_if_missing: bool = True) -> dict:
    gen_dir = paths.generated / gen_name
    manifest = gen_dir / "manifest.jsonl"
    if not manifest.is_file():
        raise ConfigurationError(f"no generation manifest at {manifest}")
    if not paths.checkpoint("lm_inverse").is_file():
        if not train_if_missing:
            raise ConfigurationError("inverse model not trained; run with train_if_missing")
        train_inverse(paths)
    inverse = lm.load_lm(paths.checkpoint("lm_inverse"))
    vocab = load_vocab(paths)
    rows = _read_jsonl(manifest)
    g = inverse.cfg.t_image
    side = int(np.sqrt(g))
    gens = []
    for row in rows:
        grid = np.asarray(row["grid"], dtype=np.int64).reshape(side, side)
        gens.append((None, grid))
    caption = rows[0]["caption"]
    order = evaluation.rerank_by_caption_loss(gens, inverse, caption, vocab)
    out_rows = [{"rank": r, "index": idx, "file": rows[idx]["file"], "caption_loss": loss}
                for r, (idx, loss) in enumerate(order)]
    _write_jsonl(gen_dir / "rerank.jsonl", out_rows)
    return {"gen": gen_name, "order": out_rows, "report": str(gen_dir / "rerank.jsonl")}


# --- segmentation -------------------------------------------------------


def _fixture_mask(img: ImageBuffer, side: int) -> np.ndarray:
    """Ground-truth opacity from an RGBA fixture's alpha plane."""
    alpha = img.data[:, :, 3]
    if alpha.shape != (side, side):
        buf = ImageBuffer(np.dstack([alpha, alpha, alpha]))
        alpha = imaging.resize_bicubic(buf, side, side).data[:, :, 0]
    return (alpha >= 128).astype(np.float32)


def seg_training_pairs(paths: RunPaths, split: str = "train", side: int = 64):
    """(flattened RGB image, binary mask) pairs from the RGBA fixtures."""
    records, base_dir, _ = _load_records(paths, split=split)
    pairs = []
    for rec in records:
        raw = imaging.read_png(base_dir / rec.image_path)
        if raw.channels != 4:
            continue
        rgb = imaging.flatten_alpha(raw)
        if rgb.width != side or rgb.height != side:
            rgb = imaging.resize_bicubic(rgb, side, side)
        pairs.append((rgb, _fixture_mask(raw, side)))
    return pairs


def train_seg(paths: RunPaths, pool_dir: str | None = None, inject_dir: str | None = None,
              cfg: segmentation.PseudoLabelConfig | None = None, side: int = 64) -> dict:
    cfg = cfg or segmentation.PseudoLabelConfig()
    labeled = seg_training_pairs(paths, "train", side)
    if inject_dir:
        labeled.extend(load_injected_pairs(inject_dir, side))
    if not labeled:
        raise ConfigurationError("no labeled RGBA fixtures found in the train split")
    pool = []
    if pool_dir:
        for p in sorted(Path(pool_dir).glob("*.png")):
            img = imaging.read_png(p)
            if img.channels == 4:
                img = imaging.flatten_alpha(img)
            if img.width != side or img.height != side:
                img = imaging.resize_bicubic(img, side, side)
            pool.append(img)
    model = segmentation.SegModel(segmentation.SegConfig(side=side))
    model, state = segmentation.pseudo_label_loop(model, labeled, pool, cfg)
    segmentation.save_seg(paths.checkpoint("seg"), model, {"rounds": len(state.rounds)})
    _write_jsonl(paths.metrics / "seg_journal.jsonl", state.rounds)
    return {"rounds": state.rounds, "checkpoint": str(paths.checkpoint("seg")),
            "journal": str(paths.metrics / "seg_journal.jsonl")}


def load_injected_pairs(inject_dir, side: int):
    """Hand-authored (NAME.png, NAME_mask.png) pairs to add to the labeled set."""
    pairs = []
    for img_path in sorted(Path(inject_dir).glob("*.png")):
        if img_path.stem.endswith("_mask"):
            continue
        mask_path = img_path.with_name(img_path.stem + "_mask.png")
        if not mask_path.is_file():
            continue
        img = imaging.read_png(img_path)
        if img.channels == 4:
            img = imaging.flatten_alpha(img)
        if img.width != side or img.height != side:
            img = imaging.resize_bicubic(img, side, side)
        mask = imaging.read_gray_png(mask_path).astype(np.float32) / 255.0
        pairs.append((img, (mask >= 0.5).astype(np.float32)))
    return pairs


def segment_image(paths: RunPaths, image: str, threshold: float = 0.99) -> dict:
    """Segment one image into an RGBA sticker + stored mask.

    Falls back to the classical rule when no trained model exists or the
    model is not confident enough.
    """
    src = Path(image)
    if not src.is_absolute():
        src = paths.root / image
    img = imaging.read_png(src)
    if img.channels == 4:
        img = imaging.flatten_alpha(img)
    seg_ckpt = paths.checkpoint("seg")
    if seg_ckpt.is_file():
        model = segmentation.load_seg(seg_ckpt)
        if img.width != model.cfg.side or img.height != model.cfg.side:
            img = imaging.resize_bicubic(img, model.cfg.side, model.cfg.side)
        mask, regime = segmentation.segment(model, img, threshold)
    else:
        mask, regime = segmentation.contour_fallback(img), segmentation.FALLBACK_REGIME
    rgba = segmentation.compose_rgba(img, mask, hard=True)
    out_rgba = src.with_name(src.stem + "_rgba.png")
    out_mask = src.with_name(src.stem + "_mask.png")
    imaging.write_png(rgba, out_rgba)
    imaging.write_gray_png(np.where(mask.values >= 0.5, 255, 0).astype(np.uint8), out_mask)
    rel = out_rgba.relative_to(paths.root) if out_rgba.is_relative_to(paths.root) else out_rgba
    return {"source": str(image), "rgba": str(rel), "mask": str(out_mask),
            "regime": regime, "confidence": mask.confidence,
            "files": [{"path": str(rel), "sha256": _sha256(out_rgba)}]}


# --- export -------------------------------------------------------------


def export_pack(paths: RunPaths, name: str, images: list[str], export_side: int = 512) -> dict:
    """Collect RGBA stickers into packs/<name>/ at the export side length."""
    if not images:
        raise InvalidArgumentError("export needs at least one image")
    if any(sep in name for sep in ("/", "\\", "..")) or not name:
        raise InvalidArgumentError(f"invalid pack name {name!r}")
    pack_dir = paths.packs / name
    pack_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    files = []
    for i, ref in enumerate(images):
        src = Path(ref)
        if not src.is_absolute():
            src = paths.root / ref
        img = imaging.read_png(src)
        if img.channels != 4:
            raise InvalidArgumentError(f"{ref}: pack entries must be RGBA stickers")
        if img.width != export_side or img.height != export_side:
            img = imaging.resize_bicubic(img, export_side, export_side)
        fname = f"sticker_{i:02d}.png"
        imaging.write_png(img, pack_dir / fname)
        provenance = {"file": fname, "source": str(ref)}
        provenance.update(_generation_provenance(paths, ref))
        rows.append(provenance)
        files.append({"path": f"packs/{name}/{fname}", "sha256": _sha256(pack_dir / fname)})
    _write_jsonl(pack_dir / "provenance.jsonl", rows)
    return {"name": name, "dir": str(pack_dir), "files": files,
            "provenance": str(pack_dir / "provenance.jsonl")}


def _generation_provenance(paths: RunPaths, ref: str) -> dict:
    """Look up caption/seed/config for a sticker derived from a generated image."""
    p = Path(ref)
    if not p.is_absolute():
        p = paths.root / ref
    manifest = p.parent / "manifest.jsonl"
    if not manifest.is_file():
        return {}
    stem = p.stem.removesuffix("_rgba")
    for row in _read_jsonl(manifest):
        if Path(row["file"]).stem == stem:
            return {"caption": row["caption"], "seed": row["seed"],
                    "sampling": {"top_k": row["top_k"], "top_p": row["top_p"],
                                 "temperature": row["temperature"]},
                    "grid_hash": row["grid_hash"]}
    return {}


# --- evaluation ---------------------------------------------------------


def _images_from_source(paths: RunPaths, source: str, side: int) -> list[ImageBuffer]:
    src = Path(source)
    if not src.is_absolute():
        src = paths.root / source
    if src.is_dir():
        files = sorted(src.glob("*.png"))
        imgs = [imaging.read_png(p) for p in files]
    else:
        records = dataset.load_manifest(src)
        imgs = [imaging.read_png(src.parent / r.image_path) for r in records]
    out = []
    for img in imgs:
        out.append(dataset.preprocess_image(img, side))
    return out


def eval_fid(paths: RunPaths, set_a: str, set_b: str) -> dict:
    codec = vq_codec.load_codec(_require_checkpoint(paths, "codec"))
    side = codec.cfg.input_side
    imgs_a = _images_from_source(paths, set_a, side)
    imgs_b = _images_from_source(paths, set_b, side)
    summary_a = evaluation.summarize_features(imgs_a, codec)
    summary_b = evaluation.summarize_features(imgs_b, codec)
    value = evaluation.frechet_distance(summary_a, summary_b)
    report = {
        "metric": "frechet_feature_distance",
        "value": value,
        "n_a": len(imgs_a),
        "n_b": len(imgs_b),
        "codec_checkpoint": checkpoint_id(paths.checkpoint("codec")),
    }
    report_path = paths.metrics / "fid.jsonl"
    existing = _read_jsonl(report_path) if report_path.is_file() else []
    _write_jsonl(report_path, existing + [report])
    return report


def health(paths: RunPaths) -> dict:
    ckpts = {}
    for name in CHECKPOINTS:
        p = paths.checkpoint(name)
        ckpts[name] = checkpoint_id(p) if p.is_file() else None
    ready = ckpts["codec"] is not None and ckpts["lm_finetuned"] is not None and ckpts["vocab"] is not None
    return {"status": "ok" if ready else "degraded", "checkpoints": ckpts}
