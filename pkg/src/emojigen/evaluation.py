"""Quantitative evaluation: Fréchet distance between Gaussian feature
summaries (the codec encoder is the feature extractor) and caption-loss
reranking under an inverse-ordered (image-first) model.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
import torch

from . import vq_codec
from .dataset import Vocabulary, compose_inverse_sequence, encode_caption
from .errors import InsufficientSampleError, InvalidArgumentError
from .imaging import ImageBuffer
from .lm import LossWeights, TransformerLm, weighted_ce_loss_torch


@dataclass
class GaussianSummary:
    mean: np.ndarray  # fp64 (F,)
    cov: np.ndarray  # fp64 (F, F), symmetrized

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        cov = np.asarray(self.cov, dtype=np.float64)
        if cov.shape != (self.mean.size, self.mean.size):
            raise InvalidArgumentError(f"covariance shape {cov.shape} does not match mean dim {self.mean.size}")
        self.cov = (cov + cov.T) / 2.0


def summarize_features(images: list[ImageBuffer], codec: vq_codec.CodecModel) -> GaussianSummary:
    """Fit a Gaussian to spatially-averaged pre-quantization encoder features."""
    if len(images) < 2:
        raise InsufficientSampleError(f"need >= 2 images, got {len(images)}")
    feats = np.stack([vq_codec.encode_features(codec, img).mean(axis=(0, 1)) for img in images])
    mean = feats.mean(axis=0)
    centered = feats - mean
    cov = centered.T @ centered / (len(images) - 1)
    return GaussianSummary(mean, cov)


def _sqrt_psd(mat: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(mat)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(a: GaussianSummary, b: GaussianSummary) -> float:
    """||mu_a - mu_b||^2 + Tr(Sa + Sb - 2 (Sa Sb)^(1/2)), clamped to >= 0.

    Tr (Sa Sb)^(1/2) is computed from the eigendecomposition of the
    symmetrized product Sb^(1/2) Sa Sb^(1/2), negative eigenvalues clamped.
    """
    if a.mean.shape != b.mean.shape:
        raise InvalidArgumentError(f"summary dims differ: {a.mean.shape} vs {b.mean.shape}")
    diff = a.mean - b.mean
    b_half = _sqrt_psd(b.cov)
    inner = b_half @ a.cov @ b_half
    inner = (inner + inner.T) / 2.0
    vals = np.clip(np.linalg.eigvalsh(inner), 0.0, None)
    tr_sqrt = float(np.sum(np.sqrt(vals)))
    fd = float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * tr_sqrt)
    return max(fd, 0.0)


def caption_loss(
    inverse_model: TransformerLm,
    image_grid: np.ndarray,
    caption: str,
    vocab: Vocabulary,
) -> float:
    """Mean CE of the caption's text tokens given the image prefix.

    The inverse model was trained with the image segment first; logits are
    restricted to the text vocabulary, so an untrained uniform model scores
    ln(text_vocab_size). Lower is better.
    """
    cfg = inverse_model.cfg
    v_text = cfg.text_vocab_size
    text_ids = encode_caption(vocab, caption, cfg.t_text)
    image_ids = np.asarray(image_grid, dtype=np.int64).reshape(-1) + v_text
    if image_ids.size != cfg.t_image:
        raise InvalidArgumentError(f"grid has {image_ids.size} cells, expected {cfg.t_image}")
    seq = compose_inverse_sequence(image_ids, text_ids)
    with torch.no_grad():
        logits = inverse_model(torch.from_numpy(seq.ids))[0, :, :v_text]
    loss = weighted_ce_loss_torch(
        logits,
        torch.from_numpy(seq.ids),
        torch.from_numpy(np.zeros_like(seq.is_image)),  # uniform weight over text targets
        torch.from_numpy(seq.is_pad | seq.is_image),  # score only non-PAD text targets
        LossWeights(1.0, 1.0),
    )
    return float(loss.item())


def grid_hash(grid: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(grid, dtype=np.int64).tobytes()).hexdigest()[:16]


def rerank_by_caption_loss(
    generations: list[tuple[ImageBuffer, np.ndarray]],
    inverse_model: TransformerLm,
    caption: str,
    vocab: Vocabulary,
) -> list[tuple[int, float]]:
    """Ascending caption-loss order over a generation batch.

    Returns (original_index, loss) pairs; ties fall back to the grid hash so
    the order is independent of the incoming batch order.
    """
    scored = []
    for i, (_img, grid) in enumerate(generations):
        scored.append((i, caption_loss(inverse_model, grid, caption, vocab), grid_hash(grid)))
    scored.sort(key=lambda row: (row[1], row[2]))
    return [(i, loss) for i, loss, _h in scored]
