"""Autoregressive image-token generation: temperature, top-k, nucleus
filtering, and seeded multinomial draws.

Randomness comes from PCG32 (PCG-XSH-RR, O'Neill 2014): a 64-bit LCG with
multiplier 6364136223846793005 and a per-stream odd increment, output is a
32-bit xorshift-high + random rotation of the pre-advance_state. Seeding
follows the reference pcg32_srandom: state=0, inc=(stream<<1)|1, advance,
state+=seed, advance. Uniform doubles take 53 bits from two consecutive
outputs. The algorithm is fixed here so token sequences reproduce across
platforms and versions; batch element i draws from stream i.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from . import vq_codec
from .dataset import Vocabulary, encode_caption
from .errors import ContractViolationError, InvalidArgumentError
from .imaging import ImageBuffer
from .lm import TransformerLm

_MASK64 = (1 << 64) - 1
_PCG_MULT = 6364136223846793005


class Pcg32:
    """Minimal PCG32 with explicit (seed, stream) construction."""

    def __init__(self, seed: int, stream: int = 0):
        self.state = 0
        self.inc = ((stream << 1) | 1) & _MASK64
        self.next_u32()
        self.state = (self.state + seed) & _MASK64
        self.next_u32()

    def next_u32(self) -> int:
        old = self.state
        self.state = (old * _PCG_MULT + self.inc) & _MASK64
        xorshifted = (((old >> 18) ^ old) >> 27) & 0xFFFFFFFF
        rot = old >> 59
        return ((xorshifted >> rot) | (xorshifted << ((-rot) & 31))) & 0xFFFFFFFF

    def uniform(self) -> float:
        """53-bit uniform double in [0, 1)."""
        hi = self.next_u32() >> 5  # 27 bits
        lo = self.next_u32() >> 6  # 26 bits
        return (hi * 67108864.0 + lo) * (1.0 / 9007199254740992.0)


@dataclass(frozen=True)
class SamplingConfig:
    seed: int = 42
    batch: int = 16
    top_k: int = 2048
    top_p: float = 0.995
    temperature: float = 1.0

    def __post_init__(self):
        if self.batch < 1:
            raise InvalidArgumentError("batch must be >= 1")
        if self.top_k < 1:
            raise InvalidArgumentError("top_k must be >= 1")
        if not 0.0 < self.top_p <= 1.0:
            raise InvalidArgumentError("top_p must lie in (0, 1]")
        if self.temperature <= 0.0:
            raise InvalidArgumentError("temperature must be > 0")


# Cumulative mass within this distance of top_p counts as having reached it,
# so prefixes whose exact mass equals top_p survive fp64 rounding.
NUCLEUS_EPS = 1e-12


def filter_logits(logits: np.ndarray, top_k: int, top_p: float, temperature: float) -> np.ndarray:
    """Temperature softmax, then top-k zeroing, then the smallest descending
    prefix with cumulative mass >= top_p, renormalized. Ties keep the lower id.
    """
    if temperature <= 0.0:
        raise InvalidArgumentError("temperature must be > 0")
    if top_k < 1:
        raise InvalidArgumentError("top_k must be >= 1")
    if not 0.0 < top_p <= 1.0:
        raise InvalidArgumentError("top_p must lie in (0, 1]")
    z = np.asarray(logits, dtype=np.float64) / temperature
    z = z - z.max()
    p = np.exp(z)
    p /= p.sum()
    k = min(top_k, p.size)
    order = np.argsort(-p, kind="stable")  # equal probs keep ascending id order
    kept = order[:k]
    cum = np.cumsum(p[kept])
    # smallest prefix with mass >= top_p (within NUCLEUS_EPS); all k if mass never reaches it
    cut = int(np.searchsorted(cum, top_p - NUCLEUS_EPS, side="left"))
    nucleus = kept[: min(cut, k - 1) + 1]
    out = np.zeros_like(p)
    out[nucleus] = p[nucleus]
    out /= out.sum()
    return out


def sample_token(probs: np.ndarray, rng: Pcg32) -> int:
    """Inverse-CDF draw; `rng` is advanced in place."""
    probs = np.asarray(probs, dtype=np.float64)
    if abs(probs.sum() - 1.0) > 1e-6:
        raise ContractViolationError(f"probabilities sum to {probs.sum():.9f}, not 1")
    u = rng.uniform()
    cum = np.cumsum(probs)
    idx = int(np.searchsorted(cum, u, side="right"))
    idx = min(idx, probs.size - 1)
    while idx > 0 and probs[idx] == 0.0:
        idx -= 1
    return idx


def generate(
    model: TransformerLm,
    codec: vq_codec.CodecModel,
    vocab: Vocabulary,
    caption: str,
    config: SamplingConfig,
) -> list[tuple[ImageBuffer, np.ndarray]]:
    """Sample `config.batch` codebook grids for `caption` and decode them.

    Batch element i draws from PCG32 stream (config.seed, i), so results are
    independent of batching or evaluation order.
    """
    cfg = model.cfg
    v_text, k = cfg.text_vocab_size, cfg.image_vocab_size
    if k != codec.cfg.codebook_size:
        raise InvalidArgumentError("lm image vocab does not match codec codebook size")
    top_k = min(config.top_k, k)
    text = encode_caption(vocab, caption, cfg.t_text)
    ids = np.tile(text, (config.batch, 1)).astype(np.int64)
    rngs = [Pcg32(config.seed, stream=i) for i in range(config.batch)]
    with torch.no_grad():
        for _ in range(cfg.t_image):
            logits = model(torch.from_numpy(ids))[:, -1, v_text:].double().numpy()
            nxt = np.empty((config.batch, 1), dtype=np.int64)
            for b in range(config.batch):
                probs = filter_logits(logits[b], top_k, config.top_p, config.temperature)
                nxt[b, 0] = sample_token(probs, rngs[b])
            ids = np.concatenate([ids, nxt + v_text], axis=1)
    g = codec.cfg.grid
    out = []
    for b in range(config.batch):
        grid = (ids[b, cfg.t_text :] - v_text).reshape(g, g)
        out.append((vq_codec.decode(codec, grid), grid))
    return out
