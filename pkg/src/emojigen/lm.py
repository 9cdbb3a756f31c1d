"""Decoder-only transformer over text+image token sequences.

Text ids occupy [0, text_vocab_size); image ids are offset to
[text_vocab_size, text_vocab_size + image_vocab_size). Fine-tuning freezes
the attention and feedforward tensors and weights the cross-entropy of
image-token targets.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from . import optim as opt
from .dataset import TokenSequence
from .errors import (
    ConfigurationError,
    InvalidArgumentError,
    InvalidTokenError,
    TrainingDivergedError,
    UndefinedLossError,
)


@dataclass(frozen=True)
class LmConfig:
    text_vocab_size: int
    image_vocab_size: int = 256
    t_text: int = 32
    t_image: int = 64
    n_layers: int = 4
    n_heads: int = 4
    width: int = 128
    seed: int = 0

    @property
    def total_vocab(self) -> int:
        return self.text_vocab_size + self.image_vocab_size

    @property
    def total_len(self) -> int:
        return self.t_text + self.t_image


class _Block(nn.Module):
    def __init__(self, width: int, heads: int):
        super().__init__()
        if width % heads:
            raise InvalidArgumentError("width must be divisible by heads")
        self.heads = heads
        self.ln1 = nn.LayerNorm(width)
        self.q = nn.Linear(width, width)
        self.k = nn.Linear(width, width)
        self.v = nn.Linear(width, width)
        self.o = nn.Linear(width, width)
        self.ln2 = nn.LayerNorm(width)
        self.fc1 = nn.Linear(width, 4 * width)
        self.fc2 = nn.Linear(4 * width, width)

    def forward(self, x, mask):
        b, t, w = x.shape
        hd = w // self.heads
        h = self.ln1(x)
        q = self.q(h).view(b, t, self.heads, hd).transpose(1, 2)
        k = self.k(h).view(b, t, self.heads, hd).transpose(1, 2)
        v = self.v(h).view(b, t, self.heads, hd).transpose(1, 2)
        att = (q @ k.transpose(-2, -1)) / (hd**0.5) + mask[:t, :t]
        att = torch.softmax(att, dim=-1)
        out = (att @ v).transpose(1, 2).reshape(b, t, w)
        x = x + self.o(out)
        h = self.ln2(x)
        x = x + self.fc2(torch.nn.functional.gelu(self.fc1(h)))
        return x


class TransformerLm(nn.Module):
    def __init__(self, cfg: LmConfig):
        super().__init__()
        self.cfg = cfg
        torch.manual_seed(cfg.seed)
        self.tok_emb = nn.Embedding(cfg.total_vocab, cfg.width)
        self.pos_emb = nn.Parameter(torch.randn(cfg.total_len, cfg.width) * 0.02)
        self.blocks = nn.ModuleList(_Block(cfg.width, cfg.n_heads) for _ in range(cfg.n_layers))
        self.ln_f = nn.LayerNorm(cfg.width)
        self.head = nn.Linear(cfg.width, cfg.total_vocab)
        mask = torch.full((cfg.total_len, cfg.total_len), float("-inf"))
        self.register_buffer("causal_mask", torch.triu(mask, diagonal=1))

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        """ids (B, T') with T' <= total_len -> next-token logits (B, T', V)."""
        if ids.dim() == 1:
            ids = ids.unsqueeze(0)
        t = ids.shape[1]
        if t > self.cfg.total_len:
            raise InvalidArgumentError(f"sequence length {t} exceeds {self.cfg.total_len}")
        x = self.tok_emb(ids) + self.pos_emb[:t]
        for block in self.blocks:
            x = block(x, self.causal_mask)
        return self.head(self.ln_f(x))


def forward(model: TransformerLm, seq: TokenSequence | np.ndarray) -> np.ndarray:
    """Next-token logits at every position of one sequence, (T, V) fp as model."""
    ids = seq.ids if isinstance(seq, TokenSequence) else np.asarray(seq)
    if ids.min() < 0 or ids.max() >= model.cfg.total_vocab:
        raise InvalidTokenError(f"token id outside [0, {model.cfg.total_vocab})")
    with torch.no_grad():
        logits = model(torch.from_numpy(ids.astype(np.int64)))[0]
    return logits.numpy()


@dataclass(frozen=True)
class LossWeights:
    w_text: float = 1.0
    w_image: float = 1000.0

    def __post_init__(self):
        if self.w_text < 0 or self.w_image < 0 or (self.w_text == 0 and self.w_image == 0):
            raise InvalidArgumentError("weights must be >= 0 and not both zero")


def weighted_ce_loss_torch(
    logits: torch.Tensor,
    ids: torch.Tensor,
    is_image: torch.Tensor,
    is_pad: torch.Tensor,
    weights: LossWeights,
) -> torch.Tensor:
    """Modality-weighted next-token CE, normalized by the total weight.

    Position t is scored against target ids[t+1]; PAD targets contribute to
    neither sum. Accepts (T, V)/(T,) or batched (B, T, V)/(B, T).
    """
    if logits.dim() == 2:
        logits, ids = logits.unsqueeze(0), ids.unsqueeze(0)
        is_image, is_pad = is_image.unsqueeze(0), is_pad.unsqueeze(0)
    targets = ids[:, 1:]
    lsm = torch.log_softmax(logits[:, :-1].double(), dim=-1)
    ce = -lsm.gather(-1, targets.unsqueeze(-1)).squeeze(-1)  # (B, T-1)
    w = torch.where(is_image[:, 1:], float(weights.w_image), float(weights.w_text))
    w = torch.where(is_pad[:, 1:], 0.0, w)
    total = w.sum()
    if total.item() == 0:
        raise UndefinedLossError("all target positions are PAD")
    return (w * ce).sum() / total


def weighted_ce_loss(logits: np.ndarray, seq: TokenSequence, weights: LossWeights) -> float:
    """Numpy-facing wrapper over the torch loss."""
    return float(
        weighted_ce_loss_torch(
            torch.from_numpy(np.asarray(logits, dtype=np.float64)),
            torch.from_numpy(seq.ids.astype(np.int64)),
            torch.from_numpy(seq.is_image),
            torch.from_numpy(seq.is_pad),
            weights,
        ).item()
    )


@dataclass
class FreezeMask:
    """Per-named-tensor frozen flag; must cover the model exactly."""

    frozen: dict[str, bool]

    def check_against(self, model: TransformerLm) -> None:
        names = {name for name, _ in model.named_parameters()}
        if names != set(self.frozen):
            missing = names ^ set(self.frozen)
            raise ConfigurationError(f"freeze mask does not match parameters: {sorted(missing)}")

    def frozen_names(self) -> list[str]:
        return sorted(name for name, flag in self.frozen.items() if flag)


def default_finetune_mask(model: TransformerLm) -> FreezeMask:
    """Freeze self-attention projections and feedforward weights; embeddings,
    layer norms and the output head stay trainable."""
    frozen = {}
    for name, _ in model.named_parameters():
        is_attn = any(f".{p}." in name for p in ("q", "k", "v", "o"))
        is_ffn = ".fc1." in name or ".fc2." in name
        frozen[name] = is_attn or is_ffn
    return FreezeMask(frozen)


def no_freeze_mask(model: TransformerLm) -> FreezeMask:
    return FreezeMask({name: False for name, _ in model.named_parameters()})


def all_freeze_mask(model: TransformerLm) -> FreezeMask:
    return FreezeMask({name: True for name, _ in model.named_parameters()})


def apply_freeze(grads: dict[str, np.ndarray], mask: FreezeMask) -> dict[str, np.ndarray]:
    """Zero the gradients of frozen tensors in place."""
    if set(grads) != set(mask.frozen):
        raise ConfigurationError("freeze mask does not cover the gradient set")
    for name, g in grads.items():
        if mask.frozen[name]:
            g[...] = 0.0
    return grads


@dataclass
class LmTrainConfig:
    epochs: int = 40
    batch_size: int = 2
    seed: int = 0
    start_lr: float = 4e-7
    max_lr: float = 1e-5
    final_lr: float = 2e-8
    warmup_frac: float = 0.1
    clip_norm: float = 1.0
    weights: LossWeights = LossWeights()
    betas: tuple[float, float] = (0.9, 0.999)


def train_lm(
    model: TransformerLm,
    mask: FreezeMask,
    sequences: list[TokenSequence],
    cfg: LmTrainConfig,
) -> list[dict]:
    """Forward → weighted CE → freeze → clip → 8-bit Adam → one-cycle advance.

    Returns one metrics row per optimizer step: {"step", "loss", "lr"}.
    """
    mask.check_against(model)
    if not sequences:
        raise InvalidArgumentError("no training sequences")
    ids = torch.from_numpy(np.stack([s.ids for s in sequences]).astype(np.int64))
    is_image = torch.from_numpy(np.stack([s.is_image for s in sequences]))
    is_pad = torch.from_numpy(np.stack([s.is_pad for s in sequences]))
    n = ids.shape[0]
    nbatches = -(-n // cfg.batch_size)
    total_steps = max(cfg.epochs * nbatches, 2)
    schedule = opt.OneCycleSchedule(cfg.start_lr, cfg.max_lr, cfg.final_lr, cfg.warmup_frac, total_steps)
    optimizer = opt.Adam8(opt.AdamHyper(cfg.betas[0], cfg.betas[1]))
    rng = np.random.default_rng(cfg.seed)
    params = {name: p for name, p in model.named_parameters()}
    metrics = []
    step = 0
    for _epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for bi in range(nbatches):
            sel = order[bi * cfg.batch_size : (bi + 1) * cfg.batch_size]
            model.zero_grad(set_to_none=False)
            logits = model(ids[sel])
            loss = weighted_ce_loss_torch(logits, ids[sel], is_image[sel], is_pad[sel], cfg.weights)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(f"non-finite lm loss at step {step}")
            loss.backward()
            grads = {name: p.grad.numpy() for name, p in params.items()}
            apply_freeze(grads, mask)
            opt.clip_global_norm(grads, cfg.clip_norm)
            lr = opt.one_cycle_lr(schedule, min(step, total_steps - 1))
            for name, p in params.items():
                optimizer.step_tensor(name, p.data.numpy(), grads[name], lr)
            metrics.append({"step": step, "loss": float(loss.item()), "lr": lr})
            step += 1
    return metrics


def save_lm(path, model: TransformerLm, extra_meta: dict | None = None) -> None:
    from .checkpoint import save_checkpoint

    tensors = {name: p.detach().numpy().astype(np.float32) for name, p in model.state_dict().items()}
    cfg = model.cfg
    meta = {"kind": "lm", "config": {
        "text_vocab_size": cfg.text_vocab_size,
        "image_vocab_size": cfg.image_vocab_size,
        "t_text": cfg.t_text,
        "t_image": cfg.t_image,
        "n_layers": cfg.n_layers,
        "n_heads": cfg.n_heads,
        "width": cfg.width,
        "seed": cfg.seed,
    }}
    meta.update(extra_meta or {})
    save_checkpoint(path, tensors, meta)


def load_lm(path) -> TransformerLm:
    from .checkpoint import load_checkpoint

    tensors, meta = load_checkpoint(path)
    model = TransformerLm(LmConfig(**meta["config"]))
    model.load_state_dict({name: torch.from_numpy(arr) for name, arr in tensors.items()})
    return model
