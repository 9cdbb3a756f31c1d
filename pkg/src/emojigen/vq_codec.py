"""Vector-quantized image codec: conv encoder over a discrete codebook,
Gumbel-Softmax relaxed quantization for training, and a decoder whose last
conv emits Haar subbands so the synthesis step renders at twice the conv
resolution.

Images are mapped to [-1, 1] floats internally; a zero decoder therefore
renders mid-gray.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from . import optim as opt
from .errors import InvalidArgumentError, ShapeError, TrainingDivergedError
from .imaging import ImageBuffer, resize_bicubic

_SQRT2 = math.sqrt(2.0)


@dataclass(frozen=True)
class CodecConfig:
    input_side: int = 32  # S; decoder renders 2S
    codebook_size: int = 256  # K
    embed_dim: int = 64  # D, also the encoder feature width
    seed: int = 0

    def __post_init__(self):
        if self.input_side % 4:
            raise InvalidArgumentError("input_side must be divisible by 4")

    @property
    def grid(self) -> int:
        return self.input_side // 4


class _ResBlock(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.c1 = nn.Conv2d(width, width, 3, padding=1)
        self.c2 = nn.Conv2d(width, width, 3, padding=1)

    def forward(self, x):
        h = torch.relu(self.c1(x))
        return torch.relu(x + self.c2(h))


class CodecModel(nn.Module):
    """Encoder (2 stride-2 convs + resblock), K-way projection, codebook,
    mirrored decoder ending in 12 subband channels (4 subbands x RGB)."""

    def __init__(self, cfg: CodecConfig):
        super().__init__()
        self.cfg = cfg
        torch.manual_seed(cfg.seed)
        d = cfg.embed_dim
        self.enc1 = nn.Conv2d(3, d, 3, stride=2, padding=1)
        self.enc2 = nn.Conv2d(d, d, 3, stride=2, padding=1)
        self.enc_res = _ResBlock(d)
        self.proj = nn.Conv2d(d, cfg.codebook_size, 1)
        self.codebook = nn.Parameter(torch.randn(cfg.codebook_size, d) * 0.05)
        self.dec_res = _ResBlock(d)
        self.dec1 = nn.Conv2d(d, d, 3, padding=1)
        self.dec2 = nn.Conv2d(d, d // 2, 3, padding=1)
        self.head = nn.Conv2d(d // 2, 12, 3, padding=1)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        """Pre-quantization encoder activations, (B, D, G, G)."""
        h = torch.relu(self.enc1(x))
        h = torch.relu(self.enc2(h))
        return self.enc_res(h)

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        return self.proj(self.features(x))

    def decode_latents(self, zq: torch.Tensor) -> torch.Tensor:
        """Codebook mixtures (B, D, G, G) -> pixels (B, 3, 2S, 2S) in [-1, 1] space."""
        h = self.dec_res(zq)
        h = torch.relu(self.dec1(nn.functional.interpolate(h, scale_factor=2, mode="nearest")))
        h = torch.relu(self.dec2(nn.functional.interpolate(h, scale_factor=2, mode="nearest")))
        return idwt2(self.head(h))


def idwt2(subbands: torch.Tensor) -> torch.Tensor:
    """Orthonormal inverse Haar step: (B, 12, H, W) -> (B, 3, 2H, 2W).

    Channel layout: [ll RGB, lh RGB, hl RGB, hh RGB]. Matches
    imaging.haar_idwt numerically.
    """
    b, c, h, w = subbands.shape
    if c != 12:
        raise ShapeError(f"expected 12 subband channels, got {c}")
    ll, lh, hl, hh = subbands[:, 0:3], subbands[:, 3:6], subbands[:, 6:9], subbands[:, 9:12]
    lo = torch.stack([(ll + lh) / _SQRT2, (ll - lh) / _SQRT2], dim=3).reshape(b, 3, 2 * h, w)
    hi = torch.stack([(hl + hh) / _SQRT2, (hl - hh) / _SQRT2], dim=3).reshape(b, 3, 2 * h, w)
    return torch.stack([(lo + hi) / _SQRT2, (lo - hi) / _SQRT2], dim=4).reshape(b, 3, 2 * h, 2 * w)


def to_float(img: ImageBuffer) -> np.ndarray:
    """uint8 (H, W, 3) -> fp32 (3, H, W) in [-1, 1]."""
    return (img.data.astype(np.float32) / 127.5 - 1.0).transpose(2, 0, 1)


def to_buffer(x: np.ndarray) -> ImageBuffer:
    """fp (3, H, W) in [-1, 1] -> clipped uint8 buffer."""
    arr = np.clip(np.rint((np.asarray(x, dtype=np.float64) + 1.0) * 127.5), 0, 255)
    return ImageBuffer(arr.transpose(1, 2, 0).astype(np.uint8))


def _check_input(model: CodecModel, img: ImageBuffer) -> torch.Tensor:
    s = model.cfg.input_side
    if img.channels != 3 or img.width != s or img.height != s:
        raise ShapeError(f"codec expects RGB {s}x{s}, got {img.channels}ch {img.width}x{img.height}")
    dtype = next(model.parameters()).dtype
    return torch.from_numpy(to_float(img)).to(dtype).unsqueeze(0)


def encode(model: CodecModel, img: ImageBuffer) -> np.ndarray:
    """Per-cell unnormalized codebook scores, (G, G, K)."""
    x = _check_input(model, img)
    with torch.no_grad():
        logits = model.logits(x)[0]
    return logits.permute(1, 2, 0).double().numpy()


def encode_features(model: CodecModel, img: ImageBuffer) -> np.ndarray:
    """Pre-quantization encoder activations, (G, G, D)."""
    x = _check_input(model, img)
    with torch.no_grad():
        feats = model.features(x)[0]
    return feats.permute(1, 2, 0).double().numpy()


def encode_indices(model: CodecModel, img: ImageBuffer) -> np.ndarray:
    """Hard assignment: argmax of the codebook scores, (G, G) int64."""
    return np.argmax(encode(model, img), axis=-1).astype(np.int64)


def gumbel_softmax_sample(logits: np.ndarray, temperature: float, seed: int, hard: bool = False):
    """Relaxed one-hot sample softmax((logits + Gumbel)/temperature).

    `logits` may carry leading batch dims; the last axis is the category
    axis. The hard variant returns the argmax of the same perturbed vector.
    """
    if temperature <= 0:
        raise InvalidArgumentError("temperature must be > 0")
    logits = np.asarray(logits, dtype=np.float64)
    rng = np.random.default_rng(seed)
    u = rng.random(logits.shape)
    u = np.clip(u, 1e-12, 1.0 - 1e-12)
    g = -np.log(-np.log(u))
    z = logits + g
    if hard:
        return np.argmax(z, axis=-1)
    z = z / temperature
    z = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def decode(model: CodecModel, grid: np.ndarray) -> ImageBuffer:
    """Render a (G, G) index grid to a (2S, 2S) RGB buffer."""
    g, k = model.cfg.grid, model.cfg.codebook_size
    grid = np.asarray(grid)
    if grid.shape != (g, g):
        raise ShapeError(f"expected grid {g}x{g}, got {grid.shape}")
    if grid.min() < 0 or grid.max() >= k:
        raise InvalidArgumentError(f"codebook index outside [0, {k})")
    idx = torch.from_numpy(grid.astype(np.int64))
    with torch.no_grad():
        zq = model.codebook[idx].permute(2, 0, 1).unsqueeze(0)  # (1, D, G, G)
        out = model.decode_latents(zq)[0]
    return to_buffer(out.double().numpy())


def relaxed_reconstruction(model: CodecModel, x: torch.Tensor, tau: float, noise: torch.Tensor) -> torch.Tensor:
    """Soft-quantized reconstruction used by training and by gradient checks.

    `noise` is uniform(0,1) of shape (B, K, G, G); passing it explicitly
    keeps the loss a deterministic function of the parameters.
    """
    logits = model.logits(x)
    g = -torch.log(-torch.log(noise.clamp(1e-12, 1.0 - 1e-12)))
    y = torch.softmax((logits + g) / tau, dim=1)
    zq = torch.einsum("bkhw,kd->bdhw", y, model.codebook)
    return model.decode_latents(zq)


def hard_reconstruction(model: CodecModel, x: torch.Tensor) -> torch.Tensor:
    """Deterministic argmax-path reconstruction (inference path)."""
    logits = model.logits(x)
    idx = logits.argmax(dim=1)  # (B, G, G)
    zq = model.codebook[idx].permute(0, 3, 1, 2)
    return model.decode_latents(zq)


@dataclass
class CodecTrainConfig:
    epochs: int = 30
    batch_size: int = 16
    seed: int = 0
    start_lr: float = 2e-4
    max_lr: float = 4e-3
    final_lr: float = 1e-4
    warmup_frac: float = 0.1
    clip_norm: float = 1.0
    temp_start: float = 1.0
    temp_end: float = 1.0 / 16.0
    betas: tuple[float, float] = (0.9, 0.999)


def eval_codec(model: CodecModel, x: torch.Tensor, target: torch.Tensor) -> tuple[float, float]:
    """Argmax-path (loss, PSNR dB) against targets in [-1, 1] space."""
    with torch.no_grad():
        rec = hard_reconstruction(model, x).clamp(-1.0, 1.0)
        mse = torch.mean((rec - target) ** 2).item()
    psnr = float("inf") if mse == 0 else 10.0 * math.log10(4.0 / mse)
    return mse, psnr


def prepare_codec_batches(images: list[ImageBuffer]) -> tuple[torch.Tensor, torch.Tensor]:
    """Stack training inputs and their 2x bicubic-upscaled reconstruction targets."""
    xs, ys = [], []
    for img in images:
        xs.append(to_float(img))
        up = resize_bicubic(img, img.width * 2, img.height * 2)
        ys.append(to_float(up))
    return torch.from_numpy(np.stack(xs)), torch.from_numpy(np.stack(ys))


def train_codec(model: CodecModel, images: list[ImageBuffer], cfg: CodecTrainConfig) -> list[dict]:
    """Minimize reconstruction MSE through the Gumbel-Softmax relaxation.

    Returns one curve row per epoch: argmax-path eval loss and PSNR, plus the
    mean relaxed train loss for epochs >= 1. Row 0 is the untrained model.
    """
    if len(images) < 2:
        raise InvalidArgumentError("need at least 2 training images")
    x_all, y_all = prepare_codec_batches(images)
    n = x_all.shape[0]
    nbatches = -(-n // cfg.batch_size)
    total_steps = max(cfg.epochs * nbatches, 2)
    schedule = opt.OneCycleSchedule(cfg.start_lr, cfg.max_lr, cfg.final_lr, cfg.warmup_frac, total_steps)
    optimizer = opt.Adam8(opt.AdamHyper(cfg.betas[0], cfg.betas[1]))
    gen = torch.Generator().manual_seed(cfg.seed)
    shuffle_rng = np.random.default_rng(cfg.seed)
    k, g = model.cfg.codebook_size, model.cfg.grid

    loss0, psnr0 = eval_codec(model, x_all, y_all)
    curve = [{"epoch": 0, "eval_loss": loss0, "psnr": psnr0, "train_loss": None}]
    params = {name: p for name, p in model.named_parameters()}
    step = 0
    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(n)
        epoch_losses = []
        for bi in range(nbatches):
            idx = order[bi * cfg.batch_size : (bi + 1) * cfg.batch_size]
            xb, yb = x_all[idx], y_all[idx]
            frac = step / max(total_steps - 1, 1)
            tau = cfg.temp_start * (cfg.temp_end / cfg.temp_start) ** frac
            noise = torch.rand((len(idx), k, g, g), generator=gen)
            model.zero_grad(set_to_none=False)
            rec = relaxed_reconstruction(model, xb, tau, noise)
            loss = torch.mean((rec - yb) ** 2)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(f"non-finite codec loss at epoch {epoch} batch {bi}")
            loss.backward()
            grads = {name: p.grad.numpy() for name, p in params.items()}
            opt.clip_global_norm(grads, cfg.clip_norm)
            lr = opt.one_cycle_lr(schedule, min(step, total_steps - 1))
            for name, p in params.items():
                optimizer.step_tensor(name, p.data.numpy(), grads[name], lr)
            epoch_losses.append(loss.item())
            step += 1
        ev_loss, ev_psnr = eval_codec(model, x_all, y_all)
        curve.append({
            "epoch": epoch + 1,
            "eval_loss": ev_loss,
            "psnr": ev_psnr,
            "train_loss": float(np.mean(epoch_losses)),
        })
    return curve


def codebook_usage(model: CodecModel, images: list[ImageBuffer]) -> float:
    """Fraction of codebook entries hit by argmax encodings of `images`."""
    used = set()
    for img in images:
        used.update(np.unique(encode_indices(model, img)).tolist())
    return len(used) / model.cfg.codebook_size


def save_codec(path, model: CodecModel, extra_meta: dict | None = None) -> None:
    from .checkpoint import save_checkpoint

    tensors = {name: p.detach().numpy().astype(np.float32) for name, p in model.state_dict().items()}
    meta = {"kind": "vq_codec", "config": {
        "input_side": model.cfg.input_side,
        "codebook_size": model.cfg.codebook_size,
        "embed_dim": model.cfg.embed_dim,
        "seed": model.cfg.seed,
    }}
    meta.update(extra_meta or {})
    save_checkpoint(path, tensors, meta)


def load_codec(path) -> CodecModel:
    from .checkpoint import load_checkpoint

    tensors, meta = load_checkpoint(path)
    cfg = CodecConfig(**meta["config"])
    model = CodecModel(cfg)
    state = {name: torch.from_numpy(arr) for name, arr in tensors.items()}
    model.load_state_dict(state)
    return model
