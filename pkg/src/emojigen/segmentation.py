"""RGB→RGBA sticker conversion: a small U-shaped binary segmentation net,
a per-image confidence score, a pseudo-labeling loop, and a classical
border-connected flood-fill fallback.

Confidence of a mask is mean(max(p, 1-p)) over pixels: 0.5 for a maximally
uncertain model, 1.0 for a saturated one. Images route through the learned
model only when confidence clears the threshold (default 0.99).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from scipy import ndimage
from torch import nn

from . import optim as opt
from .errors import InvalidArgumentError, TrainingDivergedError
from .imaging import ImageBuffer, resize_bicubic

FALLBACK_REGIME = "fallback"
MODEL_REGIME = "model"


@dataclass
class AlphaMask:
    """H×W opacity map in [0, 1] (0 transparent) plus a scalar confidence."""

    values: np.ndarray
    confidence: float

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float32)
        if vals.ndim != 2:
            raise InvalidArgumentError(f"mask must be 2-D, got shape {vals.shape}")
        if vals.min() < 0.0 or vals.max() > 1.0:
            raise InvalidArgumentError("mask values must lie in [0, 1]")
        if not 0.0 <= self.confidence <= 1.0:
            raise InvalidArgumentError("confidence must lie in [0, 1]")
        self.values = vals


def mask_confidence(probs: np.ndarray) -> float:
    return float(np.mean(np.maximum(probs, 1.0 - probs)))


@dataclass(frozen=True)
class SegConfig:
    side: int = 64
    widths: tuple[int, int, int] = (16, 32, 64)
    seed: int = 0


class SegModel(nn.Module):
    """3-down/3-up conv net with skip connections and a sigmoid head."""

    def __init__(self, cfg: SegConfig):
        super().__init__()
        self.cfg = cfg
        torch.manual_seed(cfg.seed)
        w1, w2, w3 = cfg.widths
        self.d1 = nn.Conv2d(3, w1, 3, stride=2, padding=1)
        self.d2 = nn.Conv2d(w1, w2, 3, stride=2, padding=1)
        self.d3 = nn.Conv2d(w2, w3, 3, stride=2, padding=1)
        self.mid = nn.Conv2d(w3, w3, 3, padding=1)
        self.u3 = nn.Conv2d(w3 + w2, w2, 3, padding=1)
        self.u2 = nn.Conv2d(w2 + w1, w1, 3, padding=1)
        self.u1 = nn.Conv2d(w1 + 3, w1, 3, padding=1)
        self.head = nn.Conv2d(w1, 1, 3, padding=1)

    def forward_logits(self, x: torch.Tensor) -> torch.Tensor:
        up = lambda t: nn.functional.interpolate(t, scale_factor=2, mode="nearest")
        e1 = torch.relu(self.d1(x))
        e2 = torch.relu(self.d2(e1))
        e3 = torch.relu(self.d3(e2))
        m = torch.relu(self.mid(e3))
        h = torch.relu(self.u3(torch.cat([up(m), e2], dim=1)))
        h = torch.relu(self.u2(torch.cat([up(h), e1], dim=1)))
        h = torch.relu(self.u1(torch.cat([up(h), x], dim=1)))
        return self.head(h)[:, 0]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.forward_logits(x))


def _model_input(img: ImageBuffer, side: int) -> np.ndarray:
    if img.channels != 3:
        raise InvalidArgumentError("segmentation expects RGB input")
    if img.width != side or img.height != side:
        img = resize_bicubic(img, side, side)
    return (img.data.astype(np.float32) / 127.5 - 1.0).transpose(2, 0, 1)


def predict_mask(model: SegModel, img: ImageBuffer) -> AlphaMask:
    """Per-pixel opacity probabilities at the model's input side."""
    x = torch.from_numpy(_model_input(img, model.cfg.side)).unsqueeze(0)
    with torch.no_grad():
        probs = model(x)[0].numpy()
    return AlphaMask(probs, mask_confidence(probs))


_CONN4 = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


def contour_fallback(img: ImageBuffer, white_tol: int = 16) -> AlphaMask:
    """Classical rule: flood-fill near-white from the border; reached pixels
    become transparent, everything else (including enclosed white holes)
    stays opaque. Deterministic, confidence pinned to 1.
    """
    if img.channels != 3:
        raise InvalidArgumentError("contour fallback expects RGB input")
    near_white = np.all(img.data >= 255 - white_tol, axis=2)
    labels, _count = ndimage.label(near_white, structure=_CONN4)
    border = np.concatenate([labels[0], labels[-1], labels[:, 0], labels[:, -1]])
    border_ids = np.unique(border[border > 0])
    transparent = np.isin(labels, border_ids)
    values = np.where(transparent, 0.0, 1.0).astype(np.float32)
    return AlphaMask(values, 1.0)


def segment(model: SegModel, img: ImageBuffer, threshold: float = 0.99) -> tuple[AlphaMask, str]:
    """Learned mask when its confidence clears `threshold`, else the fallback."""
    mask = predict_mask(model, img)
    if mask.confidence >= threshold:
        return mask, MODEL_REGIME
    return contour_fallback(img), FALLBACK_REGIME


def compose_rgba(img: ImageBuffer, mask: AlphaMask, hard: bool = True) -> ImageBuffer:
    """Attach an alpha plane; hard thresholds at 0.5, soft keeps graded alpha."""
    if mask.values.shape != (img.height, img.width):
        raise InvalidArgumentError(
            f"mask shape {mask.values.shape} does not match image {img.height}x{img.width}")
    if img.channels != 3:
        raise InvalidArgumentError("compose_rgba expects RGB input")
    if hard:
        alpha = np.where(mask.values >= 0.5, 255, 0).astype(np.uint8)
    else:
        alpha = np.clip(np.rint(mask.values * 255.0), 0, 255).astype(np.uint8)
    return ImageBuffer(np.dstack([img.data, alpha]))


@dataclass
class SegTrainConfig:
    epochs: int = 20
    batch_size: int = 8
    seed: int = 0
    start_lr: float = 1e-3
    max_lr: float = 8e-3
    final_lr: float = 5e-4
    warmup_frac: float = 0.1
    clip_norm: float = 1.0


def train_seg(model: SegModel, pairs: list[tuple[ImageBuffer, np.ndarray]], cfg: SegTrainConfig) -> list[dict]:
    """BCE training on (image, binary mask) pairs with the shared optimizer
    stack (8-bit Adam, one-cycle, global-norm clip). Returns per-step metrics."""
    if not pairs:
        raise InvalidArgumentError("empty training set")
    side = model.cfg.side
    xs = np.stack([_model_input(img, side) for img, _ in pairs])
    ys = []
    for img, mask in pairs:
        mask = np.asarray(mask, dtype=np.float32)
        if mask.shape != (side, side):
            raise InvalidArgumentError(f"mask shape {mask.shape}, expected {(side, side)}")
        ys.append((mask >= 0.5).astype(np.float32))
    x_all = torch.from_numpy(xs)
    y_all = torch.from_numpy(np.stack(ys))
    n = len(pairs)
    nbatches = -(-n // cfg.batch_size)
    total_steps = max(cfg.epochs * nbatches, 2)
    schedule = opt.OneCycleSchedule(cfg.start_lr, cfg.max_lr, cfg.final_lr, cfg.warmup_frac, total_steps)
    optimizer = opt.Adam8()
    rng = np.random.default_rng(cfg.seed)
    params = {name: p for name, p in model.named_parameters()}
    metrics = []
    step = 0
    for _epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for bi in range(nbatches):
            sel = order[bi * cfg.batch_size : (bi + 1) * cfg.batch_size]
            model.zero_grad(set_to_none=False)
            logits = model.forward_logits(x_all[sel])
            loss = nn.functional.binary_cross_entropy_with_logits(logits, y_all[sel])
            if not torch.isfinite(loss):
                raise TrainingDivergedError(f"non-finite segmentation loss at step {step}")
            loss.backward()
            grads = {name: p.grad.numpy() for name, p in params.items()}
            opt.clip_global_norm(grads, cfg.clip_norm)
            lr = opt.one_cycle_lr(schedule, min(step, total_steps - 1))
            for name, p in params.items():
                optimizer.step_tensor(name, p.data.numpy(), grads[name], lr)
            metrics.append({"step": step, "loss": float(loss.item()), "lr": lr})
            step += 1
    return metrics


@dataclass
class PseudoLabelConfig:
    threshold: float = 0.99
    max_rounds: int = 10
    plateau_frac: float = 0.01
    train: SegTrainConfig = field(default_factory=SegTrainConfig)


@dataclass
class PseudoLabelState:
    rounds: list[dict] = field(default_factory=list)

    @property
    def train_set_sizes(self) -> list[int]:
        return [row["total"] for row in self.rounds]


def pseudo_label_loop(
    model: SegModel,
    initial_labeled: list[tuple[ImageBuffer, np.ndarray]],
    unlabeled_pool: list[ImageBuffer],
    cfg: PseudoLabelConfig,
) -> tuple[SegModel, PseudoLabelState]:
    """Self-training: absorb pool items whose predicted mask clears the
    confidence threshold (binarized at 0.5) until additions plateau.
    """
    if not initial_labeled:
        raise InvalidArgumentError("initial labeled set must be non-empty")
    train_set = list(initial_labeled)
    pool = list(unlabeled_pool)
    state = PseudoLabelState()
    for rnd in range(1, cfg.max_rounds + 1):
        train_cfg = SegTrainConfig(**{**cfg.train.__dict__, "seed": cfg.train.seed + rnd})
        train_seg(model, train_set, train_cfg)
        added = 0
        confidences = []
        remaining = []
        for img in pool:
            mask = predict_mask(model, img)
            confidences.append(mask.confidence)
            if mask.confidence >= cfg.threshold:
                train_set.append((img, (mask.values >= 0.5).astype(np.float32)))
                added += 1
            else:
                remaining.append(img)
        pool = remaining
        state.rounds.append({
            "round": rnd,
            "added": added,
            "total": len(train_set),
            "mean_confidence": float(np.mean(confidences)) if confidences else 1.0,
        })
        if added < cfg.plateau_frac * len(train_set):
            break
    return model, state


def pixel_accuracy(pred: np.ndarray, truth: np.ndarray) -> float:
    pred_b = np.asarray(pred) >= 0.5
    truth_b = np.asarray(truth) >= 0.5
    return float(np.mean(pred_b == truth_b))


def save_seg(path, model: SegModel, extra_meta: dict | None = None) -> None:
    from .checkpoint import save_checkpoint

    tensors = {name: p.detach().numpy().astype(np.float32) for name, p in model.state_dict().items()}
    meta = {"kind": "segmentation", "config": {
        "side": model.cfg.side, "widths": list(model.cfg.widths), "seed": model.cfg.seed,
    }}
    meta.update(extra_meta or {})
    save_checkpoint(path, tensors, meta)


def load_seg(path) -> SegModel:
    from .checkpoint import load_checkpoint

    tensors, meta = load_checkpoint(path)
    cfg_dict = dict(meta["config"])
    cfg_dict["widths"] = tuple(cfg_dict["widths"])
    model = SegModel(SegConfig(**cfg_dict))
    model.load_state_dict({name: torch.from_numpy(arr) for name, arr in tensors.items()})
    return model
