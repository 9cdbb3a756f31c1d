"""8-bit block-quantized Adam, one-cycle LR schedule, global-norm clipping.

Moment tensors are stored as one 8-bit code per element plus one fp32
absmax scale per block of `block_size` elements: signed codes for the
first moment, unsigned for the (non-negative) second moment. Parameters
stay in fp32 and moments are dequantized transiently for each step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ContractViolationError,
    InvalidArgumentError,
    TrainingDivergedError,
)

DEFAULT_BLOCK_SIZE = 256


def quantize_block(values: np.ndarray, signed: bool) -> tuple[np.ndarray, np.float32]:
    """Absmax-quantize a 1-D block to 8-bit codes plus one fp32 scale."""
    values = np.asarray(values, dtype=np.float32)
    if values.size < 1:
        raise InvalidArgumentError("block must hold at least one element")
    scale = np.float32(np.max(np.abs(values)))
    if not signed and np.any(values < 0):
        raise ContractViolationError("unsigned quantizer got negative input")
    if scale == 0:
        codes = np.zeros(values.shape, dtype=np.int8 if signed else np.uint8)
        return codes, np.float32(0)
    if signed:
        codes = np.rint(values / scale * 127.0).astype(np.int8)
    else:
        codes = np.rint(values / scale * 255.0).astype(np.uint8)
    return codes, scale


def dequantize_block(codes: np.ndarray, scale: np.float32, signed: bool) -> np.ndarray:
    denom = 127.0 if signed else 255.0
    return codes.astype(np.float32) * (np.float32(scale) / np.float32(denom))


def _quantize_flat(values: np.ndarray, signed: bool, block_size: int) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized per-block absmax quantization of a flat fp32 array."""
    n = values.size
    nblocks = -(-n // block_size)
    padded = np.zeros(nblocks * block_size, dtype=np.float32)
    padded[:n] = values
    blocks = padded.reshape(nblocks, block_size)
    scales = np.max(np.abs(blocks), axis=1)
    safe = np.where(scales == 0, np.float32(1), scales)
    if signed:
        codes = np.rint(blocks / safe[:, None] * 127.0).astype(np.int8)
    else:
        if np.any(values < 0):
            raise ContractViolationError("unsigned quantizer got negative input")
        codes = np.rint(blocks / safe[:, None] * 255.0).astype(np.uint8)
    codes[scales == 0] = 0
    return codes.reshape(-1)[:n], scales.astype(np.float32)


def _dequantize_flat(codes: np.ndarray, scales: np.ndarray, signed: bool, block_size: int) -> np.ndarray:
    n = codes.size
    nblocks = scales.size
    denom = np.float32(127.0 if signed else 255.0)
    padded = np.zeros(nblocks * block_size, dtype=np.float32)
    padded[:n] = codes.astype(np.float32)
    out = padded.reshape(nblocks, block_size) * (scales[:, None] / denom)
    return out.reshape(-1)[:n]


@dataclass
class QuantizedMoment:
    """Block-quantized view of one moment tensor."""

    codes: np.ndarray  # int8 (signed) or uint8 (unsigned), flat, length N
    scales: np.ndarray  # fp32, one absmax per block
    signed: bool
    block_size: int = DEFAULT_BLOCK_SIZE

    @classmethod
    def zeros(cls, n: int, signed: bool, block_size: int = DEFAULT_BLOCK_SIZE) -> "QuantizedMoment":
        nblocks = -(-n // block_size)
        dtype = np.int8 if signed else np.uint8
        return cls(np.zeros(n, dtype=dtype), np.zeros(nblocks, dtype=np.float32), signed, block_size)

    @classmethod
    def from_values(cls, values: np.ndarray, signed: bool, block_size: int = DEFAULT_BLOCK_SIZE) -> "QuantizedMoment":
        codes, scales = _quantize_flat(np.asarray(values, dtype=np.float32).reshape(-1), signed, block_size)
        return cls(codes, scales, signed, block_size)

    def dequantize(self) -> np.ndarray:
        return _dequantize_flat(self.codes, self.scales, self.signed, self.block_size)

    def nbytes(self) -> int:
        return self.codes.nbytes + self.scales.nbytes


@dataclass(frozen=True)
class OneCycleSchedule:
    """Cosine warmup start_lr→max_lr over warmup_frac, cosine anneal max_lr→final_lr."""

    start_lr: float = 4e-7
    max_lr: float = 1e-5
    final_lr: float = 2e-8
    warmup_frac: float = 0.1
    total_steps: int = 2

    def __post_init__(self):
        if self.total_steps < 2:
            raise InvalidArgumentError("total_steps must be >= 2")
        if not 0.0 < self.warmup_frac < 1.0:
            raise InvalidArgumentError("warmup_frac must lie in (0, 1)")
        if self.start_lr > self.max_lr or self.final_lr > self.max_lr:
            raise InvalidArgumentError("start_lr and final_lr must not exceed max_lr")

    @property
    def warmup_steps(self) -> int:
        return math.ceil(self.warmup_frac * self.total_steps)


def one_cycle_lr(schedule: OneCycleSchedule, t: int) -> float:
    """Learning rate at integer step t in [0, total_steps)."""
    total = schedule.total_steps
    if not 0 <= t < total:
        raise InvalidArgumentError(f"step {t} outside [0, {total})")
    w = schedule.warmup_steps
    if t < w:
        frac = t / w
        return schedule.start_lr + (schedule.max_lr - schedule.start_lr) * (1.0 - math.cos(math.pi * frac)) / 2.0
    denom = total - 1 - w
    frac = (t - w) / denom if denom > 0 else 1.0
    return schedule.final_lr + (schedule.max_lr - schedule.final_lr) * (1.0 + math.cos(math.pi * frac)) / 2.0


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float = 1.0) -> float:
    """Scale all gradients in place so the global L2 norm is at most max_norm.

    Returns the pre-clip norm.
    """
    if max_norm <= 0:
        raise InvalidArgumentError("max_norm must be positive")
    sq = 0.0
    for g in grads.values():
        sq += float(np.sum(np.asarray(g, dtype=np.float64) ** 2))
    norm = math.sqrt(sq)
    if norm > max_norm:
        factor = max_norm / norm
        for g in grads.values():
            g *= factor
    return norm


@dataclass
class AdamHyper:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class _TensorState:
    m: QuantizedMoment
    v: QuantizedMoment
    t: int = 0


@dataclass
class Adam8:
    """Adam with 8-bit block-quantized moment state and fp32 master weights."""

    hyper: AdamHyper = field(default_factory=AdamHyper)
    block_size: int = DEFAULT_BLOCK_SIZE
    state: dict[str, _TensorState] = field(default_factory=dict)

    def _state_for(self, name: str, n: int) -> _TensorState:
        st = self.state.get(name)
        if st is None:
            st = _TensorState(
                m=QuantizedMoment.zeros(n, signed=True, block_size=self.block_size),
                v=QuantizedMoment.zeros(n, signed=False, block_size=self.block_size),
            )
            self.state[name] = st
        return st

    def step_tensor(self, name: str, param: np.ndarray, grad: np.ndarray, lr: float) -> None:
        """One Adam step for one named fp32 tensor; updates `param` in place."""
        flat_g = np.asarray(grad, dtype=np.float32).reshape(-1)
        if not np.all(np.isfinite(flat_g)):
            raise TrainingDivergedError(f"non-finite gradient in tensor {name!r}")
        st = self._state_for(name, flat_g.size)
        st.t += 1
        b1, b2, eps = self.hyper.beta1, self.hyper.beta2, self.hyper.eps
        m = st.m.dequantize()
        v = st.v.dequantize()
        m = b1 * m + (1.0 - b1) * flat_g
        v = b2 * v + (1.0 - b2) * flat_g * flat_g
        m_hat = m / (1.0 - b1**st.t)
        v_hat = v / (1.0 - b2**st.t)
        update = lr * m_hat / (np.sqrt(v_hat) + eps)
        param.reshape(-1)[:] = param.reshape(-1) - update.astype(np.float32)
        st.m = QuantizedMoment.from_values(m, signed=True, block_size=self.block_size)
        st.v = QuantizedMoment.from_values(v, signed=False, block_size=self.block_size)

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> None:
        for name, param in params.items():
            self.step_tensor(name, param, grads[name], lr)

    def state_tensors(self) -> tuple[dict[str, np.ndarray], dict]:
        """Flatten optimizer state into named arrays for the checkpoint container."""
        tensors: dict[str, np.ndarray] = {}
        steps: dict[str, int] = {}
        for name, st in self.state.items():
            tensors[f"{name}.m_codes"] = st.m.codes
            tensors[f"{name}.m_scales"] = st.m.scales
            tensors[f"{name}.v_codes"] = st.v.codes
            tensors[f"{name}.v_scales"] = st.v.scales
            steps[name] = st.t
        return tensors, {"kind": "adam8_state", "block_size": self.block_size, "steps": steps}

    def load_state_tensors(self, tensors: dict[str, np.ndarray], meta: dict) -> None:
        self.block_size = int(meta["block_size"])
        self.state = {}
        for name, t in meta["steps"].items():
            self.state[name] = _TensorState(
                m=QuantizedMoment(tensors[f"{name}.m_codes"], tensors[f"{name}.m_scales"].astype(np.float32), True, self.block_size),
                v=QuantizedMoment(tensors[f"{name}.v_codes"], tensors[f"{name}.v_scales"].astype(np.float32), False, self.block_size),
                t=int(t),
            )
