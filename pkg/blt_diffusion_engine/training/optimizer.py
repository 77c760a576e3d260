import math
from dataclasses import dataclass, fields
from typing import Dict

import numpy as np

from core.errors import ConfigError, NumericalError
from core.tensor import Tensor


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_bytes: int = 4096
    window: int = 256
    peak_lr: float = 3e-3
    warmup: int = 100
    weight_decay: float = 0.1
    clip_norm: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.95
    adam_eps: float = 1e-8
    block_size: int = 8
    mask_loss_weight: float = 1.0
    seed: int = 0
    log_every: int = 50
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.warmup > self.steps:
            raise ConfigError(f"warmup {self.warmup} exceeds steps {self.steps}")
        if self.clip_norm <= 0:
            raise ConfigError(f"clip norm must be positive, got {self.clip_norm}")

    @property
    def examples_per_step(self) -> int:
        return max(1, self.batch_bytes // self.window)

    @classmethod
    def from_run_config(cls, run_config) -> "TrainConfig":
        return cls(**{f.name: run_config[f.name] for f in fields(cls)})


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to peak_lr, then cosine decay reaching 0 at cfg.steps."""
    if step < cfg.warmup:
        return cfg.peak_lr * step / cfg.warmup
    if cfg.steps == cfg.warmup:
        return cfg.peak_lr if step <= cfg.steps else 0.0
    progress = min(1.0, (step - cfg.warmup) / (cfg.steps - cfg.warmup))
    return cfg.peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def global_grad_norm(params: Dict[str, Tensor]) -> float:
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    return math.sqrt(total)


def clip_grad_norm(params: Dict[str, Tensor], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm; returns the pre-clip norm."""
    norm = global_grad_norm(params)
    if not math.isfinite(norm):
        raise NumericalError(f"gradient norm is {norm}")
    if norm > max_norm:
        scale = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


class AdamW:
    """Adam with decoupled weight decay; decay applies to matrices only."""

    def __init__(self, params: Dict[str, Tensor], cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self.t = 0
        self.m = {name: np.zeros(p.shape, dtype=np.float64) for name, p in params.items()}
        self.v = {name: np.zeros(p.shape, dtype=np.float64) for name, p in params.items()}

    def step(self, lr: float):
        cfg = self.cfg
        self.t += 1
        bias1 = 1.0 - cfg.beta1 ** self.t
        bias2 = 1.0 - cfg.beta2 ** self.t
        for name, p in self.params.items():
            grad = np.zeros(p.shape) if p.grad is None else p.grad.astype(np.float64)
            if not np.isfinite(grad).all():
                raise NumericalError(f"non-finite gradient in '{name}'")
            self.m[name] = cfg.beta1 * self.m[name] + (1.0 - cfg.beta1) * grad
            self.v[name] = cfg.beta2 * self.v[name] + (1.0 - cfg.beta2) * grad * grad
            update = (self.m[name] / bias1) / (np.sqrt(self.v[name] / bias2) + cfg.adam_eps)
            value = p.data.astype(np.float64)
            if p.ndim >= 2:
                value = value - lr * cfg.weight_decay * value
            p.data = (value - lr * update).astype(p.data.dtype)

    def state_tensors(self) -> Dict[str, np.ndarray]:
        out = {}
        for name in self.params:
            out[f"adam.m.{name}"] = self.m[name]
            out[f"adam.v.{name}"] = self.v[name]
        return out

    def load_state_tensors(self, tensors: Dict[str, np.ndarray], t: int):
        for name in self.params:
            self.m[name] = np.asarray(tensors[f"adam.m.{name}"], dtype=np.float64)
            self.v[name] = np.asarray(tensors[f"adam.v.{name}"], dtype=np.float64)
        self.t = t
