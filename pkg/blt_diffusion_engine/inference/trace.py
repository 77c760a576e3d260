import json
from dataclasses import dataclass, field
from typing import List, Optional

from core.errors import ConfigError

STRATEGIES = ("confidence", "entropy_bounded", "one_step", "sequential")
STRATEGY_ALIASES = {"eb": "entropy_bounded", "conf": "confidence", "one-step": "one_step"}

TRACE_FIELDS = ["engine", "B", "k", "strategy", "alpha", "gamma", "top_p", "decoder_nfes",
                "encoder_global_nfes", "drafted", "accepted", "output_len", "seed"]


@dataclass
class UnmaskingConfig:
    strategy: str = "confidence"
    alpha: float = 0.7
    gamma: float = 1.0
    top_p: Optional[float] = None
    temperature: float = 0.0

    def __post_init__(self):
        self.strategy = STRATEGY_ALIASES.get(self.strategy, self.strategy)
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown unmasking strategy '{self.strategy}'")
        if not 0.0 < self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in (0, 1], got {self.alpha}")
        if self.gamma <= 0.0:
            raise ConfigError(f"gamma must be positive, got {self.gamma}")
        if self.top_p is not None and not 0.0 < self.top_p <= 1.0:
            raise ConfigError(f"top_p must lie in (0, 1], got {self.top_p}")
        if self.temperature < 0.0:
            raise ConfigError(f"temperature must be non-negative, got {self.temperature}")

    def label(self) -> str:
        if self.strategy == "confidence":
            return f"alpha={self.alpha}"
        if self.strategy == "entropy_bounded":
            suffix = f",top_p={self.top_p}" if self.top_p is not None else ""
            return f"gamma={self.gamma}{suffix}"
        return self.strategy


@dataclass
class DecodeTrace:
    engine: str
    decoder_nfes: int = 0
    encoder_global_nfes: int = 0
    block_steps: List[int] = field(default_factory=list)
    drafted: int = 0
    accepted: int = 0
    output: List[int] = field(default_factory=list)
    prompt_len: int = 0
    B: Optional[int] = None
    k: Optional[int] = None
    unmasking: Optional[UnmaskingConfig] = None
    seed: Optional[int] = None

    @property
    def output_len(self) -> int:
        return len(self.output) - self.prompt_len

    def record(self) -> dict:
        u = self.unmasking
        return {
            "engine": self.engine,
            "B": self.B,
            "k": self.k,
            "strategy": u.strategy if u else None,
            "alpha": u.alpha if u and u.strategy == "confidence" else None,
            "gamma": u.gamma if u and u.strategy == "entropy_bounded" else None,
            "top_p": u.top_p if u else None,
            "decoder_nfes": self.decoder_nfes,
            "encoder_global_nfes": self.encoder_global_nfes,
            "drafted": self.drafted,
            "accepted": self.accepted,
            "output_len": self.output_len,
            "seed": self.seed,
        }


def append_trace(path: str, trace: DecodeTrace):
    """One JSON object per line, keys in TRACE_FIELDS order."""
    with open(path, "a", encoding="utf-8") as f:
        f.write(json.dumps(trace.record()) + "\n")
