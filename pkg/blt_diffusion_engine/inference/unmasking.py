"""
Which masked block positions to commit at each diffusion step, and with which bytes.

Positions are 0-based indices into the rows handed in (the still-masked block slots).
"""

from typing import Optional

import numpy as np
from scipy.special import softmax
from scipy.stats import entropy as shannon_entropy

from core.vocab import EMITTABLE
from inference.trace import UnmaskingConfig

EB_TOLERANCE = 1e-9


def emittable_logits(logits: np.ndarray) -> np.ndarray:
    return np.where(EMITTABLE, logits, -np.inf)


def greedy_bytes(logits: np.ndarray) -> np.ndarray:
    """Argmax over emittable symbols; ties go to the lowest id."""
    return np.argmax(emittable_logits(np.atleast_2d(logits)), axis=-1)


def top_p_filter(probs: np.ndarray, top_p: Optional[float]) -> np.ndarray:
    """Keep the smallest most-probable set per row whose mass reaches top_p, renormalized."""
    if top_p is None or top_p >= 1.0:
        return probs
    order = np.argsort(-probs, axis=-1, kind="stable")
    sorted_probs = np.take_along_axis(probs, order, axis=-1)
    before = np.cumsum(sorted_probs, axis=-1) - sorted_probs
    keep_sorted = before < top_p
    keep = np.zeros_like(keep_sorted)
    np.put_along_axis(keep, order, keep_sorted, axis=-1)
    kept = np.where(keep, probs, 0.0)
    return kept / kept.sum(axis=-1, keepdims=True)


def position_distributions(logits: np.ndarray, cfg: UnmaskingConfig) -> np.ndarray:
    temperature = cfg.temperature if cfg.temperature > 0 else 1.0
    probs = softmax(emittable_logits(logits) / temperature, axis=-1)
    return top_p_filter(probs, cfg.top_p)


def select_unmask_confidence(probs: np.ndarray, alpha: float) -> np.ndarray:
    confidence = probs.max(axis=-1)
    chosen = np.flatnonzero(confidence > alpha)
    if chosen.size == 0:
        chosen = np.array([int(np.argmax(confidence))])
    return chosen


def select_by_entropy(entropies: np.ndarray, gamma: float) -> np.ndarray:
    """Longest ascending-entropy prefix with cumulative entropy <= gamma (at least one position)."""
    order = np.argsort(entropies, kind="stable")
    cumulative = np.cumsum(entropies[order])
    count = max(1, int(np.sum(cumulative <= gamma + EB_TOLERANCE)))
    return np.sort(order[:count])


def select_unmask_eb(probs: np.ndarray, gamma: float, top_p: Optional[float] = None) -> np.ndarray:
    probs = top_p_filter(probs, top_p)
    return select_by_entropy(shannon_entropy(probs, axis=-1), gamma)


def select_positions(probs: np.ndarray, cfg: UnmaskingConfig) -> np.ndarray:
    if cfg.strategy == "confidence":
        return select_unmask_confidence(probs, cfg.alpha)
    if cfg.strategy == "entropy_bounded":
        # top-p already applied by position_distributions
        return select_unmask_eb(probs, cfg.gamma)
    if cfg.strategy == "one_step":
        return np.arange(len(probs))
    return np.array([int(np.argmax(probs.max(axis=-1)))])


def choose_bytes(logits: np.ndarray, probs: np.ndarray, cfg: UnmaskingConfig,
                 rng: Optional[np.random.Generator]) -> np.ndarray:
    if cfg.temperature <= 0 or rng is None:
        return greedy_bytes(logits)
    return np.array([rng.choice(len(row), p=row) for row in probs])
