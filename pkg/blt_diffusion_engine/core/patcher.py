from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Union

import numpy as np
from scipy.stats import entropy as shannon_entropy

from .errors import ConfigError, CorpusError, SegmentationError
from .log import get_logger
from .vocab import BOS, VOCAB_SIZE

logger = get_logger(__name__)

MAX_ORDER = 7  # 260**7 still fits a signed 64-bit context key

TRIGGER_BOS = "bos"
TRIGGER_START = "start"
TRIGGER_ENTROPY = "entropy"
TRIGGER_MAX_SIZE = "max-size"


@dataclass
class EntropyModel:
    """Add-lambda smoothed order-k byte model; unseen contexts fall back to the smoothed unigram."""
    order: int
    smoothing: float
    context_keys: np.ndarray
    context_counts: np.ndarray
    unigram_counts: np.ndarray
    context_entropy: np.ndarray = field(init=False, repr=False)
    fallback_entropy: float = field(init=False)

    def __post_init__(self):
        self.context_keys = np.asarray(self.context_keys, dtype=np.int64)
        self.context_counts = np.asarray(self.context_counts, dtype=np.int64).reshape(-1, VOCAB_SIZE)
        self.unigram_counts = np.asarray(self.unigram_counts, dtype=np.int64)
        self.context_entropy = (shannon_entropy(self.context_counts + self.smoothing, axis=1)
                                if len(self.context_keys) else np.zeros(0))
        self.fallback_entropy = float(shannon_entropy(self.unigram_counts + self.smoothing))

    def context_key(self, prefix) -> int:
        ctx = list(prefix[-self.order:]) if self.order else []
        ctx = [BOS] * (self.order - len(ctx)) + ctx
        key = 0
        for symbol in ctx:
            key = key * VOCAB_SIZE + int(symbol)
        return key

    def _lookup(self, keys: np.ndarray):
        idx = np.searchsorted(self.context_keys, keys)
        idx = np.minimum(idx, max(len(self.context_keys) - 1, 0))
        found = (self.context_keys[idx] == keys) if len(self.context_keys) else np.zeros(len(keys), bool)
        return idx, found

    def distribution(self, prefix) -> np.ndarray:
        key = np.array([self.context_key(prefix)], dtype=np.int64)
        idx, found = self._lookup(key)
        counts = self.context_counts[idx[0]] if found[0] else self.unigram_counts
        smoothed = counts + self.smoothing
        return smoothed / smoothed.sum()

    def sequence_entropies(self, x, start: int = 0) -> np.ndarray:
        """Entropy of the next-symbol distribution after each prefix x[:j+1], for j >= start (0-based)."""
        keys = _context_keys(np.asarray(x, dtype=np.int64), self.order)
        keys = keys[start + 1:]
        if len(keys) == 0:
            return np.zeros(0)
        idx, found = self._lookup(keys)
        out = np.full(len(keys), self.fallback_entropy)
        if found.any():
            out[found] = self.context_entropy[idx[found]]
        return out


def _context_keys(seq: np.ndarray, order: int) -> np.ndarray:
    """Key of the `order` symbols preceding each position 0..len(seq), BOS left-padded."""
    padded = np.concatenate([np.full(order, BOS, dtype=np.int64), seq])
    keys = np.zeros(len(seq) + 1, dtype=np.int64)
    for m in range(order):
        keys = keys * VOCAB_SIZE + padded[m:m + len(seq) + 1]
    return keys


def _documents(corpus) -> List[np.ndarray]:
    if isinstance(corpus, (bytes, bytearray)):
        corpus = [corpus]
    docs = []
    for doc in corpus:
        arr = np.asarray(list(doc) if isinstance(doc, (bytes, bytearray)) else doc, dtype=np.int64)
        if arr.size == 0:
            continue
        docs.append(arr if arr[0] == BOS else np.concatenate([[BOS], arr]))
    if not docs:
        raise CorpusError("corpus is empty")
    return docs


def fit_entropy_model(corpus: Union[bytes, Iterable], order: int = 2, smoothing: float = 0.1) -> EntropyModel:
    if not 0 <= order <= MAX_ORDER:
        raise ConfigError(f"entropy order {order} outside [0, {MAX_ORDER}]")
    if smoothing < 0:
        raise ConfigError(f"entropy smoothing must be non-negative, got {smoothing}")

    all_keys, all_next = [], []
    for doc in _documents(corpus):
        if len(doc) < 2:
            continue
        all_keys.append(_context_keys(doc, order)[1:len(doc)])
        all_next.append(doc[1:])
    if not all_keys:
        raise CorpusError("corpus has no bytes to predict")

    keys = np.concatenate(all_keys)
    nxt = np.concatenate(all_next)
    unique, inverse = np.unique(keys, return_inverse=True)
    counts = np.zeros((len(unique), VOCAB_SIZE), dtype=np.int64)
    np.add.at(counts, (inverse, nxt), 1)
    unigram = np.bincount(nxt, minlength=VOCAB_SIZE).astype(np.int64)

    logger.debug("entropy model fitted", extra={"order": order, "contexts": len(unique), "events": len(nxt)})
    return EntropyModel(order, float(smoothing), unique, counts, unigram)


def next_byte_entropy(model: EntropyModel, prefix) -> float:
    """Shannon entropy (nats) of the model's next-byte distribution after `prefix`."""
    return float(shannon_entropy(model.distribution(prefix)))


@dataclass
class PatchSegmentation:
    starts: np.ndarray
    sequence_length: int
    closes_at_end: bool
    triggers: List[str]
    entropies: np.ndarray = field(repr=False)
    threshold: float = 0.0
    max_patch: int = 8

    @property
    def num_patches(self) -> int:
        return len(self.starts)

    @property
    def lengths(self) -> np.ndarray:
        return np.diff(np.append(self.starts, self.sequence_length + 1))

    def patch_index(self) -> np.ndarray:
        """1-based patch index p(i) of each position 1..N."""
        return np.repeat(np.arange(1, self.num_patches + 1), self.lengths)

    def is_final(self) -> np.ndarray:
        """Whether each position is the last byte of a closed patch."""
        final = np.zeros(self.sequence_length, dtype=bool)
        ends = np.asarray(self.starts[1:]) - 2
        final[ends] = True
        if self.closes_at_end and self.sequence_length:
            final[-1] = True
        return final

    def patches(self, x) -> List[list]:
        bounds = list(self.starts) + [self.sequence_length + 1]
        return [list(x[bounds[i] - 1:bounds[i + 1] - 1]) for i in range(self.num_patches)]

    def truncate(self, n: int) -> "PatchSegmentation":
        """Segmentation of the first n positions (exact by causality of the boundary rule)."""
        if n > self.sequence_length:
            raise SegmentationError(f"cannot truncate {self.sequence_length} positions to {n}")
        keep = int(np.searchsorted(self.starts, n, side="right"))
        starts = self.starts[:keep]
        entropies = self.entropies[:n]
        return PatchSegmentation(starts, n, _closes(starts, n, entropies, self.threshold, self.max_patch),
                                 self.triggers[:keep], entropies, self.threshold, self.max_patch)


def _closes(starts, n, entropies, threshold, max_patch) -> bool:
    if n == 0:
        return False
    if n == 1:
        return True
    return bool(entropies[n - 1] > threshold or n + 1 - starts[-1] >= max_patch)


def _boundaries(entropies: np.ndarray, n: int, threshold: float, max_patch: int):
    """
    Patch starts of positions 1..n given per-position next-byte entropies.

    Position 1 (BOS) and position 2 always start patches; position i >= 3 starts one when the
    entropy after position i-1 exceeds the threshold. Runs between entropy starts are then cut
    into max_patch pieces.
    """
    if n == 0:
        return np.zeros(0, dtype=np.int64), []
    if n == 1:
        return np.array([1]), [TRIGGER_BOS]

    candidates = np.arange(3, n + 1)
    fired = candidates[entropies[candidates - 2] > threshold]
    run_starts = np.concatenate([[2], fired]).astype(np.int64)
    run_lengths = np.diff(np.append(run_starts, n + 1))
    pieces = -(-run_lengths // max_patch)
    offsets = np.arange(pieces.sum()) - np.repeat(np.cumsum(pieces) - pieces, pieces)
    starts = np.repeat(run_starts, pieces) + offsets * max_patch

    triggers = [TRIGGER_BOS, TRIGGER_START]
    for j in range(1, len(starts)):
        triggers.append(TRIGGER_ENTROPY if offsets[j] == 0 else TRIGGER_MAX_SIZE)
    return np.concatenate([[1], starts]).astype(np.int64), triggers


def segment(x, model: EntropyModel, threshold: float, max_patch: int = 8,
            previous: Optional[PatchSegmentation] = None) -> PatchSegmentation:
    """
    Entropy patching of x (x[0] must be BOS).

    When `previous` segments a prefix of x, its entropies are reused and only the new
    positions are scored.
    """
    x = np.asarray(x, dtype=np.int64)
    if x.size == 0 or x[0] != BOS:
        raise SegmentationError("sequence must begin with BOS")
    if max_patch < 1:
        raise SegmentationError(f"max_patch must be >= 1, got {max_patch}")

    n = len(x)
    if previous is not None and 0 < previous.sequence_length <= n:
        fresh = model.sequence_entropies(x, start=previous.sequence_length)
        entropies = np.concatenate([previous.entropies, fresh])
    else:
        entropies = model.sequence_entropies(x)

    starts, triggers = _boundaries(entropies, n, threshold, max_patch)
    return PatchSegmentation(starts, n, _closes(starts, n, entropies, threshold, max_patch),
                             triggers, entropies, threshold, max_patch)


def average_patch_size(docs: List[np.ndarray], entropies: List[np.ndarray], threshold: float, max_patch: int) -> float:
    """Mean length of non-BOS patches over a corpus."""
    total_bytes, total_patches = 0, 0
    for doc, h in zip(docs, entropies):
        starts, _ = _boundaries(h, len(doc), threshold, max_patch)
        total_bytes += len(doc) - 1
        total_patches += max(len(starts) - 1, 0)
    return total_bytes / total_patches if total_patches else 0.0


def calibrate_threshold(corpus, model: EntropyModel, target_avg: float = 4.0, max_patch: int = 8,
                        tolerance: float = 0.05, max_iter: int = 60) -> float:
    if not 1 < target_avg <= max_patch:
        raise SegmentationError(f"target patch size {target_avg} outside (1, {max_patch}]")
    docs = _documents(corpus)
    entropies = [model.sequence_entropies(doc) for doc in docs]

    lo, hi = 0.0, float(np.log(VOCAB_SIZE)) + 1.0
    best, best_err = hi, np.inf
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        avg = average_patch_size(docs, entropies, mid, max_patch)
        err = abs(avg - target_avg)
        if err < best_err:
            best, best_err = mid, err
        if err <= tolerance * target_avg:
            return mid
        if avg < target_avg:
            lo = mid
        else:
            hi = mid

    logger.warning("patch size target not reached",
                   extra={"target": target_avg, "threshold": best, "error": best_err})
    return best


@dataclass
class EntropyPatcher:
    model: EntropyModel
    threshold: float
    max_patch: int = 8

    @classmethod
    def fit(cls, corpus, order: int = 2, smoothing: float = 0.1, target_avg: float = 4.0,
            max_patch: int = 8, threshold: Optional[float] = None) -> "EntropyPatcher":
        model = fit_entropy_model(corpus, order, smoothing)
        if threshold is None:
            threshold = calibrate_threshold(corpus, model, target_avg, max_patch)
        return cls(model, threshold, max_patch)

    def segment(self, x, previous: Optional[PatchSegmentation] = None) -> PatchSegmentation:
        return segment(x, self.model, self.threshold, self.max_patch, previous)
