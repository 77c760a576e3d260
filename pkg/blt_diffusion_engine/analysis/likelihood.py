from typing import Dict, List, Sequence

import numpy as np
from scipy.special import logsumexp

from core.attention_masks import build_inference_masks
from core.errors import GenerationError
from core.model import HierarchicalModel
from core.patcher import EntropyPatcher
from core.tensor import no_grad
from core.vocab import BOS, encode_text
from inference.engines import generate_ar


def _sequence(x: Sequence[int]) -> np.ndarray:
    x = np.asarray(x, dtype=np.int64)
    if x.size == 0 or x[0] != BOS:
        raise GenerationError("scored sequences must begin with BOS")
    return x


def sequence_logprob(model: HierarchicalModel, patcher: EntropyPatcher, x: Sequence[int]) -> float:
    """Sum of log p(x_i | x_<i) over positions 2..N from one fully causal pass (full 260-way softmax)."""
    x = _sequence(x)
    n = len(x)
    if n == 1:
        return 0.0
    seg = patcher.segment(x)
    with no_grad():
        latents = model.global_forward(model.encode(x, seg))
        logits = model.decoder_forward(x, latents, build_inference_masks(n, 0, seg)).data[:n - 1]
    log_probs = logits - logsumexp(logits, axis=-1, keepdims=True)
    return float(log_probs[np.arange(n - 1), x[1:]].sum())


def stepwise_logprob(model: HierarchicalModel, patcher: EntropyPatcher, x: Sequence[int],
                     use_cache: bool = True) -> float:
    """The same quantity accumulated one byte at a time through the autoregressive engine."""
    x = _sequence(x)
    terms: List[float] = []

    def score(step: int, logits: np.ndarray, symbol: int):
        terms.append(float(logits[symbol] - logsumexp(logits)))

    generate_ar(model, patcher, x[:1], 0, use_cache=use_cache, on_step=score, forced=x[1:])
    return float(sum(terms))


def rank_candidates(model: HierarchicalModel, patcher: EntropyPatcher, candidates: Sequence[bytes]) -> Dict:
    """Multiple-choice ranking by total log-probability; ties go to the earliest candidate."""
    if not candidates:
        raise GenerationError("no candidates to rank")
    logprobs = [sequence_logprob(model, patcher, encode_text(c)) for c in candidates]
    per_byte = [lp / max(len(c), 1) for lp, c in zip(logprobs, candidates)]
    return {
        "logprobs": logprobs,
        "per_byte": per_byte,
        "best": int(np.argmax(logprobs)),
        "best_per_byte": int(np.argmax(per_byte)),
    }
