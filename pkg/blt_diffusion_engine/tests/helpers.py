import os

import numpy as np

from core.model import HierarchicalModel, ModelConfig
from core.patcher import EntropyPatcher, fit_entropy_model
from core.tensor import backward
from core.vocab import EOS

SLOW = os.environ.get("BLTD_RUN_SLOW") == "1"

TEXT_CORPUS = (b"the cat sat on the mat. the dog sat on the log. "
               b"a bird sang in the tree while the cat slept. ") * 6


def skewed_corpus(size: int = 6000, seed: int = 0) -> bytes:
    """Zipf-distributed bytes: most order-1 contexts are seen, with varied next-byte entropies."""
    rng = np.random.default_rng(seed)
    weights = 1.0 / np.arange(1, 257)
    return bytes(rng.choice(256, size=size, p=weights / weights.sum()).astype(np.uint8))


def tiny_config(**overrides) -> ModelConfig:
    values = dict(d_local=8, d_global=16, l_enc=1, l_glob=1, l_dec=1, heads_local=2, heads_global=2,
                  init_std=0.2, seed=0)
    values.update(overrides)
    return ModelConfig(**values)


def tiny_model(no_eos: bool = True, **overrides) -> HierarchicalModel:
    """Random tiny model; with no_eos the EOS logit is pinned at 0 so greedy decoding never stops early."""
    model = HierarchicalModel(tiny_config(**overrides))
    if no_eos:
        model.params["decoder.head"].data[:, EOS] = 0.0
    return model


def tiny_patcher(max_patch: int = 4, target_avg: float = 2.5) -> EntropyPatcher:
    return EntropyPatcher.fit(skewed_corpus(), order=1, smoothing=0.1, target_avg=target_avg, max_patch=max_patch)


def fixed_patcher(max_patch: int, threshold: float) -> EntropyPatcher:
    """Patcher with a hand-set threshold (1e9: max-size cuts only; -1: every position starts a patch)."""
    return EntropyPatcher(fit_entropy_model(TEXT_CORPUS, order=1), threshold, max_patch)


def numeric_gradient(loss_fn, param, index, eps: float = 1e-6) -> float:
    original = param.data[index]
    param.data[index] = original + eps
    up = float(loss_fn().data)
    param.data[index] = original - eps
    down = float(loss_fn().data)
    param.data[index] = original
    return (up - down) / (2 * eps)


def analytic_gradients(loss_fn, params):
    for p in params:
        p.zero_grad()
    backward(loss_fn())
    return [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]


def gradient_errors(loss_fn, params, samples: int = None, seed: int = 0, eps: float = 1e-6):
    """Worst relative error between backward() and central differences, per parameter."""
    rng = np.random.default_rng(seed)
    grads = analytic_gradients(loss_fn, params)
    errors = []
    for p, grad in zip(params, grads):
        indices = list(np.ndindex(p.shape))
        if samples is not None and len(indices) > samples:
            indices = [indices[i] for i in rng.choice(len(indices), samples, replace=False)]
        worst = 0.0
        for index in indices:
            numeric = numeric_gradient(loss_fn, p, index, eps)
            scale = max(abs(numeric), abs(grad[index]), 1e-4)
            worst = max(worst, abs(numeric - grad[index]) / scale)
        errors.append(worst)
    return errors
