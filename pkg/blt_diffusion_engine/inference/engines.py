"""
Generation engines: autoregressive (ar), block diffusion (blt-d), self-speculation (blt-s)
and diffusion drafting with verification (blt-dv).

All engines take a prompt of symbol ids that starts with BOS and return the prompt followed by
at most `length` generated symbols, cut after the first generated EOS.
"""

from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from core.attention_masks import build_draft_masks, build_inference_masks
from core.errors import GenerationError
from core.log import get_logger
from core.model import HierarchicalModel
from core.patcher import EntropyPatcher
from core.vocab import BOS, EOS, MASK
from inference.session import InferenceSession
from inference.trace import DecodeTrace, UnmaskingConfig
from inference.unmasking import choose_bytes, greedy_bytes, position_distributions, select_positions

logger = get_logger(__name__)

ENGINES = ("ar", "blt-d", "blt-s", "blt-dv")


def _prompt(prompt: Sequence[int]) -> List[int]:
    tokens = [int(t) for t in prompt]
    if not tokens:
        raise GenerationError("prompt is empty")
    if tokens[0] != BOS:
        raise GenerationError(f"prompt must begin with BOS ({BOS}), got {tokens[0]}")
    return tokens


def _check_length(length: int):
    if length < 0:
        raise GenerationError(f"generation length must be >= 0, got {length}")


def finalize(tokens: Sequence[int], prompt_len: int, length: int) -> List[int]:
    """Prompt plus at most `length` generated symbols, ending at the first generated EOS."""
    out = list(tokens[:prompt_len + length])
    generated = out[prompt_len:]
    if EOS in generated:
        out = out[:prompt_len + generated.index(EOS) + 1]
    return out


def _finished(tokens: List[int], prompt_len: int, length: int) -> bool:
    return len(tokens) - prompt_len >= length or EOS in tokens[prompt_len:]


def _finish(trace: DecodeTrace, tokens: List[int], length: int) -> Tuple[List[int], DecodeTrace]:
    trace.output = finalize(tokens, trace.prompt_len, length)
    logger.debug("generation finished", extra=trace.record())
    return trace.output, trace


def generate_ar(model: HierarchicalModel, patcher: EntropyPatcher, prompt: Sequence[int], length: int,
                use_cache: bool = True, on_step: Optional[Callable[[int, np.ndarray, int], None]] = None,
                forced: Optional[Sequence[int]] = None) -> Tuple[List[int], DecodeTrace]:
    """
    Greedy next-byte generation, one decoder pass per byte.

    The encoder and global model run once on the prompt and again every time the just-emitted
    byte closes its patch. `forced` replaces the greedy choice with the given symbols (used for
    stepwise scoring) and `on_step(step, logits, symbol)` sees every next-symbol distribution.
    """
    tokens = _prompt(prompt)
    _check_length(length)
    trace = DecodeTrace("ar", prompt_len=len(tokens))
    session = InferenceSession(model, patcher, trace, use_cache)
    seg, _ = session.refresh(tokens)

    steps = len(forced) if forced is not None else length
    for step in range(steps):
        n = len(tokens)
        masks = build_inference_masks(n, 0, seg)
        logits = session.decoder_pass(tokens, masks, commit_rows=n - 1).row(n - 1)
        symbol = int(forced[step]) if forced is not None else int(greedy_bytes(logits)[0])
        if on_step is not None:
            on_step(step, logits, symbol)
        tokens.append(symbol)

        seg = patcher.segment(tokens, previous=seg)
        if seg.closes_at_end:
            seg, _ = session.refresh(tokens)
        if symbol == EOS and forced is None:
            break
    if forced is not None:
        length = len(forced)
    return _finish(trace, tokens, length)


def _denoise_block(session: InferenceSession, tokens: List[int], masks, block_size: int,
                   cfg: UnmaskingConfig, rng: Optional[np.random.Generator]) -> List[int]:
    """Fill a fully masked block appended to `tokens`; one decoder pass per unmasking step."""
    n = len(tokens)
    block = np.full(block_size, MASK, dtype=np.int64)
    steps = 0
    while True:
        masked = np.flatnonzero(block == MASK)
        if masked.size == 0:
            break
        logits = session.decoder_pass(tokens + block.tolist(), masks, first_row=n, commit_rows=n)
        logits = logits.rows(n, n + block_size)[masked]
        probs = position_distributions(logits, cfg)
        chosen = select_positions(probs, cfg)
        block[masked[chosen]] = choose_bytes(logits[chosen], probs[chosen], cfg, rng)
        steps += 1
    session.trace.block_steps.append(steps)
    return block.tolist()


def verify(session: InferenceSession, tokens: List[int], draft: Sequence[int]) -> List[int]:
    """
    Check `draft` against greedy predictions of one full causal pass over tokens + draft.

    Accepts the longest matching prefix, then appends the model's byte at the first mismatch
    (or the free byte after a fully accepted draft): advances by 1..len(draft)+1 symbols.
    """
    draft = [int(d) for d in draft]
    r = len(draft)
    if r < 1:
        raise GenerationError(f"verification needs at least one drafted byte, got {r}")
    n = len(tokens)
    candidate = list(tokens) + draft
    seg, _ = session.refresh(candidate)
    masks = build_inference_masks(len(candidate), 0, seg)
    logits = session.decoder_pass(candidate, masks, first_row=n - 1,
                                  commit_rows=len(candidate)).rows(n - 1, n + r)
    predicted = greedy_bytes(logits)

    accepted = 0
    while accepted < r and predicted[accepted] == draft[accepted]:
        accepted += 1
    session.trace.drafted += r
    session.trace.accepted += accepted
    return list(tokens) + draft[:accepted] + [int(predicted[accepted])]


def generate_blt_d(model: HierarchicalModel, patcher: EntropyPatcher, prompt: Sequence[int], length: int,
                   block_size: int, cfg: Optional[UnmaskingConfig] = None, do_verify: bool = False,
                   seed: Optional[int] = None, use_cache: bool = True) -> Tuple[List[int], DecodeTrace]:
    """Block diffusion: each block of B masked bytes is denoised against the latest latent."""
    if do_verify:
        return generate_blt_dv(model, patcher, prompt, length, block_size, cfg, seed, use_cache)
    if block_size < 1:
        raise GenerationError(f"block size must be >= 1, got {block_size}")
    cfg = cfg or UnmaskingConfig()
    tokens = _prompt(prompt)
    _check_length(length)
    trace = DecodeTrace("blt-d", prompt_len=len(tokens), B=block_size, unmasking=cfg, seed=seed)
    session = InferenceSession(model, patcher, trace, use_cache)
    rng = np.random.default_rng(seed) if cfg.temperature > 0 else None

    seg, _ = session.refresh(tokens)
    while not _finished(tokens, trace.prompt_len, length):
        masks = build_inference_masks(len(tokens), block_size, seg)
        tokens = tokens + _denoise_block(session, tokens, masks, block_size, cfg, rng)
        seg, _ = session.refresh(tokens)
    return _finish(trace, tokens, length)


def generate_blt_s(model: HierarchicalModel, patcher: EntropyPatcher, prompt: Sequence[int], length: int,
                   window: int, use_cache: bool = True) -> Tuple[List[int], DecodeTrace]:
    """Self-speculation: the decoder drafts `window` bytes past patch boundaries, then verify()."""
    if window < 1:
        raise GenerationError(f"draft window must be >= 1, got {window}")
    tokens = _prompt(prompt)
    _check_length(length)
    trace = DecodeTrace("blt-s", prompt_len=len(tokens), k=window)
    session = InferenceSession(model, patcher, trace, use_cache)
    session.refresh(tokens)

    while not _finished(tokens, trace.prompt_len, length):
        draft: List[int] = []
        for _ in range(window):
            current = tokens + draft
            n = len(current)
            masks = build_draft_masks(n, 0, session.segment(current), session.available_latents(current))
            logits = session.decoder_pass(current, masks, commit_rows=n - 1).row(n - 1)
            draft.append(int(greedy_bytes(logits)[0]))
        tokens = verify(session, tokens, draft)
    return _finish(trace, tokens, length)


def generate_blt_dv(model: HierarchicalModel, patcher: EntropyPatcher, prompt: Sequence[int], length: int,
                    block_size: int, cfg: Optional[UnmaskingConfig] = None, seed: Optional[int] = None,
                    use_cache: bool = True) -> Tuple[List[int], DecodeTrace]:
    """Diffusion drafts a block from the latents already available; verify() commits it."""
    if block_size < 1:
        raise GenerationError(f"block size must be >= 1, got {block_size}")
    cfg = cfg or UnmaskingConfig()
    tokens = _prompt(prompt)
    _check_length(length)
    trace = DecodeTrace("blt-dv", prompt_len=len(tokens), B=block_size, unmasking=cfg, seed=seed)
    session = InferenceSession(model, patcher, trace, use_cache)
    rng = np.random.default_rng(seed) if cfg.temperature > 0 else None

    session.refresh(tokens)
    while not _finished(tokens, trace.prompt_len, length):
        masks = build_draft_masks(len(tokens), block_size, session.segment(tokens),
                                  session.available_latents(tokens))
        block = _denoise_block(session, tokens, masks, block_size, cfg, rng)
        tokens = verify(session, tokens, block)
    return _finish(trace, tokens, length)


def generate(engine: str, model: HierarchicalModel, patcher: EntropyPatcher, prompt: Sequence[int],
             length: int, block_size: int = 8, window: int = 4, cfg: Optional[UnmaskingConfig] = None,
             seed: Optional[int] = None, use_cache: bool = True) -> Tuple[List[int], DecodeTrace]:
    if engine == "ar":
        return generate_ar(model, patcher, prompt, length, use_cache)
    if engine == "blt-d":
        return generate_blt_d(model, patcher, prompt, length, block_size, cfg, seed=seed, use_cache=use_cache)
    if engine == "blt-s":
        return generate_blt_s(model, patcher, prompt, length, window, use_cache)
    if engine == "blt-dv":
        return generate_blt_dv(model, patcher, prompt, length, block_size, cfg, seed, use_cache)
    raise GenerationError(f"unknown engine '{engine}', expected one of {', '.join(ENGINES)}")
