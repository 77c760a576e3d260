from dataclasses import dataclass
from typing import Optional

import numpy as np

from core.attention_masks import AttentionMaskSpec
from core.errors import GenerationError
from core.model import HierarchicalModel
from core.patcher import EntropyPatcher, PatchSegmentation
from core.tensor import Tensor, no_grad
from inference.prefix_cache import PrefixCache, closed_patches, common_prefix
from inference.trace import DecodeTrace


@dataclass
class RowLogits:
    """Decoder logits for rows start.. of the evaluated sequence (absolute 0-based row indexing)."""
    start: int
    data: np.ndarray

    def row(self, i: int) -> np.ndarray:
        if i < self.start:
            raise GenerationError(f"row {i} was served from cache (first computed row is {self.start})")
        return self.data[i - self.start]

    def rows(self, lo: int, hi: int) -> np.ndarray:
        if lo < self.start:
            raise GenerationError(f"row {lo} was served from cache (first computed row is {self.start})")
        return self.data[lo - self.start:hi - self.start]


class InferenceSession:
    """
    One generation's view of the model: every encoder/global refresh and decoder pass goes
    through here so the trace counters match the forward passes actually run.
    """

    def __init__(self, model: HierarchicalModel, patcher: EntropyPatcher, trace: DecodeTrace,
                 use_cache: bool = True):
        self.model = model
        self.patcher = patcher
        self.trace = trace
        self.cache = PrefixCache(model) if use_cache else None
        self.encoded_tokens = np.zeros(0, dtype=np.int64)
        self.encoded_seg: Optional[PatchSegmentation] = None
        self.latents: Optional[np.ndarray] = None

    def segment(self, tokens) -> PatchSegmentation:
        """Patcher-only segmentation of `tokens` (no model NFE)."""
        tokens = np.asarray(tokens, dtype=np.int64)
        previous = self.encoded_seg
        if previous is not None:
            keep = common_prefix(self.encoded_tokens, tokens)
            previous = previous.truncate(keep) if keep else None
        return self.patcher.segment(tokens, previous=previous)

    def refresh(self, tokens):
        """Patch, encode and run the global model over `tokens`: one encoder/global NFE."""
        tokens = np.asarray(tokens, dtype=np.int64)
        self.trace.encoder_global_nfes += 1
        if self.cache is not None:
            seg, latents = self.cache.refresh(self.patcher, tokens, seg=self.segment(tokens))
        else:
            seg = self.segment(tokens)
            with no_grad():
                latents = self.model.global_forward(self.model.encode(tokens, seg)).data
        self.encoded_tokens = tokens.copy()
        self.encoded_seg = seg
        self.latents = latents
        return seg, latents

    def available_latents(self, tokens) -> int:
        """Latents of patches closed within the part of `tokens` that was last encoded."""
        keep = common_prefix(self.encoded_tokens, np.asarray(tokens, dtype=np.int64))
        if keep == 0:
            raise GenerationError("no encoded prefix shared with the current sequence")
        return closed_patches(self.encoded_seg.truncate(keep))

    def decoder_pass(self, tokens, masks: AttentionMaskSpec, first_row: Optional[int] = None,
                     commit_rows: int = 0) -> RowLogits:
        """
        One decoder NFE over `tokens` laid out by `masks`; logits are returned from `first_row`
        (default: the last row) onwards.

        With the prefix cache, rows already computed for the same tokens and cross assignment are
        reused and only later rows are evaluated; afterwards the first `commit_rows` rows are kept.
        Callers only commit rows whose latents are closed.
        """
        tokens = np.asarray(tokens, dtype=np.int64)
        self.trace.decoder_nfes += 1
        latents = Tensor(self.latents)
        with no_grad():
            if self.cache is None:
                return RowLogits(0, self.model.decoder_forward(tokens, latents, masks).data)
            assign = np.asarray(masks.cross_assign)
            if first_row is None:
                first_row = len(tokens) - 1
            start = min(self.cache.decoder_start(tokens, assign), first_row)
            self.cache.decoder.truncate(start)
            logits = self.model.decoder_forward(tokens[start:], latents, masks.rows(start), cache=self.cache.decoder)
        self.cache.commit_decoder(tokens, assign, commit_rows)
        return RowLogits(start, logits.data)
