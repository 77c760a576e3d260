"""
Prefix reuse across generation steps.

Byte states of the encoder, the latents of closed patches (plus their global-model keys and
values) and the decoder keys/values of committed causal rows stay valid while the sequence
prefix they were computed from is unchanged. Patching is causal, so a closed patch never
changes once its bytes are fixed; only the growing last patch and new rows are recomputed.
"""

from typing import List, Optional

import numpy as np

from core.errors import CacheMismatchError
from core.log import get_logger
from core.model import HierarchicalModel
from core.patcher import EntropyPatcher, PatchSegmentation
from core.tensor import no_grad

logger = get_logger(__name__)


def common_prefix(a: np.ndarray, b: np.ndarray) -> int:
    n = min(len(a), len(b))
    diff = np.flatnonzero(a[:n] != b[:n])
    return int(diff[0]) if diff.size else n


def closed_patches(seg: PatchSegmentation) -> int:
    return seg.num_patches if seg.closes_at_end else seg.num_patches - 1


class LayerCache:
    """Per-layer keys/values (heads, rows, head_dim) of rows 0..length-1."""

    def __init__(self, n_layers: int):
        self.n_layers = n_layers
        self.keys: List[Optional[np.ndarray]] = [None] * n_layers
        self.values: List[Optional[np.ndarray]] = [None] * n_layers
        self.length = 0

    def get(self, layer: int):
        if self.keys[layer] is None:
            return None
        return self.keys[layer], self.values[layer]

    def append(self, layer: int, k: np.ndarray, v: np.ndarray):
        if self.keys[layer] is None:
            self.keys[layer], self.values[layer] = k, v
        else:
            self.keys[layer] = np.concatenate([self.keys[layer], k], axis=1)
            self.values[layer] = np.concatenate([self.values[layer], v], axis=1)

    def advance(self, rows: int):
        self.length += rows

    def truncate(self, n: int):
        n = min(n, self.length)
        for layer in range(self.n_layers):
            if self.keys[layer] is not None:
                self.keys[layer] = self.keys[layer][:, :n]
                self.values[layer] = self.values[layer][:, :n]
        self.length = n

    def reset(self):
        self.truncate(0)


class EncoderCache(LayerCache):
    """Layer cache that also keeps the final byte states used for patch pooling."""

    def __init__(self, n_layers: int, width: int):
        super().__init__(n_layers)
        self.states = np.zeros((0, width))

    def extend_states(self, fresh: np.ndarray) -> np.ndarray:
        self.states = np.concatenate([self.states, fresh], axis=0)
        self.advance(len(fresh))
        return self.states

    def truncate(self, n: int):
        super().truncate(n)
        self.states = self.states[:self.length]


class PrefixCache:
    def __init__(self, model: HierarchicalModel):
        c = model.config
        self.model = model
        self.encoder = EncoderCache(c.l_enc, c.d_local)
        self.global_kv = LayerCache(c.l_glob)
        self.decoder = LayerCache(c.l_dec)
        self.tokens = np.zeros(0, dtype=np.int64)
        self.decoder_tokens = np.zeros(0, dtype=np.int64)
        self.decoder_assign = np.zeros(0, dtype=np.int64)
        self.seg: Optional[PatchSegmentation] = None
        self.latents = np.zeros((0, c.d_global))
        self.last_new_latents = 0
        self.last_new_bytes = 0

    def rollback(self, tokens: np.ndarray) -> int:
        """Drop everything computed from bytes that differ from `tokens`; returns the kept prefix."""
        keep = common_prefix(self.tokens, tokens)
        if keep < len(self.tokens):
            self.encoder.truncate(keep)
            self.tokens = self.tokens[:keep]
            if keep == 0:
                self.seg = None
                closed = 0
            else:
                self.seg = self.seg.truncate(keep)
                closed = closed_patches(self.seg)
            if closed < len(self.latents):
                self.latents = self.latents[:closed]
                self.global_kv.truncate(closed)
        return keep

    def check_boundaries(self, seg: PatchSegmentation):
        if self.seg is None:
            return
        n = self.seg.sequence_length
        cached = np.asarray(self.seg.starts)
        fresh = np.asarray(seg.starts)
        fresh = fresh[fresh <= n]
        if not np.array_equal(cached, fresh):
            raise CacheMismatchError(f"patch starts within the cached {n}-byte prefix changed: "
                                     f"{cached.tolist()} vs {fresh.tolist()}")

    def refresh(self, patcher: EntropyPatcher, tokens, seg: Optional[PatchSegmentation] = None):
        """Segment and encode `tokens`, reusing the cached prefix; returns (seg, all latents O)."""
        tokens = np.asarray(tokens, dtype=np.int64)
        self.rollback(tokens)
        if seg is None:
            seg = patcher.segment(tokens, previous=self.seg)
        self.check_boundaries(seg)

        from_patch = len(self.latents) + 1
        with no_grad():
            fresh = self.model.encode(tokens, seg, cache=self.encoder, from_patch=from_patch)
            out = self.model.global_forward(fresh, cache=self.global_kv)
        latents = np.concatenate([self.latents, out.data], axis=0)

        closed = closed_patches(seg)
        self.latents = latents[:closed]
        self.global_kv.truncate(closed)
        self.last_new_bytes = len(tokens) - len(self.tokens)
        self.last_new_latents = seg.num_patches - from_patch + 1
        self.tokens = tokens.copy()
        self.seg = seg
        logger.debug("prefix cache refresh", extra={"bytes": len(tokens), "new_latents": self.last_new_latents})
        return seg, latents

    def decoder_start(self, tokens: np.ndarray, assign: np.ndarray) -> int:
        """First decoder row that must be recomputed for `tokens` read under cross assignment `assign`."""
        start = min(self.decoder.length, common_prefix(self.decoder_tokens, tokens),
                    common_prefix(self.decoder_assign, assign))
        self.decoder.truncate(start)
        self.decoder_tokens = self.decoder_tokens[:start]
        self.decoder_assign = self.decoder_assign[:start]
        return start

    def commit_decoder(self, tokens: np.ndarray, assign: np.ndarray, rows: int):
        self.decoder.truncate(rows)
        n = self.decoder.length
        self.decoder_tokens = np.asarray(tokens[:n], dtype=np.int64)
        self.decoder_assign = np.asarray(assign[:n], dtype=np.int64)
