from dataclasses import dataclass

import numpy as np

from .errors import MaskError, SegmentationError
from .patcher import PatchSegmentation


@dataclass
class AttentionMaskSpec:
    """
    Decoder attention layout.

    self_mask[i, j] admits key j for query i (0-based rows); cross_assign holds the 1-based latent
    each row reads through cross-attention; positions are the rotary indices of each row.
    """
    self_mask: np.ndarray
    cross_assign: np.ndarray
    positions: np.ndarray

    @property
    def length(self) -> int:
        return len(self.positions)

    def rows(self, start: int) -> "AttentionMaskSpec":
        """Rows start.. of the layout, keeping every key column (incremental evaluation)."""
        return AttentionMaskSpec(self.self_mask[start:], self.cross_assign[start:], self.positions[start:])

    def clip_latents(self, available: int) -> "AttentionMaskSpec":
        """Point rows whose latent is not computed yet at the last available one."""
        return AttentionMaskSpec(self.self_mask, np.minimum(self.cross_assign, available), self.positions)


def causal_cross_assign(seg: PatchSegmentation) -> np.ndarray:
    """Clean rows read the previous latent, except the final byte of a closed patch which reads its own."""
    patch = seg.patch_index()
    return np.where(seg.is_final(), patch, patch - 1).astype(np.int64)


def _prefix(seg: PatchSegmentation, n: int) -> PatchSegmentation:
    if seg.sequence_length == n:
        return seg
    if seg.sequence_length > n:
        return seg.truncate(n)
    raise SegmentationError(f"segmentation covers {seg.sequence_length} positions, prefix has {n}")


def build_inference_masks(n: int, block: int, seg: PatchSegmentation) -> AttentionMaskSpec:
    """Causal prefix of n clean rows followed by a bidirectional block of `block` rows."""
    if n <= 0:
        raise MaskError("inference masks need a non-empty prefix")
    seg = _prefix(seg, n)
    total = n + block

    idx = np.arange(total)
    self_mask = idx[None, :] <= idx[:, None]
    self_mask[n:, :] = True

    cross = np.empty(total, dtype=np.int64)
    cross[:n] = causal_cross_assign(seg)
    cross[n:] = seg.num_patches
    positions = np.arange(1, total + 1, dtype=np.int64)
    return AttentionMaskSpec(self_mask, cross, positions)


def build_draft_masks(n: int, block: int, seg: PatchSegmentation, available: int) -> AttentionMaskSpec:
    """
    Inference layout for drafting over a verified prefix of n rows.

    block > 0 appends a bidirectional diffusion block; block == 0 with a segmentation longer than
    n gives the causal layout over self-drafted rows. Either way rows are pointed at the last of
    the `available` latents when their own latent has not been encoded yet.
    """
    if available < 1:
        raise MaskError("drafting needs at least one latent")
    length = n if block else max(n, seg.sequence_length)
    return build_inference_masks(length, block, seg).clip_latents(available)


def build_training_masks(seg: PatchSegmentation, plan) -> AttentionMaskSpec:
    """
    Layout over [x; blocks] for the combined training pass.

    Block b_{i-1} (starting at s_i) attends to its own block and to clean positions < s_i, reads
    latent i-1 and carries rotary positions s_i..s_i+B-1. Clean rows never see block rows and
    blocks never see each other.
    """
    n = seg.sequence_length
    m = seg.num_patches
    if plan.sequence_length != n or plan.num_blocks != m - 1 or not np.array_equal(plan.block_starts, seg.starts[1:]):
        raise SegmentationError("block plan does not match the segmentation")
    block = plan.block_size
    total = n + block * (m - 1)

    self_mask = np.zeros((total, total), dtype=bool)
    idx = np.arange(n)
    self_mask[:n, :n] = idx[None, :] <= idx[:, None]

    cross = np.empty(total, dtype=np.int64)
    cross[:n] = causal_cross_assign(seg)
    positions = np.empty(total, dtype=np.int64)
    positions[:n] = np.arange(1, n + 1)

    for k, start in enumerate(plan.block_starts):
        lo = n + k * block
        hi = lo + block
        self_mask[lo:hi, lo:hi] = True
        self_mask[lo:hi, :start - 1] = True
        cross[lo:hi] = k + 1
        positions[lo:hi] = np.arange(start, start + block)
    return AttentionMaskSpec(self_mask, cross, positions)
