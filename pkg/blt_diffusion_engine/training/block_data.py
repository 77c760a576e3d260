from dataclasses import dataclass
from typing import Tuple

import numpy as np

from core.attention_masks import build_training_masks
from core.errors import NumericalError, SegmentationError
from core.model import HierarchicalModel
from core.patcher import PatchSegmentation
from core.tensor import Tensor, cross_entropy_from_logits
from core.vocab import MASK, PAD


@dataclass
class BlockPlan:
    """M-1 blocks of B bytes; block k copies x from s_{k+2} and pads past the sequence end."""
    blocks: np.ndarray
    source_positions: np.ndarray
    pad_mask: np.ndarray
    block_starts: np.ndarray
    sequence_length: int
    block_size: int

    @property
    def num_blocks(self) -> int:
        return len(self.block_starts)


@dataclass
class CorruptedBlocks:
    t: float
    values: np.ndarray
    mask_bitmap: np.ndarray


def build_blocks(x, seg: PatchSegmentation, block_size: int) -> BlockPlan:
    x = np.asarray(x, dtype=np.int64)
    n = len(x)
    if block_size < 1:
        raise SegmentationError(f"block size must be >= 1, got {block_size}")
    if seg.sequence_length != n:
        raise SegmentationError(f"segmentation covers {seg.sequence_length} positions, sequence has {n}")
    if seg.num_patches < 2:
        raise SegmentationError("need at least two patches to build a block")

    starts = np.asarray(seg.starts[1:], dtype=np.int64)
    source = starts[:, None] + np.arange(block_size)[None, :]
    pad = source > n
    blocks = np.where(pad, PAD, x[np.minimum(source, n) - 1])
    return BlockPlan(blocks, source, pad, starts, n, block_size)


def sample_timestep(rng: np.random.Generator) -> float:
    """One draw from U(0, 1) with the endpoint 0 excluded."""
    t = rng.random()
    while t == 0.0:
        t = rng.random()
    return float(t)


def corrupt(plan: BlockPlan, t: float, rng: np.random.Generator) -> CorruptedBlocks:
    """Absorbing corruption: every non-PAD slot independently becomes MASK with probability t."""
    masked = (rng.random(plan.blocks.shape) < t) & ~plan.pad_mask
    return CorruptedBlocks(float(t), np.where(masked, MASK, plan.blocks), masked)


def combined_loss(model: HierarchicalModel, x, seg: PatchSegmentation, plan: BlockPlan,
                  corrupted: CorruptedBlocks, mask_loss_weight: float = 1.0) -> Tuple[Tensor, Tensor, Tensor]:
    """
    (L_clean, L_mask, L_total) from one decoder pass over [x; corrupted blocks].

    L_clean sums next-byte losses over the clean rows (BOS is never a target). L_mask sums the
    losses of masked, non-PAD block slots scaled by 1/t.
    """
    t = corrupted.t
    if not 0.0 < t < 1.0:
        raise NumericalError(f"timestep {t} outside (0, 1)")
    x = np.asarray(x, dtype=np.int64)
    n = len(x)

    latents = model.global_forward(model.encode(x, seg))
    masks = build_training_masks(seg, plan)
    tokens = np.concatenate([x, corrupted.values.ravel()])
    logits = model.decoder_forward(tokens, latents, masks)

    l_clean = cross_entropy_from_logits(logits[:n - 1], x[1:])
    weights = corrupted.mask_bitmap.ravel().astype(np.float64) / t
    l_mask = cross_entropy_from_logits(logits[n:], plan.blocks.ravel(), weights)
    return l_clean, l_mask, l_clean + l_mask * mask_loss_weight
