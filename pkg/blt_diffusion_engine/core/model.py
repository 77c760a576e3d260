"""
Hierarchical byte model: local encoder, global latent transformer, local decoder.

Every forward entry point accepts an optional layer cache (anything with get/append/length,
see inference.prefix_cache) so the same code evaluates full sequences for training and
only new rows during generation.
"""

import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, fields
from typing import Callable, Dict, List, Optional

import numpy as np

from .attention_masks import AttentionMaskSpec
from .errors import ConfigError, MaskError, TensorShapeError
from .patcher import PatchSegmentation
from .tensor import (Tensor, concat, get_dtype, masked_attention, parameter, rmsnorm, rope_apply,
                     swiglu_ffn)
from .vocab import VOCAB_SIZE

COMPONENTS = ("encoder", "global", "decoder")


def ffn_hidden(d: int) -> int:
    return 16 * math.ceil(8 * d / 3 / 16)


@dataclass
class ModelConfig:
    d_local: int = 64
    d_global: int = 128
    l_enc: int = 1
    l_glob: int = 2
    l_dec: int = 2
    heads_local: int = 4
    heads_global: int = 4
    rope_theta: float = 500000.0
    attn_window: int = 512
    vocab_size: int = VOCAB_SIZE
    tied_head: bool = False
    init_std: float = 0.02
    seed: int = 0

    @property
    def split_count(self) -> int:
        return self.d_global // self.d_local

    def validate(self):
        if min(self.d_local, self.d_global, self.heads_local, self.heads_global) < 1:
            raise ConfigError("widths and head counts must be positive")
        if min(self.l_enc, self.l_glob, self.l_dec) < 0:
            raise ConfigError("layer counts must be non-negative")
        if self.d_global % self.d_local:
            raise ConfigError(f"d_global={self.d_global} is not a multiple of d_local={self.d_local}")
        for width, heads in ((self.d_local, self.heads_local), (self.d_global, self.heads_global)):
            if width % heads:
                raise ConfigError(f"width {width} not divisible by {heads} heads")
            if (width // heads) % 2:
                raise ConfigError(f"head dimension {width // heads} must be even for rotary encoding")
        if self.rope_theta <= 0 or self.attn_window < 1:
            raise ConfigError("rope_theta and attn_window must be positive")
        if self.vocab_size != VOCAB_SIZE:
            raise ConfigError(f"vocab_size must be {VOCAB_SIZE}")

    def to_header(self) -> Dict[str, str]:
        return {f"model.{k}": str(v) for k, v in asdict(self).items()}

    @classmethod
    def from_header(cls, header: Dict[str, str]) -> "ModelConfig":
        values = {}
        for f in fields(cls):
            raw = header.get(f"model.{f.name}")
            if raw is None:
                continue
            if f.type in (bool, "bool"):
                values[f.name] = raw == "True"
            elif f.type in (int, "int"):
                values[f.name] = int(raw)
            else:
                values[f.name] = float(raw)
        return cls(**values)


def _layer_shapes(d: int, cross: bool = False) -> List[tuple]:
    hidden = ffn_hidden(d)
    shapes = []
    if cross:
        shapes += [("cross_wq", (d, d)), ("cross_wk", (d, d)), ("cross_wv", (d, d)), ("cross_wo", (d, d))]
    shapes += [("attn_norm", (d,)), ("wq", (d, d)), ("wk", (d, d)), ("wv", (d, d)), ("wo", (d, d)),
               ("ffn_norm", (d,)), ("w_gate", (d, hidden)), ("w_up", (d, hidden)), ("w_down", (hidden, d))]
    return shapes


def _split_heads(x: Tensor, heads: int) -> Tensor:
    rows, width = x.shape
    return x.reshape(rows, heads, width // heads).transpose(1, 0, 2)


def _merge_heads(x: Tensor) -> Tensor:
    heads, rows, dh = x.shape
    return x.transpose(1, 0, 2).reshape(rows, heads * dh)


def window_mask(start: int, rows: int, window: int) -> np.ndarray:
    """Causal sliding-window admissibility for rows start..start+rows-1 over keys 0..start+rows-1."""
    q = np.arange(start, start + rows)[:, None]
    k = np.arange(start + rows)[None, :]
    return (k <= q) & (q - k < window)


class HierarchicalModel:
    def __init__(self, config: ModelConfig, state: Optional[Dict[str, np.ndarray]] = None):
        config.validate()
        self.config = config
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()
        self._hooks: List[Callable[[str], None]] = []

        rng = np.random.default_rng(config.seed)
        for name, shape in self.declared_shapes():
            if state is not None:
                if name not in state:
                    raise TensorShapeError(f"missing parameter '{name}'")
                value = np.asarray(state[name])
                if value.shape != shape:
                    raise TensorShapeError(f"parameter '{name}' has shape {value.shape}, expected {shape}")
            elif len(shape) == 1:
                value = np.ones(shape)
            else:
                value = rng.normal(0.0, config.init_std, size=shape)
            self.params[name] = parameter(value.astype(get_dtype()))

    def declared_shapes(self) -> List[tuple]:
        c = self.config
        shapes = [("encoder.embed", (c.vocab_size, c.d_local))]
        for i in range(c.l_enc):
            shapes += [(f"encoder.layers.{i}.{n}", s) for n, s in _layer_shapes(c.d_local)]
        shapes.append(("encoder.pool_proj", (c.d_local, c.d_global)))
        for i in range(c.l_glob):
            shapes += [(f"global.layers.{i}.{n}", s) for n, s in _layer_shapes(c.d_global)]
        shapes += [("decoder.embed", (c.vocab_size, c.d_local)),
                   ("decoder.split_proj", (c.d_global, c.split_count * c.d_local))]
        for i in range(c.l_dec):
            shapes += [(f"decoder.layers.{i}.{n}", s) for n, s in _layer_shapes(c.d_local, cross=True)]
        shapes.append(("decoder.final_norm", (c.d_local,)))
        if not c.tied_head:
            shapes.append(("decoder.head", (c.d_local, c.vocab_size)))
        return shapes

    # bookkeeping

    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    def parameter_counts(self) -> Dict[str, int]:
        counts = {c: 0 for c in COMPONENTS}
        for name, p in self.params.items():
            counts[name.split(".", 1)[0]] += p.size
        return counts

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((name, p.data) for name, p in self.params.items())

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def add_hook(self, hook: Callable[[str], None]):
        self._hooks.append(hook)

    def remove_hook(self, hook: Callable[[str], None]):
        self._hooks.remove(hook)

    def _notify(self, component: str):
        for hook in self._hooks:
            hook(component)

    # building blocks

    def _self_attention_layer(self, prefix: str, h: Tensor, positions, mask: np.ndarray, heads: int,
                              cache=None, layer: int = 0) -> Tensor:
        p = self.params
        theta = self.config.rope_theta
        x = rmsnorm(h, p[prefix + "attn_norm"])
        q = rope_apply(_split_heads(x @ p[prefix + "wq"], heads), positions, theta)
        k = rope_apply(_split_heads(x @ p[prefix + "wk"], heads), positions, theta)
        v = _split_heads(x @ p[prefix + "wv"], heads)
        if cache is not None:
            past = cache.get(layer)
            cache.append(layer, k.data, v.data)
            if past is not None:
                k = concat([Tensor(past[0]), k], axis=1)
                v = concat([Tensor(past[1]), v], axis=1)
        h = h + _merge_heads(masked_attention(q, k, v, mask)) @ p[prefix + "wo"]
        x = rmsnorm(h, p[prefix + "ffn_norm"])
        return h + swiglu_ffn(x, p[prefix + "w_gate"], p[prefix + "w_up"], p[prefix + "w_down"])

    def _cross_attention(self, prefix: str, h: Tensor, slices: Tensor, cross_mask: np.ndarray) -> Tensor:
        p = self.params
        heads = self.config.heads_local
        q = _split_heads(h @ p[prefix + "cross_wq"], heads)
        k = _split_heads(slices @ p[prefix + "cross_wk"], heads)
        v = _split_heads(slices @ p[prefix + "cross_wv"], heads)
        return _merge_heads(masked_attention(q, k, v, cross_mask)) @ p[prefix + "cross_wo"]

    def pool(self, states: Tensor, seg: PatchSegmentation, from_patch: int = 1) -> Tensor:
        """Mean of byte states over each patch from_patch..M, projected to d_global."""
        starts = np.asarray(seg.starts)
        lengths = seg.lengths
        if states.shape[0] != seg.sequence_length:
            raise TensorShapeError(f"{states.shape[0]} byte states for a {seg.sequence_length}-byte segmentation")
        pool = np.zeros((seg.num_patches - from_patch + 1, seg.sequence_length))
        for row, patch in enumerate(range(from_patch - 1, seg.num_patches)):
            pool[row, starts[patch] - 1:starts[patch] - 1 + lengths[patch]] = 1.0 / lengths[patch]
        return (Tensor(pool) @ states) @ self.params["encoder.pool_proj"]

    # components

    def encode_bytes(self, tokens, start: int = 0, cache=None) -> Tensor:
        """Byte states of tokens occupying positions start+1.. (rows before start come from cache)."""
        c = self.config
        tokens = np.asarray(tokens, dtype=np.int64)
        h = self.params["encoder.embed"][tokens]
        positions = np.arange(start + 1, start + len(tokens) + 1)
        mask = window_mask(start, len(tokens), c.attn_window)
        for i in range(c.l_enc):
            h = self._self_attention_layer(f"encoder.layers.{i}.", h, positions, mask, c.heads_local, cache, i)
        return h

    def encode(self, x, seg: PatchSegmentation, cache=None, from_patch: int = 1) -> Tensor:
        """Latent tokens T for patches from_patch..M of x."""
        self._notify("encoder")
        x = np.asarray(x, dtype=np.int64)
        if len(x) != seg.sequence_length:
            raise TensorShapeError(f"sequence of {len(x)} bytes with a {seg.sequence_length}-byte segmentation")
        if cache is None:
            states = self.encode_bytes(x)
        else:
            start = cache.length
            fresh = self.encode_bytes(x[start:], start, cache)
            states = Tensor(cache.extend_states(fresh.data))
        return self.pool(states, seg, from_patch)

    def global_forward(self, latents: Tensor, cache=None) -> Tensor:
        """Causal latent transformer over patch indices; rows before the new ones come from cache."""
        self._notify("global")
        c = self.config
        start = 0 if cache is None else cache.length
        rows = latents.shape[0]
        positions = np.arange(start + 1, start + rows + 1)
        mask = window_mask(start, rows, c.attn_window)
        h = latents
        for i in range(c.l_glob):
            h = self._self_attention_layer(f"global.layers.{i}.", h, positions, mask, c.heads_global, cache, i)
        if cache is not None:
            cache.advance(rows)
        return h

    def split_latent(self, latents: Tensor) -> Tensor:
        """U slices of width d_local per latent row, stacked as (rows * U, d_local)."""
        c = self.config
        projected = latents @ self.params["decoder.split_proj"]
        return projected.reshape(latents.shape[0] * c.split_count, c.d_local)

    def decoder_forward(self, tokens, latents: Tensor, masks: AttentionMaskSpec, cache=None) -> Tensor:
        """
        Logits (rows x vocab) for the decoder rows described by `masks`.

        Each layer adds cross-attention from byte states to the U slices of their assigned latent
        (no positional encoding), then runs a pre-norm self-attention block under masks.self_mask.
        """
        self._notify("decoder")
        c = self.config
        tokens = np.asarray(tokens, dtype=np.int64)
        if len(tokens) != masks.length:
            raise TensorShapeError(f"{len(tokens)} decoder inputs for {masks.length} mask rows")
        m = latents.shape[0]
        assign = np.asarray(masks.cross_assign)
        if assign.size and (assign.min() < 1 or assign.max() > m):
            raise MaskError(f"cross assignment outside [1, {m}]: {int(assign.min())}..{int(assign.max())}")

        slices = self.split_latent(latents)
        owner = np.arange(m * c.split_count) // c.split_count + 1
        cross_mask = owner[None, :] == assign[:, None]

        h = self.params["decoder.embed"][tokens]
        for i in range(c.l_dec):
            prefix = f"decoder.layers.{i}."
            h = h + self._cross_attention(prefix, h, slices, cross_mask)
            h = self._self_attention_layer(prefix, h, masks.positions, masks.self_mask, c.heads_local, cache, i)

        if cache is not None:
            cache.advance(len(tokens))
        h = rmsnorm(h, self.params["decoder.final_norm"])
        if c.tied_head:
            return h @ self.params["decoder.embed"].swap_last()
        return h @ self.params["decoder.head"]
