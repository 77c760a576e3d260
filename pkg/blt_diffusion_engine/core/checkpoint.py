"""
Versioned binary checkpoint container.

    magic        4 bytes  b"BLTD"
    version      uint32   1
    header_len   uint32   byte length of the header block
    header       UTF-8    "key=value\\n" lines (model config, patcher settings, value_dtype, ...)
    count        uint32   number of tensors
    tensor       repeated:
        name_len uint16, name UTF-8,
        dtype    uint8 (0 = float32, 1 = float64, 2 = int64),
        ndim     uint8, dims uint32 * ndim,
        values   little-endian, row-major

Model parameters come first in declaration order, then the entropy-model tables.
"""

import os
import struct
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from .errors import CheckpointError, TensorShapeError
from .model import HierarchicalModel, ModelConfig
from .patcher import EntropyModel, EntropyPatcher

MAGIC = b"BLTD"
VERSION = 1

DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
VALUE_DTYPES = {"f4": 0, "f8": 1}


@dataclass
class Checkpoint:
    model: HierarchicalModel
    patcher: EntropyPatcher
    header: Dict[str, str]
    extra: Dict[str, np.ndarray] = field(default_factory=dict)


def _code_for(array: np.ndarray, value_code: int) -> int:
    return 2 if np.issubdtype(array.dtype, np.integer) else value_code


def write_container(path: str, header: Dict[str, str], tensors: Dict[str, np.ndarray], value_dtype: str = "f4"):
    if value_dtype not in VALUE_DTYPES:
        raise CheckpointError(f"unknown value dtype '{value_dtype}'")
    value_code = VALUE_DTYPES[value_dtype]
    header = dict(header, value_dtype=value_dtype)
    text = "".join(f"{k}={v}\n" for k, v in header.items()).encode("utf-8")

    chunks = [MAGIC, struct.pack("<II", VERSION, len(text)), text, struct.pack("<I", len(tensors))]
    for name, array in tensors.items():
        array = np.asarray(array)
        code = _code_for(array, value_code)
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)) + encoded)
        chunks.append(struct.pack("<BB", code, array.ndim) + struct.pack(f"<{array.ndim}I", *array.shape))
        chunks.append(np.ascontiguousarray(array, dtype=DTYPE_CODES[code]).tobytes())

    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(b"".join(chunks))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, blob: bytes, path: str):
        self.blob = blob
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError(f"{self.path}: truncated at byte {self.pos}")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_container(path: str):
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e

    r = _Reader(blob, path)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path}: not a BLTD checkpoint")
    version, header_len = r.unpack("<II")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    header = {}
    for line in r.take(header_len).decode("utf-8").splitlines():
        key, _, value = line.partition("=")
        header[key] = value

    tensors = {}
    (count,) = r.unpack("<I")
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        code, ndim = r.unpack("<BB")
        if code not in DTYPE_CODES:
            raise CheckpointError(f"{path}: tensor '{name}' has unknown dtype code {code}")
        shape = r.unpack(f"<{ndim}I")
        dtype = DTYPE_CODES[code]
        size = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(r.take(size * dtype.itemsize), dtype=dtype).reshape(shape).copy()
    if r.pos != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - r.pos} trailing bytes")
    return header, tensors


def save_checkpoint(path: str, model: HierarchicalModel, patcher: EntropyPatcher, value_dtype: str = "f4",
                    extra_header: Optional[Dict[str, str]] = None,
                    extra_tensors: Optional[Dict[str, np.ndarray]] = None):
    em = patcher.model
    header = model.config.to_header()
    header.update({
        "patcher.order": str(em.order),
        "patcher.smoothing": repr(em.smoothing),
        "patcher.threshold": repr(float(patcher.threshold)),
        "patcher.max_patch": str(patcher.max_patch),
    })
    header.update(extra_header or {})

    tensors = dict(model.state_dict())
    tensors["patcher.context_keys"] = em.context_keys
    tensors["patcher.context_counts"] = em.context_counts
    tensors["patcher.unigram_counts"] = em.unigram_counts
    tensors.update(extra_tensors or {})
    write_container(path, header, tensors, value_dtype)


def load_checkpoint(path: str) -> Checkpoint:
    header, tensors = read_container(path)
    try:
        config = ModelConfig.from_header(header)
        model = HierarchicalModel(config, state=tensors)
        em = EntropyModel(int(header["patcher.order"]), float(header["patcher.smoothing"]),
                          tensors.pop("patcher.context_keys"), tensors.pop("patcher.context_counts"),
                          tensors.pop("patcher.unigram_counts"))
        patcher = EntropyPatcher(em, float(header["patcher.threshold"]), int(header["patcher.max_patch"]))
    except (KeyError, ValueError, TensorShapeError) as e:
        raise CheckpointError(f"{path}: incomplete checkpoint ({e})") from e

    extra = {k: v for k, v in tensors.items() if k not in model.params}
    return Checkpoint(model, patcher, header, extra)
