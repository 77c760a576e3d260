import numpy as np

# 256 raw bytes followed by four special symbols
BOS = 256
EOS = 257
PAD = 258
MASK = 259
VOCAB_SIZE = 260

SPECIAL_NAMES = {BOS: "BOS", EOS: "EOS", PAD: "PAD", MASK: "MASK"}

# symbols a decoder is allowed to emit
EMITTABLE = np.ones(VOCAB_SIZE, dtype=bool)
EMITTABLE[[BOS, PAD, MASK]] = False


def encode_text(data: bytes, add_bos: bool = True) -> list:
    ids = list(data)
    return [BOS] + ids if add_bos else ids


def decode_ids(ids) -> bytes:
    """Raw bytes of a sequence; special symbols are dropped."""
    return bytes(int(i) for i in ids if int(i) < 256)


def describe(symbol: int) -> str:
    if symbol in SPECIAL_NAMES:
        return SPECIAL_NAMES[symbol]
    ch = chr(symbol)
    return ch if ch.isprintable() and ch != " " else f"\\x{symbol:02x}"
