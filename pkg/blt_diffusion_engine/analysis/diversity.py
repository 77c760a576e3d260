import re
from typing import Dict, Iterable, Sequence

import pandas as pd
from scipy.stats import spearmanr
from tqdm import tqdm

from core.model import HierarchicalModel
from core.patcher import EntropyPatcher
from core.vocab import BOS, decode_ids
from inference.engines import generate_blt_d
from inference.trace import UnmaskingConfig

WHITESPACE = re.compile(rb"[ \t\n\r]+")


def type_token_ratio(text: bytes) -> float:
    """Unique words over total words, words being maximal runs of non-whitespace bytes."""
    words = [w for w in WHITESPACE.split(bytes(text)) if w]
    if not words:
        return 0.0
    return len(set(words)) / len(words)


def ttr_sweep(model: HierarchicalModel, patcher: EntropyPatcher, top_ps: Sequence[float] = (0.5, 0.9, 1.0),
              gammas: Sequence[float] = (0.5, 1.0, 2.0), length: int = 1024, block_size: int = 16,
              seed: int = 0, temperature: float = 1.0) -> pd.DataFrame:
    """Unconditional entropy-bounded sampling from BOS over a top_p x gamma grid."""
    rows = []
    grid = [(p, g) for p in top_ps for g in gammas]
    for top_p, gamma in tqdm(grid, desc="ttr sweep", disable=len(grid) < 2):
        cfg = UnmaskingConfig("entropy_bounded", gamma=gamma, top_p=top_p, temperature=temperature)
        output, trace = generate_blt_d(model, patcher, [BOS], length, block_size, cfg, seed=seed)
        rows.append({"top_p": top_p, "gamma": gamma, "decoder_nfes": trace.decoder_nfes,
                     "output_len": trace.output_len, "ttr": type_token_ratio(decode_ids(output))})
    return pd.DataFrame(rows)


def ttr_nfe_trend(records: Iterable[Dict]) -> Dict:
    """Spearman correlation between decoder NFEs and TTR across sweep records."""
    frame = pd.DataFrame(list(records)) if not isinstance(records, pd.DataFrame) else records
    rho, pvalue = spearmanr(frame["decoder_nfes"], frame["ttr"])
    return {"rho": float(rho), "pvalue": float(pvalue), "n": len(frame)}
