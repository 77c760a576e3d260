"""
Bench sweeps: every (engine, config) cell of a sweep is run on every prompt and reported with
its NFE counters, estimated memory bandwidth, acceptance rate and type-token ratio.

Sweep files hold one cell per line, `engine: key=value ...`, with `#` comments:

    ar:
    blt-s: k=8
    blt-d: B=16 strategy=confidence alpha=0.5
    blt-dv: B=8 strategy=one_step
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from tqdm import tqdm

from analysis.diversity import type_token_ratio
from analysis.efficiency_metrics import ComponentParams, acceptance_rate, memory_bandwidth, memory_decrease
from core.errors import ConfigError
from core.log import get_logger
from core.model import HierarchicalModel
from core.patcher import EntropyPatcher
from core.vocab import decode_ids, encode_text
from inference.engines import ENGINES, generate
from inference.trace import UnmaskingConfig

logger = get_logger(__name__)

BENCH_COLUMNS = ["engine", "config", "decoder_nfes", "encoder_global_nfes", "memory_gb", "acceptance_rate",
                 "ttr", "prompt_index", "output_len"]

CELL_KEYS = {
    "B": int,
    "k": int,
    "strategy": str,
    "alpha": float,
    "gamma": float,
    "top_p": float,
    "temperature": float,
    "seed": int,
}

VERIFYING = ("blt-s", "blt-dv")

FULL_GRID = """
ar:
blt-s: k=4
blt-s: k=8
blt-s: k=16
""" + "".join(
    f"blt-d: B={b} {opt}\n"
    for b in (4, 8, 16)
    for opt in ("strategy=confidence alpha=0.5", "strategy=confidence alpha=0.7",
                "strategy=entropy_bounded gamma=0.8", "strategy=entropy_bounded gamma=1.0")
) + "".join(
    f"blt-dv: B={b} {opt}\n"
    for b in (4, 8, 16)
    for opt in ("strategy=confidence alpha=0.3", "strategy=entropy_bounded gamma=1.5",
                "strategy=entropy_bounded gamma=2.0", "strategy=one_step")
)

PRESETS = {"full-grid": FULL_GRID}


@dataclass
class SweepCell:
    engine: str
    options: Dict = field(default_factory=dict)

    def __post_init__(self):
        if self.engine not in ENGINES:
            raise ConfigError(f"unknown engine '{self.engine}' in sweep")
        diffusion = self.engine in ("blt-d", "blt-dv")
        if "k" in self.options and self.engine != "blt-s":
            raise ConfigError(f"k only applies to blt-s, not {self.engine}")
        if "B" in self.options and not diffusion:
            raise ConfigError(f"B only applies to diffusion engines, not {self.engine}")
        unmasking = {"strategy", "alpha", "gamma", "top_p", "temperature"} & set(self.options)
        if unmasking and not diffusion:
            raise ConfigError(f"{', '.join(sorted(unmasking))} only apply to diffusion engines, not {self.engine}")
        if self.engine == "blt-dv" and self.options.get("temperature", 0.0) > 0:
            raise ConfigError("blt-dv verification is greedy; temperature must be 0")
        self.unmasking()

    @property
    def label(self) -> str:
        return ",".join(f"{key}={value}" for key, value in self.options.items()) or "-"

    def unmasking(self) -> Optional[UnmaskingConfig]:
        if self.engine not in ("blt-d", "blt-dv"):
            return None
        keys = ("strategy", "alpha", "gamma", "top_p", "temperature")
        return UnmaskingConfig(**{k: self.options[k] for k in keys if k in self.options})


def parse_sweep(text: str) -> List[SweepCell]:
    cells = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        engine, sep, rest = line.partition(":")
        if not sep:
            raise ConfigError(f"sweep line {lineno}: expected 'engine: key=value ...', got '{raw.strip()}'")
        options = {}
        for item in rest.split():
            key, eq, value = item.partition("=")
            if not eq or key not in CELL_KEYS:
                raise ConfigError(f"sweep line {lineno}: bad option '{item}'")
            try:
                options[key] = CELL_KEYS[key](value)
            except ValueError:
                raise ConfigError(f"sweep line {lineno}: {key} expects {CELL_KEYS[key].__name__}, got '{value}'")
        cells.append(SweepCell(engine.strip(), options))
    if not cells:
        raise ConfigError("sweep is empty")
    return cells


def load_sweep(path: Optional[str] = None, preset: Optional[str] = None) -> List[SweepCell]:
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown sweep preset '{preset}'")
        return parse_sweep(PRESETS[preset])
    if path is None:
        raise ConfigError("bench needs a sweep file or a preset")
    try:
        with open(path, "r", encoding="utf-8") as f:
            return parse_sweep(f.read())
    except OSError as e:
        raise ConfigError(f"cannot read sweep file {path}: {e}")


class SweepRunner:
    def __init__(self, model: HierarchicalModel, patcher: EntropyPatcher, prompts: Sequence[bytes],
                 cells: Sequence[SweepCell], length: int, params: ComponentParams,
                 workers: int = 1, use_cache: bool = True):
        self.model = model
        self.patcher = patcher
        self.prompts = [encode_text(p) for p in prompts]
        self.cells = list(cells)
        self.length = length
        self.params = params
        self.workers = max(1, workers)
        self.use_cache = use_cache

    def run_one(self, cell_index: int, prompt_index: int) -> Dict:
        cell = self.cells[cell_index]
        opts = cell.options
        output, trace = generate(cell.engine, self.model, self.patcher, self.prompts[prompt_index], self.length,
                                 block_size=opts.get("B", 8), window=opts.get("k", 4), cfg=cell.unmasking(),
                                 seed=opts.get("seed"), use_cache=self.use_cache)
        rate = acceptance_rate(trace) if cell.engine in VERIFYING and trace.drafted else np.nan
        return {
            "engine": cell.engine,
            "config": cell.label,
            "decoder_nfes": trace.decoder_nfes,
            "encoder_global_nfes": trace.encoder_global_nfes,
            "memory_gb": memory_bandwidth(trace, self.params),
            "acceptance_rate": rate,
            "ttr": type_token_ratio(decode_ids(output[trace.prompt_len:])),
            "prompt_index": prompt_index,
            "output_len": trace.output_len,
        }

    def run(self, progress: bool = False) -> pd.DataFrame:
        jobs = [(c, p) for c in range(len(self.cells)) for p in range(len(self.prompts))]
        logger.info("bench sweep", extra={"cells": len(self.cells), "prompts": len(self.prompts),
                                          "workers": self.workers})
        with ThreadPoolExecutor(max_workers=self.workers) as pool:
            # map keeps sweep order whatever the completion order
            rows = list(tqdm(pool.map(lambda job: self.run_one(*job), jobs), total=len(jobs),
                             desc="bench", disable=not progress))
        return pd.DataFrame(rows, columns=BENCH_COLUMNS)


def summarize(frame: pd.DataFrame) -> pd.DataFrame:
    """Per-cell means, with the bandwidth saving against the ar cell when one was run."""
    summary = (frame.groupby(["engine", "config"], sort=False)
               [["decoder_nfes", "encoder_global_nfes", "memory_gb", "acceptance_rate", "ttr", "output_len"]]
               .mean().reset_index())
    baseline = summary.loc[summary["engine"] == "ar", "memory_gb"]
    if not baseline.empty:
        summary["memory_decrease"] = [memory_decrease(float(baseline.iloc[0]), gb) for gb in summary["memory_gb"]]
    return summary
