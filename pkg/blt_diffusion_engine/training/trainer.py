import sys
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from core.checkpoint import load_checkpoint, save_checkpoint
from core.errors import CorpusError, DivergenceError, NumericalError
from core.log import get_logger
from core.model import HierarchicalModel
from core.patcher import EntropyPatcher
from core.tensor import backward
from core.vocab import BOS
from training.block_data import build_blocks, combined_loss, corrupt, sample_timestep
from training.optimizer import AdamW, TrainConfig, clip_grad_norm, lr_at

logger = get_logger(__name__)

LOSS_COLUMNS = ["step", "l_clean", "l_mask", "l_total", "lr"]


class Trainer:
    def __init__(self, model: HierarchicalModel, patcher: EntropyPatcher, cfg: TrainConfig, corpus: bytes):
        if not corpus:
            raise CorpusError("training corpus is empty")
        self.model = model
        self.patcher = patcher
        self.cfg = cfg
        self.corpus = np.frombuffer(bytes(corpus), dtype=np.uint8).astype(np.int64)
        self.optimizer = AdamW(model.params, cfg)
        self.step = 0
        self.records: List[Dict] = []

    def example(self, step: int, index: int) -> Tuple[np.ndarray, np.random.Generator]:
        """BOS + one corpus window, drawn from the (seed, step, index) stream."""
        rng = np.random.default_rng([self.cfg.seed, step, index])
        window = self.cfg.window
        if len(self.corpus) <= window:
            chunk = self.corpus
        else:
            offset = int(rng.integers(0, len(self.corpus) - window + 1))
            chunk = self.corpus[offset:offset + window]
        return np.concatenate([[BOS], chunk]), rng

    def batch_loss(self, step: int):
        """Accumulate gradients of the batch-mean L_total; returns batch-mean loss terms."""
        cfg = self.cfg
        count = cfg.examples_per_step
        totals = np.zeros(3)
        for index in range(count):
            x, rng = self.example(step, index)
            seg = self.patcher.segment(x)
            plan = build_blocks(x, seg, cfg.block_size)
            corrupted = corrupt(plan, sample_timestep(rng), rng)
            l_clean, l_mask, l_total = combined_loss(self.model, x, seg, plan, corrupted, cfg.mask_loss_weight)
            backward(l_total * (1.0 / count))
            totals += [float(l_clean.data), float(l_mask.data), float(l_total.data)]
        return totals / count

    def train_step(self) -> Dict:
        step = self.step
        lr = lr_at(step + 1, self.cfg)
        self.model.zero_grad()
        l_clean, l_mask, l_total = self.batch_loss(step)
        clip_grad_norm(self.model.params, self.cfg.clip_norm)
        self.optimizer.step(lr)
        self.step += 1
        record = {"step": step, "l_clean": l_clean, "l_mask": l_mask, "l_total": l_total, "lr": lr}
        self.records.append(record)
        return record

    def train(self, checkpoint_path: Optional[str] = None, state_path: Optional[str] = None,
              progress: Optional[bool] = None) -> pd.DataFrame:
        cfg = self.cfg
        if progress is None:
            progress = sys.stderr.isatty()
        bar = tqdm(total=cfg.steps, initial=self.step, desc="train", disable=not progress)
        while self.step < cfg.steps:
            try:
                record = self.train_step()
            except NumericalError as e:
                # parameters still hold the last completed update
                if checkpoint_path:
                    save_checkpoint(checkpoint_path, self.model, self.patcher)
                raise DivergenceError(f"training diverged at step {self.step}: {e}", self.step, checkpoint_path)
            bar.update(1)
            if record["step"] % cfg.log_every == 0 or self.step == cfg.steps:
                logger.info("train step", extra=record)
            if state_path and cfg.checkpoint_every and self.step % cfg.checkpoint_every == 0:
                self.save_state(state_path)
        bar.close()
        if checkpoint_path:
            save_checkpoint(checkpoint_path, self.model, self.patcher)
        return self.loss_frame()

    def loss_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.records, columns=LOSS_COLUMNS)

    def save_state(self, path: str):
        """Full-precision resume container: parameters, AdamW moments, step and loss history."""
        history = self.loss_frame()
        extra = self.optimizer.state_tensors()
        for column in LOSS_COLUMNS[1:]:
            extra[f"history.{column}"] = history[column].to_numpy(dtype=np.float64)
        save_checkpoint(path, self.model, self.patcher, value_dtype="f8",
                        extra_header={"train.step": str(self.step), "train.adam_t": str(self.optimizer.t)},
                        extra_tensors=extra)

    @classmethod
    def resume(cls, path: str, cfg: TrainConfig, corpus: bytes) -> "Trainer":
        ckpt = load_checkpoint(path)
        trainer = cls(ckpt.model, ckpt.patcher, cfg, corpus)
        trainer.step = int(ckpt.header["train.step"])
        trainer.optimizer.load_state_tensors(ckpt.extra, int(ckpt.header["train.adam_t"]))
        steps = np.arange(trainer.step)
        columns = {c: ckpt.extra[f"history.{c}"] for c in LOSS_COLUMNS[1:]}
        trainer.records = [{"step": int(s), **{c: float(columns[c][s]) for c in columns}} for s in steps]
        logger.info("resumed training", extra={"path": path, "step": trainer.step})
        return trainer


def train(model: HierarchicalModel, patcher: EntropyPatcher, corpus: bytes, cfg: TrainConfig,
          checkpoint_path: Optional[str] = None, state_path: Optional[str] = None) -> pd.DataFrame:
    return Trainer(model, patcher, cfg, corpus).train(checkpoint_path, state_path)
