import unittest
import numpy as np
import sys
import os
import tempfile

sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from analysis.efficiency_metrics import ComponentParams, bandwidth_gb
from core.errors import ConfigError
from simulation.sweep_runner import BENCH_COLUMNS, PRESETS, SweepRunner, load_sweep, parse_sweep, summarize
from tests.helpers import tiny_model, tiny_patcher

SWEEP = """
# two diffusion cells and two speculation windows
blt-d: B=4 strategy=one_step
blt-d: B=8 strategy=one_step
blt-s: k=2
blt-s: k=4
"""

PROMPTS = [b"the cat", b"a dog", b"\x01\x02"]


class TestSweepParsing(unittest.TestCase):
    def test_cells_and_labels(self):
        cells = parse_sweep(SWEEP)
        self.assertEqual([c.engine for c in cells], ["blt-d", "blt-d", "blt-s", "blt-s"])
        self.assertEqual(cells[0].options, {"B": 4, "strategy": "one_step"})
        self.assertEqual(cells[0].label, "B=4,strategy=one_step")
        self.assertEqual(parse_sweep("ar:")[0].label, "-")
        self.assertEqual(cells[0].unmasking().strategy, "one_step")
        self.assertIsNone(cells[2].unmasking())

    def test_full_grid_preset(self):
        cells = load_sweep(preset="full-grid")
        self.assertEqual(len(cells), 28)
        self.assertEqual(cells[0].engine, "ar")

    def test_sweep_file(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "sweep.txt")
            with open(path, "w") as f:
                f.write(SWEEP)
            self.assertEqual(len(load_sweep(path)), 4)
            with self.assertRaises(ConfigError):
                load_sweep(os.path.join(tmp, "missing.txt"))

    def test_rejected_lines(self):
        bad = ["blt-s k=4", "ar: k=4", "blt-s: B=4", "blt-d: B=x", "beam:", "blt-d: depth=3",
               "blt-dv: temperature=1.0", "blt-d: strategy=greedy", "# only a comment"]
        for text in bad:
            with self.assertRaises(ConfigError, msg=text):
                parse_sweep(text)
        with self.assertRaises(ConfigError):
            load_sweep(preset="fast")
        self.assertIn("full-grid", PRESETS)


class TestSweepRunner(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.model = tiny_model()
        cls.patcher = tiny_patcher()
        cls.params = ComponentParams(p_dec=160e6, p_enc=19e6, p_glob=1.28e9)
        cls.frame = SweepRunner(cls.model, cls.patcher, PROMPTS, parse_sweep(SWEEP), 16, cls.params).run()

    def test_one_row_per_cell_and_prompt(self):
        self.assertEqual(len(self.frame), 12)
        self.assertEqual(list(self.frame.columns), BENCH_COLUMNS)
        self.assertEqual(self.frame["prompt_index"].tolist(), [0, 1, 2] * 4)
        self.assertTrue((self.frame["output_len"] == 16).all())

    def test_memory_column_follows_counters(self):
        for _, row in self.frame.iterrows():
            expected = bandwidth_gb(row["decoder_nfes"], row["encoder_global_nfes"], self.params)
            self.assertAlmostEqual(row["memory_gb"], expected, places=9)

    def test_block_diffusion_pass_counts(self):
        diffusion = self.frame[self.frame["engine"] == "blt-d"]
        self.assertEqual(diffusion["decoder_nfes"].tolist(), [4, 4, 4, 2, 2, 2])
        self.assertEqual(diffusion["encoder_global_nfes"].tolist(), [5, 5, 5, 3, 3, 3])

    def test_acceptance_only_for_verifying_engines(self):
        self.assertTrue(self.frame.loc[self.frame["engine"] == "blt-d", "acceptance_rate"].isna().all())
        rates = self.frame.loc[self.frame["engine"] == "blt-s", "acceptance_rate"]
        self.assertTrue(rates.between(0.0, 1.0).all())

    def test_worker_count_does_not_change_results(self):
        threaded = SweepRunner(self.model, self.patcher, PROMPTS, parse_sweep(SWEEP), 16, self.params,
                               workers=2).run()
        np.testing.assert_array_equal(threaded[["decoder_nfes", "encoder_global_nfes"]].to_numpy(),
                                      self.frame[["decoder_nfes", "encoder_global_nfes"]].to_numpy())
        self.assertEqual(threaded["ttr"].tolist(), self.frame["ttr"].tolist())

    def test_summary_against_autoregressive_baseline(self):
        cells = parse_sweep("ar:\nblt-d: B=8 strategy=one_step")
        frame = SweepRunner(self.model, self.patcher, PROMPTS[:1], cells, 16, self.params).run()
        summary = summarize(frame)
        self.assertEqual(summary["engine"].tolist(), ["ar", "blt-d"])
        self.assertEqual(summary["memory_decrease"].iloc[0], 0.0)
        self.assertGreater(summary["memory_decrease"].iloc[1], 50.0)

    def test_summary_without_baseline(self):
        self.assertNotIn("memory_decrease", summarize(self.frame).columns)


if __name__ == '__main__':
    unittest.main()
