import unittest
import numpy as np
import sys
import os

sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from scipy.special import logsumexp

from analysis.diversity import ttr_nfe_trend, ttr_sweep, type_token_ratio
from analysis.efficiency_metrics import (PUBLISHED_SIZES, ComponentParams, acceptance_rate, bandwidth_gb,
                                         fit_component_params, load_published_cells, memory_bandwidth,
                                         memory_decrease, reproduce_published_cells)
from analysis.likelihood import rank_candidates, sequence_logprob, stepwise_logprob
from core.attention_masks import build_inference_masks
from core.errors import ConfigError, GenerationError
from core.tensor import no_grad
from core.vocab import encode_text
from inference.trace import DecodeTrace
from tests.helpers import tiny_model, tiny_patcher


class TestMemoryBandwidth(unittest.TestCase):
    def setUp(self):
        self.one_b = PUBLISHED_SIZES["1B"]

    def test_translation_autoregressive_cell(self):
        gb = bandwidth_gb(512, 250, self.one_b)
        self.assertAlmostEqual(gb, 813.34, places=6)
        self.assertLess(abs(gb - 814.95) / 814.95, 0.005)

    def test_block_diffusion_cell(self):
        gb = bandwidth_gb(40, 16, self.one_b)
        self.assertAlmostEqual(gb, 54.368, places=6)
        self.assertLess(abs(gb - 54.48) / 54.48, 0.005)

    def test_zero_passes_cost_nothing(self):
        self.assertEqual(bandwidth_gb(0, 0, self.one_b), 0.0)

    def test_linear_in_pass_counts(self):
        a = bandwidth_gb(10, 3, self.one_b)
        b = bandwidth_gb(7, 5, self.one_b)
        self.assertAlmostEqual(bandwidth_gb(17, 8, self.one_b), a + b, places=9)
        self.assertAlmostEqual(bandwidth_gb(30, 9, self.one_b), 3 * a, places=9)

    def test_trace_wrapper(self):
        trace = DecodeTrace("ar", decoder_nfes=512, encoder_global_nfes=250)
        self.assertEqual(memory_bandwidth(trace, self.one_b), bandwidth_gb(512, 250, self.one_b))

    def test_decrease_against_baseline(self):
        self.assertAlmostEqual(memory_decrease(100.0, 40.0), 60.0)
        with self.assertRaises(ConfigError):
            memory_decrease(0.0, 1.0)

    def test_component_validation(self):
        with self.assertRaises(ConfigError):
            ComponentParams(p_dec=0, p_enc=1, p_glob=1)
        with self.assertRaises(ConfigError):
            ComponentParams(p_dec=1, p_enc=1, p_glob=1, b=3)

    def test_sizes_from_a_model(self):
        model = tiny_model()
        params = ComponentParams.from_model(model, b=4)
        counts = model.parameter_counts()
        self.assertEqual((params.p_dec, params.p_enc, params.p_glob),
                         (counts["decoder"], counts["encoder"], counts["global"]))


class TestAcceptanceRate(unittest.TestCase):
    def test_fractions(self):
        self.assertAlmostEqual(acceptance_rate(DecodeTrace("blt-s", drafted=8, accepted=7)), 0.875)
        self.assertEqual(acceptance_rate(DecodeTrace("blt-s", drafted=4, accepted=4)), 1.0)
        self.assertEqual(acceptance_rate(DecodeTrace("blt-dv", drafted=4, accepted=0)), 0.0)

    def test_nothing_drafted(self):
        with self.assertRaises(GenerationError):
            acceptance_rate(DecodeTrace("ar"))


class TestPublishedCells(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.cells = reproduce_published_cells()

    def test_every_row_is_reproduced(self):
        self.assertEqual(len(self.cells), 223)
        failing = self.cells[~self.cells["reproduced"]]
        self.assertTrue(failing.empty, msg=failing[["task", "model_size", "setting", "memory_gb"]].to_string())

    def test_stated_sizes_leave_a_visible_remainder(self):
        over = self.cells[~self.cells["stated_within_tolerance"]]
        columns = ["task", "model_size", "setting", "estimate_rel_error"]
        detail = f"{len(over)} rows over 1% at stated sizes:\n" + over[columns].to_string()
        self.assertLess(len(over), 0.1 * len(self.cells), msg=detail)
        self.assertLess(self.cells["estimate_rel_error"].max(), 0.03, msg=detail)
        self.assertTrue(over["reproduced"].all(), msg=detail)

    def test_both_model_sizes_present(self):
        self.assertEqual(set(self.cells["model_size"]), {"1B", "3B"})

    def test_fitted_sizes_are_close_to_stated(self):
        cells = load_published_cells()
        p_dec, p_enc_glob = fit_component_params(cells[cells["model_size"] == "1B"])
        stated = PUBLISHED_SIZES["1B"]
        self.assertLess(abs(p_dec - stated.p_dec) / stated.p_dec, 0.1)
        self.assertLess(abs(p_enc_glob - (stated.p_enc + stated.p_glob)) / (stated.p_enc + stated.p_glob), 0.05)


class TestTypeTokenRatio(unittest.TestCase):
    def test_examples(self):
        self.assertEqual(type_token_ratio(b"a a a a"), 0.25)
        self.assertEqual(type_token_ratio(b"a b c d"), 1.0)
        self.assertEqual(type_token_ratio(b""), 0.0)
        self.assertEqual(type_token_ratio(b" \t\n\r "), 0.0)

    def test_any_whitespace_separates(self):
        self.assertEqual(type_token_ratio(b"x\ty\nx\r\ny"), 0.5)

    def test_trend(self):
        records = [{"decoder_nfes": n, "ttr": 0.1 * n} for n in (4, 1, 3, 2)]
        trend = ttr_nfe_trend(records)
        self.assertAlmostEqual(trend["rho"], 1.0)
        self.assertEqual(trend["n"], 4)

    def test_sweep_grid(self):
        frame = ttr_sweep(tiny_model(), tiny_patcher(), top_ps=(0.9,), gammas=(0.5, 2.0), length=16, block_size=4)
        self.assertEqual(len(frame), 2)
        self.assertEqual(list(frame.columns), ["top_p", "gamma", "decoder_nfes", "output_len", "ttr"])
        self.assertTrue(frame["output_len"].between(1, 16).all())
        self.assertTrue(((frame["ttr"] >= 0) & (frame["ttr"] <= 1)).all())


class TestLikelihood(unittest.TestCase):
    def setUp(self):
        self.model = tiny_model()
        self.patcher = tiny_patcher()

    def test_single_term(self):
        x = encode_text(b"q")
        seg = self.patcher.segment(x)
        with no_grad():
            latents = self.model.global_forward(self.model.encode(x, seg))
            row = self.model.decoder_forward(x, latents, build_inference_masks(2, 0, seg)).data[0]
        expected = row[x[1]] - logsumexp(row)
        self.assertAlmostEqual(sequence_logprob(self.model, self.patcher, x), expected, places=10)

    def test_bos_alone_scores_zero(self):
        self.assertEqual(sequence_logprob(self.model, self.patcher, encode_text(b"")), 0.0)

    def test_one_pass_equals_stepwise_scoring(self):
        x = encode_text(b"scoring bytes one at a time")
        batch = sequence_logprob(self.model, self.patcher, x)
        self.assertLess(batch, 0.0)
        for use_cache in (True, False):
            self.assertAlmostEqual(stepwise_logprob(self.model, self.patcher, x, use_cache), batch, places=8)

    def test_ranking(self):
        single = rank_candidates(self.model, self.patcher, [b"only"])
        self.assertEqual(single["best"], 0)
        twins = rank_candidates(self.model, self.patcher, [b"same", b"same"])
        self.assertEqual(twins["logprobs"][0], twins["logprobs"][1])
        self.assertEqual(twins["best"], 0)
        with self.assertRaises(GenerationError):
            rank_candidates(self.model, self.patcher, [])

    def test_sequences_must_start_with_bos(self):
        with self.assertRaises(GenerationError):
            sequence_logprob(self.model, self.patcher, list(b"no bos"))


if __name__ == '__main__':
    unittest.main()
