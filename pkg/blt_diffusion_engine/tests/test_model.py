import unittest
import numpy as np
import sys
import os

sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from core.attention_masks import AttentionMaskSpec, build_inference_masks, build_training_masks
from core.errors import ConfigError, MaskError, TensorShapeError
from core.model import HierarchicalModel, ModelConfig
from core.tensor import Tensor, backward, cross_entropy_from_logits, no_grad
from core.vocab import BOS, MASK, PAD, encode_text
from inference.prefix_cache import EncoderCache, LayerCache
from training.block_data import CorruptedBlocks, build_blocks, combined_loss
from tests.helpers import fixed_patcher, gradient_errors, tiny_config, tiny_model, tiny_patcher


class TestComponents(unittest.TestCase):
    def setUp(self):
        self.model = tiny_model()
        self.patcher = tiny_patcher()
        self.x = encode_text(b"hierarchical bytes")
        self.seg = self.patcher.segment(self.x)

    def test_one_latent_per_patch(self):
        latents = self.model.encode(self.x, self.seg)
        self.assertEqual(latents.shape, (self.seg.num_patches, 16))
        self.assertEqual(self.model.global_forward(latents).shape, latents.shape)

    def test_zero_global_layers_is_identity(self):
        model = HierarchicalModel(tiny_config(l_glob=0))
        latents = model.encode(self.x, self.seg)
        np.testing.assert_array_equal(model.global_forward(latents).data, latents.data)

    def test_single_byte_patch_latent_is_projected_embedding(self):
        model = HierarchicalModel(tiny_config(d_local=2, d_global=2, heads_local=1, heads_global=1, l_enc=0))
        model.params["encoder.pool_proj"].data = np.eye(2)
        seg = self.patcher.segment([BOS])
        latent = model.encode([BOS], seg).data
        np.testing.assert_allclose(latent[0], model.params["encoder.embed"].data[BOS], rtol=1e-12)

    def test_split_halves_under_identity_projection(self):
        model = HierarchicalModel(tiny_config(d_local=2, d_global=4, heads_local=1, heads_global=2))
        model.params["decoder.split_proj"].data = np.eye(4)
        slices = model.split_latent(Tensor(np.array([[1.0, 2.0, 3.0, 4.0]]))).data
        np.testing.assert_array_equal(slices, [[1.0, 2.0], [3.0, 4.0]])

    def test_single_slice_is_the_projection(self):
        model = HierarchicalModel(tiny_config(d_local=8, d_global=8))
        latent = np.random.default_rng(0).normal(size=(3, 8))
        expected = latent @ model.params["decoder.split_proj"].data
        np.testing.assert_allclose(model.split_latent(Tensor(latent)).data, expected, rtol=1e-12)

    def test_decoder_logits_cover_the_vocabulary(self):
        latents = self.model.global_forward(self.model.encode(self.x, self.seg))
        masks = build_inference_masks(len(self.x), 4, self.seg)
        logits = self.model.decoder_forward(self.x + [MASK] * 4, latents, masks)
        self.assertEqual(logits.shape, (len(self.x) + 4, 260))

    def test_cross_assignment_out_of_range_is_rejected(self):
        latents = self.model.global_forward(self.model.encode(self.x, self.seg))
        masks = build_inference_masks(len(self.x), 0, self.seg)
        masks.cross_assign[-1] = self.seg.num_patches + 1
        with self.assertRaises(MaskError):
            self.model.decoder_forward(self.x, latents, masks)

    def test_parameter_counts(self):
        counts = self.model.parameter_counts()
        self.assertEqual(sum(counts.values()), sum(p.size for p in self.model.parameters()))
        self.assertIn("decoder.head", self.model.params)
        self.assertFalse(any(name.endswith("bias") for name in self.model.params))

    def test_invalid_widths(self):
        with self.assertRaises(ConfigError):
            ModelConfig(d_local=8, d_global=12).validate()
        with self.assertRaises(ConfigError):
            ModelConfig(d_local=6, d_global=12, heads_local=2).validate()

    def test_state_shape_mismatch(self):
        state = self.model.state_dict()
        state["decoder.head"] = np.zeros((3, 3))
        with self.assertRaises(TensorShapeError):
            HierarchicalModel(self.model.config, state=dict(state))

    def test_hooks_see_each_component(self):
        seen = []
        self.model.add_hook(seen.append)
        latents = self.model.global_forward(self.model.encode(self.x, self.seg))
        self.model.decoder_forward(self.x, latents, build_inference_masks(len(self.x), 0, self.seg))
        self.model.remove_hook(seen.append)
        self.assertEqual(seen, ["encoder", "global", "decoder"])


class TestIncrementalEvaluation(unittest.TestCase):
    def setUp(self):
        self.model = tiny_model()
        self.patcher = tiny_patcher()
        self.x = encode_text(b"incremental evaluation of byte states")

    def test_cached_encoder_and_global_match_full_pass(self):
        seg = self.patcher.segment(self.x)
        with no_grad():
            full = self.model.global_forward(self.model.encode(self.x, seg)).data
            enc = EncoderCache(1, 8)
            glob = LayerCache(1)
            cut = 20
            head_seg = seg.truncate(cut)
            first = self.model.global_forward(self.model.encode(self.x[:cut], head_seg, cache=enc), cache=glob)
            closed = head_seg.num_patches - (0 if head_seg.closes_at_end else 1)
            glob.truncate(closed)
            rest = self.model.encode(self.x, seg, cache=enc, from_patch=closed + 1)
            second = self.model.global_forward(rest, cache=glob)
        np.testing.assert_allclose(first.data[:closed], full[:closed], rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(second.data, full[closed:], rtol=1e-12, atol=1e-12)

    def test_cached_decoder_rows_match_full_pass(self):
        seg = self.patcher.segment(self.x)
        masks = build_inference_masks(len(self.x), 0, seg)
        with no_grad():
            latents = self.model.global_forward(self.model.encode(self.x, seg))
            full = self.model.decoder_forward(self.x, latents, masks).data
            cache = LayerCache(1)
            head_masks = AttentionMaskSpec(masks.self_mask[:15, :15], masks.cross_assign[:15], masks.positions[:15])
            head = self.model.decoder_forward(self.x[:15], latents, head_masks, cache=cache)
            tail = self.model.decoder_forward(self.x[15:], latents, masks.rows(15), cache=cache)
        np.testing.assert_allclose(head.data, full[:15], rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(tail.data, full[15:], rtol=1e-12, atol=1e-12)


class TestTrainingPass(unittest.TestCase):
    def setUp(self):
        self.model = tiny_model(no_eos=False, init_std=0.3)
        self.patcher = fixed_patcher(3, 1e9)
        self.x = np.array(encode_text(b"leaky?"))
        self.seg = self.patcher.segment(self.x)
        self.plan = build_blocks(self.x, self.seg, 2)

    def forward(self, values):
        latents = self.model.global_forward(self.model.encode(self.x, self.seg))
        masks = build_training_masks(self.seg, self.plan)
        tokens = np.concatenate([self.x, np.asarray(values).ravel()])
        return self.model.decoder_forward(tokens, latents, masks)

    def embed_grad(self, loss):
        self.model.zero_grad()
        backward(loss)
        return self.model.params["decoder.embed"].grad

    def test_clean_loss_ignores_corrupted_inputs(self):
        values = np.full(self.plan.blocks.shape, MASK)
        values[0] = PAD
        n = len(self.x)
        logits = self.forward(values)
        grad = self.embed_grad(cross_entropy_from_logits(logits[:n - 1], self.x[1:]))
        self.assertFalse(grad[MASK].any())
        self.assertFalse(grad[PAD].any())

    def test_blocks_do_not_see_each_other(self):
        self.assertGreaterEqual(self.plan.num_blocks, 2)
        values = np.full(self.plan.blocks.shape, MASK)
        values[0] = PAD
        n = len(self.x)
        logits = self.forward(values)
        second = logits[n + 2:n + 4]
        grad = self.embed_grad(cross_entropy_from_logits(second, self.plan.blocks[1]))
        self.assertFalse(grad[PAD].any())
        self.assertTrue(grad[MASK].any())

    def test_changing_a_block_leaves_clean_logits_unchanged(self):
        n = len(self.x)
        with no_grad():
            a = self.forward(np.full(self.plan.blocks.shape, MASK)).data
            b = self.forward(self.plan.blocks).data
        np.testing.assert_array_equal(a[:n], b[:n])

    def test_parameter_gradients_match_finite_differences(self):
        rng = np.random.default_rng(0)
        corrupted = CorruptedBlocks(0.4, np.where(rng.random(self.plan.blocks.shape) < 0.5, MASK, self.plan.blocks),
                                    None)
        corrupted.mask_bitmap = corrupted.values == MASK

        def loss():
            return combined_loss(self.model, self.x, self.seg, self.plan, corrupted)[2]

        names = list(self.model.params)
        errors = gradient_errors(loss, self.model.parameters(), samples=4)
        for name, err in zip(names, errors):
            self.assertLess(err, 1e-3, msg=f"{name}: relative error {err}")


if __name__ == '__main__':
    unittest.main()
