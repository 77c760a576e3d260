import unittest
import numpy as np
import sys
import os
import tempfile

sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from core.checkpoint import MAGIC, load_checkpoint, read_container, save_checkpoint, write_container
from core.errors import CheckpointError, ConfigError
from core.run_config import SCHEMA, RunConfig, parse_config_text, parse_overrides
from core.vocab import encode_text
from training.optimizer import TrainConfig
from tests.helpers import tiny_model, tiny_patcher

DESK_CONF = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "data", "configs", "desk.conf")


class TestCheckpoint(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.path = os.path.join(self.tmp.name, "model.bltd")
        self.model = tiny_model(no_eos=False)
        self.patcher = tiny_patcher()

    def tearDown(self):
        self.tmp.cleanup()

    def test_full_precision_round_trip_is_exact(self):
        save_checkpoint(self.path, self.model, self.patcher, value_dtype="f8")
        ckpt = load_checkpoint(self.path)
        self.assertEqual(ckpt.model.config, self.model.config)
        for name, value in self.model.state_dict().items():
            np.testing.assert_array_equal(ckpt.model.params[name].data, value)
        self.assertEqual(ckpt.patcher.threshold, self.patcher.threshold)
        self.assertEqual(ckpt.patcher.max_patch, self.patcher.max_patch)
        x = encode_text(b"round trip")
        np.testing.assert_array_equal(ckpt.patcher.segment(x).starts, self.patcher.segment(x).starts)

    def test_single_precision_values_are_close(self):
        save_checkpoint(self.path, self.model, self.patcher)
        ckpt = load_checkpoint(self.path)
        self.assertEqual(ckpt.header["value_dtype"], "f4")
        for name, value in self.model.state_dict().items():
            np.testing.assert_allclose(ckpt.model.params[name].data, value, rtol=1e-6, atol=1e-7)

    def test_extra_header_and_tensors(self):
        save_checkpoint(self.path, self.model, self.patcher, extra_header={"train.step": "7"},
                        extra_tensors={"optim.t": np.array([7], dtype=np.int64)})
        ckpt = load_checkpoint(self.path)
        self.assertEqual(ckpt.header["train.step"], "7")
        self.assertEqual(list(ckpt.extra), ["optim.t"])
        self.assertEqual(ckpt.extra["optim.t"].tolist(), [7])

    def test_container_preserves_order_and_dtypes(self):
        tensors = {"b": np.arange(6, dtype=np.int64).reshape(2, 3), "a": np.array(1.5), "c": np.ones((0, 4))}
        write_container(self.path, {"kind": "test"}, tensors, value_dtype="f8")
        header, loaded = read_container(self.path)
        self.assertEqual(header, {"kind": "test", "value_dtype": "f8"})
        self.assertEqual(list(loaded), ["b", "a", "c"])
        self.assertEqual(loaded["b"].dtype, np.int64)
        self.assertEqual(loaded["a"].shape, ())
        self.assertEqual(loaded["c"].shape, (0, 4))

    def test_corrupt_files(self):
        with open(self.path, "wb") as f:
            f.write(b"NOPE" + bytes(16))
        with self.assertRaises(CheckpointError):
            load_checkpoint(self.path)

        save_checkpoint(self.path, self.model, self.patcher)
        with open(self.path, "rb") as f:
            blob = f.read()
        self.assertTrue(blob.startswith(MAGIC))
        for damaged in (blob[:-3], blob + b"\x00"):
            with open(self.path, "wb") as f:
                f.write(damaged)
            with self.assertRaises(CheckpointError):
                load_checkpoint(self.path)

        with self.assertRaises(CheckpointError):
            load_checkpoint(os.path.join(self.tmp.name, "missing.bltd"))
        with self.assertRaises(CheckpointError):
            write_container(self.path, {}, {}, value_dtype="f2")

    def test_missing_model_tensor(self):
        tensors = dict(self.model.state_dict())
        tensors.pop("decoder.head")
        header = dict(self.model.config.to_header())
        write_container(self.path, header, tensors)
        with self.assertRaises(CheckpointError):
            load_checkpoint(self.path)


class TestRunConfig(unittest.TestCase):
    def test_defaults(self):
        config = RunConfig.load(None, env={})
        for key, spec in SCHEMA.items():
            self.assertEqual(config[key], spec.default, msg=key)
        self.assertIsNone(config.threshold)

    def test_precedence(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "run.conf")
            with open(path, "w") as f:
                f.write("steps = 300  # shorter run\nseed = 4\n\nentropy_threshold = 1.25\n")
            config = RunConfig.load(path, {"steps": "50"}, env={"BLTD_SEED": "9"})
            self.assertEqual(config["steps"], 50)
            self.assertEqual(config["warmup"], 50)
            self.assertEqual(config["seed"], 4)
            self.assertEqual(config.threshold, 1.25)
            self.assertEqual(RunConfig.load(None, env={"BLTD_SEED": "9"})["seed"], 9)

    def test_inherited_warmup_follows_a_shorter_run(self):
        config = RunConfig.load(DESK_CONF, {"steps": "50"}, env={})
        self.assertEqual((config["steps"], config["warmup"]), (50, 50))
        self.assertEqual(TrainConfig.from_run_config(config).warmup, 50)

    def test_explicit_warmup_beyond_steps_is_rejected(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "run.conf")
            with open(path, "w") as f:
                f.write("steps = 50\nwarmup = 80\n")
            with self.assertRaises(ConfigError):
                RunConfig.load(path, env={})
            with self.assertRaises(ConfigError):
                RunConfig.load(path, {"warmup": "60"}, env={})
            self.assertEqual(RunConfig.load(path, {"steps": "40"}, env={})["warmup"], 40)

    def test_rejected_settings(self):
        bad = [{"colour": "red"}, {"d_local": "wide"}, {"beta1": "1.5"}, {"precision": "float16"},
               {"warmup": "10", "steps": "5"}, {"target_patch_size": "9"}, {"entropy_threshold": "-1"},
               {"d_global": "100"}, {"clip_norm": "0"}]
        for overrides in bad:
            with self.assertRaises(ConfigError, msg=str(overrides)):
                RunConfig.load(None, overrides, env={})

    def test_render_round_trip(self):
        config = RunConfig.load(None, {"steps": "123", "entropy_threshold": "0.5"}, env={})
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "rendered.conf")
            with open(path, "w") as f:
                f.write(config.render())
            self.assertEqual(RunConfig.load(path, env={}).values, config.values)

    def test_shipped_desk_config(self):
        config = RunConfig.load(DESK_CONF, env={})
        self.assertEqual(config["precision"], "float64")
        self.assertEqual(config.model_config().rope_theta, 500000.0)

    def test_config_text_and_overrides(self):
        self.assertEqual(dict(parse_config_text("a = 1\n# note\nb=x # tail\n")), {"a": "1", "b": "x"})
        with self.assertRaises(ConfigError):
            parse_config_text("just words")
        self.assertEqual(dict(parse_overrides(["steps=5", " seed = 2"])), {"steps": "5", "seed": "2"})
        with self.assertRaises(ConfigError):
            parse_overrides(["steps"])
        with self.assertRaises(ConfigError):
            RunConfig.load("/nonexistent/run.conf", env={})


if __name__ == '__main__':
    unittest.main()
