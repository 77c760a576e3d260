import os
from collections import OrderedDict
from typing import Dict, Mapping, Optional

from .errors import ConfigError
from .log import get_logger
from .model import ModelConfig

logger = get_logger("bltd.config")

# precedence layers, lowest first
DEFAULT, ENV, FILE, OVERRIDE = range(4)


class Key:
    def __init__(self, kind, default, low=None, high=None, choices=None, low_open=False, doc=""):
        self.kind = kind
        self.default = default
        self.low = low
        self.high = high
        self.choices = choices
        self.low_open = low_open
        self.doc = doc

    def parse(self, name: str, raw):
        if self.kind is str:
            value = str(raw).strip()
        else:
            try:
                value = self.kind(raw)
            except (TypeError, ValueError):
                raise ConfigError(f"{name}: expected {self.kind.__name__}, got '{raw}'")
        if self.choices is not None and value not in self.choices:
            raise ConfigError(f"{name}: '{value}' not one of {sorted(self.choices)}")
        if self.low is not None and (value < self.low or (self.low_open and value == self.low)):
            raise ConfigError(f"{name}: {value} below allowed minimum {self.low}")
        if self.high is not None and value > self.high:
            raise ConfigError(f"{name}: {value} above allowed maximum {self.high}")
        return value


SCHEMA = OrderedDict([
    # model
    ("d_local", Key(int, 64, 2, doc="byte-level width (encoder and decoder)")),
    ("d_global", Key(int, 128, 2, doc="latent width; multiple of d_local")),
    ("l_enc", Key(int, 1, 0)),
    ("l_glob", Key(int, 2, 0)),
    ("l_dec", Key(int, 2, 0)),
    ("heads_local", Key(int, 4, 1)),
    ("heads_global", Key(int, 4, 1)),
    ("rope_theta", Key(float, 500000.0, 0.0, low_open=True)),
    ("attn_window", Key(int, 512, 1, doc="encoder/global sliding window")),
    # patcher
    ("entropy_order", Key(int, 2, 0, 7)),
    ("entropy_smoothing", Key(float, 0.1, 0.0, low_open=True)),
    ("max_patch", Key(int, 8, 1)),
    ("target_patch_size", Key(float, 4.0, 1.0, low_open=True)),
    ("entropy_threshold", Key(str, "auto", doc="nats, or 'auto' to calibrate on the corpus")),
    # training
    ("steps", Key(int, 2000, 1)),
    ("batch_bytes", Key(int, 4096, 1)),
    ("window", Key(int, 256, 2, doc="bytes per training example, BOS excluded")),
    ("peak_lr", Key(float, 3e-3, 0.0)),
    ("warmup", Key(int, 100, 0)),
    ("weight_decay", Key(float, 0.1, 0.0)),
    ("clip_norm", Key(float, 1.0, 0.0, low_open=True)),
    ("beta1", Key(float, 0.9, 0.0, 1.0)),
    ("beta2", Key(float, 0.95, 0.0, 1.0)),
    ("adam_eps", Key(float, 1e-8, 0.0, low_open=True)),
    ("block_size", Key(int, 8, 1)),
    ("mask_loss_weight", Key(float, 1.0, 0.0)),
    ("seed", Key(int, 0, 0)),
    ("precision", Key(str, "float64", choices={"float64", "float32"})),
    ("log_every", Key(int, 50, 1)),
    ("checkpoint_every", Key(int, 0, 0, doc="0 writes only the final checkpoint")),
    # inference
    ("bytes_per_param", Key(int, 2, choices={1, 2, 4, 8})),
    # logging
    ("log_level", Key(str, "INFO", choices={"DEBUG", "INFO", "WARNING", "ERROR"})),
])

MODEL_KEYS = ("d_local", "d_global", "l_enc", "l_glob", "l_dec", "heads_local", "heads_global",
              "rope_theta", "attn_window")


def parse_config_text(text: str, source: str = "<config>") -> Dict[str, str]:
    entries = OrderedDict()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got '{line}'")
        key, value = (part.strip() for part in line.split("=", 1))
        entries[key] = value
    return entries


class RunConfig:
    """Merged settings: defaults < BLTD_SEED < config file < command-line overrides."""

    def __init__(self, values: Mapping[str, object], layers: Optional[Mapping[str, int]] = None):
        self.values = OrderedDict(values)
        self.layers = dict(layers or {})

    @classmethod
    def load(cls, path: Optional[str] = None, overrides: Optional[Mapping[str, object]] = None,
             env: Optional[Mapping[str, str]] = None) -> "RunConfig":
        env = os.environ if env is None else env
        raw = OrderedDict((k, spec.default) for k, spec in SCHEMA.items())
        layers = dict.fromkeys(raw, DEFAULT)
        if env.get("BLTD_SEED"):
            raw["seed"] = env["BLTD_SEED"]
            layers["seed"] = ENV
        if path is not None:
            try:
                with open(path, "r", encoding="utf-8") as f:
                    text = f.read()
            except OSError as e:
                raise ConfigError(f"cannot read config {path}: {e}") from e
            entries = parse_config_text(text, path)
            raw.update(entries)
            layers.update(dict.fromkeys(entries, FILE))
        for key, value in (overrides or {}).items():
            if value is not None:
                raw[key] = value
                layers[key] = OVERRIDE

        unknown = [k for k in raw if k not in SCHEMA]
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        config = cls({k: SCHEMA[k].parse(k, v) for k, v in raw.items()}, layers)
        config.validate()
        return config

    def validate(self):
        v = self.values
        if v["warmup"] > v["steps"]:
            # a warmup inherited from a lower layer follows a shorter run set above it
            if self.layers.get("warmup", DEFAULT) < self.layers.get("steps", DEFAULT):
                logger.info("warmup clamped to steps", extra={"warmup": v["warmup"], "steps": v["steps"]})
                v["warmup"] = v["steps"]
            else:
                raise ConfigError(f"warmup {v['warmup']} exceeds steps {v['steps']}")
        if v["target_patch_size"] > v["max_patch"]:
            raise ConfigError(f"target_patch_size {v['target_patch_size']} exceeds max_patch {v['max_patch']}")
        if v["entropy_threshold"] != "auto":
            try:
                if float(v["entropy_threshold"]) < 0:
                    raise ValueError
            except ValueError:
                raise ConfigError(f"entropy_threshold: expected a non-negative number or 'auto', "
                                  f"got '{v['entropy_threshold']}'")
        self.model_config().validate()

    def __getitem__(self, key: str):
        return self.values[key]

    @property
    def threshold(self) -> Optional[float]:
        raw = self.values["entropy_threshold"]
        return None if raw == "auto" else float(raw)

    def model_config(self) -> ModelConfig:
        return ModelConfig(seed=self.values["seed"], **{key: self.values[key] for key in MODEL_KEYS})

    def render(self) -> str:
        lines = ["# blt-diffusion-engine run configuration (key = value, '#' starts a comment)"]
        for key, spec in SCHEMA.items():
            comment = f"  # {spec.doc}" if spec.doc else ""
            lines.append(f"{key} = {self.values[key]}{comment}")
        return "\n".join(lines) + "\n"


def parse_overrides(pairs) -> Dict[str, str]:
    """--set key=value pairs."""
    out = OrderedDict()
    for pair in pairs or []:
        if "=" not in pair:
            raise ConfigError(f"--set expects key=value, got '{pair}'")
        key, value = pair.split("=", 1)
        out[key.strip()] = value.strip()
    return out
