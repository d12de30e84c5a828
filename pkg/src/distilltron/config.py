"""Run configuration: typed sections plus a flat ``section.key=value`` file format."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .errors import ConfigError


@dataclass
class AudioConfig:
    sample_rate: int = 22050
    fft_size: int = 1024
    hop: int = 256
    f_min: float = 0.0
    f_max: float = 8000.0
    griffin_lim_iters: int = 60


@dataclass
class ModelConfig:
    vocab_size: int = 12
    n_mels: int = 80
    r: int = 2
    hidden_dim: int = 32
    conv_width: int = 5
    encoder_convs: int = 3
    postnet_convs: int = 5
    location_filters: int = 8
    location_width: int = 15
    prenet_dropout: float = 0.5
    conv_dropout: float = 0.5
    prenet_dropout_at_inference: bool = False
    distill_layer: str = "lstm2"
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def validate(self):
        if min(self.vocab_size, self.n_mels, self.hidden_dim, self.location_filters) < 1:
            raise ConfigError("model dimensions must be positive")
        if self.r < 1:
            raise ConfigError("reduction factor r must be >= 1")
        if self.hidden_dim % 2:
            raise ConfigError("hidden_dim must be even (split across the two encoder directions)")
        if self.conv_width % 2 == 0 or self.location_width % 2 == 0:
            raise ConfigError("convolution widths must be odd")
        if self.distill_layer not in ("lstm1", "lstm2"):
            raise ConfigError(f"distill_layer must be lstm1 or lstm2, got {self.distill_layer!r}")
        for name in ("prenet_dropout", "conv_dropout"):
            if not 0 <= getattr(self, name) < 1:
                raise ConfigError(f"{name} must lie in [0, 1)")
        return self


@dataclass
class TrainConfig:
    distill_weight: float = 1.0          # lambda
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    lr_start: float = 1e-3
    lr_end: float = 1e-5
    decay_start_step: int = 1000
    total_steps: int = 3000
    l2_weight: float = 1e-6
    batch_size: int = 8
    stop_weight: float = 1.0
    stop_pos_weight: float = 1.0        # post-end steps already supply positives
    grad_clip: float = 1.0
    ss_p_start: float = 1.0
    ss_p_end: float = 0.5
    student_init: str = "teacher"        # or "cold"
    freeze_student_encoder: bool = False
    checkpoint_every: int = 500
    seed: int = 0

    def validate(self):
        if not 0 < self.lr_end <= self.lr_start:
            raise ConfigError("need 0 < lr_end <= lr_start")
        if self.distill_weight < 0:
            raise ConfigError("distill_weight (lambda) must be >= 0")
        if not self.decay_start_step < self.total_steps:
            raise ConfigError("decay_start_step must be < total_steps")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        for name in ("ss_p_start", "ss_p_end"):
            if not 0 <= getattr(self, name) <= 1:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if self.student_init not in ("teacher", "cold"):
            raise ConfigError("student_init must be 'teacher' or 'cold'")
        return self


@dataclass
class DataConfig:
    n_train: int = 200
    n_test: int = 40
    n_ood: int = 40
    train_min_len: int = 5
    train_max_len: int = 12
    ood_min_len: int = 20
    ood_max_len: int = 40
    min_duration: int = 6
    max_duration: int = 12
    duration_jitter: int = 1
    noise: float = 0.1
    seed: int = 0

    def validate(self):
        if self.train_min_len < 1 or self.train_min_len > self.train_max_len:
            raise ConfigError("bad training length range")
        if self.ood_min_len > self.ood_max_len:
            raise ConfigError("bad out-of-domain length range")
        if self.ood_min_len <= self.train_max_len:
            raise ConfigError("out-of-domain minimum length must exceed training maximum")
        return self


@dataclass
class EvalConfig:
    min_dwell: int = 2
    max_steps_factor: float = 2.0
    synth_seed: int = 0


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    audio: AudioConfig = field(default_factory=AudioConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self):
        self.model.validate()
        self.train.validate()
        self.data.validate()
        return self

    def to_dict(self):
        return dataclasses.asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        cfg = cls()
        for section, values in d.items():
            for key, value in values.items():
                _set(cfg, f"{section}.{key}", value)
        return cfg

    def with_overrides(self, pairs):
        cfg = dataclasses.replace(
            self, **{f.name: dataclasses.replace(getattr(self, f.name)) for f in dataclasses.fields(self)})
        for key, value in pairs:
            _set(cfg, key, value)
        return cfg


_SECTIONS = {f.name for f in dataclasses.fields(RunConfig)}


def _coerce(kind, raw, key):
    if not isinstance(raw, str):
        return kind(raw)
    try:
        if kind is bool:
            low = raw.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        return kind(raw.strip())
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind.__name__}") from None


def _set(cfg, key, value):
    section, _, name = key.partition(".")
    if section not in _SECTIONS or not name:
        raise ConfigError(f"unknown config key {key!r}")
    sec = getattr(cfg, section)
    types = {f.name: f.type for f in dataclasses.fields(sec)}
    if name not in types:
        raise ConfigError(f"unknown config key {key!r}")
    kind = {"int": int, "float": float, "bool": bool, "str": str}[types[name]]
    setattr(sec, name, _coerce(kind, value, key))


def parse_config_text(text: str, base: RunConfig | None = None) -> RunConfig:
    """Parse ``section.key=value`` lines; ``#`` starts a comment."""
    cfg = base.with_overrides([]) if base else RunConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        _set(cfg, key, value)
    return cfg


def load_config(path=None, overrides=()) -> RunConfig:
    cfg = RunConfig()
    if path:
        with open(path) as fh:
            cfg = parse_config_text(fh.read())
    return cfg.with_overrides(overrides).validate()


def format_config(cfg: RunConfig) -> str:
    lines = []
    for section, values in cfg.to_dict().items():
        for key, value in values.items():
            lines.append(f"{section}.{key}={str(value).lower() if isinstance(value, bool) else value}")
    return "\n".join(lines) + "\n"
