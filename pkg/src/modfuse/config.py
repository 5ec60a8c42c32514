"""Flat ``key = value`` run configuration shared by every CLI command.

Input dimensions live once under ``data.*`` and feed both the synthetic
generator and the three encoders, so the two can never disagree.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

from .data import SynthConfig
from .encoders import AudioEncoderConfig, EEGEncoderConfig, VisionEncoderConfig
from .errors import ConfigError
from .fusion import FusionConfig
from .training import TrainConfig

SEED_ENV = "MODFUSE_SEED"

# data.<key> -> (SynthConfig field, {modality: encoder field})
DATA_DIMS = {
    "frame_count": ("frame_count", {"vision": "frame_count"}),
    "frame_height": ("frame_height", {"vision": "frame_height"}),
    "frame_width": ("frame_width", {"vision": "frame_width"}),
    "mel_bins": ("mel_bins", {"audio": "mel_bins"}),
    "time_frames": ("time_frames", {"audio": "time_frames"}),
    "eeg_channels": ("eeg_channels", {"eeg": "channels"}),
    "eeg_samples": ("eeg_samples", {"eeg": "samples"}),
}
_ENCODER_DIM_FIELDS = {enc for _, targets in DATA_DIMS.values() for enc in targets.values()}

HELP = {
    "synth.subjects": "number of synthetic subjects",
    "synth.trials_per_subject": "trials per subject (even; half are speaking trials)",
    "synth.informativeness_vision": "probability a vision sample shows its class prototype",
    "synth.informativeness_audio": "probability an audio sample shows its class prototype",
    "synth.informativeness_eeg": "probability an EEG sample shows its class prototype",
    "synth.noise": "std of additive gaussian noise",
    "synth.subject_effect": "std of the per-subject EEG channel offset",
    "synth.seed": "generator seed",
    "data.frame_count": "video frames per trial",
    "data.frame_height": "frame height in pixels",
    "data.frame_width": "frame width in pixels",
    "data.mel_bins": "spectrogram frequency bins",
    "data.time_frames": "spectrogram time frames",
    "data.eeg_channels": "EEG channels",
    "data.eeg_samples": "EEG samples per channel",
    "vision.patch_size": "square patch edge",
    "audio.patch_freq": "patch height along frequency",
    "audio.patch_time": "patch width along time",
    "eeg.kernel": "depthwise convolution kernel length",
    "eeg.stride": "depthwise convolution stride",
    "fusion.d_fuse": "width of the fused modality tokens",
    "fusion.head_count": "attention heads in the fusion layer",
    "fusion.hidden": "hidden width of the fused classifier",
    "fusion.num_classes": "number of emotion classes",
    "train.epochs_pretrain": "epochs of unimodal pretraining",
    "train.epochs_finetune": "epochs of fusion fine-tuning",
    "train.batch_size": "mini-batch size (last partial batch kept)",
    "train.lr_pretrain": "Adam learning rate, pretraining",
    "train.lr_finetune": "Adam learning rate, fine-tuning",
    "train.beta1": "Adam first-moment decay",
    "train.beta2": "Adam second-moment decay",
    "train.adam_eps": "Adam epsilon",
    "train.seed": "training seed (initialization, batching, split)",
    "train.test_fraction": "per-class share of each subject's trials held out",
    "train.repeat": "split repeat index (reshuffles the held-out trials)",
    "paths.data": "dataset directory",
    "paths.out": "output directory",
}
for _m in ("vision", "audio", "eeg"):
    HELP.update(
        {
            f"{_m}.d_model": f"{_m} encoder width",
            f"{_m}.block_count": f"{_m} transformer blocks",
            f"{_m}.head_count": f"{_m} attention heads",
            f"{_m}.d_ff": f"{_m} feed-forward width",
        }
    )

_SYNTH_OWN = [f.name for f in dataclasses.fields(SynthConfig) if f.name not in {s for s, _ in DATA_DIMS.values()}]
_ENCODER_TYPES = {"vision": VisionEncoderConfig, "audio": AudioEncoderConfig, "eeg": EEGEncoderConfig}
PATH_DEFAULTS = {"data": "data", "out": "runs"}


def _field_type(cls, name: str) -> type:
    return type(next(f.default for f in dataclasses.fields(cls) if f.name == name))


def _defaults() -> dict[str, str]:
    out = {}
    synth = SynthConfig()
    for name in _SYNTH_OWN:
        out[f"synth.{name}"] = _fmt(getattr(synth, name))
    for key, (synth_field, _) in DATA_DIMS.items():
        out[f"data.{key}"] = _fmt(getattr(synth, synth_field))
    for m, cls in _ENCODER_TYPES.items():
        enc = cls()
        for f in dataclasses.fields(cls):
            if f.name not in _ENCODER_DIM_FIELDS:
                out[f"{m}.{f.name}"] = _fmt(getattr(enc, f.name))
    for section, cls in (("fusion", FusionConfig), ("train", TrainConfig)):
        inst = cls()
        for f in dataclasses.fields(cls):
            out[f"{section}.{f.name}"] = _fmt(getattr(inst, f.name))
    for key, value in PATH_DEFAULTS.items():
        out[f"paths.{key}"] = value
    return out


def _fmt(value) -> str:
    return repr(value) if isinstance(value, float) else str(value)


def _kind(key: str) -> type:
    section, name = key.split(".", 1)
    if section == "paths":
        return str
    if section == "synth":
        return _field_type(SynthConfig, name)
    if section == "data":
        return _field_type(SynthConfig, DATA_DIMS[name][0])
    cls = {"fusion": FusionConfig, "train": TrainConfig, **_ENCODER_TYPES}[section]
    return _field_type(cls, name)


DEFAULTS = _defaults()
assert set(DEFAULTS) == set(HELP), set(DEFAULTS) ^ set(HELP)


def _convert(key: str, text: str, where: str):
    kind = _kind(key)
    try:
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
    except ValueError:
        raise ConfigError(f"{where}: {key} expects {kind.__name__}, got {text!r}") from None
    return text


@dataclass
class RunConfig:
    """Effective configuration: defaults overlaid with file values.

    ``explicit`` records which keys a config file actually set, so callers
    can apply precedence rules (e.g. for seeds).
    """

    values: dict[str, object] = field(default_factory=lambda: {k: _convert(k, v, "default") for k, v in DEFAULTS.items()})
    explicit: set[str] = field(default_factory=set)

    @classmethod
    def parse(cls, text: str, source: str = "<config>") -> "RunConfig":
        cfg = cls()
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            where = f"{source}:{lineno}"
            key, sep, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if not sep or not key:
                raise ConfigError(f"{where}: expected 'key = value', got {raw.strip()!r}")
            if key not in DEFAULTS:
                raise ConfigError(f"{where}: unknown key {key!r}")
            if key in cfg.explicit:
                raise ConfigError(f"{where}: duplicate key {key!r}")
            cfg.values[key] = _convert(key, value, where)
            cfg.explicit.add(key)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path | None) -> "RunConfig":
        if path is None:
            return cls()
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
        return cls.parse(text, str(path))

    def __getitem__(self, key: str):
        return self.values[key]

    def set(self, key: str, value) -> None:
        if key not in DEFAULTS:
            raise ConfigError(f"unknown key {key!r}")
        self.values[key] = value

    def _section(self, section: str) -> dict[str, object]:
        prefix = section + "."
        return {k[len(prefix) :]: v for k, v in self.values.items() if k.startswith(prefix)}

    def synth(self) -> SynthConfig:
        kwargs = self._section("synth")
        for key, (synth_field, _) in DATA_DIMS.items():
            kwargs[synth_field] = self.values[f"data.{key}"]
        return SynthConfig(**kwargs)

    def encoder(self, modality: str):
        kwargs = self._section(modality)
        for key, (_, targets) in DATA_DIMS.items():
            if modality in targets:
                kwargs[targets[modality]] = self.values[f"data.{key}"]
        return _ENCODER_TYPES[modality](**kwargs)

    def encoders(self) -> dict:
        return {m: self.encoder(m) for m in _ENCODER_TYPES}

    def fusion(self) -> FusionConfig:
        return FusionConfig(**self._section("fusion"))

    def train(self) -> TrainConfig:
        return TrainConfig(**self._section("train"))

    def expected_shapes(self) -> dict[str, tuple[int, ...]]:
        return {m: enc.input_shape for m, enc in self.encoders().items()}

    def validate(self) -> "RunConfig":
        self.synth().validate()
        for enc in self.encoders().values():
            enc.validate()
        self.fusion().validate()
        self.train().validate()
        return self

    def echo(self) -> dict[str, str]:
        """Every key with its effective value, in declaration order."""
        return {k: _fmt(self.values[k]) for k in DEFAULTS}

    def text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.echo().items())


def resolve_seed(flag: int | None, cfg: RunConfig, key: str, default: int = 0) -> int:
    """Seed precedence: command-line flag, then config file, then ``MODFUSE_SEED``, then default."""
    if flag is not None:
        return flag
    if key in cfg.explicit:
        return int(cfg[key])
    env = os.environ.get(SEED_ENV)
    if env is not None and env.strip():
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env!r}") from None
    return default


def documented_keys() -> list[tuple[str, str, str]]:
    """``(key, default, description)`` for every accepted key."""
    return [(k, DEFAULTS[k], HELP[k]) for k in DEFAULTS]
