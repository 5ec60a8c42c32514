"""Vision, audio-spectrogram and EEG transformer encoders.

All three share one tail: token embeddings plus learned positions, a
learned class token prepended at index 0, pre-norm transformer blocks, and
a final layer norm. The pooled feature is the class token's final state.

Inputs may be a single example (``[N, H, W]``, ``[F, T]``, ``[C, T]``) or a
batch with one extra leading axis; outputs follow the same convention.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .autodiff import Tensor, add, concat, conv1d_depthwise, expand, reshape, slice_axis, swap_last, transpose
from .errors import ConfigError, ShapeError
from .nn import (
    LayerNormParams,
    ParamRegistry,
    TransformerBlockParams,
    linear,
    transformer_block,
    uniform_init,
)

MODALITIES = ("vision", "audio", "eeg")
NUM_CLASSES = 5


@dataclass
class _TransformerDims:
    d_model: int = 64
    block_count: int = 2
    head_count: int = 4
    d_ff: int = 128

    def _check_dims(self) -> None:
        for f in ("d_model", "block_count", "head_count", "d_ff"):
            if getattr(self, f) < 1:
                raise ConfigError(f"{f} must be positive, got {getattr(self, f)}")
        if self.d_model % self.head_count:
            raise ConfigError(f"head_count {self.head_count} must divide d_model {self.d_model}")

    def as_dict(self) -> dict[str, int]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class VisionEncoderConfig(_TransformerDims):
    frame_count: int = 4
    frame_height: int = 32
    frame_width: int = 32
    patch_size: int = 8

    def validate(self) -> "VisionEncoderConfig":
        self._check_dims()
        if min(self.frame_count, self.frame_height, self.frame_width, self.patch_size) < 1:
            raise ConfigError("vision dimensions must be positive")
        if self.frame_height % self.patch_size or self.frame_width % self.patch_size:
            raise ConfigError(
                f"frame {self.frame_height}x{self.frame_width} not divisible by patch size {self.patch_size}"
            )
        return self

    @property
    def patches_per_frame(self) -> int:
        return (self.frame_height // self.patch_size) * (self.frame_width // self.patch_size)

    @property
    def token_count(self) -> int:
        return self.frame_count * self.patches_per_frame + 1

    @property
    def input_shape(self) -> tuple[int, ...]:
        return (self.frame_count, self.frame_height, self.frame_width)


@dataclass
class AudioEncoderConfig(_TransformerDims):
    mel_bins: int = 16
    time_frames: int = 32
    patch_freq: int = 8
    patch_time: int = 8

    def validate(self) -> "AudioEncoderConfig":
        self._check_dims()
        if min(self.mel_bins, self.time_frames, self.patch_freq, self.patch_time) < 1:
            raise ConfigError("audio dimensions must be positive")
        if self.mel_bins % self.patch_freq or self.time_frames % self.patch_time:
            raise ConfigError(
                f"spectrogram {self.mel_bins}x{self.time_frames} not divisible by patch "
                f"{self.patch_freq}x{self.patch_time}"
            )
        return self

    @property
    def token_count(self) -> int:
        return (self.mel_bins // self.patch_freq) * (self.time_frames // self.patch_time) + 1

    @property
    def input_shape(self) -> tuple[int, ...]:
        return (self.mel_bins, self.time_frames)


@dataclass
class EEGEncoderConfig(_TransformerDims):
    channels: int = 30
    samples: int = 200
    kernel: int = 11
    stride: int = 10

    def validate(self) -> "EEGEncoderConfig":
        self._check_dims()
        if min(self.channels, self.samples, self.kernel, self.stride) < 1:
            raise ConfigError("EEG dimensions must be positive")
        if self.kernel > self.samples:
            raise ConfigError(f"kernel {self.kernel} longer than signal ({self.samples} samples)")
        return self

    @property
    def conv_length(self) -> int:
        return (self.samples - self.kernel) // self.stride + 1

    @property
    def token_count(self) -> int:
        return self.conv_length + 1

    @property
    def input_shape(self) -> tuple[int, ...]:
        return (self.channels, self.samples)


CONFIG_TYPES = {"vision": VisionEncoderConfig, "audio": AudioEncoderConfig, "eeg": EEGEncoderConfig}


@dataclass
class ModalityFeature:
    modality: str
    pooled: Tensor
    tokens: Tensor


def _patch_dims(patch) -> tuple[int, int]:
    return (patch, patch) if isinstance(patch, int) else tuple(patch)


def patchify(image: Tensor, patch) -> Tensor:
    """``[..., H, W]`` to ``[..., (H/ph)*(W/pw), ph*pw]``, patches in row-major order."""
    ph, pw = _patch_dims(patch)
    *lead, H, W = image.shape
    if H % ph or W % pw:
        raise ConfigError(f"image {H}x{W} not divisible by patch {ph}x{pw}")
    k = len(lead)
    x = reshape(image, (*lead, H // ph, ph, W // pw, pw))
    x = transpose(x, list(range(k)) + [k, k + 2, k + 1, k + 3])
    return reshape(x, (*lead, (H // ph) * (W // pw), ph * pw))


def unpatchify(patches: Tensor, height: int, width: int, patch) -> Tensor:
    ph, pw = _patch_dims(patch)
    *lead, n, p2 = patches.shape
    if n != (height // ph) * (width // pw) or p2 != ph * pw:
        raise ShapeError(f"patches {patches.shape} do not tile a {height}x{width} image")
    k = len(lead)
    x = reshape(patches, (*lead, height // ph, width // pw, ph, pw))
    x = transpose(x, list(range(k)) + [k, k + 2, k + 1, k + 3])
    return reshape(x, (*lead, height, width))


def _init_tail(reg: ParamRegistry, prefix: str, cfg: _TransformerDims, n_positions: int, rng) -> None:
    d = cfg.d_model
    reg.add(f"{prefix}.pos", Tensor(rng.normal(0.0, 0.02, size=(n_positions, d))))
    reg.add(f"{prefix}.cls", Tensor(rng.normal(0.0, 0.02, size=(1, d))))
    for i in range(cfg.block_count):
        TransformerBlockParams.init(reg, f"{prefix}.block{i}", d, cfg.head_count, cfg.d_ff, rng)
    LayerNormParams.init(reg, f"{prefix}.norm", d)


def _run_tail(tokens: Tensor, reg: ParamRegistry, prefix: str, cfg: _TransformerDims) -> tuple[Tensor, Tensor]:
    """``tokens`` is ``[B, n, d]`` with positions already added."""
    B, _, d = tokens.shape
    cls = expand(reg[f"{prefix}.cls"], (B, 1, d))
    x = concat([cls, tokens], axis=1)
    for i in range(cfg.block_count):
        x = transformer_block(x, TransformerBlockParams.from_registry(reg, f"{prefix}.block{i}", cfg.head_count))
    x = LayerNormParams.from_registry(reg, f"{prefix}.norm")(x)
    pooled = reshape(slice_axis(x, 1, 0, 1), (B, d))
    return pooled, x


def _batched(x: Tensor, rank: int, expected: tuple[int, ...], name: str) -> tuple[Tensor, bool]:
    single = x.ndim == rank
    if single:
        x = reshape(x, (1, *x.shape))
    if x.ndim != rank + 1 or x.shape[1:] != expected:
        raise ShapeError(f"{name} input has shape {x.shape}, expected [batch,] {expected}")
    return x, single


def _feature(modality: str, pooled: Tensor, tokens: Tensor, single: bool) -> ModalityFeature:
    if single:
        pooled = reshape(pooled, pooled.shape[1:])
        tokens = reshape(tokens, tokens.shape[1:])
    return ModalityFeature(modality, pooled, tokens)


def init_vision(cfg: VisionEncoderConfig, rng: np.random.Generator, reg: ParamRegistry | None = None) -> ParamRegistry:
    cfg.validate()
    reg = ParamRegistry() if reg is None else reg
    p2 = cfg.patch_size**2
    reg.add("vision.patch.W", uniform_init(rng, (p2, cfg.d_model), p2))
    reg.add("vision.patch.b", uniform_init(rng, (cfg.d_model,), p2))
    reg.add("vision.frame_pos", Tensor(rng.normal(0.0, 0.02, size=(cfg.frame_count, cfg.d_model))))
    _init_tail(reg, "vision", cfg, cfg.patches_per_frame, rng)
    return reg


def encode_vision(frames: Tensor, reg: ParamRegistry, cfg: VisionEncoderConfig) -> ModalityFeature:
    """Joint transformer over the patches of every frame.

    Each patch token gets a shared linear embedding, a learned embedding for
    its position within the frame, and a learned embedding for its frame index.
    """
    x, single = _batched(frames, 3, cfg.input_shape, "vision")
    B, N = x.shape[0], cfg.frame_count
    n, d = cfg.patches_per_frame, cfg.d_model
    tok = linear(patchify(x, cfg.patch_size), reg["vision.patch.W"], reg["vision.patch.b"])
    tok = add(tok, expand(reg["vision.pos"], (B, N, n, d)))
    tok = add(tok, expand(reshape(reg["vision.frame_pos"], (N, 1, d)), (B, N, n, d)))
    pooled, seq = _run_tail(reshape(tok, (B, N * n, d)), reg, "vision", cfg)
    return _feature("vision", pooled, seq, single)


def init_audio(cfg: AudioEncoderConfig, rng: np.random.Generator, reg: ParamRegistry | None = None) -> ParamRegistry:
    cfg.validate()
    reg = ParamRegistry() if reg is None else reg
    p2 = cfg.patch_freq * cfg.patch_time
    reg.add("audio.patch.W", uniform_init(rng, (p2, cfg.d_model), p2))
    reg.add("audio.patch.b", uniform_init(rng, (cfg.d_model,), p2))
    _init_tail(reg, "audio", cfg, cfg.token_count - 1, rng)
    return reg


def encode_audio(spectrogram: Tensor, reg: ParamRegistry, cfg: AudioEncoderConfig) -> ModalityFeature:
    x, single = _batched(spectrogram, 2, cfg.input_shape, "audio")
    tok = linear(patchify(x, (cfg.patch_freq, cfg.patch_time)), reg["audio.patch.W"], reg["audio.patch.b"])
    tok = add(tok, expand(reg["audio.pos"], tok.shape))
    pooled, seq = _run_tail(tok, reg, "audio", cfg)
    return _feature("audio", pooled, seq, single)


def init_eeg(cfg: EEGEncoderConfig, rng: np.random.Generator, reg: ParamRegistry | None = None) -> ParamRegistry:
    cfg.validate()
    reg = ParamRegistry() if reg is None else reg
    reg.add("eeg.conv.kernels", uniform_init(rng, (cfg.channels, cfg.kernel), cfg.kernel))
    reg.add("eeg.proj.W", uniform_init(rng, (cfg.channels, cfg.d_model), cfg.channels))
    reg.add("eeg.proj.b", uniform_init(rng, (cfg.d_model,), cfg.channels))
    _init_tail(reg, "eeg", cfg, cfg.conv_length, rng)
    return reg


def eeg_conv(signal: Tensor, reg: ParamRegistry, cfg: EEGEncoderConfig) -> Tensor:
    """Channel-wise temporal convolution, ``[..., C, T]`` to ``[..., C, T']``."""
    return conv1d_depthwise(signal, reg["eeg.conv.kernels"], cfg.stride)


def encode_eeg(signal: Tensor, reg: ParamRegistry, cfg: EEGEncoderConfig) -> ModalityFeature:
    if cfg.kernel > signal.shape[-1]:
        raise ConfigError(f"kernel {cfg.kernel} longer than signal ({signal.shape[-1]} samples)")
    x, single = _batched(signal, 2, cfg.input_shape, "eeg")
    # one token per conv time step: the C-vector at t projected to d_model
    tok = linear(swap_last(eeg_conv(x, reg, cfg)), reg["eeg.proj.W"], reg["eeg.proj.b"])
    tok = add(tok, expand(reg["eeg.pos"], tok.shape))
    pooled, seq = _run_tail(tok, reg, "eeg", cfg)
    return _feature("eeg", pooled, seq, single)


INIT = {"vision": init_vision, "audio": init_audio, "eeg": init_eeg}
ENCODE = {"vision": encode_vision, "audio": encode_audio, "eeg": encode_eeg}


def init_encoder(modality: str, cfg, rng: np.random.Generator, reg: ParamRegistry | None = None) -> ParamRegistry:
    return INIT[modality](cfg, rng, reg)


def encode(modality: str, x: Tensor, reg: ParamRegistry, cfg) -> ModalityFeature:
    return ENCODE[modality](x, reg, cfg)


def init_head(
    reg: ParamRegistry, modality: str, d_model: int, rng: np.random.Generator, num_classes: int = NUM_CLASSES
) -> None:
    reg.add(f"{modality}.head.W", uniform_init(rng, (d_model, num_classes), d_model))
    reg.add(f"{modality}.head.b", uniform_init(rng, (num_classes,), d_model))


def attach_unimodal_head(feature: ModalityFeature, reg: ParamRegistry) -> Tensor:
    """Stage-1 classifier: class logits from the pooled feature."""
    m = feature.modality
    return linear(feature.pooled, reg[f"{m}.head.W"], reg[f"{m}.head.b"])
