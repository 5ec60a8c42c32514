"""Two-stage training: per-modality pretraining, then frozen-encoder fusion fine-tuning."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import Tape, Tensor
from .data import Trial, labels_of, stack_modality
from .encoders import CONFIG_TYPES, MODALITIES, NUM_CLASSES, attach_unimodal_head, encode, init_encoder, init_head
from .errors import ConfigError, DataError, DivergenceError, ModfuseError, ShapeError
from .fusion import PREFIX as FUSION_PREFIX
from .fusion import FusionConfig, FusionState, fusion_logits, init_fusion
from .nn import ParamRegistry, cross_entropy

log = logging.getLogger(__name__)

META_FILE = "meta.txt"
PARAMS_DIR = "params"
EVAL_BATCH = 64


@dataclass
class TrainConfig:
    epochs_pretrain: int = 10
    epochs_finetune: int = 30
    batch_size: int = 16
    lr_pretrain: float = 1e-3
    lr_finetune: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    test_fraction: float = 0.2
    repeat: int = 0

    def validate(self) -> "TrainConfig":
        if min(self.epochs_pretrain, self.epochs_finetune, self.batch_size) < 1:
            raise ConfigError("epochs and batch_size must be at least 1")
        if self.lr_pretrain <= 0 or self.lr_finetune <= 0:
            raise ConfigError("learning rates must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1) or self.adam_eps <= 0:
            raise ConfigError("need 0 <= beta < 1 and adam_eps > 0")
        if not 0 < self.test_fraction < 1:
            raise ConfigError("test_fraction must be in (0, 1)")
        return self


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(
    registry: ParamRegistry,
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update of every unfrozen parameter, in place.

    Frozen entries are skipped even if a gradient is supplied for them.
    """
    state.step += 1
    bc1 = 1.0 - beta1**state.step
    bc2 = 1.0 - beta2**state.step
    for name, p in registry.trainable():
        if name not in grads:
            raise DataError(f"no gradient supplied for trainable parameter {name}")
        g = np.asarray(grads[name])
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter is {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        update = (lr / bc1) * m / (np.sqrt(v / bc2) + eps)
        p.data = (p.data - update).astype(p.data.dtype)


def _fmt(value) -> str:
    return repr(float(value)) if isinstance(value, float) else str(value)


def config_lines(prefix: str, cfg) -> dict[str, str]:
    return {f"{prefix}.{f.name}": _fmt(getattr(cfg, f.name)) for f in fields(cfg)}


def config_from_lines(cls, prefix: str, values: dict[str, str]):
    kwargs = {}
    for f in fields(cls):
        key = f"{prefix}.{f.name}"
        if key in values:
            kind = type(f.default)
            kwargs[f.name] = kind(float(values[key])) if kind is int else kind(values[key])
    return cls(**kwargs)


@dataclass
class Checkpoint:
    kind: str
    registry: ParamRegistry
    encoders: dict[str, object]
    train: TrainConfig
    metrics: dict[str, float] = field(default_factory=dict)
    modality: str | None = None
    fusion: FusionConfig | None = None
    history: list[float] = field(default_factory=list)
    echo: dict[str, str] = field(default_factory=dict)
    subject: int | None = None

    @property
    def seed(self) -> int:
        return self.train.seed

    @property
    def d_model(self) -> int:
        dims = {cfg.d_model for cfg in self.encoders.values()}
        if len(dims) != 1:
            raise ConfigError(f"encoders disagree on d_model: {sorted(dims)}")
        return dims.pop()

    def meta_lines(self) -> list[str]:
        entries = {
            "kind": self.kind,
            "modality": self.modality or "-",
            "subject": "-" if self.subject is None else str(self.subject),
            "seed": str(self.seed),
        }
        for m, cfg in self.encoders.items():
            entries.update(config_lines(m, cfg))
        if self.fusion is not None:
            entries.update(config_lines("fusion", self.fusion))
        entries.update(config_lines("train", self.train))
        entries.update({f"metric.{k}": _fmt(float(v)) for k, v in self.metrics.items()})
        entries["history.loss"] = ",".join(_fmt(float(x)) for x in self.history) or "-"
        entries.update({f"config.{k}": v for k, v in self.echo.items()})
        return [f"{k} = {v}" for k, v in entries.items()]

    def save(self, directory: str | Path) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        self.registry.save(directory / PARAMS_DIR)
        (directory / META_FILE).write_text("".join(line + "\n" for line in self.meta_lines()))
        return directory

    @classmethod
    def load(cls, directory: str | Path) -> "Checkpoint":
        directory = Path(directory)
        meta_path = directory / META_FILE
        try:
            text = meta_path.read_text()
        except OSError as exc:
            raise DataError(f"cannot read checkpoint metadata {meta_path}: {exc.strerror}") from exc
        values: dict[str, str] = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            key, sep, value = line.partition(" = ")
            if not sep:
                raise DataError(f"{meta_path}:{lineno}: malformed line {line!r}")
            values[key.strip()] = value.strip()
        kind = values.get("kind")
        if kind not in ("pretrain", "finetune"):
            raise DataError(f"{meta_path}: unknown checkpoint kind {kind!r}")
        try:
            encoders = {
                m: config_from_lines(CONFIG_TYPES[m], m, values)
                for m in MODALITIES
                if any(k.startswith(f"{m}.") for k in values)
            }
            modality = values.get("modality", "-")
            history = values.get("history.loss", "-")
            subject = values.get("subject", "-")
            return cls(
                kind=kind,
                registry=ParamRegistry.load(directory / PARAMS_DIR),
                encoders=encoders,
                train=config_from_lines(TrainConfig, "train", values),
                metrics={k[len("metric.") :]: float(v) for k, v in values.items() if k.startswith("metric.")},
                modality=None if modality == "-" else modality,
                fusion=config_from_lines(FusionConfig, "fusion", values) if kind == "finetune" else None,
                history=[] if history == "-" else [float(x) for x in history.split(",")],
                echo={k[len("config.") :]: v for k, v in values.items() if k.startswith("config.")},
                subject=None if subject == "-" else int(subject),
            )
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ModfuseError):
                raise
            raise DataError(f"{meta_path}: corrupt checkpoint metadata ({exc})") from exc


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def _check_loss(value: float, epoch: int, step: int) -> None:
    if not math.isfinite(value):
        raise DivergenceError(f"non-finite loss {value} at epoch {epoch}, step {step}")


def _fit(
    registry: ParamRegistry,
    loss_fn,
    n: int,
    cfg: TrainConfig,
    epochs: int,
    lr: float,
    rng: np.random.Generator,
) -> tuple[float, list[float]]:
    """Shared mini-batch Adam loop. ``loss_fn(index_array)`` builds a scalar loss."""
    trainable = registry.trainable()
    chunks = [np.arange(s, min(s + EVAL_BATCH, n)) for s in range(0, n, EVAL_BATCH)]
    try:
        initial = sum(loss_fn(idx).item() * len(idx) for idx in chunks) / n
    except FloatingPointError as exc:
        raise DivergenceError(f"{exc} before training") from exc
    _check_loss(initial, 0, 0)
    state = AdamState()
    history = []
    for epoch in range(1, epochs + 1):
        total, count = 0.0, 0
        for step, idx in enumerate(_batches(n, cfg.batch_size, rng), 1):
            try:
                with Tape() as tape:
                    loss = loss_fn(idx)
            except FloatingPointError as exc:
                raise DivergenceError(f"{exc} at epoch {epoch}, step {step}") from exc
            value = loss.item()
            _check_loss(value, epoch, step)
            grads = tape.backward(loss, wrt=[t for _, t in trainable])
            adam_step(
                registry,
                {name: grads[t.node_id].data for name, t in trainable},
                state,
                lr,
                cfg.beta1,
                cfg.beta2,
                cfg.adam_eps,
            )
            total += value * len(idx)
            count += len(idx)
        history.append(total / count)
        log.debug("epoch %d mean loss %.4f", epoch, history[-1])
    return initial, history


def _with_modality(trials: Sequence[Trial], modality: str) -> list[Trial]:
    return [t for t in trials if t.has(modality)]


def pretrain_modality(
    train: Sequence[Trial],
    val: Sequence[Trial],
    modality: str,
    encoder_cfg,
    cfg: TrainConfig,
    num_classes: int = NUM_CLASSES,
) -> Checkpoint:
    """Stage 1: train one encoder plus a linear head on its own modality."""
    if modality not in MODALITIES:
        raise ConfigError(f"unknown modality {modality!r}")
    cfg.validate()
    encoder_cfg.validate()
    if not train:
        raise DataError("empty training set")
    train = _with_modality(train, modality)
    val = _with_modality(val, modality)
    if not train:
        raise DataError(f"no training trial carries {modality} data")
    rng = np.random.default_rng(cfg.seed)
    reg = init_encoder(modality, encoder_cfg, rng)
    init_head(reg, modality, encoder_cfg.d_model, rng, num_classes)
    x = stack_modality(train, modality)
    y = labels_of(train)

    def loss_fn(idx):
        feat = encode(modality, Tensor._wrap(x.data[idx]), reg, encoder_cfg)
        return cross_entropy(attach_unimodal_head(feat, reg), y[idx])

    initial, history = _fit(reg, loss_fn, len(train), cfg, cfg.epochs_pretrain, cfg.lr_pretrain, rng)
    ckpt = Checkpoint("pretrain", reg, {modality: encoder_cfg}, cfg, modality=modality, history=history)
    ckpt.metrics = {"loss_init": initial, "loss_final": history[-1], "train_acc": evaluate(ckpt, train)}
    if val:
        ckpt.metrics["val_acc"] = evaluate(ckpt, val)
    return ckpt


def encoder_features(ckpt: Checkpoint, trials: Sequence[Trial], modality: str) -> Tensor:
    """Pooled features ``[n, d_model]`` from a (frozen) encoder; no tape recorded."""
    cfg = ckpt.encoders[modality]
    out = []
    for start in range(0, len(trials), EVAL_BATCH):
        x = stack_modality(trials[start : start + EVAL_BATCH], modality)
        out.append(encode(modality, x, ckpt.registry, cfg).pooled.data)
    return Tensor._wrap(np.concatenate(out))


def finetune_fusion(
    train: Sequence[Trial],
    val: Sequence[Trial],
    encoders: dict[str, Checkpoint],
    fusion_cfg: FusionConfig,
    cfg: TrainConfig,
) -> Checkpoint:
    """Stage 2: freeze the three pretrained encoders and train only ``fusion.*``.

    Unimodal heads are dropped. Because the encoders are frozen their pooled
    features are computed once up front.
    """
    cfg.validate()
    fusion_cfg.validate()
    missing = [m for m in MODALITIES if m not in encoders]
    if missing:
        raise ConfigError(f"missing encoder checkpoint for {', '.join(missing)}")
    dims = {m: encoders[m].encoders[m].d_model for m in MODALITIES}
    if len(set(dims.values())) != 1:
        raise ConfigError(f"encoder d_model mismatch: {dims}")
    train = [t for t in train if t.has_all_modalities]
    val = [t for t in val if t.has_all_modalities]
    if not train:
        raise DataError("no training trial has all three modalities")

    reg = ParamRegistry()
    for m in MODALITIES:
        for name, t in encoders[m].registry.items():
            if name.startswith(f"{m}.") and not name.startswith(f"{m}.head."):
                reg.add(name, Tensor(t.data), frozen=True)
    rng = np.random.default_rng(cfg.seed)
    init_fusion(dims["vision"], fusion_cfg, rng, reg)
    if any(not name.startswith(FUSION_PREFIX) for name, _ in reg.trainable()):
        raise ConfigError("only fusion parameters may be trainable during fine-tuning")

    ckpt = Checkpoint(
        "finetune",
        reg,
        {m: encoders[m].encoders[m] for m in MODALITIES},
        cfg,
        fusion=fusion_cfg,
    )
    feats = [encoder_features(ckpt, train, m).data for m in MODALITIES]
    y = labels_of(train)
    state = FusionState.from_registry(reg, fusion_cfg)

    def loss_fn(idx):
        hv, ha, he = (Tensor._wrap(f[idx]) for f in feats)
        return cross_entropy(fusion_logits(hv, ha, he, state), y[idx])

    initial, ckpt.history = _fit(reg, loss_fn, len(train), cfg, cfg.epochs_finetune, cfg.lr_finetune, rng)
    ckpt.metrics = {"loss_init": initial, "loss_final": ckpt.history[-1], "train_acc": evaluate(ckpt, train)}
    if val:
        ckpt.metrics["val_acc"] = evaluate(ckpt, val)
    return ckpt


def predict_logits(ckpt: Checkpoint, trials: Sequence[Trial]) -> np.ndarray:
    if ckpt.kind == "pretrain":
        m = ckpt.modality
        cfg = ckpt.encoders[m]
        out = []
        for start in range(0, len(trials), EVAL_BATCH):
            x = stack_modality(trials[start : start + EVAL_BATCH], m)
            out.append(attach_unimodal_head(encode(m, x, ckpt.registry, cfg), ckpt.registry).data)
        return np.concatenate(out)
    state = FusionState.from_registry(ckpt.registry, ckpt.fusion)
    hv, ha, he = (encoder_features(ckpt, trials, m) for m in MODALITIES)
    return fusion_logits(hv, ha, he, state).data


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    """Fraction of rows whose argmax (lowest index on ties) equals the label."""
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def evaluate(ckpt: Checkpoint, trials: Sequence[Trial]) -> float:
    if not trials:
        raise DataError("cannot evaluate on an empty split")
    return accuracy(predict_logits(ckpt, trials), labels_of(trials))
