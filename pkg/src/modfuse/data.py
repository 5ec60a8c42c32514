"""Trial records, the synthetic tri-modal generator, on-disk manifests and subject-wise splits.

On-disk layout::

    root/manifest.txt
    root/subXX/trialYYY.eeg.mft     # [C, T]
    root/subXX/trialYYY.frm.mft     # [N, H, W]
    root/subXX/trialYYY.spc.mft     # [F, T_a], speaking trials only

Manifest lines are ``subject,trial,label,is_speaking,eeg,frames,spectrogram|-``
with paths relative to ``root``; ``#`` lines carry generator provenance.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from . import mft
from .autodiff import Tensor
from .encoders import MODALITIES, NUM_CLASSES
from .errors import ConfigError, DataError

CLASS_NAMES = ("anger", "sadness", "neutrality", "calmness", "happiness")
MAX_SUBJECTS = 42
MANIFEST_FILE = "manifest.txt"
_SUFFIX = {"eeg": "eeg", "vision": "frm", "audio": "spc"}
_TEMPLATE_STREAM = 0x7E3A


@dataclass(frozen=True)
class Trial:
    subject_id: int
    trial_id: int
    label: int
    eeg: Tensor
    frames: Tensor
    spectrogram: Tensor | None
    is_speaking: bool

    def __post_init__(self):
        where = f"subject {self.subject_id} trial {self.trial_id}"
        if not 1 <= self.subject_id <= MAX_SUBJECTS:
            raise DataError(f"{where}: subject id outside 1..{MAX_SUBJECTS}")
        if not 0 <= self.label < NUM_CLASSES:
            raise DataError(f"{where}: label {self.label} outside 0..{NUM_CLASSES - 1}")
        if (self.spectrogram is not None) != bool(self.is_speaking):
            state = "speaking" if self.is_speaking else "listening"
            have = "has" if self.spectrogram is not None else "lacks"
            raise DataError(f"{where}: {state} trial {have} a spectrogram")
        if self.eeg.ndim != 2 or self.frames.ndim != 3:
            raise DataError(f"{where}: eeg {self.eeg.shape} must be [C, T], frames {self.frames.shape} [N, H, W]")
        if self.spectrogram is not None and self.spectrogram.ndim != 2:
            raise DataError(f"{where}: spectrogram {self.spectrogram.shape} must be [F, T]")

    def modality(self, name: str) -> Tensor | None:
        return {"vision": self.frames, "audio": self.spectrogram, "eeg": self.eeg}[name]

    def has(self, name: str) -> bool:
        return self.modality(name) is not None

    @property
    def has_all_modalities(self) -> bool:
        return all(self.has(m) for m in MODALITIES)


@dataclass
class SynthConfig:
    subjects: int = MAX_SUBJECTS
    trials_per_subject: int = 200
    informativeness_vision: float = 0.5
    informativeness_audio: float = 0.5
    informativeness_eeg: float = 0.5
    noise: float = 1.0
    subject_effect: float = 0.5
    eeg_channels: int = 30
    eeg_samples: int = 200
    frame_count: int = 4
    frame_height: int = 32
    frame_width: int = 32
    mel_bins: int = 16
    time_frames: int = 32
    seed: int = 0

    def validate(self) -> "SynthConfig":
        if not 1 <= self.subjects <= MAX_SUBJECTS:
            raise ConfigError(f"subjects must be in 1..{MAX_SUBJECTS}, got {self.subjects}")
        if self.trials_per_subject < 1:
            raise ConfigError("trials_per_subject must be positive")
        for m in MODALITIES:
            v = self.informativeness(m)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"informativeness_{m} must be in [0, 1], got {v}")
        if self.noise < 0 or self.subject_effect < 0:
            raise ConfigError("noise and subject_effect must be non-negative")
        for f in ("eeg_channels", "eeg_samples", "frame_count", "frame_height", "frame_width", "mel_bins", "time_frames"):
            if getattr(self, f) < 1:
                raise ConfigError(f"{f} must be positive")
        return self

    def informativeness(self, modality: str) -> float:
        return getattr(self, f"informativeness_{modality}")

    def digest(self) -> str:
        text = "".join(f"{k}={v!r}\n" for k, v in sorted(asdict(self).items()))
        return hashlib.sha256(text.encode()).hexdigest()[:16]


@dataclass
class TrialRecord:
    subject_id: int
    trial_id: int
    label: int
    is_speaking: bool
    eeg_path: str
    frames_path: str
    spectrogram_path: str | None

    def line(self) -> str:
        spc = self.spectrogram_path or "-"
        return (
            f"{self.subject_id},{self.trial_id},{self.label},{int(self.is_speaking)},"
            f"{self.eeg_path},{self.frames_path},{spc}"
        )


@dataclass
class DatasetManifest:
    root: Path
    records: list[TrialRecord] = field(default_factory=list)
    provenance: dict[str, str] = field(default_factory=dict)

    def write(self) -> Path:
        lines = [f"# {k}={v}" for k, v in self.provenance.items()]
        lines += [r.line() for r in self.records]
        path = Path(self.root) / MANIFEST_FILE
        path.write_text("".join(line + "\n" for line in lines))
        return path


class _Templates:
    """Class-conditional prototypes shared by every subject of one dataset."""

    def __init__(self, cfg: SynthConfig):
        rng = np.random.default_rng([cfg.seed, _TEMPLATE_STREAM])
        C, T = cfg.eeg_channels, cfg.eeg_samples
        t = np.arange(T) / T
        freqs = (rng.permutation(2 * NUM_CLASSES) + 2).reshape(NUM_CLASSES, 2)
        self.eeg = np.empty((NUM_CLASSES, C, T))
        for k in range(NUM_CLASSES):
            amp = rng.uniform(0.5, 1.5, size=(C, 2))
            phase = rng.uniform(0.0, 2 * np.pi, size=(C, 2))
            self.eeg[k] = sum(amp[:, j, None] * np.sin(2 * np.pi * freqs[k, j] * t + phase[:, j, None]) for j in range(2))
        N, H, W = cfg.frame_count, cfg.frame_height, cfg.frame_width
        gh, gw = math.ceil(H / 4), math.ceil(W / 4)
        coarse = rng.normal(0.0, 1.0, size=(NUM_CLASSES, N, 4, 4))
        self.frames = np.kron(coarse, np.ones((1, 1, gh, gw)))[:, :, :H, :W]
        F, Ta = cfg.mel_bins, cfg.time_frames
        bins = np.arange(F)
        self.spectrogram = np.empty((NUM_CLASSES, F, Ta))
        for k in range(NUM_CLASSES):
            center = (k + 0.5) * F / NUM_CLASSES
            band = 1.5 * np.exp(-0.5 * ((bins - center) / max(F / 10, 0.5)) ** 2)
            rhythm = 1.0 + 0.5 * np.sin(2 * np.pi * rng.integers(1, 5) * np.arange(Ta) / Ta + rng.uniform(0, 2 * np.pi))
            self.spectrogram[k] = band[:, None] * rhythm[None, :] - 0.05 * bins[:, None]
        for name in ("eeg", "frames", "spectrogram"):
            protos = getattr(self, name)
            setattr(self, name, np.concatenate([protos, protos.mean(axis=0, keepdims=True)]))


def _subject_labels(cfg: SynthConfig, subject: int) -> tuple[np.ndarray, np.ndarray]:
    """Labels and speaking flags; each of the speaking/listening halves is class-balanced."""
    n = cfg.trials_per_subject
    speaking = np.arange(n) % 2 == 0
    rng = np.random.default_rng([cfg.seed, subject])
    labels = np.empty(n, dtype=np.int64)
    for mask in (speaking, ~speaking):
        count = int(mask.sum())
        labels[mask] = rng.permutation(np.arange(count) % NUM_CLASSES)
    return labels, speaking


def synthesize(cfg: SynthConfig) -> Iterator[Trial]:
    """Generate trials in memory, subject by subject.

    For each trial and modality, the modality shows its true class prototype
    with probability ``informativeness`` and otherwise the class-averaged
    prototype, which carries no label information. The draws are independent
    across modalities, so each modality informs on its own random subset of
    trials. Gaussian noise of std ``noise`` is added everywhere; EEG also
    carries a per-subject channel offset of scale ``subject_effect``.
    """
    cfg.validate()
    tpl = _Templates(cfg)
    for subject in range(1, cfg.subjects + 1):
        labels, speaking = _subject_labels(cfg, subject)
        srng = np.random.default_rng([cfg.seed, subject, 1])
        offset = srng.normal(0.0, cfg.subject_effect, size=(cfg.eeg_channels, 1))
        for idx in range(cfg.trials_per_subject):
            rng = np.random.default_rng([cfg.seed, subject, 2, idx])
            label = int(labels[idx])
            # index NUM_CLASSES is the label-free class-average prototype
            shown = {m: label if rng.random() < cfg.informativeness(m) else NUM_CLASSES for m in MODALITIES}
            eeg = tpl.eeg[shown["eeg"]] + offset + rng.normal(0.0, cfg.noise, size=tpl.eeg.shape[1:])
            frames = tpl.frames[shown["vision"]] + rng.normal(0.0, cfg.noise, size=tpl.frames.shape[1:])
            spec = None
            if speaking[idx]:
                spec = tpl.spectrogram[shown["audio"]] + rng.normal(0.0, cfg.noise, size=tpl.spectrogram.shape[1:])
            yield Trial(
                subject_id=subject,
                trial_id=idx + 1,
                label=label,
                eeg=Tensor(eeg),
                frames=Tensor(frames),
                spectrogram=None if spec is None else Tensor(spec),
                is_speaking=bool(speaking[idx]),
            )


def trial_paths(subject: int, trial: int, is_speaking: bool) -> tuple[str, str, str | None]:
    stem = f"sub{subject:02d}/trial{trial:03d}"
    return f"{stem}.eeg.mft", f"{stem}.frm.mft", f"{stem}.spc.mft" if is_speaking else None


def write_dataset(trials: Iterable[Trial], root: str | Path, provenance: dict[str, str] | None = None) -> DatasetManifest:
    """Write trials as MFT1 files plus a manifest under ``root``."""
    root = Path(root)
    manifest = DatasetManifest(root, provenance=dict(provenance or {}))
    for t in trials:
        eeg_p, frm_p, spc_p = trial_paths(t.subject_id, t.trial_id, t.is_speaking)
        (root / eeg_p).parent.mkdir(parents=True, exist_ok=True)
        mft.save(root / eeg_p, t.eeg)
        mft.save(root / frm_p, t.frames)
        if spc_p is not None:
            mft.save(root / spc_p, t.spectrogram)
        manifest.records.append(TrialRecord(t.subject_id, t.trial_id, t.label, t.is_speaking, eeg_p, frm_p, spc_p))
    manifest.write()
    return manifest


def generate_synthetic(cfg: SynthConfig, root: str | Path) -> DatasetManifest:
    provenance = {"generator": "modfuse-synthetic", "seed": str(cfg.seed), "config_hash": cfg.validate().digest()}
    return write_dataset(synthesize(cfg), root, provenance)


def _manifest_path(path: str | Path) -> Path:
    path = Path(path)
    return path / MANIFEST_FILE if path.is_dir() else path


def read_manifest(path: str | Path) -> DatasetManifest:
    path = _manifest_path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc.strerror}") from exc
    manifest = DatasetManifest(path.parent)
    seen: set[tuple[int, int]] = set()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            key, sep, value = line[1:].strip().partition("=")
            if sep:
                manifest.provenance[key.strip()] = value.strip()
            continue
        parts = line.split(",")
        if len(parts) != 7:
            raise DataError(f"{path}:{lineno}: expected 7 fields, got {len(parts)}")
        try:
            subject, trial, label = int(parts[0]), int(parts[1]), int(parts[2])
        except ValueError:
            raise DataError(f"{path}:{lineno}: subject, trial and label must be integers") from None
        if parts[3] not in ("0", "1"):
            raise DataError(f"{path}:{lineno}: is_speaking must be 0 or 1, got {parts[3]!r}")
        if (subject, trial) in seen:
            raise DataError(f"{path}:{lineno}: duplicate trial {trial} for subject {subject}")
        seen.add((subject, trial))
        spc = None if parts[6] == "-" else parts[6]
        manifest.records.append(TrialRecord(subject, trial, label, parts[3] == "1", parts[4], parts[5], spc))
    return manifest


def load_dataset(
    path: str | Path,
    subject: int | None = None,
    expected_shapes: dict[str, tuple[int, ...]] | None = None,
) -> list[Trial]:
    """Load (optionally one subject's) trials, validating every invariant.

    All trials must agree on per-modality shapes; ``expected_shapes`` (keyed
    by modality) pins them to a model configuration.
    """
    manifest = read_manifest(path)
    shapes = dict(expected_shapes or {})
    trials = []
    for rec in manifest.records:
        if subject is not None and rec.subject_id != subject:
            continue
        where = f"subject {rec.subject_id} trial {rec.trial_id}"
        tensors = {}
        for m, rel in (("eeg", rec.eeg_path), ("vision", rec.frames_path), ("audio", rec.spectrogram_path)):
            if rel is None:
                continue
            file = manifest.root / rel
            if not file.is_file():
                raise DataError(f"{where}: missing {m} file {file}")
            t = mft.load(file)
            want = shapes.setdefault(m, t.shape)
            if t.shape != tuple(want):
                raise DataError(f"{where}: {m} shape {t.shape} != expected {tuple(want)}")
            tensors[m] = t
        trials.append(
            Trial(
                subject_id=rec.subject_id,
                trial_id=rec.trial_id,
                label=rec.label,
                eeg=tensors["eeg"],
                frames=tensors["vision"],
                spectrogram=tensors.get("audio"),
                is_speaking=rec.is_speaking,
            )
        )
    return trials


@dataclass
class Split:
    train: list[Trial]
    test: list[Trial]


def _trial_order(t: Trial) -> int:
    return t.trial_id


def _round(x: float) -> int:
    return int(math.floor(x + 0.5))


def _test_count(n: int, fraction: float) -> int:
    return min(max(_round(n * fraction), 1), n - 1) if n >= 2 else 0


def subject_split(
    trials: Sequence[Trial],
    test_fraction: float = 0.2,
    seed: int = 0,
    require_all_modalities: bool = False,
    repeat: int = 0,
) -> dict[int, Split]:
    """Per-subject train/test split, stratified by label.

    Trials with every modality are split first; listening trials then top up
    each class to ``round(n_c * test_fraction)`` test trials. The split with
    ``require_all_modalities`` is therefore exactly the all-modality part of
    the full split under the same seed, so encoders pretrained on the full
    split never train on a fusion test trial. ``repeat`` selects an
    independent re-draw.
    """
    if not 0.0 < test_fraction < 1.0:
        raise ConfigError(f"test_fraction must be in (0, 1), got {test_fraction}")
    by_subject: dict[int, list[Trial]] = {}
    for t in trials:
        by_subject.setdefault(t.subject_id, []).append(t)
    out = {}
    for subject in sorted(by_subject):
        rng = np.random.default_rng([seed, subject, repeat])
        train, test = [], []
        short = []
        for c in range(NUM_CLASSES):
            pool = sorted((t for t in by_subject[subject] if t.label == c), key=lambda t: t.trial_id)
            full = [t for t in pool if t.has_all_modalities]
            rest = [t for t in pool if not t.has_all_modalities]
            full = [full[i] for i in rng.permutation(len(full))]
            rest = [rest[i] for i in rng.permutation(len(rest))]
            n_full = _test_count(len(full), test_fraction)
            chosen = full[:n_full]
            train_c = full[n_full:]
            if not require_all_modalities:
                n_rest = min(max(_test_count(len(pool), test_fraction) - n_full, 0), len(rest))
                chosen += rest[:n_rest]
                train_c += rest[n_rest:]
            if not chosen or not train_c:
                short.append(CLASS_NAMES[c])
            test += chosen
            train += train_c
        if short:
            raise DataError(
                f"subject {subject}: need at least one train and one test trial per class; "
                f"too few for {', '.join(short)}"
            )
        out[subject] = Split(sorted(train, key=_trial_order), sorted(test, key=_trial_order))
    return out


def shuffle_labels(trials: Sequence[Trial], seed: int) -> list[Trial]:
    """Permute labels within each subject and speaking group (class counts preserved)."""
    rng = np.random.default_rng([seed, 0x5EED])
    groups: dict[tuple[int, bool], list[int]] = {}
    for i, t in enumerate(trials):
        groups.setdefault((t.subject_id, t.is_speaking), []).append(i)
    labels = [t.label for t in trials]
    for key in sorted(groups):
        idx = groups[key]
        perm = rng.permutation(len(idx))
        for dst, src in zip(idx, perm):
            labels[dst] = trials[idx[src]].label
    return [replace(t, label=lab) for t, lab in zip(trials, labels)]


def stack_modality(trials: Sequence[Trial], modality: str) -> Tensor:
    arrays = []
    for t in trials:
        x = t.modality(modality)
        if x is None:
            raise DataError(f"subject {t.subject_id} trial {t.trial_id} has no {modality} data")
        arrays.append(x.data)
    return Tensor._wrap(np.stack(arrays))


def labels_of(trials: Sequence[Trial]) -> np.ndarray:
    return np.array([t.label for t in trials], dtype=np.int64)

