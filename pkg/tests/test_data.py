import hashlib
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from modfuse.autodiff import Tensor
from modfuse.data import (
    MAX_SUBJECTS,
    SynthConfig,
    Trial,
    generate_synthetic,
    labels_of,
    load_dataset,
    read_manifest,
    shuffle_labels,
    stack_modality,
    subject_split,
    synthesize,
)
from modfuse.encoders import MODALITIES, NUM_CLASSES
from modfuse.errors import ConfigError, DataError

import tiny


def small(**kw):
    base = dict(subjects=2, trials_per_subject=40, eeg_channels=4, eeg_samples=24, frame_count=2,
                frame_height=8, frame_width=8, mel_bins=8, time_frames=8)
    base.update(kw)
    return SynthConfig(**base)


def tree_digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def nearest_mean_accuracy(trials, modality):
    """Held-out accuracy of a nearest-class-mean classifier: a simple signal oracle."""
    x = stack_modality(trials, modality).data.reshape(len(trials), -1)
    y = labels_of(trials)
    half = len(trials) // 2
    means = np.stack([x[:half][y[:half] == c].mean(0) for c in range(NUM_CLASSES)])
    dist = ((x[half:, None, :] - means[None]) ** 2).sum(-1)
    return float(np.mean(dist.argmin(1) == y[half:]))


class TestTrial:
    def _tensors(self):
        return Tensor(np.zeros((2, 4))), Tensor(np.zeros((1, 2, 2))), Tensor(np.zeros((2, 2)))

    def test_speaking_needs_spectrogram(self):
        eeg, frm, _ = self._tensors()
        with pytest.raises(DataError, match="speaking"):
            Trial(1, 1, 0, eeg, frm, None, True)

    def test_listening_forbids_spectrogram(self):
        eeg, frm, spc = self._tensors()
        with pytest.raises(DataError, match="listening"):
            Trial(1, 1, 0, eeg, frm, spc, False)

    @pytest.mark.parametrize("subject,label", [(0, 0), (MAX_SUBJECTS + 1, 0), (1, NUM_CLASSES), (1, -1)])
    def test_id_ranges(self, subject, label):
        eeg, frm, _ = self._tensors()
        with pytest.raises(DataError):
            Trial(subject, 1, label, eeg, frm, None, False)

    def test_modality_access(self):
        eeg, frm, spc = self._tensors()
        t = Trial(1, 1, 0, eeg, frm, spc, True)
        assert t.has_all_modalities and t.modality("audio") is spc


class TestSynthesize:
    def test_counts_and_presence_law(self):
        trials = list(synthesize(small()))
        assert len(trials) == 2 * 40
        for t in trials:
            assert t.has("audio") == t.is_speaking
            assert t.has("vision") and t.has("eeg")
        assert sum(t.is_speaking for t in trials) == 40

    @pytest.mark.invariant
    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 3), st.integers(5, 30).map(lambda n: 2 * n), st.integers(0, 10_000))
    def test_presence_law_property(self, subjects, n, seed):
        trials = list(synthesize(small(subjects=subjects, trials_per_subject=n, seed=seed)))
        assert len(trials) == subjects * n
        for t in trials:
            assert (t.spectrogram is not None) == t.is_speaking == t.has_all_modalities
            assert t.has("vision") and t.has("eeg")
        for s in range(1, subjects + 1):
            assert sum(t.is_speaking for t in trials if t.subject_id == s) == n // 2

    def test_class_balance_within_speaking_and_listening(self):
        trials = list(synthesize(small(subjects=1, trials_per_subject=100)))
        for speaking in (True, False):
            counts = Counter(t.label for t in trials if t.is_speaking == speaking)
            assert set(counts.values()) == {10}

    def test_shapes(self):
        t = next(synthesize(small()))
        assert t.eeg.shape == (4, 24) and t.frames.shape == (2, 8, 8) and t.spectrogram.shape == (8, 8)

    def test_deterministic(self):
        a, b = list(synthesize(small(seed=5))), list(synthesize(small(seed=5)))
        for x, y in zip(a, b):
            assert x.label == y.label
            assert x.eeg.data.tobytes() == y.eeg.data.tobytes()

    def test_seed_changes_data(self):
        a, b = next(synthesize(small(seed=1))), next(synthesize(small(seed=2)))
        assert not np.array_equal(a.frames.data, b.frames.data)

    def test_informativeness_zero_is_label_free(self):
        # with no informative trials every sample is class-mean prototype + noise
        trials = list(synthesize(small(subjects=1, trials_per_subject=400, noise=0.0,
                                       informativeness_vision=0.0, informativeness_eeg=0.0)))
        frames = stack_modality(trials, "vision").data
        assert np.ptp(frames, axis=0).max() == 0.0

    @pytest.mark.parametrize("modality", ["vision", "eeg"])
    def test_signal_grows_with_informativeness(self, modality):
        accs = []
        for level in (0.0, 0.5, 1.0):
            runs = []
            for seed in range(3):
                cfg = small(subjects=1, trials_per_subject=400, noise=1.0, seed=seed, **{f"informativeness_{modality}": level})
                runs.append(nearest_mean_accuracy(list(synthesize(cfg)), modality))
            accs.append(np.mean(runs))
        assert accs[0] < 0.35
        assert accs[0] < accs[1] < accs[2]
        assert accs[2] > 0.9

    @pytest.mark.parametrize("field,value", [("subjects", 0), ("subjects", 43), ("noise", -1.0), ("informativeness_audio", 1.5)])
    def test_validation(self, field, value):
        with pytest.raises(ConfigError):
            small(**{field: value}).validate()


class TestDisk:
    def test_round_trip(self, tmp_path):
        cfg = small(seed=3)
        generate_synthetic(cfg, tmp_path)
        loaded = load_dataset(tmp_path)
        original = list(synthesize(cfg))
        assert len(loaded) == len(original)
        for a, b in zip(loaded, original):
            assert (a.subject_id, a.trial_id, a.label, a.is_speaking) == (b.subject_id, b.trial_id, b.label, b.is_speaking)
            for m in MODALITIES:
                if b.has(m):
                    assert a.modality(m).data.tobytes() == b.modality(m).data.astype(np.float32).tobytes()

    def test_layout_and_provenance(self, tmp_path):
        generate_synthetic(small(seed=9), tmp_path)
        assert (tmp_path / "sub01" / "trial001.spc.mft").is_file()
        assert not (tmp_path / "sub01" / "trial002.spc.mft").exists()
        manifest = read_manifest(tmp_path)
        assert manifest.provenance["seed"] == "9"
        assert len(manifest.provenance["config_hash"]) == 16

    def test_same_seed_hash_equal_trees(self, tmp_path):
        generate_synthetic(small(seed=7), tmp_path / "a")
        generate_synthetic(small(seed=7), tmp_path / "b")
        assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")

    def test_subject_filter(self, tmp_path):
        generate_synthetic(small(), tmp_path)
        trials = load_dataset(tmp_path, subject=2)
        assert {t.subject_id for t in trials} == {2} and len(trials) == 40

    def test_expected_shapes_enforced(self, tmp_path):
        generate_synthetic(small(), tmp_path)
        with pytest.raises(DataError, match="shape"):
            load_dataset(tmp_path, expected_shapes={"eeg": (4, 30)})

    def test_missing_file(self, tmp_path):
        generate_synthetic(small(subjects=1), tmp_path)
        (tmp_path / "sub01" / "trial003.frm.mft").unlink()
        with pytest.raises(DataError, match="missing"):
            load_dataset(tmp_path)

    def test_corrupt_manifest(self, tmp_path):
        generate_synthetic(small(subjects=1), tmp_path)
        with open(tmp_path / "manifest.txt", "a") as fh:
            fh.write("1,2,3\n")
        with pytest.raises(DataError, match="manifest.txt:"):
            read_manifest(tmp_path)

    def test_duplicate_trial_in_manifest(self, tmp_path):
        generate_synthetic(small(subjects=1), tmp_path)
        lines = (tmp_path / "manifest.txt").read_text().splitlines()
        (tmp_path / "manifest.txt").write_text("\n".join(lines + [lines[-1]]) + "\n")
        with pytest.raises(DataError, match="duplicate"):
            read_manifest(tmp_path)

    def test_listening_trial_with_spectrogram_rejected(self, tmp_path):
        generate_synthetic(small(subjects=1), tmp_path)
        path = tmp_path / "manifest.txt"
        lines = path.read_text().splitlines()
        i = next(k for k, line in enumerate(lines) if line.startswith("1,1,"))
        fields = lines[i].split(",")
        fields[3] = "0"
        lines[i] = ",".join(fields)
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(DataError, match="listening trial has a spectrogram"):
            load_dataset(tmp_path)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DataError):
            read_manifest(tmp_path)


def _check_split(trials, split, fraction, all_modalities):
    pool = [t for t in trials if t.has_all_modalities] if all_modalities else trials
    train_ids = {t.trial_id for t in split.train}
    test_ids = {t.trial_id for t in split.test}
    assert not train_ids & test_ids
    assert train_ids | test_ids == {t.trial_id for t in pool}
    for c in range(NUM_CLASSES):
        n_c = sum(t.label == c for t in pool)
        in_test = sum(t.label == c for t in split.test)
        assert 1 <= in_test <= n_c - 1
        assert abs(in_test - n_c * fraction) <= 1


class TestSplits:
    @pytest.mark.invariant
    @settings(max_examples=15, deadline=None)
    @given(st.integers(20, 80).map(lambda n: 2 * n), st.floats(0.1, 0.5), st.integers(0, 1000), st.booleans())
    def test_disjoint_complete_stratified(self, n, fraction, seed, all_modalities):
        trials = list(synthesize(small(subjects=1, trials_per_subject=n, seed=seed % 5)))
        split = subject_split(trials, fraction, seed, all_modalities)[1]
        _check_split(trials, split, fraction, all_modalities)
        if all_modalities:
            assert all(t.has_all_modalities for t in split.train + split.test)

    @pytest.mark.invariant
    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 1000), st.integers(0, 3))
    def test_all_modality_split_nests_in_full_split(self, seed, repeat):
        trials = list(synthesize(small(subjects=1, trials_per_subject=100)))
        full = subject_split(trials, 0.2, seed, False, repeat)[1]
        mm = subject_split(trials, 0.2, seed, True, repeat)[1]
        assert {t.trial_id for t in mm.test} == {t.trial_id for t in full.test if t.has_all_modalities}
        assert {t.trial_id for t in mm.train} == {t.trial_id for t in full.train if t.has_all_modalities}

    def test_per_subject_keys(self):
        trials = list(synthesize(small(subjects=3)))
        splits = subject_split(trials)
        assert sorted(splits) == [1, 2, 3]
        for k, s in splits.items():
            assert {t.subject_id for t in s.train + s.test} == {k}

    def test_seed_and_repeat_change_the_draw(self):
        trials = list(synthesize(small(subjects=1, trials_per_subject=100)))
        ids = lambda s: [t.trial_id for t in s.test]  # noqa: E731
        base = ids(subject_split(trials, 0.2, 0)[1])
        assert base == ids(subject_split(trials, 0.2, 0)[1])
        assert base != ids(subject_split(trials, 0.2, 1)[1])
        assert base != ids(subject_split(trials, 0.2, 0, repeat=1)[1])

    def test_too_few_trials_per_class(self):
        trials = list(synthesize(small(subjects=1, trials_per_subject=10)))
        with pytest.raises(DataError, match="too few"):
            subject_split(trials, 0.2, 0, require_all_modalities=True)

    def test_bad_fraction(self):
        with pytest.raises(ConfigError):
            subject_split([], 1.0)

    def test_acceptance_sized_split(self):
        trials = list(synthesize(tiny.synth(trials=300)))
        full = subject_split(trials, 0.2, 0)[1]
        mm = subject_split(trials, 0.2, 0, True)[1]
        assert (len(full.train), len(full.test)) == (240, 60)
        assert (len(mm.train), len(mm.test)) == (120, 30)


class TestHelpers:
    def test_shuffle_labels_preserves_counts_per_group(self):
        trials = list(synthesize(small(subjects=1, trials_per_subject=100)))
        shuffled = shuffle_labels(trials, 0)
        for speaking in (True, False):
            before = Counter(t.label for t in trials if t.is_speaking == speaking)
            after = Counter(t.label for t in shuffled if t.is_speaking == speaking)
            assert before == after
        assert [t.label for t in shuffled] != [t.label for t in trials]
        assert all(a.eeg is b.eeg for a, b in zip(trials, shuffled))

    def test_stack_modality_missing(self):
        trials = list(synthesize(small(subjects=1, trials_per_subject=4)))
        with pytest.raises(DataError, match="no audio"):
            stack_modality(trials, "audio")
