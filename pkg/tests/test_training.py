import numpy as np
import pytest

from modfuse.autodiff import Tensor
from modfuse.data import SynthConfig, subject_split, synthesize
from modfuse.encoders import MODALITIES, AudioEncoderConfig, EEGEncoderConfig, VisionEncoderConfig
from modfuse.errors import ConfigError, DataError, DivergenceError, ShapeError
from modfuse.fusion import FusionConfig
from modfuse.nn import ParamRegistry
from modfuse.training import (
    AdamState,
    Checkpoint,
    TrainConfig,
    accuracy,
    adam_step,
    evaluate,
    finetune_fusion,
    pretrain_modality,
)

COMMON = dict(d_model=8, block_count=1, head_count=2, d_ff=16)
ENCODERS = {
    "vision": VisionEncoderConfig(frame_count=2, frame_height=8, frame_width=8, patch_size=4, **COMMON),
    "audio": AudioEncoderConfig(mel_bins=8, time_frames=8, patch_freq=4, patch_time=4, **COMMON),
    "eeg": EEGEncoderConfig(channels=4, samples=24, kernel=5, stride=5, **COMMON),
}
FUSION = FusionConfig(d_fuse=8, head_count=2, hidden=16)


def dataset(inform=0.5, trials=60, seed=0, noise=0.3):
    cfg = SynthConfig(
        subjects=1, trials_per_subject=trials, seed=seed, noise=noise,
        informativeness_vision=inform, informativeness_audio=inform, informativeness_eeg=inform,
        eeg_channels=4, eeg_samples=24, frame_count=2, frame_height=8, frame_width=8, mel_bins=8, time_frames=8,
    )
    return list(synthesize(cfg))


@pytest.fixture(scope="module")
def split():
    return subject_split(dataset(), 0.2, 0)[1]


@pytest.fixture(scope="module")
def pretrained(split):
    cfg = TrainConfig(epochs_pretrain=2, epochs_finetune=3)
    return {m: pretrain_modality(split.train, split.test, m, ENCODERS[m], cfg) for m in MODALITIES}


def one_param(value):
    reg = ParamRegistry()
    reg.add("w", Tensor(np.array(value, dtype=np.float64), dtype=np.float64))
    return reg


class TestAdam:
    def test_matches_reference_over_several_steps(self, rng):
        w0 = rng.normal(size=4)
        reg = one_param(w0)
        state = AdamState()
        m = np.zeros(4)
        v = np.zeros(4)
        w = w0.copy()
        for step in range(1, 6):
            g = rng.normal(size=4)
            adam_step(reg, {"w": g}, state, 0.01)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            w = w - 0.01 * (m / (1 - 0.9**step)) / (np.sqrt(v / (1 - 0.999**step)) + 1e-8)
            np.testing.assert_allclose(reg["w"].data, w, rtol=1e-12)

    def test_first_step_is_signed_lr(self):
        reg = one_param([1.0, 1.0, 1.0])
        adam_step(reg, {"w": np.array([3.0, -0.2, 1e-3])}, AdamState(), 0.1)
        np.testing.assert_allclose(reg["w"].data, [0.9, 1.1, 0.9], rtol=1e-5)

    def test_zero_gradient_leaves_parameters(self):
        reg = one_param([0.5, -0.5])
        for _ in range(3):
            adam_step(reg, {"w": np.zeros(2)}, AdamState(), 0.1)
        np.testing.assert_array_equal(reg["w"].data, [0.5, -0.5])

    def test_frozen_parameters_skipped(self):
        reg = one_param([1.0])
        reg.add("f", Tensor([2.0]), frozen=True)
        adam_step(reg, {"w": np.ones(1), "f": np.ones(1)}, AdamState(), 0.1)
        assert reg["f"].data[0] == 2.0 and reg["w"].data[0] != 1.0

    def test_gradient_shape_mismatch(self):
        with pytest.raises(ShapeError):
            adam_step(one_param([1.0, 2.0]), {"w": np.ones(3)}, AdamState(), 0.1)

    def test_missing_gradient(self):
        with pytest.raises(DataError):
            adam_step(one_param([1.0]), {}, AdamState(), 0.1)


class TestPretrain:
    def test_overfits_informative_data(self):
        trials = dataset(inform=1.0, trials=40, noise=0.3)
        cfg = TrainConfig(epochs_pretrain=50, lr_pretrain=3e-3, batch_size=8)
        ckpt = pretrain_modality(trials, [], "vision", ENCODERS["vision"], cfg)
        assert ckpt.metrics["train_acc"] >= 0.95
        assert "val_acc" not in ckpt.metrics

    def test_trained_accuracy_rises_with_informativeness(self):
        means = []
        for level in (0.0, 1.0):
            accs = []
            for seed in range(3):
                split = subject_split(dataset(inform=level, trials=100, seed=seed, noise=1.0), 0.2, seed)[1]
                cfg = TrainConfig(epochs_pretrain=10, lr_pretrain=3e-3, seed=seed)
                accs.append(pretrain_modality(split.train, split.test, "eeg", ENCODERS["eeg"], cfg).metrics["val_acc"])
            means.append(np.mean(accs))
        assert means[0] < means[1]

    def test_first_epoch_descends(self, pretrained):
        for m, ck in pretrained.items():
            assert ck.history[0] < ck.metrics["loss_init"], m

    def test_audio_uses_speaking_trials_only(self, split):
        ck = pretrain_modality(split.train, split.test, "audio", ENCODERS["audio"], TrainConfig(epochs_pretrain=1))
        assert ck.modality == "audio" and set(ck.encoders) == {"audio"}
        assert all(n.startswith("audio.") for n in ck.registry)

    def test_deterministic(self, split, pretrained):
        again = pretrain_modality(split.train, split.test, "eeg", ENCODERS["eeg"], TrainConfig(epochs_pretrain=2))
        for name, t in pretrained["eeg"].registry.items():
            assert again.registry[name].data.tobytes() == t.data.tobytes()
        assert again.history == pretrained["eeg"].history

    def test_seed_matters(self, split, pretrained):
        other = pretrain_modality(split.train, [], "eeg", ENCODERS["eeg"], TrainConfig(epochs_pretrain=2, seed=1))
        assert other.history != pretrained["eeg"].history

    def test_empty_and_missing_modality(self, split):
        with pytest.raises(DataError):
            pretrain_modality([], [], "vision", ENCODERS["vision"], TrainConfig())
        listening = [t for t in split.train if not t.is_speaking]
        with pytest.raises(DataError, match="audio"):
            pretrain_modality(listening, [], "audio", ENCODERS["audio"], TrainConfig())

    def test_unknown_modality(self, split):
        with pytest.raises(ConfigError):
            pretrain_modality(split.train, [], "text", ENCODERS["vision"], TrainConfig())

    def test_huge_learning_rate_diverges(self, split):
        cfg = TrainConfig(epochs_pretrain=3, lr_pretrain=1e30)
        with np.errstate(over="ignore", invalid="ignore"), pytest.raises(DivergenceError):
            pretrain_modality(split.train, [], "vision", ENCODERS["vision"], cfg)

    @pytest.mark.parametrize("field,value", [("epochs_pretrain", 0), ("batch_size", 0), ("lr_finetune", 0.0), ("test_fraction", 1.0)])
    def test_config_validation(self, field, value):
        with pytest.raises(ConfigError):
            TrainConfig(**{field: value}).validate()


class TestFinetune:
    def test_encoders_bit_identical_and_only_fusion_trains(self, split, pretrained):
        before = {m: {n: t.data.tobytes() for n, t in ck.registry.items()} for m, ck in pretrained.items()}
        ck = finetune_fusion(split.train, split.test, pretrained, FUSION, TrainConfig(epochs_finetune=3))
        for m, ek in pretrained.items():
            for n, t in ek.registry.items():
                assert t.data.tobytes() == before[m][n]
                if not n.startswith(f"{m}.head."):
                    assert ck.registry[n].data.tobytes() == before[m][n]
        assert all(n.startswith("fusion.") for n, _ in ck.registry.trainable())
        assert not any(".head." in n for n in ck.registry)

    def test_loss_descends(self, split, pretrained):
        ck = finetune_fusion(split.train, [], pretrained, FUSION, TrainConfig(epochs_finetune=10, lr_finetune=5e-3))
        assert ck.history[-1] < ck.history[0]
        assert ck.history[-1] < ck.metrics["loss_init"]

    def test_missing_encoder(self, split, pretrained):
        partial = {m: pretrained[m] for m in ("vision", "eeg")}
        with pytest.raises(ConfigError, match="audio"):
            finetune_fusion(split.train, [], partial, FUSION, TrainConfig())

    def test_width_mismatch(self, split, pretrained):
        wide = VisionEncoderConfig(frame_count=2, frame_height=8, frame_width=8, patch_size=4,
                                   d_model=12, block_count=1, head_count=2, d_ff=16)
        vision = pretrain_modality(split.train, [], "vision", wide, TrainConfig(epochs_pretrain=1))
        with pytest.raises(ConfigError, match="d_model"):
            finetune_fusion(split.train, [], {**pretrained, "vision": vision}, FUSION, TrainConfig())

    def test_needs_all_modality_trials(self, split, pretrained):
        listening = [t for t in split.train if not t.is_speaking]
        with pytest.raises(DataError):
            finetune_fusion(listening, [], pretrained, FUSION, TrainConfig())


class TestCheckpoint:
    def test_reload_reproduces_evaluation(self, tmp_path, split, pretrained):
        ck = finetune_fusion(split.train, split.test, pretrained, FUSION, TrainConfig(epochs_finetune=2))
        ck.subject = 1
        ck.save(tmp_path / "mm")
        back = Checkpoint.load(tmp_path / "mm")
        assert back.kind == "finetune" and back.subject == 1 and back.fusion == FUSION
        assert back.encoders == ck.encoders and back.train == ck.train
        speaking = [t for t in split.test if t.is_speaking]
        assert evaluate(back, speaking) == evaluate(ck, speaking) == ck.metrics["val_acc"]
        pre = pretrained["audio"]
        pre.save(tmp_path / "audio")
        assert evaluate(Checkpoint.load(tmp_path / "audio"), speaking) == pre.metrics["val_acc"]

    def test_corrupt_metadata(self, tmp_path, pretrained):
        pretrained["eeg"].save(tmp_path)
        meta = tmp_path / "meta.txt"
        meta.write_text(meta.read_text().replace("kind = pretrain", "kind = bogus"))
        with pytest.raises(DataError):
            Checkpoint.load(tmp_path)

    def test_missing_checkpoint(self, tmp_path):
        with pytest.raises(DataError):
            Checkpoint.load(tmp_path / "nowhere")


class TestEvaluate:
    def test_empty_split(self, pretrained):
        with pytest.raises(DataError):
            evaluate(pretrained["vision"], [])

    def test_ties_resolve_to_lowest_index(self):
        logits = np.array([[1.0, 1.0, 0.0], [0.0, 2.0, 2.0]])
        assert accuracy(logits, np.array([0, 1])) == 1.0
        assert accuracy(logits, np.array([1, 2])) == 0.0

    def test_order_invariant(self, split, pretrained):
        ck = pretrained["vision"]
        assert evaluate(ck, split.test) == evaluate(ck, split.test[::-1])

    def test_random_predictor_near_chance(self, rng):
        labels = rng.integers(0, 5, size=20000)
        assert accuracy(rng.normal(size=(20000, 5)), labels) == pytest.approx(0.2, abs=0.01)
