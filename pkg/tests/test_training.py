import csv

import numpy as np
import pytest
import torch

from miscalib.dataset import ConfigError, synth_frames
from miscalib.model import file_hash, load_checkpoint, read_header, state_hash
from miscalib.training import (NonFiniteLoss, TrainConfig, TrainState, lr_schedule,
                               split_validation, train_classifier, train_pretext)

SIZE = (64, 32)


@pytest.fixture(scope="module")
def frames():
    return synth_frames(14, 21, n_points=600, image_size=SIZE)


def tiny(**kw):
    base = dict(batch_size=4, epochs=3, lr_drop_epoch=2, seed=3, input_width=SIZE[0],
                input_height=SIZE[1], val_fraction=0.15)
    base.update(kw)
    return TrainConfig(**base)


def losses(run_dir):
    with open(run_dir / "metrics.csv") as fh:
        return [float(r["loss"]) for r in csv.DictReader(fh)]


class TestSchedule:
    def test_reference_recipe_defaults(self):
        cfg = TrainConfig()
        assert (cfg.batch_size, cfg.epochs, cfg.lr_drop_epoch) == (64, 50, 30)
        assert (cfg.lr_initial, cfg.lr_after_drop, cfg.weight_decay) == (1e-3, 1e-4, 0.05)
        assert cfg.margin == 4.0 and cfg.val_fraction == 0.05

    @pytest.mark.parametrize("epoch,lr", [(0, 1e-3), (29, 1e-3), (30, 1e-4), (49, 1e-4)])
    def test_step_schedule(self, epoch, lr):
        assert lr_schedule(epoch) == lr

    def test_bad_config(self):
        with pytest.raises(ConfigError):
            TrainConfig(batch_size=5)
        with pytest.raises(ConfigError):
            TrainConfig(stage="finetune")

    def test_text_round_trip(self, tmp_path):
        cfg = tiny(variant="resnet18_all")
        (tmp_path / "c.txt").write_text(cfg.to_text())
        assert TrainConfig.from_file(tmp_path / "c.txt") == cfg

    def test_text_errors_name_key(self):
        with pytest.raises(ConfigError, match="lr_bogus"):
            TrainConfig.from_text("lr_bogus = 1\n")
        with pytest.raises(ConfigError, match="epochs"):
            TrainConfig.from_text("epochs = many\n")

    def test_counters_monotone(self):
        st = TrainState()
        st.advance(1, 10)
        with pytest.raises(ValueError):
            st.advance(0, 12)


def test_validation_split_disjoint(frames):
    train, val = split_validation(frames, 0.2, 0)
    ids = [f.frame_id for f in train] + [f.frame_id for f in val]
    assert len(val) == 3 and sorted(ids) == sorted(f.frame_id for f in frames)


class TestPretext:
    def test_same_seed_identical_curves(self, frames, tmp_path):
        a = train_pretext(frames, tiny(epochs=2), tmp_path / "a")
        b = train_pretext(frames, tiny(epochs=2), tmp_path / "b")
        assert losses(tmp_path / "a") == losses(tmp_path / "b")
        assert state_hash(load_checkpoint(a)[0]) == state_hash(load_checkpoint(b)[0])

    def test_resume_matches_uninterrupted(self, frames, tmp_path):
        full = train_pretext(frames, tiny(), tmp_path / "full")
        part = train_pretext(frames, tiny(), tmp_path / "part", stop_after=1)
        assert not part.exists()
        resumed = train_pretext(frames, tiny(), tmp_path / "part", resume=True)
        np.testing.assert_allclose(losses(tmp_path / "part"), losses(tmp_path / "full"), rtol=0, atol=1e-5)
        ma, mb = load_checkpoint(full)[0], load_checkpoint(resumed)[0]
        for (ka, va), (kb, vb) in zip(ma.state_dict().items(), mb.state_dict().items()):
            assert ka == kb
            torch.testing.assert_close(va.double(), vb.double(), atol=1e-5, rtol=0)

    def test_outputs(self, frames, tmp_path):
        final = train_pretext(frames, tiny(epochs=2), tmp_path / "r")
        hdr = read_header(final)
        assert hdr["stage"] == "pretext" and hdr["epoch"] == 2 and hdr["input_size"] == list(SIZE)
        assert sorted(p.name for p in (tmp_path / "r" / "checkpoints").iterdir()) == \
            ["epoch_001.npz", "epoch_002.npz"]
        assert TrainConfig.from_file(tmp_path / "r" / "config.txt") == tiny(epochs=2)

    def test_loss_decreases(self, frames, tmp_path):
        train_pretext(frames, tiny(epochs=4, lr_drop_epoch=4), tmp_path / "r")
        curve = losses(tmp_path / "r")
        assert curve[-1] < curve[0]

    def test_too_few_frames(self, tmp_path):
        few = synth_frames(2, 0, n_points=100, image_size=SIZE)
        with pytest.raises(ConfigError):
            train_pretext(few, tiny(val_fraction=0.0), tmp_path / "r")

    def test_nonfinite_loss_names_batch(self, frames, tmp_path, monkeypatch):
        import miscalib.training as tr
        monkeypatch.setattr(tr, "contrastive_loss", lambda *a, **k: torch.tensor(float("nan"),
                                                                                 requires_grad=True))
        with pytest.raises(NonFiniteLoss, match="synth"):
            train_pretext(frames, tiny(), tmp_path / "r")


@pytest.fixture(scope="module")
def encoder(frames, tmp_path_factory):
    return train_pretext(frames, tiny(epochs=1), tmp_path_factory.mktemp("pre"))


class TestClassifier:
    def test_encoders_frozen(self, frames, encoder, tmp_path):
        before = load_checkpoint(encoder)[0]
        digest = file_hash(encoder)
        best = train_classifier(encoder, frames, tiny(epochs=2, stage="classifier"), tmp_path)
        after = load_checkpoint(best)[0]
        assert state_hash(after.image_encoder) == state_hash(before.image_encoder)
        assert state_hash(after.lidar_encoder) == state_hash(before.lidar_encoder)
        assert state_hash(after.head) != state_hash(before.head)
        hdr = read_header(best)
        assert hdr["stage"] == "classifier" and hdr["encoder_checkpoint_sha256"] == digest
        assert file_hash(encoder) == digest

    def test_keeps_best_validation_epoch(self, frames, encoder, tmp_path):
        best = train_classifier(encoder, frames, tiny(epochs=3, stage="classifier"), tmp_path)
        with open(tmp_path / "metrics.csv") as fh:
            vals = [float(r["val_metric"]) for r in csv.DictReader(fh)]
        assert read_header(best)["val_accuracy"] == max(vals)

    def test_variant_mismatch(self, frames, encoder, tmp_path):
        with pytest.raises(ValueError, match="variant"):
            train_classifier(encoder, frames, tiny(variant="resnet18_all"), tmp_path)
