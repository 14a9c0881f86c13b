import numpy as np
import pytest

from fflocal import train as train_mod
from fflocal.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from fflocal.model import ModelConfig
from fflocal.synth import DatasetConfig, SourceClass, build_manifest
from fflocal.synth.dataset import class_groups, draw_batch
from fflocal.train import (
    CHECKPOINT_NAME,
    LOSS_LOG_NAME,
    TrainConfig,
    TrainingDiverged,
    load_state,
    prepare_batch,
    step_rng,
    train,
    train_step,
)

CLASSES = (SourceClass.RealA, SourceClass.GenA, SourceClass.EditA)


@pytest.fixture(scope="module")
def manifest(tmp_path_factory):
    cfg = DatasetConfig(root_seed=1, classes=CLASSES, counts={c: 5 for c in CLASSES}, image_size=(32, 32))
    return build_manifest(cfg, tmp_path_factory.mktemp("toy"))


def tiny_model(**kw):
    kw.setdefault("base_channels", 4)
    return ModelConfig(num_classes=3, input_size=32, **kw)


def same_params(a, b):
    assert a.keys() == b.keys()
    return all(np.array_equal(a[k].data, b[k].data) for k in a)


class TestCheckpointFormat:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        tensors = {"a": rng.standard_normal((2, 3)).astype(np.float32), "b/c": np.zeros(0, np.float32)}
        meta = {"x": "1", "y": "hello world"}
        save_checkpoint(tmp_path / "c", tensors, meta)
        got, m = load_checkpoint(tmp_path / "c")
        assert m == meta
        for k in tensors:
            np.testing.assert_array_equal(got[k], tensors[k])
            assert got[k].dtype == np.float32

    def test_rejects_float64(self, tmp_path):
        with pytest.raises(CheckpointError):
            save_checkpoint(tmp_path / "c", {"a": np.zeros(2)}, {})

    def test_bad_magic(self, tmp_path):
        (tmp_path / "c").write_bytes(b"NOPE" + bytes(20))
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(tmp_path / "c")

    def test_truncated(self, tmp_path):
        save_checkpoint(tmp_path / "c", {"a": np.ones((10, 10), np.float32)}, {"k": "v"})
        data = (tmp_path / "c").read_bytes()
        (tmp_path / "c").write_bytes(data[: len(data) - 50])
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "c")

    def test_missing(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_checkpoint(tmp_path / "absent")


class TestConfig:
    def test_round_trip(self):
        cfg = TrainConfig(steps=7, batch_size=3, alpha=1.5e-3, augment=False, seed=9)
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg

    def test_invalid(self):
        with pytest.raises(ValueError):
            TrainConfig(batch_size=0)


class TestTraining:
    def test_prepare_batch(self, manifest):
        recs = manifest.split("train")[:4]
        b = prepare_batch(manifest, recs, 32)
        assert b.images.shape == (4, 3, 32, 32) and b.masks.shape == (4, 1, 32, 32)
        assert b.points.shape == (4, 68, 2) and b.points.min() >= 0 and b.points.max() <= 31
        assert list(b.labels) == [manifest.label(r.source) for r in recs]
        again = prepare_batch(manifest, recs, 32)
        np.testing.assert_array_equal(b.images, again.images)

    @pytest.mark.parametrize("variant", ["share", "hard", "soft"])
    def test_loss_strictly_decreases_on_fixed_batch(self, manifest, variant):
        mcfg = tiny_model(variant=variant)
        state = train_mod.init_state(mcfg, TrainConfig())
        batch = prepare_batch(manifest, draw_batch(class_groups(manifest), 6, step_rng(0, 0)), 32)
        losses = [train_step(state, mcfg, batch) for _ in range(20)]
        assert np.all(np.diff(losses) < 0)
        assert state.step == 20 and state.losses == losses

    def test_same_seed_same_curve(self, manifest):
        cfg = TrainConfig(steps=4, batch_size=2)
        assert train(manifest, tiny_model(), cfg).losses == train(manifest, tiny_model(), cfg).losses

    def test_writes_checkpoint_and_log(self, manifest, tmp_path):
        cfg = TrainConfig(steps=3, batch_size=2, checkpoint_every=2)
        state = train(manifest, tiny_model(), cfg, tmp_path)
        loaded, mcfg, tcfg, meta = load_state(tmp_path / CHECKPOINT_NAME)
        assert (loaded.step, mcfg, tcfg) == (3, tiny_model(), cfg)
        assert meta["dataset.classes"] == "RealA,GenA,EditA"
        assert loaded.losses == state.losses
        lines = (tmp_path / LOSS_LOG_NAME).read_text().splitlines()
        assert lines[0] == "step\tloss" and len(lines) == 4

    @pytest.mark.parametrize("variant,landmarks", [("soft", True), ("hard", False)])
    def test_resume_is_bit_identical(self, manifest, tmp_path, variant, landmarks):
        mcfg = tiny_model(variant=variant, use_landmarks=landmarks)
        cfg = TrainConfig(steps=6, batch_size=3, checkpoint_every=3, alpha=1e-3)
        straight = train(manifest, mcfg, cfg)
        train(manifest, mcfg, TrainConfig(steps=3, batch_size=3, checkpoint_every=3, alpha=1e-3), tmp_path)
        state, *_ = load_state(tmp_path / CHECKPOINT_NAME)
        resumed = train(manifest, mcfg, cfg, tmp_path, state=state)
        assert same_params(straight.params, resumed.params)
        assert straight.losses == resumed.losses
        assert straight.optimizer.step_count == resumed.optimizer.step_count == 6

    def test_class_count_mismatch(self, manifest):
        with pytest.raises(ValueError, match="classes"):
            train(manifest, ModelConfig(num_classes=4, input_size=32, base_channels=2), TrainConfig(steps=1))

    def test_nan_aborts_and_keeps_checkpoint(self, manifest, tmp_path, monkeypatch):
        mcfg = tiny_model()
        cfg = TrainConfig(steps=6, batch_size=2, checkpoint_every=2)
        real_loss = train_mod.batch_loss
        calls = {"n": 0}

        def poisoned(params, model_cfg, batch):
            calls["n"] += 1
            loss = real_loss(params, model_cfg, batch)
            if calls["n"] == 4:
                loss.data = np.array(np.nan, dtype=loss.data.dtype)
            return loss

        monkeypatch.setattr(train_mod, "batch_loss", poisoned)
        with pytest.raises(TrainingDiverged, match="last good checkpoint"):
            train(manifest, mcfg, cfg, tmp_path)
        saved, *_ = load_state(tmp_path / CHECKPOINT_NAME)
        assert saved.step == 2
        monkeypatch.setattr(train_mod, "batch_loss", real_loss)
        clean = train(manifest, mcfg, TrainConfig(steps=2, batch_size=2, checkpoint_every=2))
        assert same_params(saved.params, clean.params)

    def test_failed_step_leaves_params_untouched(self, manifest, monkeypatch):
        mcfg = tiny_model()
        state = train_mod.init_state(mcfg, TrainConfig())
        before = {k: v.data.copy() for k, v in state.params.items()}
        batch = prepare_batch(manifest, manifest.split("train")[:2], 32)
        batch.images[0, 0, 0, 0] = np.nan
        with pytest.raises(TrainingDiverged):
            train_step(state, mcfg, batch)
        assert all(np.array_equal(before[k], state.params[k].data) for k in before)
        assert state.step == 0 and state.optimizer.step_count == 0
