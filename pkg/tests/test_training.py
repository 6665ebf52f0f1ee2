import numpy as np
import pytest

from pap.datagen import DatasetSpec, generate_dataset
from pap.nets import Model, block_param_drift, encode_checkpoint
from pap.training import (
    TrainConfig,
    TrainingDiverged,
    accuracy,
    fgsm,
    finetune,
    pretrain,
    rotate_batch,
    train,
    write_epoch_csv,
)

SMALL = dict(channels=(4, 8, 8, 16, 16))


def small_ds(name="s", classes=4, per_class=24, **kw):
    return generate_dataset(DatasetSpec(name, num_classes=classes, samples_per_class=per_class, **kw), 0)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0).validate()
    with pytest.raises(ValueError):
        TrainConfig(lr=0).validate()
    with pytest.raises(ValueError):
        TrainConfig(mode="contrastive").validate()


def test_zero_epochs_unchanged():
    ds = small_ds()
    m = Model.init(4, seed=0, **SMALL)
    trained, snap = pretrain(m, ds, TrainConfig(epochs=0))
    assert encode_checkpoint(trained) == encode_checkpoint(m)
    assert not block_param_drift(m.snapshot(), snap).any()


def test_pretrain_deterministic():
    ds = small_ds()
    cfg = TrainConfig(epochs=2, seed=5)
    a, _ = pretrain(Model.init(4, seed=1, **SMALL), ds, cfg)
    b, _ = pretrain(Model.init(4, seed=1, **SMALL), ds, cfg)
    assert encode_checkpoint(a) == encode_checkpoint(b)


def test_pretrain_default_spec_learns():
    ds = generate_dataset(DatasetSpec("src"), 0)
    m, _ = pretrain(Model.init(16, seed=0), ds, TrainConfig(epochs=20))
    assert accuracy(m, ds.train_images, ds.train_labels) > 0.9


def test_rotation_mode():
    ds = small_ds()
    x, k = rotate_batch(ds.train_images[:8], np.random.default_rng(0))
    for img, src, r in zip(x, ds.train_images[:8], k):
        assert np.array_equal(img, np.rot90(src, r, axes=(1, 2)))
    m = Model.init(4, seed=0, **SMALL)
    train(m, ds.train_images, ds.train_labels, TrainConfig(epochs=1, mode="rotation"))
    with pytest.raises(ValueError, match="width 4"):
        train(Model.init(5, **SMALL), ds.train_images, ds.train_labels, TrainConfig(epochs=1, mode="rotation"))


def test_head_too_narrow():
    ds = small_ds()
    with pytest.raises(ValueError, match="head width"):
        train(Model.init(2, **SMALL), ds.train_images, ds.train_labels, TrainConfig(epochs=1))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_detected():
    ds = small_ds()
    m = Model.init(4, seed=0, **SMALL)
    m.head_weight[:] = np.inf
    with pytest.raises(TrainingDiverged):
        train(m, ds.train_images, ds.train_labels, TrainConfig(epochs=1))


def test_finetune_zero_epochs_resets_only_head():
    src = small_ds()
    down = small_ds("d", classes=3)
    m = Model.init(4, seed=0, **SMALL)
    r = finetune(m, down, TrainConfig(epochs=0), head_seed=9)
    assert r.model.num_classes == 3
    assert not block_param_drift(m.snapshot(), r.model.snapshot()).any()
    assert r.drift_curve == []


def test_finetune_does_not_mutate_pretrained_and_records():
    src = small_ds()
    down = small_ds("d", classes=3, pixel_mean=0.6)
    m, _ = pretrain(Model.init(4, seed=0, **SMALL), src, TrainConfig(epochs=2))
    before = encode_checkpoint(m)
    pap = np.full((3, 32, 32), 0.05, np.float32)
    r = finetune(m, down, TrainConfig(epochs=3, lr=0.02), pap=pap)
    assert encode_checkpoint(m) == before
    assert [rec.epoch for rec in r.records] == [1, 2, 3]
    for rec in r.records:
        assert 0 <= rec.fgsm_acc <= 1 and 0 <= rec.pap_acc <= 1 and 0 <= rec.clean_acc <= 1
    assert np.array_equal(r.drift_curve[-1], block_param_drift(r.init_snapshot, r.model.snapshot()))
    assert r.records[-1].drift == r.drift_curve[-1].tolist()


def test_finetune_default_downstream_accuracy():
    src = generate_dataset(DatasetSpec("src", samples_per_class=40), 0)
    down = generate_dataset(DatasetSpec("down", num_classes=10, samples_per_class=60, pixel_mean=0.7, pixel_std=0.15, pattern_seed=7), 0)
    m, _ = pretrain(Model.init(16, seed=0), src, TrainConfig(epochs=5))
    r = finetune(m, down, TrainConfig(epochs=15, lr=0.02))
    assert accuracy(r.model, down.test_images, down.test_labels) > 0.75


def test_clean_accuracy_rises_early_and_fgsm_hurts():
    src = generate_dataset(DatasetSpec("src", samples_per_class=40), 0)
    m, _ = pretrain(Model.init(16, seed=0), src, TrainConfig(epochs=5))
    curves, gaps = [], []
    for seed in range(5):
        down = generate_dataset(DatasetSpec("down", num_classes=10, samples_per_class=40, pixel_mean=0.5, pixel_std=0.15, pattern_seed=5), seed)
        r = finetune(m, down, TrainConfig(epochs=5, lr=0.02, seed=seed), pap=np.zeros((3, 32, 32), np.float32))
        curves.append([rec.clean_acc for rec in r.records])
        gaps.append(r.records[-1].clean_acc - r.records[-1].fgsm_acc)
    med = np.median(np.array(curves), axis=0)
    assert np.all(np.diff(med) >= 0), med
    assert np.median(gaps) >= 0


def test_fgsm_properties():
    ds = small_ds()
    m = Model.init(4, seed=0, **SMALL)
    x, y = ds.test_images, ds.test_labels
    assert np.array_equal(fgsm(m, x, y, 0.0), x)
    adv = fgsm(m, x, y, 0.05)
    assert np.abs(adv - x).max() <= 0.05 + 1e-7
    assert adv.min() >= 0 and adv.max() <= 1
    with pytest.raises(ValueError):
        fgsm(m, x, y, -0.1)


def test_epoch_csv(tmp_path):
    from pap.training import EpochRecord

    path = tmp_path / "e.csv"
    write_epoch_csv(path, [EpochRecord(1, 0.5, 0.25, 0.125, [0.1, 0.2, 0.3, 0.4, 1.0])])
    lines = path.read_text().splitlines()
    assert lines[0] == "epoch,clean_acc,fgsm_acc,pap_acc,drift_1,drift_2,drift_3,drift_4,drift_5"
    assert lines[1] == "1,0.500000,0.250000,0.125000,0.100000,0.200000,0.300000,0.400000,1.000000"
