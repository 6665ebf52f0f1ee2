"""Pre-training and fine-tuning with plain SGD + momentum."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .datagen import Dataset
from .nets import NUM_BLOCKS, Model, ParamSnapshot, block_param_drift

log = logging.getLogger(__name__)

MODES = ("supervised", "rotation")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    lr: float = 0.05
    momentum: float = 0.9
    seed: int = 0
    mode: str = "supervised"

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")


@dataclass
class EpochRecord:
    epoch: int
    clean_acc: float
    fgsm_acc: float
    pap_acc: float
    drift: list[float] = field(default_factory=list)


@dataclass
class FinetuneResult:
    model: Model
    records: list[EpochRecord]
    drift_curve: list[np.ndarray]
    init_snapshot: ParamSnapshot


def accuracy(model: Model, images: np.ndarray, labels: np.ndarray, batch_size: int = 256) -> float:
    if len(labels) == 0:
        return 0.0
    return float(np.mean(model.predict(images, batch_size) == labels))


def fgsm(model: Model, x: np.ndarray, labels: np.ndarray, eps: float, batch_size: int = 256) -> np.ndarray:
    """One signed-gradient step on the cross-entropy, clipped to [0, 1]."""
    if eps < 0:
        raise ValueError("eps must be >= 0")
    out = np.empty_like(x)
    for i in range(0, len(x), batch_size):
        xb, yb = x[i : i + batch_size], labels[i : i + batch_size]
        logits, trace = model.forward(xb)
        _, dlogits = T.softmax_cross_entropy(logits, yb)
        dx, _ = model.backward(trace, dlogits)
        out[i : i + batch_size] = np.clip(xb + eps * np.sign(dx), 0.0, 1.0)
    return out


def rotate_batch(x: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Rotate each image by a random multiple of 90 degrees; the multiple is the label."""
    k = rng.integers(0, 4, size=len(x))
    out = np.empty_like(x)
    for r in range(4):
        sel = k == r
        out[sel] = np.rot90(x[sel], r, axes=(2, 3))
    return out, k


def _sgd_epoch(model: Model, images, labels, config: TrainConfig, rng, velocity) -> float:
    n = len(images)
    order = rng.permutation(n)
    params = model.params()
    total = 0.0
    for start in range(0, n, config.batch_size):
        idx = order[start : start + config.batch_size]
        xb, yb = images[idx], labels[idx]
        if config.mode == "rotation":
            xb, yb = rotate_batch(xb, rng)
        logits, trace = model.forward(xb, train=True)
        loss, dlogits = T.softmax_cross_entropy(logits, yb)
        if not np.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss {loss} at sample offset {start}")
        _, grads = model.backward(trace, dlogits.astype(logits.dtype), need_param_grads=True)
        for name, g in grads.items():
            v = velocity.setdefault(name, np.zeros_like(params[name]))
            v *= config.momentum
            v += g
            params[name] -= (config.lr * v).astype(params[name].dtype)
        total += loss * len(idx)
    return total / max(n, 1)


def train(model: Model, images, labels, config: TrainConfig, on_epoch=None) -> Model:
    """Train ``model`` in place for ``config.epochs`` epochs."""
    config.validate()
    expected = 4 if config.mode == "rotation" else int(labels.max()) + 1
    if config.mode == "rotation" and model.num_classes != 4:
        raise ValueError("rotation pretext requires a head of width 4")
    if config.mode == "supervised" and model.num_classes < expected:
        raise ValueError(f"head width {model.num_classes} < {expected} classes in data")
    rng = np.random.default_rng([config.seed, 0x7EA1])
    velocity: dict[str, np.ndarray] = {}
    for epoch in range(1, config.epochs + 1):
        loss = _sgd_epoch(model, images, labels, config, rng, velocity)
        log.debug("epoch %d loss %.4f", epoch, loss)
        if on_epoch is not None:
            on_epoch(epoch, model)
    return model


def pretrain(model: Model, dataset: Dataset, config: TrainConfig) -> tuple[Model, ParamSnapshot]:
    """Train a copy of ``model`` on the pre-training set; return it and its snapshot."""
    trained = model.copy()
    train(trained, dataset.train_images, dataset.train_labels, config)
    return trained, trained.snapshot()


def finetune(
    pretrained: Model,
    dataset: Dataset,
    config: TrainConfig,
    pap: np.ndarray | None = None,
    fgsm_eps: float = 0.05,
    head_seed: int | None = None,
) -> FinetuneResult:
    """Standard fine-tuning: fresh head, every parameter trainable.

    The pre-trained model is left untouched. When ``pap`` is given, each
    epoch also records clean / FGSM / PAP test accuracy.
    """
    model = pretrained.copy()
    init = model.snapshot()
    model.reset_head(dataset.spec.num_classes, seed=config.seed if head_seed is None else head_seed)
    records: list[EpochRecord] = []
    curve: list[np.ndarray] = []

    def on_epoch(epoch, m):
        drift = block_param_drift(init, m.snapshot())
        curve.append(drift)
        if pap is not None:
            x, y = dataset.test_images, dataset.test_labels
            records.append(
                EpochRecord(
                    epoch,
                    accuracy(m, x, y),
                    accuracy(m, fgsm(m, x, y, fgsm_eps), y),
                    accuracy(m, np.clip(x + pap, 0.0, 1.0), y),
                    drift.tolist(),
                )
            )

    train(model, dataset.train_images, dataset.train_labels, config, on_epoch=on_epoch)
    return FinetuneResult(model, records, curve, init)


def write_epoch_csv(path, records: list[EpochRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "clean_acc", "fgsm_acc", "pap_acc"] + [f"drift_{k}" for k in range(1, NUM_BLOCKS + 1)])
        for r in records:
            w.writerow([r.epoch, f"{r.clean_acc:.6f}", f"{r.fgsm_acc:.6f}", f"{r.pap_acc:.6f}"] + [f"{d:.6f}" for d in r.drift])


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)
