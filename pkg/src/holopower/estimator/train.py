"""Mini-batch Adam training of the power estimator."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from ..holo_opt import LaserPowerMatrix
from ..optim import AdamState, adam_step, linear_decay
from .loss import batch_loss_and_grad, permutation_invariant_loss
from .model import EstimatorModel, clamp_powers, forward, forward_backward

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainingConfig:
    epochs: int = 40
    lr_start: float = 0.002
    lr_end: float = 0.0005
    batch_size: int = 8
    seed: int = 0
    val_fraction: float = 0.1

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0 < self.lr_end <= self.lr_start:
            raise ValueError("need 0 < lr_end <= lr_start")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 <= self.val_fraction < 1:
            raise ValueError("val_fraction must lie in [0, 1)")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        return cls(**{k: data[k] for k in cls.__dataclass_fields__ if k in data})


@dataclass
class TrainingResult:
    model: EstimatorModel
    log: list
    initial_val_loss: float | None
    initial_train_losses: np.ndarray
    adam: AdamState
    train_indices: list
    val_indices: list
    epoch: int = 0
    extra: dict = field(default_factory=dict)


def split_indices(n, val_fraction, seed):
    """Deterministic train/validation split."""
    order = np.random.default_rng([seed, 7919]).permutation(n)
    n_val = int(round(n * val_fraction)) if n > 1 else 0
    n_val = min(n_val, n - 1)
    return sorted(order[n_val:].tolist()), sorted(order[:n_val].tolist())


def stack_dataset(dataset):
    """``[(image (3, H, W), L_opt (3, 3)), ...]`` -> float32 image and target arrays."""
    if not dataset:
        raise TrainingError("empty dataset")
    images = np.stack([np.asarray(img, dtype=np.float32) for img, _ in dataset])
    targets = np.stack([np.asarray(getattr(l, "values", l), dtype=np.float64) for _, l in dataset])
    if targets.min() < 0 or targets.max() > 1:
        raise TrainingError("target power matrices must lie in [0, 1]")
    return images, targets


def predict(model: EstimatorModel, images, batch_size=16) -> np.ndarray:
    """Eval-mode raw predictions for a stack of images."""
    was = model.training
    model.eval()
    try:
        outs = [forward(model, images[i:i + batch_size]) for i in range(0, len(images), batch_size)]
    finally:
        model.training = was
    return np.concatenate(outs).astype(np.float64)


def mean_loss(model, images, targets) -> float:
    preds = predict(model, images)
    return float(np.mean([permutation_invariant_loss(p, t) for p, t in zip(preds, targets)]))


def train(dataset, config: TrainingConfig, *, model: EstimatorModel | None = None,
          adam: AdamState | None = None, start_epoch=0, stop_epoch=None,
          progress=None) -> TrainingResult:
    """Train on ``dataset`` (list of ``(image, L_opt)``) for epochs ``start_epoch..epochs-1``.

    ``stop_epoch`` ends the run early (exclusive) without changing the
    schedule, so ``start_epoch`` can later resume it bit-identically.

    The learning rate decays linearly per epoch from ``lr_start`` to ``lr_end``.
    Each epoch shuffles the training split with an RNG keyed on
    ``(seed, epoch)`` so resumed runs follow the same batches.
    """
    images, targets = stack_dataset(dataset)
    train_idx, val_idx = split_indices(len(images), config.val_fraction, config.seed)
    if model is None:
        model = EstimatorModel.create(seed=config.seed)
    state = adam or AdamState()
    xs_val, ys_val = images[val_idx], targets[val_idx]
    initial_val = mean_loss(model, xs_val, ys_val) if val_idx else None
    initial_train = np.array([
        permutation_invariant_loss(p, t)
        for p, t in zip(predict(model, images[train_idx]), targets[train_idx])
    ])
    history = []

    def objective(ys):
        def fn(out):
            losses, grads = batch_loss_and_grad(out.astype(np.float64), ys)
            fn.losses = losses
            return float(losses.mean()), grads
        return fn

    end = config.epochs if stop_epoch is None else min(stop_epoch, config.epochs)
    for epoch in range(start_epoch, end):
        lr = linear_decay(epoch, config.epochs, config.lr_start, config.lr_end)
        order = np.random.default_rng([config.seed, epoch]).permutation(train_idx)
        model.train()
        epoch_losses = []
        for start in range(0, len(order), config.batch_size):
            batch = order[start:start + config.batch_size]
            fn = objective(targets[batch])
            _, value, grads = forward_backward(model, images[batch], fn)
            if not np.isfinite(value):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}, batch starting {start} (lr={lr:.3g})"
                )
            epoch_losses.extend(fn.losses.tolist())
            model.params, state = adam_step(model.params, grads, state, lr)
        model.eval()
        val = mean_loss(model, xs_val, ys_val) if val_idx else None
        entry = {"epoch": epoch, "train_loss": float(np.mean(epoch_losses)),
                 "val_loss": val, "lr": lr}
        history.append(entry)
        log.info("epoch %d: train %.5f val %s lr %.5f", epoch, entry["train_loss"], val, lr)
        if progress:
            progress(entry)
    model.eval()
    return TrainingResult(model, history, initial_val, initial_train, state,
                          train_idx, val_idx, epoch=end)


def estimate_powers(model: EstimatorModel, image) -> LaserPowerMatrix:
    """Eval-mode prediction for one ``(3, H, W)`` image, clamped to [0, 1]."""
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 3:
        raise ValueError(f"expected a (C, H, W) image, got shape {image.shape}")
    raw = predict(model, image[None])[0]
    return LaserPowerMatrix(clamp_powers(raw))
