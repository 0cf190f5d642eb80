"""Mini-batch Adam training with a step learning-rate drop and best-validation selection."""

import csv
import logging
from dataclasses import asdict, dataclass, fields

import numpy as np

from segnl.nn import layers
from segnl.nn.optim import Adam
from segnl.nn.unet import loss_and_grads
from segnl.rng import substream

log = logging.getLogger(__name__)

LOG_FIELDS = ("epoch", "train_loss", "val_loss", "lr")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr_initial: float = 1e-4
    lr_late: float = 1e-5
    # epochs after this one use lr_late
    lr_drop_epoch: int = 150
    epochs: int = 200
    batch_size: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")

    def lr_for(self, epoch):
        return self.lr_initial if epoch <= self.lr_drop_epoch else self.lr_late

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class SliceSet:
    """Axial slices ``x: (S, C, H, W)`` float32 with class targets ``y: (S, H, W)``."""

    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        if len(self.x) != len(self.y):
            raise ValueError("x and y hold different numbers of slices")

    def __len__(self):
        return len(self.x)


@dataclass
class TrainState:
    model: object
    optimizer: Adam
    epoch: int = 0
    log: list = None
    best_model: object = None
    best_val: float = float("inf")

    def __post_init__(self):
        if self.log is None:
            self.log = []


def evaluate_loss(model, data, batch_size=8):
    """Eval-mode weighted cross-entropy over all pixels, plus the L2 penalty."""
    cfg = model.config
    total, npix = 0.0, 0
    for start in range(0, len(data), batch_size):
        xb = data.x[start:start + batch_size]
        yb = data.y[start:start + batch_size]
        logits, _ = model.forward(xb, train=False)
        ce, _ = layers.weighted_softmax_crossentropy(logits, yb, cfg.class_weights)
        n = yb.size
        total += ce * n
        npix += n
    penalty, _ = layers.l2_penalty([model.params[k] for k in model.kernel_names()], cfg.l2_lambda)
    return total / npix + penalty


def train(model, train_set, val_set, config, state=None, on_epoch=None):
    """Train until ``config.epochs`` and return the final :class:`TrainState`.

    ``state.best_model`` is the checkpoint with the lowest validation loss.
    Passing a previous ``state`` resumes at its next epoch.
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise TrainingError("training and validation sets must be non-empty")
    if state is None:
        state = TrainState(model, Adam(config.beta1, config.beta2, config.eps))
    model = state.model
    for epoch in range(state.epoch + 1, config.epochs + 1):
        lr = config.lr_for(epoch)
        order = substream(config.seed, "batching", epoch).permutation(len(train_set))
        drop_rng = substream(config.seed, "dropout", epoch)
        total, count = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            idx = np.sort(order[start:start + config.batch_size])
            try:
                loss, _, grads = loss_and_grads(model, train_set.x[idx], train_set.y[idx], True, drop_rng)
            except FloatingPointError as exc:
                raise TrainingError(f"epoch {epoch}, batch at {start}: {exc}") from exc
            state.optimizer.step(model.params, grads, lr)
            total += loss * len(idx)
            count += len(idx)
        train_loss = total / count
        val_loss = evaluate_loss(model, val_set, config.batch_size)
        if not np.isfinite(train_loss) or not np.isfinite(val_loss):
            raise TrainingError(f"epoch {epoch}: non-finite loss (train {train_loss}, val {val_loss})")
        model.epoch = epoch
        state.epoch = epoch
        state.log.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss, "lr": lr})
        if val_loss < state.best_val:
            state.best_val = val_loss
            state.best_model = model.copy()
        log.info("epoch %d  train %.6f  val %.6f  lr %g", epoch, train_loss, val_loss, lr)
        if on_epoch is not None:
            on_epoch(state)
    return state


def write_log_csv(rows, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LOG_FIELDS)
        for row in rows:
            writer.writerow([row["epoch"], repr(float(row["train_loss"])), repr(float(row["val_loss"])),
                             repr(float(row["lr"]))])


def read_log_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{"epoch": int(r["epoch"]), "train_loss": float(r["train_loss"]),
             "val_loss": float(r["val_loss"]), "lr": float(r["lr"])} for r in rows]
