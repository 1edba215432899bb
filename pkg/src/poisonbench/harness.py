"""Training protocol and early-stopping-aware metrics.

Per-epoch records feed four readouts: peak test accuracy (with its first
achieving epoch), epochs until the training loss crosses a threshold, the
rank correlation between those two across a poison sweep, and the peak/final
ratio that quantifies how much early stopping recovers.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataError, NumericError
from .models import predict
from .tensor import backward, cross_entropy, sgd_step


@dataclass(frozen=True)
class TrainConfig:
    """SGD recipe. paper_default mirrors the reference recipe (100 epochs,
    batch 128, lr 0.1 decayed x10 at epoch 50, momentum 0.9, weight decay
    5e-4, loss threshold 0.5); desk_default shrinks to 40 epochs with the
    decay kept at the midpoint."""

    epochs: int = 40
    batch_size: int = 128
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_decay_factor: float = 10.0
    lr_decay_epoch: int = 20
    loss_threshold: float = 0.5
    seed: int = 0
    shuffle: bool = True
    augment: bool = False  # pad-4 random crop + horizontal flip

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.loss_threshold <= 0:
            raise ConfigError(f"loss_threshold must be > 0, got {self.loss_threshold}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr_decay_factor <= 0:
            raise ConfigError("lr_decay_factor must be > 0")

    @classmethod
    def paper_default(cls, **over):
        base = dict(epochs=100, lr_decay_epoch=50)
        base.update(over)
        return cls(**base)

    @classmethod
    def desk_default(cls, **over):
        return cls(**over)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    test_acc: float


@dataclass
class TrainReport:
    records: list[EpochRecord]
    config: TrainConfig
    poison_id: str = "clean"

    @property
    def test_accuracies(self):
        return [r.test_acc for r in self.records]

    @property
    def train_losses(self):
        return [r.train_loss for r in self.records]


def evaluate_accuracy(model, ds, batch_size=512):
    preds = predict(model, ds.images, batch_size=batch_size)
    return float((preds == ds.labels).mean())


def _augment_batch(images, rng):
    """Pad-4 zero border, random crop back to size, random horizontal flip."""
    n, _, h, w = images.shape
    padded = np.pad(images, ((0, 0), (0, 0), (4, 4), (4, 4)))
    ys = rng.integers(0, 9, size=n)
    xs = rng.integers(0, 9, size=n)
    flips = rng.integers(0, 2, size=n).astype(bool)
    out = np.empty_like(images)
    for i in range(n):
        crop = padded[i, :, ys[i] : ys[i] + h, xs[i] : xs[i] + w]
        out[i] = crop[:, :, ::-1] if flips[i] else crop
    return out


def train(model, train_ds, test_ds, cfg, poison_id="clean"):
    """SGD mini-batch training with per-epoch test evaluation.

    The train loss per epoch is the mean over mini-batch losses; train
    accuracy comes from the same train-mode forwards. The learning rate drops
    once, by lr_decay_factor, from lr_decay_epoch onward. Deterministic for a
    fixed config seed, including shuffle order.
    """
    if train_ds.image_shape != test_ds.image_shape or train_ds.num_classes != test_ds.num_classes:
        raise DataError(f"train {train_ds.image_shape}/K={train_ds.num_classes} and test "
                        f"{test_ds.image_shape}/K={test_ds.num_classes} do not line up")
    rng = np.random.default_rng(cfg.seed)
    records = []
    for epoch in range(cfg.epochs):
        lr = cfg.lr / cfg.lr_decay_factor if epoch >= cfg.lr_decay_epoch else cfg.lr
        order = rng.permutation(train_ds.n) if cfg.shuffle else np.arange(train_ds.n)
        model.train()
        losses = []
        hits = 0
        for lo in range(0, train_ds.n, cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            batch = train_ds.images[idx]
            if cfg.augment:
                batch = _augment_batch(batch, rng)
            model.zero_grad()
            logits = model.forward(batch)
            loss = cross_entropy(logits, train_ds.labels[idx])
            if not np.isfinite(loss.data):
                raise NumericError(f"non-finite training loss at epoch {epoch}")
            backward(loss)
            sgd_step(model.params(), lr, cfg.momentum, cfg.weight_decay)
            losses.append(loss.item())
            hits += int((logits.data.argmax(axis=1) == train_ds.labels[idx]).sum())
        model.eval()
        records.append(EpochRecord(
            epoch=epoch,
            train_loss=float(np.mean(losses)),
            train_acc=hits / train_ds.n,
            test_acc=evaluate_accuracy(model, test_ds),
        ))
    return TrainReport(records=records, config=cfg, poison_id=poison_id)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def peak_accuracy(report):
    """(epoch, accuracy) of the best test accuracy; earliest epoch on ties."""
    accs = report.test_accuracies
    if not accs:
        raise DataError("empty training report")
    best = int(np.argmax(accs))
    return best, accs[best]


def epochs_to_threshold(report, tau):
    """First epoch whose mean train loss is below tau, or None if never."""
    if tau <= 0:
        raise ConfigError(f"loss threshold must be > 0, got {tau}")
    for rec in report.records:
        if rec.train_loss < tau:
            return rec.epoch
    return None


def _average_ranks(values):
    values = np.asarray(values, dtype=np.float64)
    order = np.argsort(values, kind="stable")
    ranks = np.empty(values.size, dtype=np.float64)
    ranks[order] = np.arange(1, values.size + 1)
    # ties share the mean of the ranks they span
    for v in np.unique(values):
        mask = values == v
        if mask.sum() > 1:
            ranks[mask] = ranks[mask].mean()
    return ranks


def spearman_rho(xs, ys):
    """Spearman rank correlation with average ranks on ties."""
    xs, ys = np.asarray(xs, dtype=np.float64), np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape:
        raise DataError(f"length mismatch: {xs.shape} vs {ys.shape}")
    if xs.size < 3:
        raise DataError(f"need at least 3 points, got {xs.size}")
    rx, ry = _average_ranks(xs), _average_ranks(ys)
    sx, sy = rx.std(), ry.std()
    if sx == 0 or sy == 0:
        raise DataError("rank correlation undefined for a constant sequence")
    return float(((rx - rx.mean()) * (ry - ry.mean())).mean() / (sx * sy))


def transferability(pack, clean_ds, victim):
    """Fraction of poisoned examples the victim misclassifies.

    Defined for sample-wise (adversarial-example) packs: each x_i + delta_i
    is scored against its true label by a clean-trained victim.
    """
    from .poisons import apply_poison  # local import to avoid a module cycle

    if pack.mode != "sample_wise":
        raise DataError("transferability is defined for sample_wise packs")
    poisoned = apply_poison(clean_ds, pack)
    preds = predict(victim, poisoned.images)
    return float((preds != poisoned.labels).mean())


def early_stop_gain(report):
    """Peak test accuracy divided by final test accuracy (>= 1 by
    construction); infinite when the final accuracy is zero."""
    _, peak = peak_accuracy(report)
    final = report.test_accuracies[-1]
    if final == 0:
        return math.inf
    return peak / final


# ---------------------------------------------------------------------------
# artifact files
# ---------------------------------------------------------------------------


def write_report_csv(report, path):
    """Curve CSV: header epoch,train_loss,train_acc,test_acc then one row per
    epoch with 6 fractional digits."""
    lines = ["epoch,train_loss,train_acc,test_acc"]
    for r in report.records:
        lines.append(f"{r.epoch},{r.train_loss:.6f},{r.train_acc:.6f},{r.test_acc:.6f}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def summarize(report, config_hash):
    peak_epoch, peak = peak_accuracy(report)
    gain = early_stop_gain(report)
    return {
        "poison_id": report.poison_id,
        "peak_test_acc": peak,
        "peak_epoch": peak_epoch,
        "final_test_acc": report.test_accuracies[-1],
        "epochs_to_threshold": epochs_to_threshold(report, report.config.loss_threshold),
        "early_stop_gain": "inf" if math.isinf(gain) else gain,
        "config_hash": config_hash,
    }


def write_summary_json(summary, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
