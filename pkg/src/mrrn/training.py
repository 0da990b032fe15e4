"""Cross-entropy training with ADAM and best-validation-DSC model selection."""

from __future__ import annotations

import contextlib
import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .arch import Model
from .autodiff import Adam, Tape, Tensor, no_grad, softmax_ce_loss
from .metrics import dice_from_counts, dsc_counts
from .phantom import LabeledSlice, stack

log = logging.getLogger(__name__)

STRUCTURE_LABELS = (1, 2, 3, 4, 5)
HISTORY_FIELDS = ("epoch", "train_loss", "dsc_1", "dsc_2", "dsc_3", "dsc_4", "dsc_5", "dsc_avg")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-4
    epochs: int = 50
    batch_size: int = 10
    seed: int = 0
    precision: str = "f32"
    checkpoint_dir: Optional[str] = None
    val_every: int = 1
    threads: int = 1

    def violations(self) -> list[str]:
        out = []
        if not self.lr >= 0:
            out.append(f"lr must be >= 0 (got {self.lr})")
        if self.epochs < 1:
            out.append(f"epochs must be >= 1 (got {self.epochs})")
        if self.batch_size < 1:
            out.append(f"batch_size must be >= 1 (got {self.batch_size})")
        if self.val_every < 1:
            out.append(f"val_every must be >= 1 (got {self.val_every})")
        if self.precision not in ("f32", "f64"):
            out.append(f"precision must be f32 or f64 (got {self.precision!r})")
        return out

    def validate(self) -> "TrainConfig":
        bad = self.violations()
        if bad:
            raise ValueError("invalid training config: " + "; ".join(bad))
        return self


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    dsc: tuple  # per structure, labels 1..5
    dsc_avg: float

    def row(self) -> list[str]:
        return [str(self.epoch), repr(self.train_loss)] + [repr(v) for v in self.dsc] + [repr(self.dsc_avg)]


@contextlib.contextmanager
def threads(n: int):
    """Cap BLAS threads; ``n == 1`` is the bit-reproducible path."""
    if n and n > 0:
        with threadpool_limits(limits=n):
            yield
    else:
        yield


@contextlib.contextmanager
def eval_mode(model: Model):
    was = model.training
    model.eval()
    try:
        yield model
    finally:
        model.training = was


def predict_logits(model: Model, images: np.ndarray, batch_size: int = 10) -> np.ndarray:
    out = []
    with eval_mode(model), no_grad():
        for i in range(0, len(images), batch_size):
            out.append(model(Tensor(images[i:i + batch_size].astype(model.dtype))).data)
    return np.concatenate(out, axis=0)


def argmax_labels(logits: np.ndarray) -> np.ndarray:
    """Per-pixel argmax over the class axis; ties go to the lowest class index."""
    return np.argmax(logits, axis=1).astype(np.uint8)


def predict(model: Model, slices, batch_size: int = 10) -> np.ndarray:
    """Label masks for one slice (returns ``(S, S)``) or a sequence (``(n, S, S)``)."""
    single = isinstance(slices, LabeledSlice) or (isinstance(slices, np.ndarray) and slices.ndim == 2)
    seq = [slices] if single else list(slices)
    images = np.stack([s.image if isinstance(s, LabeledSlice) else np.asarray(s) for s in seq])[:, None]
    S = model.config.input_size
    if images.shape[2:] != (S, S):
        raise ValueError(f"predict: slice size {images.shape[2:]} does not match model input {S}x{S}")
    masks = argmax_labels(predict_logits(model, images, batch_size))
    return masks[0] if single else masks


def global_dsc(preds: np.ndarray, gts: np.ndarray, labels=STRUCTURE_LABELS) -> tuple:
    """DSC per label from intersection/size sums pooled over all slices."""
    out = []
    for lab in labels:
        inter, total = dsc_counts(preds, gts, lab)
        out.append(dice_from_counts(inter, total))
    return tuple(out)


def validate(model: Model, val_set: Sequence[LabeledSlice], batch_size: int = 10) -> tuple[tuple, float]:
    """``(per-structure DSCs, their mean)`` on ``val_set`` in eval mode."""
    images, masks = stack(val_set, model.dtype)
    preds = argmax_labels(predict_logits(model, images, batch_size))
    d = global_dsc(preds, masks)
    return d, float(np.mean(d))


def write_history(history: Sequence[EpochRecord], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(HISTORY_FIELDS)
        for rec in history:
            w.writerow(rec.row())


def read_history(path) -> list[EpochRecord]:
    with Path(path).open() as f:
        rows = list(csv.DictReader(f))
    return [EpochRecord(int(r["epoch"]), float(r["train_loss"]),
                        tuple(float(r[f"dsc_{i}"]) for i in STRUCTURE_LABELS), float(r["dsc_avg"]))
            for r in rows]


def train(model: Model, train_set: Sequence[LabeledSlice], val_set: Sequence[LabeledSlice],
          cfg: TrainConfig) -> tuple[Model, list[EpochRecord]]:
    """Train ``model`` in place; return the best-validation copy and the epoch history."""
    from .checkpoint import save_checkpoint

    cfg.validate()
    if not train_set:
        raise TrainingError("training set is empty")
    if not val_set:
        raise TrainingError("validation set is empty")
    S = model.config.input_size
    for s in list(train_set[:1]) + list(val_set[:1]):
        if s.image.shape != (S, S):
            raise TrainingError(f"slice {s.slice_id!r} is {s.image.shape}, model expects {S}x{S}")

    images, masks = stack(train_set, model.dtype)
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(model.parameters(), lr=cfg.lr)
    ckpt_dir = Path(cfg.checkpoint_dir) if cfg.checkpoint_dir else None
    history: list[EpochRecord] = []
    best: Optional[Model] = None
    best_score = -math.inf

    with threads(cfg.threads):
        for epoch in range(1, cfg.epochs + 1):
            model.train()
            order = rng.permutation(len(images))
            losses, weights = [], []
            for b, start in enumerate(range(0, len(order), cfg.batch_size)):
                idx = order[start:start + cfg.batch_size]
                with Tape() as tape:
                    loss = softmax_ce_loss(model(Tensor(images[idx])), masks[idx])
                value = loss.item()
                if not math.isfinite(value):
                    raise TrainingError(f"non-finite loss {value} at epoch {epoch}, batch {b}")
                opt.zero_grad()
                tape.backward(loss)
                opt.step()
                losses.append(value)
                weights.append(len(idx))
            train_loss = float(np.average(losses, weights=weights))

            if epoch % cfg.val_every == 0 or epoch == cfg.epochs:
                d, avg = validate(model, val_set, cfg.batch_size)
            else:
                d, avg = (math.nan,) * 5, math.nan
            rec = EpochRecord(epoch, train_loss, d, avg)
            history.append(rec)
            log.info("epoch %d loss %.4f val dsc %s avg %.4f", epoch, train_loss,
                     " ".join(f"{v:.3f}" for v in d), avg)

            if ckpt_dir is not None:
                save_checkpoint(model, ckpt_dir / f"epoch_{epoch}.ckpt")
            if avg > best_score:
                best_score = avg
                best = model.copy()
                best.best_epoch = epoch
                if ckpt_dir is not None:
                    save_checkpoint(best, ckpt_dir / "best.ckpt")
    if ckpt_dir is not None:
        write_history(history, ckpt_dir / "history.csv")
    return best.eval(), history
