"""Two-phase training loops, pixel metrics, and early stopping.

Phase 1 fits the multi-category softmax head with dice loss. Phase 2 freezes
the encoder, swaps in a sigmoid head, and fits against the qualifying-cashew
binary mask with the boundary loss. Both loops keep the best-validation-loss
parameters and stop after `patience` epochs without improvement.
"""

from __future__ import annotations

import copy
import csv
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ConfigError, DataError, NumericError
from .model import SIGMOID, SOFTMAX, SegModel, boundary_loss, dice_loss, freeze_encoder, swap_head
from .patches import PatchStack


@dataclass(frozen=True)
class TrainConfig:
    """Knobs for one training run."""

    batch_size: int = 16
    max_epochs: int = 50
    patience: int = 5
    learning_rate: float = 1e-3
    lr_plateau_factor: float = 0.5
    lr_plateau_patience: int = 2
    seed: int = 0
    phase: int = 1
    val_fraction: float = 0.2

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")
        if self.max_epochs < 1:
            raise ConfigError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.phase not in (1, 2):
            raise ConfigError(f"phase must be 1 or 2, got {self.phase}")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError(f"val_fraction must be in (0, 1), got {self.val_fraction}")


@dataclass(frozen=True)
class MetricReport:
    """Pixel-level metrics; multi-category values are macro-averaged."""

    accuracy: float
    precision: float
    recall: float
    f1: float
    per_category: dict = field(default_factory=dict)
    n_samples: int = 0


class _Confusion:
    """Streaming per-category confusion tallies."""

    def __init__(self):
        self.tp = {}
        self.fp = {}
        self.fn = {}
        self.correct = 0
        self.total = 0

    def update(self, pred: np.ndarray, truth: np.ndarray):
        pred = pred.ravel()
        truth = truth.ravel()
        self.correct += int((pred == truth).sum())
        self.total += pred.size
        for cat in np.union1d(np.unique(pred), np.unique(truth)):
            c = int(cat)
            p = pred == c
            t = truth == c
            self.tp[c] = self.tp.get(c, 0) + int((p & t).sum())
            self.fp[c] = self.fp.get(c, 0) + int((p & ~t).sum())
            self.fn[c] = self.fn.get(c, 0) + int((~p & t).sum())

    def report(self, positive_class: int | None = None) -> MetricReport:
        """Macro-average over observed categories, or score one positive class."""
        per_category = {}
        for c in sorted(self.tp):
            tp, fp, fn = self.tp[c], self.fp[c], self.fn[c]
            prec = tp / (tp + fp) if tp + fp else 0.0
            rec = tp / (tp + fn) if tp + fn else 0.0
            f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
            per_category[c] = {"precision": prec, "recall": rec, "f1": f1,
                               "support": tp + fn}
        if positive_class is not None:
            entry = per_category.get(positive_class,
                                     {"precision": 0.0, "recall": 0.0, "f1": 0.0})
            prec, rec, f1 = entry["precision"], entry["recall"], entry["f1"]
        elif per_category:
            prec = float(np.mean([v["precision"] for v in per_category.values()]))
            rec = float(np.mean([v["recall"] for v in per_category.values()]))
            f1 = float(np.mean([v["f1"] for v in per_category.values()]))
        else:
            prec = rec = f1 = 0.0
        acc = self.correct / self.total if self.total else 0.0
        return MetricReport(accuracy=acc, precision=prec, recall=rec, f1=f1,
                            per_category=per_category, n_samples=self.total)


def _collate(patches: list[PatchStack], phase: int):
    """Stack patches into level tensors plus the phase's target tensor."""
    levels = []
    for name in ("level0", "level1", "level2", "level3"):
        arr = np.stack([np.asarray(getattr(p, name), dtype=np.float32) for p in patches])
        levels.append(torch.from_numpy(arr).permute(0, 3, 1, 2))
    if phase == 1:
        target = torch.from_numpy(np.stack([p.label_mask for p in patches]).astype(np.int64))
    else:
        target = torch.from_numpy(np.stack([p.binary_mask for p in patches]).astype(np.float32))
    return levels, target


def _check_sources(train, val, phase: int, n_categories: int | None = None):
    if not train:
        raise DataError("empty training patch source")
    if not val:
        raise DataError("empty validation patch source")
    if phase == 2:
        missing = [p.meta.patch_id for p in list(train) + list(val) if p.binary_mask is None]
        if missing:
            raise DataError(f"phase 2 needs binary_mask on every patch; missing on "
                            f"{missing[:3]}{'...' if len(missing) > 3 else ''}")
    if phase == 1 and n_categories is not None:
        top = max(int(p.label_mask.max()) for p in train + val)
        if top >= n_categories:
            raise DataError(f"label code {top} out of range for {n_categories} categories")


def _epoch_batches(n: int, batch_size: int, rng) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _train_loop(m: SegModel, train, val, cfg: TrainConfig, phase: int):
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    params = [p for p in m.parameters() if p.requires_grad]
    optimizer = torch.optim.Adam(params, lr=cfg.learning_rate)
    scheduler = torch.optim.lr_scheduler.ReduceLROnPlateau(
        optimizer, factor=cfg.lr_plateau_factor, patience=cfg.lr_plateau_patience)

    history = []
    best_loss = float("inf")
    best_state = None
    epochs_since_best = 0
    for epoch in range(1, cfg.max_epochs + 1):
        m.apply_train_mode()
        confusion = _Confusion()
        losses = []
        for idx in _epoch_batches(len(train), cfg.batch_size, rng):
            batch = [train[i] for i in idx]
            levels, target = _collate(batch, phase)
            optimizer.zero_grad()
            pred = m(*levels)
            loss = _phase_loss(pred, target, phase)
            if not torch.isfinite(loss):
                raise NumericError(f"non-finite training loss at epoch {epoch} "
                                   f"(loss={loss.item()!r})")
            loss.backward()
            optimizer.step()
            losses.append(float(loss.detach()))
            _tally(confusion, pred.detach(), target, phase)
        train_report = confusion.report(positive_class=1 if phase == 2 else None)
        train_loss = float(np.mean(losses))

        val_loss, val_report = _validate(m, val, cfg.batch_size, phase)
        scheduler.step(val_loss)
        history.append(_row(epoch, "train", train_loss, train_report))
        history.append(_row(epoch, "val", val_loss, val_report))

        if val_loss < best_loss:
            best_loss = val_loss
            best_state = copy.deepcopy(m.state_dict())
            epochs_since_best = 0
        else:
            epochs_since_best += 1
            if epochs_since_best >= cfg.patience:
                break
    if best_state is not None:
        m.load_state_dict(best_state)
    m.eval()
    return m, history


def _phase_loss(pred, target, phase: int):
    if phase == 1:
        onehot = torch.nn.functional.one_hot(target, num_classes=pred.shape[1])
        return dice_loss(pred, onehot.permute(0, 3, 1, 2).to(pred.dtype))
    return boundary_loss(pred[:, 0], target)


def _tally(confusion: _Confusion, pred, target, phase: int, threshold: float = 0.5):
    if phase == 1:
        confusion.update(pred.argmax(dim=1).numpy(), target.numpy())
    else:
        confusion.update((pred[:, 0] >= threshold).numpy().astype(np.int64),
                         target.numpy().astype(np.int64))


def _validate(m: SegModel, val, batch_size: int, phase: int, threshold: float = 0.5):
    m.eval()
    confusion = _Confusion()
    losses = []
    weights = []
    with torch.no_grad():
        for i in range(0, len(val), batch_size):
            batch = val[i:i + batch_size]
            levels, target = _collate(batch, phase)
            pred = m(*levels)
            losses.append(float(_phase_loss(pred, target, phase)))
            weights.append(len(batch))
            _tally(confusion, pred, target, phase, threshold)
    loss = float(np.average(losses, weights=weights))
    return loss, confusion.report(positive_class=1 if phase == 2 else None)


def _row(epoch: int, split: str, loss: float, report: MetricReport) -> dict:
    return {"epoch": epoch, "split": split, "loss": loss,
            "accuracy": report.accuracy, "precision": report.precision,
            "recall": report.recall, "f1": report.f1}


def train_phase1(m: SegModel, train: list[PatchStack], val: list[PatchStack],
                 cfg: TrainConfig) -> tuple[SegModel, list[dict]]:
    """Fit the multi-category head with dice loss; returns best model + history."""
    if m.head_kind != SOFTMAX:
        raise ConfigError("phase 1 requires the softmax head")
    if cfg.phase != 1:
        raise ConfigError(f"phase-1 trainer got cfg.phase={cfg.phase}")
    _check_sources(train, val, 1, m.cfg.n_categories)
    return _train_loop(m, train, val, cfg, phase=1)


def train_phase2(m: SegModel, train: list[PatchStack], val: list[PatchStack],
                 cfg: TrainConfig) -> tuple[SegModel, list[dict]]:
    """Freeze the encoder, swap to sigmoid, fit with the boundary loss."""
    if cfg.phase != 2:
        raise ConfigError(f"phase-2 trainer got cfg.phase={cfg.phase}")
    _check_sources(train, val, 2)
    freeze_encoder(m)
    swap_head(m, SIGMOID, seed=cfg.seed)
    return _train_loop(m, train, val, cfg, phase=2)


def evaluate(m: SegModel, val: list[PatchStack], threshold: float = 0.5,
             batch_size: int = 16) -> MetricReport:
    """Pixel-level metrics on a patch source with the model's active head."""
    if not val:
        raise DataError("empty evaluation patch source")
    phase = 2 if m.head_kind == SIGMOID else 1
    if phase == 2:
        _check_sources(val, val, 2)
    _, report = _validate(m, val, batch_size, phase, threshold)
    return report


def split_by_square(patches: list[PatchStack], val_fraction: float, seed: int,
                    square_px: int = 256) -> tuple[list[PatchStack], list[PatchStack]]:
    """Split patches into train/val by source square, not by patch.

    Overlapping patches from one square always land on the same side, so the
    validation set never sees training pixels.
    """
    squares = {}
    for p in patches:
        key = (p.meta.window.row_off // square_px, p.meta.window.col_off // square_px)
        squares.setdefault(key, []).append(p)
    keys = sorted(squares)
    rng = np.random.default_rng(seed)
    rng.shuffle(keys)
    n_val = max(1, round(val_fraction * len(keys)))
    if n_val >= len(keys):
        raise DataError(f"cannot hold out {n_val} of {len(keys)} squares; "
                        "landscape too small for this validation fraction")
    val_keys = set(keys[:n_val])
    train = [p for k in keys[n_val:] for p in squares[k]]
    val = [p for k in sorted(val_keys) for p in squares[k]]
    return train, val


def write_metrics_csv(path, history: list[dict]) -> None:
    """Write the per-epoch history as `epoch,split,loss,accuracy,precision,recall,f1`."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "split", "loss", "accuracy", "precision", "recall", "f1"])
        for row in history:
            writer.writerow([row["epoch"], row["split"],
                             f"{row['loss']:.6f}", f"{row['accuracy']:.6f}",
                             f"{row['precision']:.6f}", f"{row['recall']:.6f}",
                             f"{row['f1']:.6f}"])
