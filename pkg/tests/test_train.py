"""Training loops: metrics, early stopping, determinism, the freeze contract."""

import numpy as np
import pytest
import torch

from cropmap.errors import ConfigError, DataError
from cropmap.model import SIGMOID, ModelConfig, build_model, swap_head
from cropmap.patches import PatchMeta, PatchStack, filter_phase2, sample_patches
from cropmap.raster import Window
from cropmap.train import (
    TrainConfig,
    evaluate,
    split_by_square,
    train_phase1,
    train_phase2,
    write_metrics_csv,
)

torch.set_num_threads(1)


def tiny_model(n_categories=8, seed=0):
    return build_model(ModelConfig(base_channels=(4, 8, 12, 16),
                                   n_categories=n_categories,
                                   attention_inter_channels=4,
                                   dropout_rate=0.1), seed=seed)


def synthetic_patch(patch_id="p", row_off=0, col_off=0, binary=None, label_value=1):
    levels = [np.zeros((256 >> i, 256 >> i, c), dtype=np.float32)
              for i, c in enumerate((4, 6, 6, 6))]
    label = np.full((256, 256), label_value, dtype=np.int32)
    meta = PatchMeta(patch_id=patch_id, window=Window(row_off, col_off, 256, 256),
                     origin_x=0.0, origin_y=2560.0, pixel_size=5.0,
                     crs_id="EPSG:32648")
    return PatchStack(*levels, label_mask=label, meta=meta, binary_mask=binary)


class ConstantModel:
    """Stand-in returning a fixed score everywhere, for metric hand counts."""

    head_kind = SIGMOID

    def __init__(self, value):
        self.value = value

    def eval(self):
        return self

    def __call__(self, *levels):
        b = levels[0].shape[0]
        return torch.full((b, 1, 256, 256), self.value)


def test_evaluate_hand_counted_metrics():
    """All-negative predictions on a half-positive mask.

    accuracy = 1/2 (the negative half is right), no positive predictions so
    precision = recall = f1 = 0.
    """
    binary = np.zeros((256, 256), dtype=np.uint8)
    binary[:128] = 1
    patch = synthetic_patch(binary=binary)
    report = evaluate(ConstantModel(0.2), [patch])
    assert report.accuracy == pytest.approx(0.5)
    assert report.precision == 0.0
    assert report.recall == 0.0
    assert report.f1 == 0.0
    assert report.n_samples == 256 * 256


def test_evaluate_all_positive_predictions():
    """Constant positive score: recall 1, precision = positive fraction."""
    binary = np.zeros((256, 256), dtype=np.uint8)
    binary[:64] = 1  # a quarter positive
    patch = synthetic_patch(binary=binary)
    report = evaluate(ConstantModel(0.9), [patch])
    assert report.recall == pytest.approx(1.0)
    assert report.precision == pytest.approx(0.25)
    assert report.f1 == pytest.approx(2 * 0.25 / 1.25)
    assert report.accuracy == pytest.approx(0.25)


def test_evaluate_threshold_is_respected():
    binary = np.ones((256, 256), dtype=np.uint8)
    patch = synthetic_patch(binary=binary)
    assert evaluate(ConstantModel(0.45), [patch], threshold=0.4).recall == 1.0
    assert evaluate(ConstantModel(0.45), [patch], threshold=0.5).recall == 0.0


def test_evaluate_empty_source():
    with pytest.raises(DataError, match="empty"):
        evaluate(ConstantModel(0.5), [])


@pytest.fixture(scope="module")
def training_patches(landscape):
    patches = sample_patches(landscape.grids, landscape.mask, n=6, seed=5)
    phase2 = filter_phase2(patches, landscape.polygons, min_age=3.0)
    assert len(phase2) >= 4, "fixture landscape must yield phase-2 patches"
    return patches, phase2


def test_zero_learning_rate_stops_after_patience(training_patches):
    """With lr = 0 the val loss never improves after epoch 1, so a patience
    of 1 ends training at epoch 2 regardless of max_epochs."""
    patches, _ = training_patches
    m = tiny_model()
    cfg = TrainConfig(batch_size=4, max_epochs=10, patience=1, learning_rate=0.0,
                      seed=0)
    _, history = train_phase1(m, patches[:4], patches[4:], cfg)
    epochs = {row["epoch"] for row in history}
    assert epochs == {1, 2}
    assert len(history) == 4  # train + val rows per epoch


def test_max_epochs_bounds_training(training_patches):
    patches, _ = training_patches
    m = tiny_model()
    cfg = TrainConfig(batch_size=4, max_epochs=2, patience=10, learning_rate=1e-3,
                      seed=0)
    _, history = train_phase1(m, patches[:4], patches[4:], cfg)
    assert {row["epoch"] for row in history} == {1, 2}


def test_phase1_training_is_deterministic(training_patches):
    patches, _ = training_patches
    cfg = TrainConfig(batch_size=4, max_epochs=2, patience=5, learning_rate=1e-3,
                      seed=3)
    m1, h1 = train_phase1(tiny_model(seed=1), patches[:4], patches[4:], cfg)
    m2, h2 = train_phase1(tiny_model(seed=1), patches[:4], patches[4:], cfg)
    assert h1 == h2
    for (n1, p1), (_, p2) in zip(m1.named_parameters(), m2.named_parameters()):
        assert torch.equal(p1, p2), n1


def test_phase1_loss_decreases(training_patches):
    patches, _ = training_patches
    cfg = TrainConfig(batch_size=4, max_epochs=4, patience=4, learning_rate=2e-3,
                      seed=0)
    _, history = train_phase1(tiny_model(), patches[:4], patches[4:], cfg)
    train_losses = [r["loss"] for r in history if r["split"] == "train"]
    assert train_losses[-1] < train_losses[0]


def test_phase2_freezes_encoder_and_moves_decoder(training_patches):
    """One phase-2 step: encoder bitwise identical, some decoder weight moved."""
    _, phase2 = training_patches
    m = tiny_model()
    before = {n: p.clone() for n, p in m.named_parameters()}
    cfg = TrainConfig(batch_size=2, max_epochs=1, patience=1, learning_rate=1e-3,
                      seed=0, phase=2)
    m, _ = train_phase2(m, phase2[:2], phase2[2:], cfg)
    encoder_same = all(torch.equal(p, before[n])
                       for n, p in m.named_parameters()
                       if m.group_of(n) == "encoder")
    decoder_moved = any(not torch.equal(p, before[n])
                        for n, p in m.named_parameters()
                        if m.group_of(n) == "decoder")
    assert encoder_same
    assert decoder_moved
    assert m.head_kind == SIGMOID
    assert m.frozen_groups == ("encoder",)


def test_phase_and_head_guards(training_patches):
    patches, phase2 = training_patches
    cfg1 = TrainConfig(phase=1, max_epochs=1)
    cfg2 = TrainConfig(phase=2, max_epochs=1)
    with pytest.raises(ConfigError, match="phase"):
        train_phase1(tiny_model(), patches[:4], patches[4:], cfg2)
    with pytest.raises(ConfigError, match="phase"):
        train_phase2(tiny_model(), phase2[:2], phase2[2:], cfg1)
    sigmoid_model = swap_head(tiny_model(), SIGMOID)
    with pytest.raises(ConfigError, match="softmax"):
        train_phase1(sigmoid_model, patches[:4], patches[4:], cfg1)


def test_source_validation(training_patches):
    patches, _ = training_patches
    cfg = TrainConfig(max_epochs=1)
    with pytest.raises(DataError, match="empty training"):
        train_phase1(tiny_model(), [], patches[:1], cfg)
    with pytest.raises(DataError, match="empty validation"):
        train_phase1(tiny_model(), patches[:1], [], cfg)
    # phase 2 without binary masks is a data error, not a crash
    cfg2 = TrainConfig(max_epochs=1, phase=2)
    with pytest.raises(DataError, match="binary_mask"):
        train_phase2(tiny_model(), patches[:2], patches[2:4], cfg2)


def test_label_code_out_of_range():
    patch = synthetic_patch(label_value=9)  # model below has 8 categories
    cfg = TrainConfig(max_epochs=1)
    with pytest.raises(DataError, match="out of range"):
        train_phase1(tiny_model(n_categories=8), [patch], [patch], cfg)


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)
    with pytest.raises(ConfigError):
        TrainConfig(patience=0)
    with pytest.raises(ConfigError):
        TrainConfig(phase=3)
    with pytest.raises(ConfigError):
        TrainConfig(val_fraction=1.0)


def test_split_by_square_keeps_squares_together():
    patches = [synthetic_patch(f"p{i}", row_off=(i % 4) * 256, col_off=0)
               for i in range(8)]
    # two patches per square; add offset twins inside each square
    twins = [synthetic_patch(f"t{i}", row_off=(i % 4) * 256 + 8, col_off=8)
             for i in range(4)]
    allp = patches + twins
    train, val = split_by_square(allp, val_fraction=0.25, seed=0)
    assert len(train) + len(val) == len(allp)
    train_sq = {(p.meta.window.row_off // 256, p.meta.window.col_off // 256)
                for p in train}
    val_sq = {(p.meta.window.row_off // 256, p.meta.window.col_off // 256)
              for p in val}
    assert not (train_sq & val_sq)
    assert len(val_sq) == 1  # 25% of 4 squares


def test_split_by_square_deterministic():
    patches = [synthetic_patch(f"p{i}", row_off=(i % 5) * 256) for i in range(10)]
    a = split_by_square(patches, 0.2, seed=7)
    b = split_by_square(patches, 0.2, seed=7)
    assert [p.meta.patch_id for p in a[0]] == [p.meta.patch_id for p in b[0]]
    assert [p.meta.patch_id for p in a[1]] == [p.meta.patch_id for p in b[1]]


def test_split_by_square_single_square_fails():
    patches = [synthetic_patch(f"p{i}") for i in range(4)]
    with pytest.raises(DataError, match="too small"):
        split_by_square(patches, 0.2, seed=0)


def test_metrics_csv_format(tmp_path):
    history = [
        {"epoch": 1, "split": "train", "loss": 0.5, "accuracy": 0.75,
         "precision": 0.7, "recall": 0.6, "f1": 0.646153},
        {"epoch": 1, "split": "val", "loss": 0.6, "accuracy": 0.7,
         "precision": 0.65, "recall": 0.55, "f1": 0.595833},
    ]
    path = tmp_path / "metrics.csv"
    write_metrics_csv(path, history)
    lines = path.read_text().strip().split("\n")
    assert lines[0] == "epoch,split,loss,accuracy,precision,recall,f1"
    assert lines[1] == "1,train,0.500000,0.750000,0.700000,0.600000,0.646153"
    assert len(lines) == 3
