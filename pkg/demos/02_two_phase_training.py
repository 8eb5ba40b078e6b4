"""Train the segmentation model in two phases on synthetic patches.

Phase 1 fits a multi-category softmax head over every land-cover class with
a dice loss, which teaches the encoder general spectral features. Phase 2
freezes that encoder, swaps in a single-channel sigmoid head, and fine-tunes
the decoder on a binary mature-cashew target with a boundary-weighted loss.
The demo uses a small model and a small landscape so it finishes in well
under a minute on a CPU.

Run from the repository root:  python3 demos/02_two_phase_training.py
"""

import time
from pathlib import Path

from cropmap import synthetic
from cropmap.model import ModelConfig, build_model, save_checkpoint
from cropmap.patches import filter_phase2, sample_patches
from cropmap.train import TrainConfig, evaluate, split_by_square, train_phase1, train_phase2, write_metrics_csv

out = Path(__file__).parent / "out" / "02_two_phase_training"
out.mkdir(parents=True, exist_ok=True)

# step 1: a landscape large enough that held-out validation squares exist
config = synthetic.SyntheticConfig(
    rows=768, cols=768,
    mixture={"Cashew": 0.4, "Forest Cover": 0.4, "Bare land": 0.2})
land = synthetic.generate_synthetic_landscape(config, seed=7)

# step 2: cut co-registered 256/128/64/32 px patches from the four levels
stacks = sample_patches(land.grids, land.mask, n=24, seed=11)
print(f"sampled {len(stacks)} patch stacks")

# step 3: split by 256 px square so validation patches never overlap training
train_set, val_set = split_by_square(stacks, val_fraction=0.25, seed=13)
print(f"split: {len(train_set)} train / {len(val_set)} val")

# step 4: phase 1, the multi-category head over all classes in the mixture
model_cfg = ModelConfig(base_channels=(8, 16, 24, 32), n_categories=8,
                        attention_inter_channels=8, dropout_rate=0.1)
m = build_model(model_cfg, seed=23)
n_params = sum(p.numel() for p in m.parameters())
print(f"model: {n_params} parameters, head={m.head_kind}")

t0 = time.time()
m, hist1 = train_phase1(
    m, train_set, val_set,
    TrainConfig(phase=1, batch_size=8, max_epochs=4, patience=4,
                learning_rate=2e-3, seed=17))
val1 = [r for r in hist1 if r["split"] == "val"]
print(f"phase 1: {len(val1)} epochs in {time.time() - t0:.0f}s, "
      f"val accuracy {val1[-1]['accuracy']:.3f}")

# step 5: phase 2 restricts the target to cashew stands older than 3 years;
# train_phase2 freezes the encoder and swaps the head internally
mature = filter_phase2(stacks, land.polygons, min_age=3.0)
train2, val2 = split_by_square(mature, val_fraction=0.25, seed=13)
print(f"phase 2 patches with a mature-cashew mask: {len(mature)}")

t0 = time.time()
m, hist2 = train_phase2(
    m, train2, val2,
    TrainConfig(phase=2, batch_size=8, max_epochs=4, patience=4,
                learning_rate=2e-3, seed=19))
print(f"phase 2: done in {time.time() - t0:.0f}s, head={m.head_kind}, "
      f"frozen groups: {m.frozen_groups}")

# step 6: held-out metrics for the binary cashew map
report = evaluate(m, val2, threshold=0.5)
print(f"held out: accuracy {report.accuracy:.3f}, precision {report.precision:.3f}, "
      f"recall {report.recall:.3f}, f1 {report.f1:.3f}")

# step 7: persist the fine-tuned model and the epoch-by-epoch metrics
save_checkpoint(out / "model.pt", m, phase=2)
write_metrics_csv(out / "metrics_phase1.csv", hist1)
write_metrics_csv(out / "metrics_phase2.csv", hist2)
print(f"wrote checkpoint and metric tables to {out}")
