"""
Training on size alone
======================

Two synthetic classes that differ only in mean radius. A tiny APSNet
needs a couple of hundred images and a few epochs to separate them;
Grad-CAM then shows where it looked.
"""
import sys
from pathlib import Path

import torch

from apsnet.dataset import load_batch, size_only_config, synth_generate
from apsnet.explainability import grad_cam, save_heatmap
from apsnet.training import TrainConfig, train

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_size_only")
torch.set_num_threads(1)

manifest = synth_generate(size_only_config(per_class=100, image_size=64), out / "corpus")

# %%
# Desk-scale settings: 64 px inputs, tiny backbone, a handful of epochs.
cfg = TrainConfig(image_size=64, epochs=8, early_stop_patience=4, backbone="tiny")
run = train(cfg, manifest, out / "run",
            on_epoch=lambda r: print(f"epoch {r.epoch}: accuracy {r.test_accuracy:.3f}"))
print(f"best {run.best_accuracy:.3f} at epoch {run.best_epoch}")

# %%
# Heatmaps from the best checkpoint, one per class.
from apsnet.training import load_checkpoint

model = load_checkpoint(run.best_checkpoint).model
test_ids = manifest.ids("test")
for label in range(manifest.num_classes):
    sid = next(i for i in test_ids if manifest.labels([i])[0] == label)
    x, _ = load_batch(manifest, [sid], 64)
    save_heatmap(grad_cam(model, x[0], label), x[0], out / f"cam_{manifest.class_names[label]}.png")
