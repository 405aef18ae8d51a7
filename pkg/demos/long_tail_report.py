"""
Long-tailed evaluation
======================

Train on a Zipf-shaped corpus, then look past overall accuracy: per-class
precision/recall, the per-head accuracies, and a 2-D view of the features
feeding the concatenation head.
"""
import sys
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import torch

from apsnet.dataset import class_histogram, long_tail_config, synth_generate
from apsnet.evaluation import confusion, metrics, per_class_report
from apsnet.explainability import export_features, project_2d
from apsnet.model import fuse_predictions
from apsnet.training import ImageCache, TrainConfig, head_accuracies, predict_logits, restore_best, train

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_long_tail")
torch.set_num_threads(1)

# %%
# Smaller than the acceptance corpus so the demo finishes in a few minutes.
manifest = synth_generate(long_tail_config(6, 150, 12, image_size=64), out / "corpus")
for name, n_train, n_test in class_histogram(manifest):
    print(f"{name}: {n_train} train / {n_test} test")

cfg = TrainConfig(image_size=64, epochs=8, early_stop_patience=8, backbone="tiny")
run = train(cfg, manifest, out / "run")
model = restore_best(cfg, run, manifest.num_classes)

# %%
# Macro averages weigh the tail classes as much as the head.
test = ImageCache(manifest, manifest.ids("test"), 64)
logits = predict_logits(model, test)
truth = test.labels.numpy()
cm = confusion(fuse_predictions(logits["fused"]), truth, manifest.num_classes)
report = metrics(cm, manifest.class_names)
print(f"accuracy {report.accuracy:.3f}  macro-F1 {report.macro_f1:.3f}")
print("per head:", {k: round(v, 3) for k, v in head_accuracies(logits, truth).items()})
for row in per_class_report(cm, manifest.class_names, out / "per_class.csv")[1:]:
    print("  {:10s} P={:.2f} R={:.2f} F1={:.2f} n={}".format(*row))

# %%
# PCA of the concatenated penultimate vectors.
table = export_features(model, manifest, "test", 64)
xy = project_2d(table)
plt.scatter(xy[:, 0], xy[:, 1], c=table.labels, cmap="tab10", s=12)
plt.savefig(out / "projection.png", dpi=80)
