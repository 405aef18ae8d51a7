"""
Looking at the size prior
=========================

Render a few synthetic seeds, split them into frequency bands and compare
how much information each prior kind carries.
"""
import sys
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import torch

from apsnet.dataset import load_batch, size_only_config, synth_generate
from apsnet.prior import PRIOR_KINDS, corpus_entropy_report, fft_split, make_prior

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_size_prior")

# %%
# A small two-class corpus: the classes differ only in seed radius.
manifest = synth_generate(size_only_config(per_class=12, image_size=128), out / "corpus")
images, labels = load_batch(manifest, manifest.ids("train")[:4], 128)

# %%
# The FFT split keeps a disk of low frequencies; what is left is the
# high band, which mostly traces the seed outline.
lf, hf = fft_split(images)
print("reconstruction error", (lf + hf - images).abs().max().item())

# %%
# Every prior kind reduced to one channel, side by side.
fig, axes = plt.subplots(len(images), len(PRIOR_KINDS) + 1, figsize=(14, 9))
for row, img in enumerate(images):
    axes[row, 0].imshow(img.permute(1, 2, 0))
    for col, kind in enumerate(PRIOR_KINDS, 1):
        axes[row, col].imshow(make_prior(img[None], kind).data[0, 0], cmap="gray")
        axes[0, col].set_title(kind)
for ax in axes.flat:
    ax.axis("off")
fig.savefig(out / "priors.png", dpi=80)

# %%
# Mean Shannon entropy (bits) of each kind over a random sample.
for kind, bits in corpus_entropy_report(manifest, sample_count=10, rng_seed=1).items():
    print(f"{kind:6s} {bits:.3f}")
