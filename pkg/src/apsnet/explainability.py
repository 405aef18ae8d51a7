"""Grad-CAM heatmaps, penultimate-feature export and PCA projection."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .dataset import DatasetManifest
from .model import APSNet
from .training import ImageCache

LAYERS = ("c2", "c3", "c4", "c5")


@dataclass
class Heatmap:
    values: np.ndarray  # H×W in [0, 1]
    layer: str
    target_class: int


def normalize_cam(cam: torch.Tensor) -> torch.Tensor:
    peak = cam.max()
    return cam / peak if peak > 0 else torch.zeros_like(cam)


def cam_from_gradients(activations: torch.Tensor, gradients: torch.Tensor, size=None) -> torch.Tensor:
    """Grad-CAM map from C×h×w activations and their gradients.

    Channel weights are the spatially averaged gradients; the map is the
    rectified weighted channel sum, optionally resized (bilinear) to ``size``
    and divided by its maximum.
    """
    weights = gradients.mean(dim=(1, 2))
    cam = F.relu((weights[:, None, None] * activations).sum(0))
    if size is not None and tuple(cam.shape) != tuple(size):
        cam = F.interpolate(cam[None, None], size=tuple(size), mode="bilinear", align_corners=False)[0, 0]
    return normalize_cam(cam)


def grad_cam(model: APSNet, image: torch.Tensor, target_class: int, layer: str = "c5",
             head: str = "fused") -> Heatmap:
    """Heatmap for ``target_class`` on a single 3×H×W (or 1×3×H×W) image.

    ``layer`` names a post-SPE stage feature; ``head`` selects which score is
    differentiated (``fused`` or one of ``1``, ``2``, ``dc``, ``con``).
    """
    if layer not in LAYERS:
        raise ValueError(f"no stored activations for layer {layer!r}; choose from {LAYERS}")
    if not 0 <= target_class < model.num_classes:
        raise ValueError(f"target_class {target_class} out of range")
    x = image if image.dim() == 4 else image[None]
    model.eval()
    with torch.enable_grad():
        out = model(x)
        act = out.pyramid[LAYERS.index(layer)]
        score = out.head(head)[0, target_class]
        (grad,) = torch.autograd.grad(score, act, allow_unused=True)
    if grad is None:
        grad = torch.zeros_like(act)
    cam = cam_from_gradients(act[0].detach(), grad[0], x.shape[-2:])
    return Heatmap(cam.numpy(), layer, target_class)


def save_heatmap(heatmap: Heatmap, image: torch.Tensor, png_path, csv_path=None, alpha: float = 0.5) -> None:
    """Overlay the heatmap (jet colormap) on the image at ``alpha``; optionally dump raw values."""
    from matplotlib import colormaps

    base = image.detach().cpu().numpy()
    base = base[0] if base.ndim == 4 else base
    base = base.transpose(1, 2, 0)
    color = colormaps["jet"](heatmap.values)[..., :3]
    blend = (1 - alpha) * base + alpha * color
    Image.fromarray(np.round(np.clip(blend, 0, 1) * 255).astype(np.uint8), "RGB").save(png_path)
    if csv_path is not None:
        np.savetxt(csv_path, heatmap.values, delimiter=",", fmt="%.6f")


# --------------------------------------------------------------------------

@dataclass
class EmbeddingTable:
    ids: list[str]
    labels: np.ndarray
    features: np.ndarray  # n×D

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "label"] + [f"f{j}" for j in range(self.features.shape[1])])
            for sid, lab, row in zip(self.ids, self.labels, self.features):
                w.writerow([sid, int(lab)] + [repr(float(v)) for v in row])

    @classmethod
    def read_csv(cls, path) -> "EmbeddingTable":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        body = rows[1:]
        ids = [r[0] for r in body]
        labels = np.array([int(r[1]) for r in body], dtype=int)
        feats = np.array([[float(v) for v in r[2:]] for r in body], dtype=np.float64)
        return cls(ids, labels, feats.reshape(len(body), len(rows[0]) - 2))


@torch.no_grad()
def export_features(model: APSNet, manifest: DatasetManifest, split: str | None = "test",
                    image_size: int | None = None, batch_size: int = 32, path=None) -> EmbeddingTable:
    """Head_Con input vectors (eval mode) for every sample of ``split`` in manifest order."""
    ids = manifest.ids(split)
    size = image_size or manifest.image_size or 512
    data = ImageCache(manifest, ids, size, max_bytes=0)
    model.eval()
    feats = []
    for start in range(0, len(ids), batch_size):
        x, _ = data.get(torch.arange(start, min(len(ids), start + batch_size)))
        feats.append(model(x).features)
    table = EmbeddingTable(ids, data.labels.numpy(), torch.cat(feats).double().numpy())
    if path is not None:
        table.write_csv(path)
    return table


def project_2d(features, rel_tol: float = 1e-12) -> np.ndarray:
    """Project rows onto the top two principal directions.

    Each direction's largest-magnitude component is made positive. Directions
    with (numerically) zero variance give zero coordinates.
    """
    x = np.asarray(features.features if isinstance(features, EmbeddingTable) else features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("project_2d needs at least two samples")
    xc = x - x.mean(0)
    cov = xc.T @ xc / (len(x) - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1][:2]
    out = np.zeros((len(x), 2))
    top = evals[order[0]] if len(order) else 0.0
    for k, j in enumerate(order):
        if top <= 0 or evals[j] <= rel_tol * top:
            continue
        v = evecs[:, j]
        if v[np.argmax(np.abs(v))] < 0:
            v = -v
        out[:, k] = xc @ v
    return out


def write_projection(table: EmbeddingTable, coords: np.ndarray, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "label", "x", "y"])
        for sid, lab, (x, y) in zip(table.ids, table.labels, coords):
            w.writerow([sid, int(lab), repr(float(x)), repr(float(y))])
