"""Size priors: frequency bands, Sobel, Otsu mask, mask edge, raw grey.

All functions take torch tensors (numpy arrays are accepted where noted) and
operate on the trailing two axes as the image plane.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from skimage.filters import threshold_otsu

PRIOR_KINDS = ("hf", "lf", "sobel", "edge", "mask", "raw")
LUMA = (0.299, 0.587, 0.114)


@dataclass
class PriorMap:
    data: torch.Tensor  # B×1×h×w
    kind: str
    stage: int = 0


def default_cutoff(h: int, w: int) -> int:
    return max(1, min(h, w) // 8)


def lowpass_disk(h: int, w: int, cutoff_radius: float, device=None) -> torch.Tensor:
    """Boolean mask over a centred (fftshift-ed) spectrum: True inside the disk."""
    fy = torch.arange(h, device=device) - h // 2
    fx = torch.arange(w, device=device) - w // 2
    return fy[:, None] ** 2 + fx[None, :] ** 2 <= cutoff_radius**2


def fft_split(image, cutoff_radius: float | None = None):
    """Split an image into low- and high-frequency bands with a hard disk mask.

    The spectrum of each channel is centred, the disk of ``cutoff_radius``
    around DC forms the low band and its complement the high band. Each band
    is transformed back and its real part kept, so ``lf + hf == image`` up to
    rounding. Works on any ``...×H×W`` tensor or array; returns ``(lf, hf)``
    of the same type.
    """
    as_numpy = isinstance(image, np.ndarray)
    x = torch.as_tensor(image)
    if not x.is_floating_point():
        x = x.float()
    if not torch.isfinite(x).all():
        raise ValueError("fft_split: non-finite input")
    h, w = x.shape[-2:]
    if cutoff_radius is None:
        cutoff_radius = default_cutoff(h, w)
    if not 0 < cutoff_radius < min(h, w) / 2:
        raise ValueError(f"cutoff_radius must be in (0, {min(h, w) / 2}), got {cutoff_radius}")

    spec = torch.fft.fftshift(torch.fft.fft2(x), dim=(-2, -1))
    keep_low = lowpass_disk(h, w, cutoff_radius, x.device)
    low = torch.where(keep_low, spec, torch.zeros((), dtype=spec.dtype))
    high = spec - low
    lf = torch.fft.ifft2(torch.fft.ifftshift(low, dim=(-2, -1))).real
    hf = torch.fft.ifft2(torch.fft.ifftshift(high, dim=(-2, -1))).real
    if as_numpy:
        return lf.numpy(), hf.numpy()
    return lf, hf


def to_gray(images: torch.Tensor) -> torch.Tensor:
    """B×3×H×W -> B×1×H×W luma."""
    wts = torch.tensor(LUMA, dtype=images.dtype, device=images.device).view(1, 3, 1, 1)
    return (images * wts).sum(1, keepdim=True)


def sobel_magnitude(gray: torch.Tensor) -> torch.Tensor:
    kx = torch.tensor([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]], dtype=gray.dtype)
    k = torch.stack([kx, kx.T])[:, None]
    g = F.conv2d(F.pad(gray, (1, 1, 1, 1), mode="replicate"), k)
    return torch.sqrt(g[:, :1] ** 2 + g[:, 1:] ** 2)


def otsu_mask(gray: torch.Tensor) -> torch.Tensor:
    """Per-image Otsu foreground (1 above threshold). Constant images give all zeros."""
    out = torch.zeros_like(gray)
    for i, g in enumerate(gray[:, 0].detach().cpu().numpy()):
        if g.min() == g.max():
            continue
        out[i, 0] = torch.from_numpy(g > threshold_otsu(g)).to(gray.dtype)
    return out


def erode3(mask: torch.Tensor) -> torch.Tensor:
    """3×3 binary erosion; pixels outside the image count as background."""
    padded = F.pad(mask, (1, 1, 1, 1), value=0.0)
    return -F.max_pool2d(-padded, 3, stride=1)


def make_prior(images: torch.Tensor, kind: str = "hf", cutoff_radius: float | None = None) -> PriorMap:
    """Compute a stage-0 prior (B×1×H×W) of the given kind from a B×3×H×W batch."""
    if kind not in PRIOR_KINDS:
        raise ValueError(f"unknown prior kind {kind!r}; expected one of {PRIOR_KINDS}")
    images = torch.as_tensor(images)
    if kind in ("hf", "lf"):
        lf, hf = fft_split(images, cutoff_radius)
        data = (hf if kind == "hf" else lf).mean(1, keepdim=True)
    else:
        gray = to_gray(images)
        if kind == "raw":
            data = gray
        elif kind == "sobel":
            data = sobel_magnitude(gray)
        else:
            mask = otsu_mask(gray)
            data = mask if kind == "mask" else mask - erode3(mask)
    return PriorMap(data, kind, 0)


def prior_channels(images: torch.Tensor, kind: str, cutoff_radius: float | None = None) -> torch.Tensor:
    """Prior input for the network: per-channel bands for hf/lf, single map otherwise."""
    if kind in ("hf", "lf"):
        lf, hf = fft_split(images, cutoff_radius)
        return hf if kind == "hf" else lf
    return make_prior(images, kind, cutoff_radius).data


def shannon_entropy(raster, bins: int = 256) -> float:
    """Entropy in bits of the value histogram over [0, 1] with ``bins`` equal bins."""
    if bins < 2:
        raise ValueError("bins must be >= 2")
    values = np.asarray(raster, dtype=np.float64).ravel()
    if values.size == 0:
        raise ValueError("empty raster")
    counts, _ = np.histogram(values, bins=bins, range=(0.0, 1.0))
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log2(p)).sum()) + 0.0


def unit_range(x: np.ndarray) -> np.ndarray:
    lo, hi = float(x.min()), float(x.max())
    if hi == lo:
        return np.zeros_like(x)
    return (x - lo) / (hi - lo)


def prior_entropy(prior: torch.Tensor, kind: str, bins: int = 256) -> float:
    """Entropy of one image's prior. Real-valued kinds are min-max scaled to [0, 1] first."""
    x = prior.detach().cpu().numpy().astype(np.float64)
    if kind in ("hf", "lf", "sobel"):
        x = unit_range(x)
    return shannon_entropy(x, bins)


def corpus_entropy_report(
    manifest,
    kinds=PRIOR_KINDS,
    sample_count: int = 10,
    rng_seed: int = 0,
    image_size: int | None = None,
    bins: int = 256,
) -> dict[str, float]:
    """Mean prior entropy (bits) over a seeded random sample of the corpus."""
    from .dataset import load_batch

    ids = manifest.ids()
    if sample_count > len(ids):
        raise ValueError(f"sample_count {sample_count} exceeds corpus size {len(ids)}")
    rng = np.random.default_rng(rng_seed)
    chosen = [ids[i] for i in sorted(rng.choice(len(ids), sample_count, replace=False))]
    size = image_size or manifest.image_size or 512
    report = {}
    for kind in kinds:
        values = []
        for sid in chosen:
            images, _ = load_batch(manifest, [sid], size)
            values.append(prior_entropy(make_prior(images, kind).data[0, 0], kind, bins))
        report[kind] = float(np.mean(values))
    return report


def write_entropy_report(report: dict[str, float], path, sample_count: int, seed: int) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["kind", "mean_entropy_bits", "sample_count", "seed"])
        for kind, bits in report.items():
            w.writerow([kind, f"{bits:.6f}", sample_count, seed])


def save_prior_png(prior: torch.Tensor, path: str | Path) -> None:
    """Write a single h×w prior (any leading singleton dims) as an 8-bit grey PNG."""
    x = unit_range(prior.detach().cpu().numpy().astype(np.float64).squeeze())
    Image.fromarray(np.round(x * 255).astype(np.uint8), "L").save(path)
