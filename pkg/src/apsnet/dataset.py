"""Seed-image corpora: on-disk manifests, batch loading and synthetic generation.

A corpus lives under ``root/<class_name>/<file>``. The manifest is a sidecar
text index (``manifest.tsv``) with one record per line::

    class_index<TAB>class_name<TAB>relative_path<TAB>split

Lines starting with ``#`` carry metadata (currently ``image_size``).
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, UnidentifiedImageError

log = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.tsv"
SPLITS = ("train", "test")


@dataclass(frozen=True)
class ClassRecord:
    index: int
    name: str


@dataclass(frozen=True)
class Sample:
    id: str  # path relative to the corpus root, "/"-separated
    label: int
    split: str


@dataclass
class DatasetManifest:
    root: Path
    classes: list[ClassRecord]
    samples: list[Sample]
    image_size: int | None = None
    skipped: int = 0

    def __post_init__(self):
        self.root = Path(self.root)
        names = [c.name for c in self.classes]
        if len(set(names)) != len(names):
            raise ValueError("class names must be unique")
        if [c.index for c in self.classes] != list(range(len(self.classes))):
            raise ValueError("class indices must be 0..N-1 in order")
        seen = set()
        for s in self.samples:
            if s.id in seen:
                raise ValueError(f"duplicate sample id {s.id!r}")
            seen.add(s.id)
            if s.split not in SPLITS:
                raise ValueError(f"bad split {s.split!r} for {s.id}")
            if not 0 <= s.label < len(self.classes):
                raise ValueError(f"bad label {s.label} for {s.id}")
        self._by_id = {s.id: s for s in self.samples}

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    @property
    def class_names(self) -> list[str]:
        return [c.name for c in self.classes]

    @property
    def split(self) -> dict[str, str]:
        return {s.id: s.split for s in self.samples}

    def ids(self, split: str | None = None) -> list[str]:
        return [s.id for s in self.samples if split is None or s.split == split]

    def labels(self, ids: Iterable[str]) -> list[int]:
        return [self._by_id[i].label for i in ids]

    def __contains__(self, sample_id: str) -> bool:
        return sample_id in self._by_id

    def write(self, path: str | Path | None = None) -> Path:
        path = Path(path) if path is not None else self.root / MANIFEST_NAME
        lines = []
        if self.image_size is not None:
            lines.append(f"# image_size={self.image_size}")
        for s in self.samples:
            name = self.classes[s.label].name
            lines.append(f"{s.label}\t{name}\t{s.id}\t{s.split}")
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return path


def read_manifest(path: str | Path, root: str | Path | None = None) -> DatasetManifest:
    """Load a manifest written by :meth:`DatasetManifest.write`.

    ``root`` defaults to the manifest's directory.
    """
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    names: dict[int, str] = {}
    samples = []
    image_size = None
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        if line.startswith("#"):
            key, _, value = line[1:].strip().partition("=")
            if key.strip() == "image_size":
                image_size = int(value)
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise ValueError(f"{path}:{lineno}: expected 4 tab-separated fields")
        idx, name, rel, split = int(parts[0]), parts[1], parts[2], parts[3]
        if names.setdefault(idx, name) != name:
            raise ValueError(f"{path}:{lineno}: class index {idx} has two names")
        samples.append(Sample(rel, idx, split))
    classes = [ClassRecord(i, names[i]) for i in sorted(names)]
    return DatasetManifest(root or path.parent, classes, samples, image_size)


def _is_image(path: Path) -> bool:
    try:
        with Image.open(path) as im:
            im.verify()
        return True
    except (UnidentifiedImageError, OSError, SyntaxError):
        return False


def build_manifest(
    root: str | Path,
    split_ratio: float = 0.7,
    rng_seed: int = 0,
    persist: bool = True,
) -> DatasetManifest:
    """Index ``root/<class>/<image>`` and split each class at ``split_ratio``.

    Classes are ordered by name; that order is the label mapping. Files that
    do not decode as images are skipped and counted in ``manifest.skipped``.
    The split is drawn per class from one generator seeded with ``rng_seed``,
    so the result depends only on (directory contents, ratio, seed).
    """
    root = Path(root)
    if not 0.0 < split_ratio <= 1.0:
        raise ValueError("split_ratio must be in (0, 1]")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir() and not p.name.startswith("."))
    if not class_dirs:
        raise ValueError(f"no class directories under {root}")

    rng = np.random.default_rng(rng_seed)
    classes, samples, sizes = [], [], set()
    skipped = 0
    for idx, cdir in enumerate(class_dirs):
        files = []
        for f in sorted(p for p in cdir.iterdir() if p.is_file()):
            if _is_image(f):
                files.append(f)
            else:
                skipped += 1
        if not files:
            raise ValueError(f"class {cdir.name!r} has no images")
        with Image.open(files[0]) as im:
            sizes.add(im.size)
        n_train = min(len(files), max(1, round(split_ratio * len(files))))
        order = rng.permutation(len(files))
        train_idx = set(order[:n_train].tolist())
        classes.append(ClassRecord(idx, cdir.name))
        for j, f in enumerate(files):
            rel = f.relative_to(root).as_posix()
            samples.append(Sample(rel, idx, "train" if j in train_idx else "test"))
    if skipped:
        log.warning("skipped %d non-image files under %s", skipped, root)

    image_size = None
    if len(sizes) == 1:
        (w, h), = sizes
        image_size = w if w == h else None
    manifest = DatasetManifest(root, classes, samples, image_size, skipped)
    if persist:
        manifest.write()
    return manifest


def resize_bilinear(images: torch.Tensor, size: int) -> torch.Tensor:
    """Bilinear resize of a B×C×H×W tensor to size×size (half-pixel centres, no antialias)."""
    if images.shape[-2:] == (size, size):
        return images
    out = F.interpolate(images, size=(size, size), mode="bilinear", align_corners=False)
    return out.clamp_(0.0, 1.0)


def read_image(path: str | Path) -> np.ndarray:
    """Decode an image file to an H×W×3 float32 array in [0, 1]."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    except (UnidentifiedImageError, OSError) as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc
    return arr / 255.0


def load_batch(manifest: DatasetManifest, ids: Sequence[str], target: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Load ``ids`` as a (B×3×target×target float tensor, label vector) pair."""
    if len(ids) == 0:
        raise ValueError("ids must be nonempty")
    missing = [i for i in ids if i not in manifest]
    if missing:
        raise KeyError(f"ids not in manifest: {missing[:3]}")
    out = torch.empty(len(ids), 3, target, target)
    for k, sid in enumerate(ids):
        img = torch.from_numpy(read_image(manifest.root / sid)).permute(2, 0, 1)
        out[k] = resize_bilinear(img[None], target)[0]
    labels = torch.tensor(manifest.labels(ids), dtype=torch.long)
    return out, labels


def class_histogram(manifest: DatasetManifest) -> list[tuple[str, int, int]]:
    """(class, train_count, test_count) per class in label order."""
    counts = np.zeros((manifest.num_classes, 2), dtype=int)
    for s in manifest.samples:
        counts[s.label, SPLITS.index(s.split)] += 1
    return [(c.name, int(counts[c.index, 0]), int(counts[c.index, 1])) for c in manifest.classes]


def write_histogram(manifest: DatasetManifest, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["class", "train", "test"])
        w.writerows(class_histogram(manifest))


# --------------------------------------------------------------------------
# synthetic seed corpora

_SYNTH_DEFAULTS = {
    "radius_jitter": 0.08,
    "aspect_ratio": 0.75,
    "texture_frequency": 12.0,
    "base_gray": 0.55,
    "damage_prob": 0.2,
}


@dataclass
class SynthConfig:
    """Parameters for a synthetic seed corpus.

    Per-class lists must all have the same length as ``class_counts``. Radii
    are in pixels at the rendered ``image_size``; ``texture_frequency`` is in
    cycles per image width.
    """

    class_counts: list[int]
    mean_radius: list[float]
    radius_jitter: list[float] | None = None
    aspect_ratio: list[float] | None = None
    texture_frequency: list[float] | None = None
    base_gray: list[float] | None = None
    damage_prob: list[float] | None = None
    image_size: int = 128
    noise_sigma: float = 0.02
    rng_seed: int = 0
    split_ratio: float = 0.7
    class_names: list[str] | None = None
    texture_amplitude: float = 0.12
    background: float = 0.06
    tint: tuple[float, float, float] = (1.0, 0.82, 0.62)

    def __post_init__(self):
        n = len(self.class_counts)
        if n == 0:
            raise ValueError("need at least one class")
        for key, default in _SYNTH_DEFAULTS.items():
            if getattr(self, key) is None:
                setattr(self, key, [default] * n)
        for key in ("mean_radius", *_SYNTH_DEFAULTS):
            if len(getattr(self, key)) != n:
                raise ValueError(f"{key} has {len(getattr(self, key))} entries, class_counts has {n}")
        if self.class_names is None:
            self.class_names = [f"class_{i:02d}" for i in range(n)]
        elif len(self.class_names) != n:
            raise ValueError("class_names length mismatch with class_counts")
        if any(c < 1 for c in self.class_counts):
            raise ValueError("class_counts must all be >= 1")
        for r, jit in zip(self.mean_radius, self.radius_jitter):
            if not 0 < r * (1 + jit) < self.image_size / 2:
                raise ValueError(f"radius {r} (jitter {jit}) does not fit in {self.image_size}px image")


def zipf_counts(n_classes: int, head: int, tail: int) -> list[int]:
    """Power-law class counts falling from ``head`` to ``tail``."""
    if n_classes == 1:
        return [head]
    s = math.log(head / tail) / math.log(n_classes)
    return [max(tail, round(head * (k + 1) ** -s)) for k in range(n_classes)]


def render_seed(
    rng: np.random.Generator,
    size: int,
    radius: float,
    aspect: float,
    angle: float,
    texture_frequency: float,
    base_gray: float,
    damaged: bool,
    cfg: SynthConfig,
) -> np.ndarray:
    """Render one centred textured ellipse as an H×W×3 float array in [0, 1]."""
    c = (size - 1) / 2.0
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    x, y = xx - c, yy - c
    ca, sa = math.cos(angle), math.sin(angle)
    u = x * ca + y * sa
    v = -x * sa + y * ca
    a, b = radius, radius * aspect
    rho = np.sqrt((u / a) ** 2 + (v / b) ** 2)
    # one-pixel soft boundary
    inside = np.clip((1.0 - rho) * b + 0.5, 0.0, 1.0)

    texture = cfg.texture_amplitude * np.sin(2 * math.pi * texture_frequency * u / size)
    shade = 0.15 * (1.0 - rho**2).clip(0.0, 1.0)  # convex body highlight
    seed = np.clip(base_gray + texture + shade, 0.0, 1.0)
    gray = cfg.background + inside * (seed - cfg.background)

    if damaged:
        # crack: a dark band along a random chord through the seed
        theta = rng.uniform(0, math.pi)
        offset = rng.uniform(-0.5, 0.5) * b
        width = max(1.0, 0.06 * radius)
        dist = np.abs(x * math.cos(theta) + y * math.sin(theta) - offset)
        crack = np.clip(width - dist, 0.0, 1.0) * inside
        gray = gray - crack * (gray - cfg.background)

    img = gray[..., None] * np.asarray(cfg.tint)[None, None, :]
    if cfg.noise_sigma > 0:
        img = img + rng.normal(0.0, cfg.noise_sigma, img.shape)
    return np.clip(img, 0.0, 1.0)


def synth_generate(cfg: SynthConfig, out: str | Path) -> DatasetManifest:
    """Write a synthetic corpus to ``out`` and return its (persisted) manifest.

    Every seed is centred and drawn at fixed magnification, so absolute pixel
    size carries class information. Identical configs give byte-identical files.
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.rng_seed)
    for k, name in enumerate(cfg.class_names):
        cdir = out / name
        cdir.mkdir(exist_ok=True)
        for j in range(cfg.class_counts[k]):
            jit = cfg.radius_jitter[k]
            radius = cfg.mean_radius[k] * (1.0 + rng.uniform(-jit, jit))
            angle = rng.uniform(0, math.pi)
            damaged = bool(rng.random() < cfg.damage_prob[k])
            img = render_seed(
                rng, cfg.image_size, radius, cfg.aspect_ratio[k], angle,
                cfg.texture_frequency[k], cfg.base_gray[k], damaged, cfg,
            )
            Image.fromarray(np.round(img * 255).astype(np.uint8), "RGB").save(cdir / f"{j:05d}.png")
    return build_manifest(out, cfg.split_ratio, cfg.rng_seed)


def size_only_config(per_class: int = 140, image_size: int = 128, rng_seed: int = 0) -> SynthConfig:
    """Two classes identical except for mean radius (20 px vs 40 px at 128 px)."""
    scale = image_size / 128
    return SynthConfig(
        class_counts=[per_class, per_class],
        mean_radius=[20 * scale, 40 * scale],
        radius_jitter=[0.05, 0.05],
        aspect_ratio=[0.8, 0.8],
        texture_frequency=[10.0, 10.0],
        base_gray=[0.55, 0.55],
        damage_prob=[0.15, 0.15],
        image_size=image_size,
        rng_seed=rng_seed,
        split_ratio=100 / 140,
        class_names=["small", "large"],
    )


def long_tail_config(
    n_classes: int = 8,
    head: int = 600,
    tail: int = 25,
    image_size: int = 128,
    rng_seed: int = 0,
) -> SynthConfig:
    """Long-tailed corpus where classes are four close size levels crossed with two textures.

    Tone, shape and damage rate are shared, so no class is separable by a
    single cue once there are more than four classes.
    """
    counts = zipf_counts(n_classes, head, tail)
    scale = image_size / 128
    radii = (18.0, 24.0, 30.0, 36.0)
    k = range(n_classes)
    return SynthConfig(
        class_counts=counts,
        mean_radius=[radii[i % 4] * scale for i in k],
        radius_jitter=[0.1] * n_classes,
        aspect_ratio=[0.75] * n_classes,
        texture_frequency=[7.0 if (i // 4) % 2 == 0 else 14.0 for i in k],
        base_gray=[0.55] * n_classes,
        damage_prob=[0.2] * n_classes,
        image_size=image_size,
        rng_seed=rng_seed,
        split_ratio=0.7,
    )
