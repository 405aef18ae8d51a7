"""Four-stage progressive training, evaluation helpers and checkpoints."""
from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .dataset import DatasetManifest, load_batch
from .losses import ContrastiveConfig, LossBreakdown, composite, cross_entropy
from .model import HEAD_NAMES, APSNet, BackboneSpec, ModelConfig, fuse_predictions

log = logging.getLogger(__name__)

LOG_HEADER = ["epoch", "stage1_loss", "stage2_loss", "stage3_ce", "stage3_contrast", "stage4_loss",
              "test_accuracy", "seconds"]
CHECKPOINT_FORMAT = "apsnet-checkpoint/1"


@dataclass
class TrainConfig:
    image_size: int = 512
    epochs: int = 200
    early_stop_patience: int = 30
    lr: float = 1e-3
    weight_decay: float = 5e-4
    batch_size: int = 16
    kappa: float = 0.0
    prior_kind: str = "hf"
    cutoff_radius: float | None = None
    backbone: str = "resnet50"
    optimizer: str = "sgd"
    momentum: float = 0.9
    schedule: str = "cosine"
    spatial_reduction: str = "learned"
    with_spe: bool = True
    eval_batch_size: int = 32
    rng_seed: int = 0

    def __post_init__(self):
        for name in ("image_size", "epochs", "early_stop_patience", "eval_batch_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.batch_size < 2:
            # batch norm on pooled vectors needs two samples per batch
            raise ValueError("batch_size must be at least 2")
        if self.lr <= 0 or self.weight_decay < 0 or not 0 <= self.momentum < 1:
            raise ValueError("lr must be positive, weight_decay >= 0, momentum in [0, 1)")
        if self.early_stop_patience > self.epochs:
            raise ValueError("early_stop_patience must not exceed epochs")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError("optimizer must be 'sgd' or 'adam'")
        if self.schedule not in ("cosine", "constant"):
            raise ValueError("schedule must be 'cosine' or 'constant'")
        ContrastiveConfig(self.kappa)

    @property
    def contrastive(self) -> ContrastiveConfig:
        return ContrastiveConfig(self.kappa)

    def model_config(self, num_classes: int) -> ModelConfig:
        return ModelConfig(
            backbone=BackboneSpec(self.backbone, None, num_classes),
            prior_kind=self.prior_kind,
            cutoff_radius=self.cutoff_radius,
            with_spe=self.with_spe,
            spatial_reduction=self.spatial_reduction,
        )

    def to_text(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)}\n" for f in fields(self))


def config_hash(payload: dict) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


# --------------------------------------------------------------------------
# one batch

def make_optimizer(model: torch.nn.Module, cfg: TrainConfig) -> torch.optim.Optimizer:
    if cfg.optimizer == "adam":
        return torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    return torch.optim.SGD(model.parameters(), lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)


def four_stage_step(
    model: APSNet,
    images: torch.Tensor,
    labels: torch.Tensor,
    optimizer: torch.optim.Optimizer,
    kappa: float | ContrastiveConfig = 0.0,
    after_backward: Callable[[int, APSNet], None] | None = None,
) -> LossBreakdown:
    """Run the four supervised sub-steps on one batch, one optimizer update each.

    1: CE on Head_1; 2: CE on Head_2; 3: CE + contrastive on Head_Dc;
    4: CE on Head_Con. Every sub-step does a fresh forward pass that touches
    only the parts of the network its head depends on. ``after_backward`` is
    called between backward and the update (for gradient inspection).
    """
    model.train()
    out = LossBreakdown()
    for stage in (1, 2, 3, 4):
        optimizer.zero_grad(set_to_none=True)
        logits, rep = model.forward_stage(images, stage)
        if not torch.isfinite(logits).all():
            raise FloatingPointError(f"stage {stage}: non-finite logits")
        if stage == 3:
            ce, con, loss = composite(logits, rep, labels, kappa)
            out.ce_dc, out.contrast, out.composite = ce.item(), con.item(), loss.item()
        else:
            loss = cross_entropy(logits, labels)
            setattr(out, {1: "ce_head1", 2: "ce_head2", 4: "ce_con"}[stage], loss.item())
        if not torch.isfinite(loss):
            raise FloatingPointError(f"stage {stage}: non-finite loss {loss.item()}")
        loss.backward()
        if after_backward is not None:
            after_backward(stage, model)
        optimizer.step()
    return out


# --------------------------------------------------------------------------
# data access and evaluation

class ImageCache:
    """Split images resized once and held in memory; falls back to per-batch loading."""

    def __init__(self, manifest: DatasetManifest, ids: list[str], size: int, max_bytes: float = 2e9):
        self.manifest, self.ids, self.size = manifest, list(ids), size
        self.labels = torch.tensor(manifest.labels(self.ids), dtype=torch.long)
        self.images = None
        if len(self.ids) * 3 * size * size * 4 <= max_bytes:
            self.images, _ = load_batch(manifest, self.ids, size)

    def __len__(self):
        return len(self.ids)

    def get(self, index) -> tuple[torch.Tensor, torch.Tensor]:
        index = torch.as_tensor(index, dtype=torch.long)
        if self.images is not None:
            return self.images[index], self.labels[index]
        return load_batch(self.manifest, [self.ids[i] for i in index.tolist()], self.size)


@torch.no_grad()
def predict_logits(model: APSNet, data: ImageCache | torch.Tensor, batch_size: int = 32) -> dict[str, torch.Tensor]:
    """Eval-mode logits of every head (and ``fused``) over a cache or image tensor."""
    model.eval()
    n = len(data)
    chunks: dict[str, list] = {k: [] for k in (*HEAD_NAMES, "fused")}
    for start in range(0, n, batch_size):
        idx = torch.arange(start, min(n, start + batch_size))
        x = data.get(idx)[0] if isinstance(data, ImageCache) else data[idx]
        out = model(x)
        for k in chunks:
            chunks[k].append(out.head(k))
    return {k: torch.cat(v) for k, v in chunks.items()}


def head_accuracies(logits: dict[str, torch.Tensor], labels) -> dict[str, float]:
    labels = np.asarray(labels)
    return {k: float((fuse_predictions(v) == labels).mean()) for k, v in logits.items()}


# --------------------------------------------------------------------------
# checkpoints

class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    model: APSNet
    epoch: int
    classes: list[str]
    train_config: dict
    config_hash: str


def save_checkpoint(model: APSNet, cfg: TrainConfig | None, epoch: int, path, classes=None) -> str:
    meta = {
        "model_config": model.config.to_dict(),
        "train_config": asdict(cfg) if cfg is not None else {},
        "classes": list(classes) if classes is not None else [str(i) for i in range(model.num_classes)],
    }
    digest = config_hash(meta)
    payload = dict(meta, format=CHECKPOINT_FORMAT, epoch=int(epoch), config_hash=digest,
                   state_dict=model.state_dict())
    torch.save(payload, path)
    return digest


def load_checkpoint(path, num_classes: int | None = None) -> Checkpoint:
    """Restore a model saved by :func:`save_checkpoint`.

    Raises :class:`CheckpointError` on unreadable files, a stored hash that
    does not match the stored configuration, or a class count different
    from ``num_classes``.
    """
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:  # torch raises a zoo of types on bad files
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not an APSNet checkpoint")
    meta = {k: payload[k] for k in ("model_config", "train_config", "classes")}
    if config_hash(meta) != payload["config_hash"]:
        raise CheckpointError(f"{path}: configuration hash mismatch")
    mcfg = ModelConfig(**payload["model_config"])
    if num_classes is not None and mcfg.backbone.num_classes != num_classes:
        raise CheckpointError(
            f"checkpoint has {mcfg.backbone.num_classes} classes, run expects {num_classes}"
        )
    model = APSNet(mcfg)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return Checkpoint(model, payload["epoch"], payload["classes"], payload["train_config"], payload["config_hash"])


# --------------------------------------------------------------------------
# full runs

class EarlyStopping:
    """Signal a stop once ``patience`` consecutive evaluations fail to beat the best."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = -math.inf
        self.best_epoch = 0
        self.stale = 0

    def step(self, value: float, epoch: int) -> bool:
        if value > self.best:
            self.best, self.best_epoch, self.stale = value, epoch, 0
        else:
            self.stale += 1
        return self.stale >= self.patience


@dataclass
class EpochRecord:
    epoch: int
    losses: LossBreakdown
    test_accuracy: float
    head_accuracy: dict[str, float]
    seconds: float

    def row(self) -> list:
        lb = self.losses
        return [self.epoch, f"{lb.ce_head1:.8f}", f"{lb.ce_head2:.8f}", f"{lb.ce_dc:.8f}",
                f"{lb.contrast:.8f}", f"{lb.ce_con:.8f}", f"{self.test_accuracy:.6f}", f"{self.seconds:.3f}"]


@dataclass
class TrainingRun:
    history: list[EpochRecord] = field(default_factory=list)
    best_accuracy: float = 0.0
    best_epoch: int = 0
    stop_epoch: int = 0
    best_checkpoint: Path | None = None
    best_state: dict | None = field(default=None, repr=False)
    wall_time: float = 0.0


def _mean_breakdown(parts: list[LossBreakdown], weights: list[int]) -> LossBreakdown:
    w = np.asarray(weights, dtype=float) / sum(weights)
    return LossBreakdown(**{
        f.name: float(sum(wi * getattr(p, f.name) for wi, p in zip(w, parts)))
        for f in fields(LossBreakdown)
    })


def train(
    cfg: TrainConfig,
    manifest: DatasetManifest,
    out_dir: str | Path | None = None,
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> TrainingRun:
    """Train a fresh APSNet on the manifest's train split, evaluating on test each epoch.

    With ``out_dir`` set, writes ``train_log.csv`` and ``best.ckpt`` there.
    Batch order, initial weights and therefore the loss trajectory depend only
    on ``cfg`` (including ``rng_seed``) and the manifest.
    """
    train_ids, test_ids = manifest.ids("train"), manifest.ids("test")
    if not train_ids or not test_ids:
        raise ValueError("manifest needs nonempty train and test splits")
    if cfg.batch_size > len(train_ids):
        raise ValueError(f"batch_size {cfg.batch_size} exceeds train split size {len(train_ids)}")

    torch.manual_seed(cfg.rng_seed)
    model = APSNet(cfg.model_config(manifest.num_classes))
    optimizer = make_optimizer(model, cfg)
    scheduler = None
    if cfg.schedule == "cosine":
        scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=cfg.epochs)
    gen = torch.Generator().manual_seed(cfg.rng_seed)

    train_data = ImageCache(manifest, train_ids, cfg.image_size)
    test_data = ImageCache(manifest, test_ids, cfg.image_size)

    log_fh = None
    run = TrainingRun()
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_fh = open(out_dir / "train_log.csv", "w", newline="")
        writer = csv.writer(log_fh)
        writer.writerow(LOG_HEADER)
        run.best_checkpoint = out_dir / "best.ckpt"

    stopper = EarlyStopping(cfg.early_stop_patience)
    t_start = time.perf_counter()
    try:
        for epoch in range(1, cfg.epochs + 1):
            t0 = time.perf_counter()
            perm = torch.randperm(len(train_data), generator=gen)
            parts, sizes = [], []
            for start in range(0, len(perm), cfg.batch_size):
                idx = perm[start:start + cfg.batch_size]
                if len(idx) < 2:
                    continue
                images, labels = train_data.get(idx)
                parts.append(four_stage_step(model, images, labels, optimizer, cfg.kappa))
                sizes.append(len(idx))
            if scheduler is not None:
                scheduler.step()

            logits = predict_logits(model, test_data, cfg.eval_batch_size)
            accs = head_accuracies(logits, test_data.labels.numpy())
            record = EpochRecord(epoch, _mean_breakdown(parts, sizes), accs["fused"], accs,
                                 time.perf_counter() - t0)
            run.history.append(record)
            if log_fh is not None:
                writer.writerow(record.row())
                log_fh.flush()
            log.info("epoch %d  acc %.4f  losses %s", epoch, record.test_accuracy, record.losses)

            stop = stopper.step(record.test_accuracy, epoch)
            if stopper.best_epoch == epoch:
                run.best_accuracy, run.best_epoch = record.test_accuracy, epoch
                run.best_state = copy.deepcopy(model.state_dict())
                if run.best_checkpoint is not None:
                    save_checkpoint(model, cfg, epoch, run.best_checkpoint, manifest.class_names)
            if on_epoch is not None:
                on_epoch(record)
            run.stop_epoch = epoch
            if stop:
                break
    finally:
        if log_fh is not None:
            log_fh.close()
    run.wall_time = time.perf_counter() - t_start
    return run


def restore_best(cfg: TrainConfig, run: TrainingRun, num_classes: int) -> APSNet:
    model = APSNet(cfg.model_config(num_classes))
    model.load_state_dict(run.best_state)
    return model.eval()
