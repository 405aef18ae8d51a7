"""APSNet: CNN backbone with size-prior embedding and a four-head decoder.

Layout::

    image ──prior──▶ 1×1 conv ─ CBR ─ CBR/2 ─ CBR/2 ─┬─ CBR/2 ─┬─ CBR/2 ─┬─ CBR/2 ─┐
      │                                          (stride 4) (stride 8) (stride 16) (stride 32)
      └─ stem ─ stage2 ─ SPE ─ stage3 ─ SPE ─ stage4 ─ SPE ─ stage5 ─ SPE
                                       │              │               │
                                     Head_1         Head_2          Head_Dc ──▶ spatial rep
                                       └──── penultimate vectors ─────┴──▶ Head_Con

The fused prediction is the argmax of the summed logits of all four heads.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .prior import PRIOR_KINDS, PriorMap, prior_channels

VARIANT_CHANNELS = {
    "tiny": (32, 64, 128, 256),
    "resnet50": (256, 512, 1024, 2048),
}
STRIDES = (4, 8, 16, 32)


@dataclass
class BackboneSpec:
    variant: str = "tiny"
    stage_channels: tuple[int, int, int, int] | None = None
    num_classes: int = 17

    def __post_init__(self):
        if self.variant not in VARIANT_CHANNELS:
            raise ValueError(f"unknown backbone variant {self.variant!r}")
        if self.stage_channels is None:
            self.stage_channels = VARIANT_CHANNELS[self.variant]
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        if len(self.stage_channels) != 4 or min(self.stage_channels) <= 0:
            raise ValueError("stage_channels must be 4 positive integers")
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")


class CBR(nn.Sequential):
    """Conv → BatchNorm → ReLU with same-padding."""

    def __init__(self, cin, cout, kernel_size=3, stride=1):
        super().__init__(
            nn.Conv2d(cin, cout, kernel_size, stride, kernel_size // 2, bias=False),
            nn.BatchNorm2d(cout),
            nn.ReLU(inplace=True),
        )


# --------------------------------------------------------------------------
# backbones

class BasicBlock(nn.Module):
    def __init__(self, cin, cout, stride=1):
        super().__init__()
        self.conv1 = CBR(cin, cout, 3, stride)
        self.conv2 = nn.Sequential(nn.Conv2d(cout, cout, 3, 1, 1, bias=False), nn.BatchNorm2d(cout))
        self.skip = None
        if stride != 1 or cin != cout:
            self.skip = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        identity = x if self.skip is None else self.skip(x)
        return F.relu(self.conv2(self.conv1(x)) + identity)


class Bottleneck(nn.Module):
    def __init__(self, cin, cout, stride=1, expansion=4):
        super().__init__()
        mid = cout // expansion
        self.body = nn.Sequential(
            CBR(cin, mid, 1),
            CBR(mid, mid, 3, stride),
            nn.Conv2d(mid, cout, 1, bias=False),
            nn.BatchNorm2d(cout),
        )
        self.skip = None
        if stride != 1 or cin != cout:
            self.skip = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        identity = x if self.skip is None else self.skip(x)
        return F.relu(self.body(x) + identity)


class Backbone(nn.Module):
    """Stem to stride 4 followed by four stages at strides 4, 8, 16 and 32."""

    def __init__(self, spec: BackboneSpec):
        super().__init__()
        ch = spec.stage_channels
        if spec.variant == "resnet50":
            self.stem = nn.Sequential(
                nn.Conv2d(3, 64, 7, 2, 3, bias=False), nn.BatchNorm2d(64), nn.ReLU(inplace=True),
                nn.MaxPool2d(3, 2, 1),
            )
            depths, cin = (3, 4, 6, 3), 64
            stages = []
            for i, (d, cout) in enumerate(zip(depths, ch)):
                blocks = [Bottleneck(cin, cout, 1 if i == 0 else 2)]
                blocks += [Bottleneck(cout, cout) for _ in range(d - 1)]
                stages.append(nn.Sequential(*blocks))
                cin = cout
        else:
            self.stem = nn.Sequential(CBR(3, ch[0] // 2, 3, 2), CBR(ch[0] // 2, ch[0], 3, 2))
            stages = [BasicBlock(ch[0], ch[0])]
            stages += [BasicBlock(ch[i - 1], ch[i], 2) for i in range(1, 4)]
        self.stages = nn.ModuleList(stages)

    def forward(self, x):
        h = self.stem(x)
        feats = []
        for stage in self.stages:
            h = stage(h)
            feats.append(h)
        return feats


# --------------------------------------------------------------------------
# size-prior embedding

class ChannelAttention(nn.Module):
    """Squeeze-and-excitation gating: GAP → bottleneck MLP → sigmoid."""

    def __init__(self, channels, reduction=16, min_hidden=4):
        super().__init__()
        hidden = max(channels // reduction, min_hidden)
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, channels)

    def gates(self, x):
        return torch.sigmoid(self.fc2(F.relu(self.fc1(x.mean((2, 3))))))

    def forward(self, x):
        return x * self.gates(x)[:, :, None, None]


class SPE(nn.Module):
    """Fuse a one-channel prior into a stage feature.

    ``proj(attn(cat[prior, CBR(feature)]))``; the result has the feature's
    shape and replaces it downstream.
    """

    def __init__(self, channels, kernel_size=1, reduction=16):
        super().__init__()
        self.cbr = CBR(channels, channels, kernel_size)
        self.attn = ChannelAttention(channels + 1, reduction)
        self.proj = nn.Conv2d(channels + 1, channels, 1)

    def forward(self, prior, feature):
        if prior.shape[-2:] != feature.shape[-2:]:
            raise ValueError(f"SPE: prior {tuple(prior.shape[-2:])} vs feature {tuple(feature.shape[-2:])}")
        x = torch.cat([prior, self.cbr(feature)], dim=1)
        return self.proj(self.attn(x))


def spe_fuse(spe: SPE, prior, feature):
    if isinstance(prior, PriorMap):
        prior = prior.data
    return spe(prior, feature)


# --------------------------------------------------------------------------
# heads

class HeadTC(nn.Module):
    """Conventional head: CBR 1×1, CBR 3×3, global max pool, embed to ``width``, classify."""

    def __init__(self, cin, num_classes, width=512, hidden=None):
        super().__init__()
        hidden = hidden or min(cin, 512)
        self.features = nn.Sequential(CBR(cin, hidden, 1), CBR(hidden, hidden, 3))
        self.embed = nn.Sequential(nn.Linear(hidden, width), nn.BatchNorm1d(width), nn.ReLU(inplace=True))
        self.fc = nn.Linear(width, num_classes)

    def penultimate(self, x):
        return self.embed(torch.amax(self.features(x), dim=(2, 3)))

    def forward(self, x):
        penult = self.penultimate(x)
        return penult, self.fc(penult)


class HeadDC(nn.Module):
    """Decoupled head on the stride-32 feature.

    Channel branch: 1×1 conv to ``dc_channels``, global max pool, two-layer
    perceptron to class logits. Spatial branch: 1×1 conv to
    ``spatial_channels``, collapse the channel axis (learned linear map or
    plain mean) and L2-normalise the flattened h·w map.
    """

    def __init__(self, cin, num_classes, dc_channels=1024, spatial_channels=1000,
                 spatial_reduction="learned", mlp_hidden=512):
        super().__init__()
        if spatial_reduction not in ("learned", "mean"):
            raise ValueError("spatial_reduction must be 'learned' or 'mean'")
        self.channel_conv = nn.Conv2d(cin, dc_channels, 1)
        self.mlp = nn.Sequential(
            nn.Linear(dc_channels, mlp_hidden), nn.ReLU(inplace=True), nn.Linear(mlp_hidden, num_classes)
        )
        self.spatial_conv = nn.Conv2d(cin, spatial_channels, 1)
        self.reduce = nn.Linear(spatial_channels, 1) if spatial_reduction == "learned" else None

    def channel_vector(self, c5):
        return torch.amax(self.channel_conv(c5), dim=(2, 3))

    def spatial(self, c5, eps=1e-12):
        s = self.spatial_conv(c5).flatten(2)  # B×C×hw
        if self.reduce is None:
            s = s.mean(1)
        else:
            s = self.reduce(s.transpose(1, 2)).squeeze(-1)
        return s / s.norm(dim=1, keepdim=True).clamp_min(eps)

    def forward(self, c5):
        v = self.channel_vector(c5)
        return v, self.mlp(v), self.spatial(c5)


class HeadCon(nn.Module):
    def __init__(self, dim, num_classes):
        super().__init__()
        self.bn = nn.BatchNorm1d(dim)
        self.fc = nn.Linear(dim, num_classes)

    def forward(self, penult_1, penult_2, dc_vector):
        z = torch.cat([penult_1, penult_2, dc_vector], dim=1)
        if z.shape[1] != self.bn.num_features:
            raise ValueError(f"HeadCon expects {self.bn.num_features}-d input, got {z.shape[1]}")
        return self.fc(self.bn(z))


# --------------------------------------------------------------------------

@dataclass
class HeadOutputs:
    logits_1: torch.Tensor
    logits_2: torch.Tensor
    logits_dc: torch.Tensor
    logits_con: torch.Tensor
    spatial_rep: torch.Tensor
    features: torch.Tensor  # concatenated penultimate vectors fed to Head_Con
    pyramid: list[torch.Tensor] = field(default_factory=list, repr=False)

    def fused(self) -> torch.Tensor:
        return self.logits_1 + self.logits_2 + self.logits_dc + self.logits_con

    def head(self, name: str) -> torch.Tensor:
        return self.fused() if name == "fused" else getattr(self, f"logits_{name}")


HEAD_NAMES = ("1", "2", "dc", "con")


@dataclass
class ModelConfig:
    backbone: BackboneSpec = field(default_factory=BackboneSpec)
    prior_kind: str = "hf"
    cutoff_radius: float | None = None
    with_spe: bool = True
    spatial_reduction: str = "learned"
    head_width: int = 512
    dc_channels: int = 1024
    spatial_channels: int = 1000
    spe_kernel: int = 1

    def __post_init__(self):
        if isinstance(self.backbone, dict):
            self.backbone = BackboneSpec(**self.backbone)
        if self.prior_kind not in PRIOR_KINDS:
            raise ValueError(f"unknown prior kind {self.prior_kind!r}")

    def to_dict(self):
        d = asdict(self)
        d["backbone"]["stage_channels"] = list(d["backbone"]["stage_channels"])
        return d


class APSNet(nn.Module):
    def __init__(self, config: ModelConfig | None = None, **kwargs):
        super().__init__()
        self.config = config or ModelConfig(**kwargs)
        cfg = self.config
        spec = cfg.backbone
        ch = spec.stage_channels
        n = spec.num_classes
        self.backbone = Backbone(spec)

        if cfg.with_spe:
            prior_in = 3 if cfg.prior_kind in ("hf", "lf") else 1
            self.prior_conv = nn.Conv2d(prior_in, 1, 1)
            self.prior_cbr = CBR(1, 1, 3)
            self.prior_entry = nn.Sequential(CBR(1, 1, 3, 2), CBR(1, 1, 3, 2))
            self.prior_steps = nn.ModuleList([CBR(1, 1, 3, 2) for _ in range(3)])
            self.spe = nn.ModuleList([SPE(c, cfg.spe_kernel) for c in ch])

        self.head_1 = HeadTC(ch[1], n, cfg.head_width)
        self.head_2 = HeadTC(ch[2], n, cfg.head_width)
        self.head_dc = HeadDC(ch[3], n, cfg.dc_channels, cfg.spatial_channels, cfg.spatial_reduction)
        self.head_con = HeadCon(2 * cfg.head_width + cfg.dc_channels, n)

    @property
    def num_classes(self) -> int:
        return self.config.backbone.num_classes

    # -- prior chain -------------------------------------------------------
    def prior_init(self, x) -> PriorMap:
        """Stage-0 prior: fixed prior transform, trainable 1×1 conv, CBR."""
        with torch.no_grad():
            p = prior_channels(x, self.config.prior_kind, self.config.cutoff_radius)
        return PriorMap(self.prior_cbr(self.prior_conv(p)), self.config.prior_kind, 0)

    def prior_step(self, prior: PriorMap, steps: int = 1) -> PriorMap:
        """Advance the prior ``steps`` stages deeper (stage 0 → 1 is the stride-4 entry)."""
        data, stage = prior.data, prior.stage
        for _ in range(steps):
            block = self.prior_entry if stage == 0 else self.prior_steps[stage - 1]
            data = block(data)
            stage += 1
        return PriorMap(data, prior.kind, stage)

    # -- encoder -----------------------------------------------------------
    def encode(self, x, depth: int = 4):
        """Return the first ``depth`` stage features (post-SPE when enabled)."""
        h = self.backbone.stem(x)
        prior = self.prior_init(x) if self.config.with_spe else None
        feats = []
        for i in range(depth):
            h = self.backbone.stages[i](h)
            if prior is not None:
                prior = self.prior_step(prior)
                h = self.spe[i](prior.data, h)
            feats.append(h)
        return feats

    # -- heads -------------------------------------------------------------
    def forward(self, x) -> HeadOutputs:
        c2, c3, c4, c5 = self.encode(x)
        p1, l1 = self.head_1(c3)
        p2, l2 = self.head_2(c4)
        v, ldc, rep = self.head_dc(c5)
        lcon = self.head_con(p1, p2, v)
        return HeadOutputs(l1, l2, ldc, lcon, rep, torch.cat([p1, p2, v], 1), [c2, c3, c4, c5])

    def forward_stage(self, x, stage: int):
        """Compute only what training stage ``stage`` (1-4) supervises.

        Returns ``(logits, spatial_rep or None)``.
        """
        if stage == 1:
            return self.head_1(self.encode(x, 2)[1])[1], None
        if stage == 2:
            return self.head_2(self.encode(x, 3)[2])[1], None
        _, c3, c4, c5 = self.encode(x)
        if stage == 3:
            _, logits, rep = self.head_dc(c5)
            return logits, rep
        if stage == 4:
            return self.head_con(
                self.head_1.penultimate(c3), self.head_2.penultimate(c4), self.head_dc.channel_vector(c5)
            ), None
        raise ValueError(f"stage must be 1..4, got {stage}")

    def head_parameters(self) -> dict[str, list[nn.Parameter]]:
        return {
            "head_1": list(self.head_1.parameters()),
            "head_2": list(self.head_2.parameters()),
            "head_dc": list(self.head_dc.parameters()),
            "head_con": list(self.head_con.parameters()),
        }


def fuse_predictions(out: HeadOutputs | torch.Tensor) -> np.ndarray:
    """Argmax of the summed head logits; ties go to the lowest class index."""
    scores = out.fused() if isinstance(out, HeadOutputs) else out
    return np.argmax(scores.detach().cpu().numpy(), axis=1)


def build_model(num_classes: int, variant: str = "tiny", **kwargs) -> APSNet:
    return APSNet(ModelConfig(BackboneSpec(variant, None, num_classes), **kwargs))
