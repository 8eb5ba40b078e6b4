"""Four-level attention U-Net with per-level input injection, plus losses.

The encoder runs at 256/128/64/32 px. Stage 0 consumes the level-0 input
alone; each later stage concatenates the pooled features with that level's
input bands and fuses them through a 1x1 convolution before its conv block.
A fourth pooling feeds the 16 px bottleneck. The decoder upsamples back to
256 px with nearest-neighbor + convolution, gating each skip connection with
additive attention. Two heads are supported: multi-category softmax (phase 1)
and single-channel sigmoid (phase 2).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage
from torch import nn

from .errors import ConfigError, DataError
from .patches import PatchStack

ENCODER_GROUPS = ("enc", "fuse", "bottleneck")
SOFTMAX = "softmax"
SIGMOID = "sigmoid"


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters. ``levels`` is fixed at 4."""

    input_channels: tuple[int, int, int, int] = (4, 6, 6, 6)
    base_channels: tuple[int, int, int, int] = (16, 32, 64, 128)
    n_categories: int = 22
    dropout_rate: float = 0.1
    attention_inter_channels: int = 16
    norm: str = "group"
    levels: int = 4

    def __post_init__(self):
        if self.levels != 4:
            raise ConfigError(f"the architecture is fixed at 4 levels, got {self.levels}")
        for name in ("input_channels", "base_channels"):
            chans = getattr(self, name)
            if len(chans) != 4:
                raise ConfigError(f"{name} needs exactly 4 entries, got {len(chans)}")
            if any(c < 1 for c in chans):
                raise ConfigError(f"{name} must be all >= 1, got {chans}")
        if self.n_categories < 2:
            raise ConfigError(f"n_categories must be >= 2, got {self.n_categories}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.attention_inter_channels < 1:
            raise ConfigError("attention_inter_channels must be >= 1")
        if self.norm not in ("group", "batch", "none"):
            raise ConfigError(f"norm must be group|batch|none, got {self.norm!r}")


def _norm(channels: int, kind: str) -> nn.Module:
    if kind == "batch":
        return nn.BatchNorm2d(channels)
    if kind == "group":
        groups = 8 if channels % 8 == 0 else 1
        return nn.GroupNorm(groups, channels)
    return nn.Identity()


class _ConvBlock(nn.Module):
    """Two 3x3 conv + norm + ReLU layers."""

    def __init__(self, c_in: int, c_out: int, norm: str):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(c_in, c_out, 3, padding=1),
            _norm(c_out, norm),
            nn.ReLU(inplace=True),
            nn.Conv2d(c_out, c_out, 3, padding=1),
            _norm(c_out, norm),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.net(x)


class AttentionGate(nn.Module):
    """Additive attention on a skip connection: skip * sigmoid(psi(relu(Ws*skip + Wg*gating)))."""

    def __init__(self, skip_channels: int, gating_channels: int, inter_channels: int):
        super().__init__()
        self.w_skip = nn.Conv2d(skip_channels, inter_channels, 1)
        self.w_gate = nn.Conv2d(gating_channels, inter_channels, 1)
        self.psi = nn.Conv2d(inter_channels, 1, 1)

    def forward(self, skip, gating):
        if gating.shape[-2:] != skip.shape[-2:]:
            gating = nn.functional.interpolate(gating, size=skip.shape[-2:], mode="nearest")
        alpha = torch.sigmoid(self.psi(torch.relu(self.w_skip(skip) + self.w_gate(gating))))
        return skip * alpha

    def coefficients(self, skip, gating):
        """The attention map alpha alone, for inspection."""
        if gating.shape[-2:] != skip.shape[-2:]:
            gating = nn.functional.interpolate(gating, size=skip.shape[-2:], mode="nearest")
        return torch.sigmoid(self.psi(torch.relu(self.w_skip(skip) + self.w_gate(gating))))


class _Up(nn.Module):
    """Nearest-neighbor 2x upsampling followed by a 3x3 convolution."""

    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out, 3, padding=1)

    def forward(self, x):
        return self.conv(nn.functional.interpolate(x, scale_factor=2, mode="nearest"))


class SegModel(nn.Module):
    """The segmentation network; parameter groups support selective freezing."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.input_channels
        b = cfg.base_channels
        p = cfg.dropout_rate

        self.enc0 = _ConvBlock(c[0], b[0], cfg.norm)
        self.fuse1 = nn.Conv2d(b[0] + c[1], b[0], 1)
        self.enc1 = _ConvBlock(b[0], b[1], cfg.norm)
        self.fuse2 = nn.Conv2d(b[1] + c[2], b[1], 1)
        self.enc2 = _ConvBlock(b[1], b[2], cfg.norm)
        self.drop_enc2 = nn.Dropout2d(p)
        self.fuse3 = nn.Conv2d(b[2] + c[3], b[2], 1)
        self.enc3 = _ConvBlock(b[2], b[3], cfg.norm)
        self.drop_enc3 = nn.Dropout2d(p)
        self.bottleneck = _ConvBlock(b[3], b[3] * 2, cfg.norm)

        self.pool = nn.MaxPool2d(2)

        self.up3 = _Up(b[3] * 2, b[3])
        self.gate3 = AttentionGate(b[3], b[3], cfg.attention_inter_channels)
        self.dec3 = _ConvBlock(b[3] * 2, b[3], cfg.norm)
        self.drop_dec3 = nn.Dropout2d(p)
        self.up2 = _Up(b[3], b[2])
        self.gate2 = AttentionGate(b[2], b[2], cfg.attention_inter_channels)
        self.dec2 = _ConvBlock(b[2] * 2, b[2], cfg.norm)
        self.drop_dec2 = nn.Dropout2d(p)
        self.up1 = _Up(b[2], b[1])
        self.gate1 = AttentionGate(b[1], b[1], cfg.attention_inter_channels)
        self.dec1 = _ConvBlock(b[1] * 2, b[1], cfg.norm)
        self.drop_dec1 = nn.Dropout2d(p)
        self.up0 = _Up(b[1], b[0])
        self.gate0 = AttentionGate(b[0], b[0], cfg.attention_inter_channels)
        self.dec0 = _ConvBlock(b[0] * 2, b[0], cfg.norm)
        self.drop_dec0 = nn.Dropout2d(p)

        self.head_kind = SOFTMAX
        self.head = nn.Conv2d(b[0], cfg.n_categories, 1)
        self.frozen_groups: tuple[str, ...] = ()

    def forward(self, x0, x1, x2, x3):
        for i, (x, want) in enumerate(zip((x0, x1, x2, x3), self.cfg.input_channels)):
            if x.shape[1] != want:
                raise DataError(f"level {i} has {x.shape[1]} channels, config wants {want}")
        for i, x in enumerate((x1, x2, x3), start=1):
            expect = (x0.shape[-2] >> i, x0.shape[-1] >> i)
            if tuple(x.shape[-2:]) != expect:
                raise DataError(f"level {i} spatial size {tuple(x.shape[-2:])}, "
                                f"expected {expect}")

        e0 = self.enc0(x0)
        e1 = self.enc1(torch.relu(self.fuse1(torch.cat([self.pool(e0), x1], dim=1))))
        e2 = self.drop_enc2(self.enc2(torch.relu(self.fuse2(torch.cat([self.pool(e1), x2], dim=1)))))
        e3 = self.drop_enc3(self.enc3(torch.relu(self.fuse3(torch.cat([self.pool(e2), x3], dim=1)))))
        bottom = self.bottleneck(self.pool(e3))

        g3 = self.up3(bottom)
        d3 = self.drop_dec3(self.dec3(torch.cat([self.gate3(e3, g3), g3], dim=1)))
        g2 = self.up2(d3)
        d2 = self.drop_dec2(self.dec2(torch.cat([self.gate2(e2, g2), g2], dim=1)))
        g1 = self.up1(d2)
        d1 = self.drop_dec1(self.dec1(torch.cat([self.gate1(e1, g1), g1], dim=1)))
        g0 = self.up0(d1)
        d0 = self.drop_dec0(self.dec0(torch.cat([self.gate0(e0, g0), g0], dim=1)))

        logits = self.head(d0)
        if self.head_kind == SOFTMAX:
            return torch.softmax(logits, dim=1)
        return torch.sigmoid(logits)

    # -- parameter-group plumbing ------------------------------------------

    def group_of(self, param_name: str) -> str:
        stem = param_name.split(".", 1)[0]
        for prefix in ("enc", "fuse", "bottleneck"):
            if stem.startswith(prefix):
                return "encoder"
        if stem.startswith("gate"):
            return "gates"
        if stem in ("head",):
            return "head"
        return "decoder"

    def apply_train_mode(self):
        """train() everywhere except frozen groups, which stay in eval()."""
        self.train()
        if "encoder" in self.frozen_groups:
            for name, module in self.named_children():
                if self.group_of(name + ".x") == "encoder" or name.startswith("drop_enc"):
                    module.eval()

    @property
    def dropout_modules(self) -> list[nn.Dropout2d]:
        return [m for m in self.modules() if isinstance(m, nn.Dropout2d)]


def _init_parameters(model: nn.Module) -> None:
    for m in model.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_uniform_(m.weight, nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)


def build_model(cfg: ModelConfig, seed: int = 0) -> SegModel:
    """Construct and deterministically initialize the network."""
    torch.manual_seed(seed)
    model = SegModel(cfg)
    _init_parameters(model)
    model.eval()
    return model


def parameter_shapes(m: SegModel) -> dict[str, tuple[int, ...]]:
    """Every named parameter's shape, for shape auditing."""
    return {name: tuple(p.shape) for name, p in m.named_parameters()}


def patch_tensors(p: PatchStack, device="cpu") -> tuple[torch.Tensor, ...]:
    """A PatchStack's four levels as float32 (1, C, H, W) tensors."""
    out = []
    for level in p.levels:
        t = torch.from_numpy(np.array(level, dtype=np.float32))
        out.append(t.permute(2, 0, 1).unsqueeze(0).to(device))
    return tuple(out)


def forward(m: SegModel, p: PatchStack) -> np.ndarray:
    """Run one patch through the network.

    Returns (256, 256, K) category probabilities under the softmax head or
    a (256, 256) score map under the sigmoid head.
    """
    m.eval()
    with torch.no_grad():
        out = m(*patch_tensors(p))
    arr = out.squeeze(0).permute(1, 2, 0).numpy()
    if m.head_kind == SIGMOID:
        return arr[:, :, 0]
    return arr


def dice_loss(pred: torch.Tensor, target: torch.Tensor, smooth: float = 1e-6) -> torch.Tensor:
    """1 - mean-over-categories of (2*|pred*target| + smooth)/(|pred| + |target| + smooth)."""
    pred = torch.as_tensor(pred, dtype=torch.float32) if not torch.is_tensor(pred) else pred
    target = torch.as_tensor(target, dtype=pred.dtype) if not torch.is_tensor(target) else target
    if pred.shape != target.shape:
        raise DataError(f"dice_loss shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    if pred.ndim < 3:  # (H, W) binary case
        pred = pred.reshape(1, 1, *pred.shape[-2:])
        target = target.reshape(1, 1, *target.shape[-2:])
    dims = tuple(i for i in range(pred.ndim) if i != 1)
    inter = (pred * target).sum(dim=dims)
    total = pred.sum(dim=dims) + target.sum(dim=dims)
    dice = (2.0 * inter + smooth) / (total + smooth)
    return 1.0 - dice.mean()


def distance_weights(target: np.ndarray) -> np.ndarray | None:
    """Per-pixel distance to the target's category boundary, over the patch diagonal.

    The boundary is the set of pixels with a 4-neighbor of the other class.
    Returns None when the target is uniform (no boundary exists).
    """
    t = np.asarray(target).astype(bool)
    if t.all() or not t.any():
        return None
    boundary = np.zeros_like(t)
    boundary[:-1, :] |= t[:-1, :] != t[1:, :]
    boundary[1:, :] |= t[1:, :] != t[:-1, :]
    boundary[:, :-1] |= t[:, :-1] != t[:, 1:]
    boundary[:, 1:] |= t[:, 1:] != t[:, :-1]
    dist = ndimage.distance_transform_edt(~boundary)
    diagonal = float(np.hypot(*t.shape))
    return dist / diagonal


def boundary_loss(pred: torch.Tensor, target) -> torch.Tensor:
    """Distance-weighted absolute error against a binary mask.

    Pixels far from the target's class boundary cost proportionally more.
    Uniform targets carry no boundary, so those samples fall back to the
    plain mean absolute error.
    """
    pred = torch.as_tensor(pred, dtype=torch.float32) if not torch.is_tensor(pred) else pred
    t_np = target.detach().cpu().numpy() if torch.is_tensor(target) else np.asarray(target)
    t = torch.as_tensor(t_np, dtype=pred.dtype, device=pred.device)
    if pred.shape != t.shape:
        raise DataError(f"boundary_loss shape mismatch: {tuple(pred.shape)} vs {tuple(t.shape)}")
    if pred.ndim == 2:  # (H, W) -> (1, 1, H, W)
        pred, t, t_np = (a.reshape(1, 1, *a.shape) for a in (pred, t, t_np))
    elif pred.ndim == 3:  # (B, H, W) -> (B, 1, H, W)
        pred, t, t_np = (a.reshape(a.shape[0], 1, *a.shape[1:]) for a in (pred, t, t_np))
    elif pred.ndim != 4 or pred.shape[1] != 1:
        raise DataError(f"boundary_loss expects a single-channel mask, got {tuple(pred.shape)}")
    err = (pred - t).abs()
    losses = []
    for i in range(pred.shape[0]):
        w = distance_weights(t_np[i, 0])
        if w is None:
            losses.append(err[i].mean())
        else:
            weight = torch.as_tensor(w, dtype=pred.dtype, device=pred.device)
            losses.append((err[i, 0] * weight).mean())
    return torch.stack(losses).mean()


def freeze_encoder(m: SegModel) -> SegModel:
    """Flag encoder stages, injection fusers, and the bottleneck as frozen."""
    for name, param in m.named_parameters():
        if m.group_of(name) == "encoder":
            param.requires_grad_(False)
    if "encoder" not in m.frozen_groups:
        m.frozen_groups = m.frozen_groups + ("encoder",)
    return m


def swap_head(m: SegModel, head: str, seed: int = 0) -> SegModel:
    """Replace the output head with a freshly initialized one."""
    b0 = m.cfg.base_channels[0]
    if head == SOFTMAX:
        if m.cfg.n_categories < 2:
            raise ConfigError("softmax head needs at least 2 categories")
        out_channels = m.cfg.n_categories
    elif head == SIGMOID:
        out_channels = 1
    else:
        raise ConfigError(f"head must be {SOFTMAX!r} or {SIGMOID!r}, got {head!r}")
    torch.manual_seed(seed)
    new_head = nn.Conv2d(b0, out_channels, 1)
    nn.init.kaiming_uniform_(new_head.weight, nonlinearity="relu")
    nn.init.zeros_(new_head.bias)
    m.head = new_head
    m.head_kind = head
    return m


CHECKPOINT_VERSION = 1


def save_checkpoint(path, m: SegModel, schema_hash: str = "", phase: int = 1) -> None:
    """Write a versioned checkpoint plus a JSON manifest next to it."""
    path = Path(path)
    payload = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(m.cfg),
        "head_kind": m.head_kind,
        "frozen_groups": list(m.frozen_groups),
        "schema_hash": schema_hash,
        "phase": phase,
        "state_dict": m.state_dict(),
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    manifest = {
        "version": CHECKPOINT_VERSION,
        "phase": phase,
        "schema_hash": schema_hash,
        "head_kind": m.head_kind,
        "frozen_groups": list(m.frozen_groups),
        "config": asdict(m.cfg),
        "n_parameters": sum(p.numel() for p in m.parameters()),
    }
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(manifest, indent=2) + "\n")


def load_checkpoint(path) -> tuple[SegModel, dict]:
    """Rebuild a model from a checkpoint; returns (model, metadata)."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing checkpoint: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as e:
        raise DataError(f"unreadable checkpoint {path}: {e}")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise DataError(f"checkpoint version {payload.get('version')} unsupported")
    cfg_dict = dict(payload["config"])
    for key in ("input_channels", "base_channels"):
        cfg_dict[key] = tuple(cfg_dict[key])
    cfg = ModelConfig(**cfg_dict)
    m = build_model(cfg)
    if payload["head_kind"] == SIGMOID:
        swap_head(m, SIGMOID)
    m.load_state_dict(payload["state_dict"])
    if "encoder" in payload.get("frozen_groups", []):
        freeze_encoder(m)
    meta = {k: payload[k] for k in ("version", "schema_hash", "phase", "head_kind")}
    return m, meta
