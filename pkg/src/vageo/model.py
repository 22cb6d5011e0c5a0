"""Two-branch localization network: query branch with CSHA, reference branch,
broadcast-concat fusion and a single-anchor grid head."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import torch
import torch.nn as nn
import torch.nn.functional as F

from .boxes import BBox
from .csha import CSHA, CSHAConfig

Preset = Literal["toy-small", "paper-resnet18", "paper-darknet53"]

BOX_LOSS_WEIGHT = 5.0
# channels of the raw head output
TX, TY, TW, TH, OBJ = range(5)


@dataclass(frozen=True)
class BackboneConfig:
    preset: Preset = "toy-small"
    # toy-small only: width of the last stage; paper presets have fixed widths
    width: int = 64

    @property
    def output_stride(self) -> int:
        return 16 if self.preset == "toy-small" else 32

    @property
    def output_channels(self) -> int:
        return {"toy-small": self.width, "paper-resnet18": 512, "paper-darknet53": 1024}[self.preset]


def _conv_bn(cin, cout, k, stride, act):
    return nn.Sequential(
        nn.Conv2d(cin, cout, k, stride, k // 2, bias=False),
        nn.BatchNorm2d(cout),
        act,
    )


def toy_backbone(in_channels: int, width: int) -> nn.Sequential:
    widths = [max(1, width // 4), max(1, width // 2), width, width]
    layers, cin = [], in_channels
    for w in widths:
        layers.append(_conv_bn(cin, w, 3, 2, nn.ReLU()))
        cin = w
    return nn.Sequential(*layers)


class _DarkResidual(nn.Module):
    def __init__(self, c):
        super().__init__()
        self.a = _conv_bn(c, c // 2, 1, 1, nn.LeakyReLU(0.1))
        self.b = _conv_bn(c // 2, c, 3, 1, nn.LeakyReLU(0.1))

    def forward(self, x):
        return x + self.b(self.a(x))


def darknet53(in_channels: int) -> nn.Sequential:
    layers = [_conv_bn(in_channels, 32, 3, 1, nn.LeakyReLU(0.1))]
    cin = 32
    for n_blocks in (1, 2, 8, 8, 4):
        layers.append(_conv_bn(cin, cin * 2, 3, 2, nn.LeakyReLU(0.1)))
        cin *= 2
        layers.extend(_DarkResidual(cin) for _ in range(n_blocks))
    return nn.Sequential(*layers)


def resnet18_trunk(in_channels: int) -> nn.Sequential:
    from torchvision.models import resnet18

    net = resnet18(weights=None)
    if in_channels != 3:
        net.conv1 = nn.Conv2d(in_channels, 64, 7, 2, 3, bias=False)
    return nn.Sequential(
        net.conv1, net.bn1, net.relu, net.maxpool, net.layer1, net.layer2, net.layer3, net.layer4
    )


def build_backbone(cfg: BackboneConfig, in_channels: int) -> nn.Module:
    if cfg.preset == "toy-small":
        return toy_backbone(in_channels, cfg.width)
    if cfg.preset == "paper-resnet18":
        return resnet18_trunk(in_channels)
    if cfg.preset == "paper-darknet53":
        return darknet53(in_channels)
    raise ValueError(f"unknown backbone preset {cfg.preset!r}")


def _check_stride(x: torch.Tensor, stride: int, what: str):
    h, w = x.shape[-2:]
    if h % stride or w % stride:
        raise ValueError(f"{what} size {h}x{w} not divisible by backbone stride {stride}")


@dataclass(frozen=True)
class ModelConfig:
    query_backbone: BackboneConfig = field(default_factory=BackboneConfig)
    reference_backbone: BackboneConfig = field(default_factory=BackboneConfig)
    csha: CSHAConfig = field(default_factory=CSHAConfig)
    query_channels: int = 4  # RGB + encoding map
    bypass_csha: bool = False


class QueryBranch(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.stride = cfg.query_backbone.output_stride
        self.backbone = build_backbone(cfg.query_backbone, cfg.query_channels)
        self.csha = None if cfg.bypass_csha else CSHA(cfg.query_backbone.output_channels, cfg.csha)

    def features(self, x: torch.Tensor):
        """Backbone features before and after attention."""
        _check_stride(x, self.stride, "query")
        fq = self.backbone(x)
        return fq, (fq if self.csha is None else self.csha(fq))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.features(x)[1].mean(dim=(2, 3))


class ReferenceBranch(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.stride = cfg.reference_backbone.output_stride
        self.backbone = build_backbone(cfg.reference_backbone, 3)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _check_stride(x, self.stride, "reference")
        return self.backbone(x)


class Fusion(nn.Module):
    """Tile the query descriptor over the reference grid, concat, 1x1 conv, 3x3 conv."""

    def __init__(self, query_dim: int, ref_channels: int):
        super().__init__()
        self.mix = nn.Conv2d(query_dim + ref_channels, ref_channels, 1)
        self.smooth = nn.Conv2d(ref_channels, ref_channels, 3, padding=1)

    def forward(self, q: torch.Tensor, r: torch.Tensor) -> torch.Tensor:
        if q.shape[0] != r.shape[0]:
            raise ValueError(f"batch mismatch: query {q.shape[0]} vs reference {r.shape[0]}")
        tiled = q[:, :, None, None].expand(-1, -1, *r.shape[2:])
        x = F.relu(self.mix(torch.cat([tiled, r], dim=1)))
        return self.smooth(x)


class DetectHead(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, 5, 1)

    def forward(self, fused: torch.Tensor) -> torch.Tensor:
        """Raw (pre-activation) grid, B x S_h x S_w x 5."""
        return self.conv(fused).permute(0, 2, 3, 1)


def activate(raw: torch.Tensor) -> torch.Tensor:
    """Sigmoid on tx, ty and objectness; tw, th stay in log space."""
    out = raw.clone()
    out[..., [TX, TY, OBJ]] = torch.sigmoid(raw[..., [TX, TY, OBJ]])
    return out


class VAGeoNet(nn.Module):
    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        cfg = cfg or ModelConfig()
        self.cfg = cfg
        self.query_branch = QueryBranch(cfg)
        self.reference_branch = ReferenceBranch(cfg)
        self.fusion = Fusion(cfg.query_backbone.output_channels, cfg.reference_backbone.output_channels)
        self.head = DetectHead(cfg.reference_backbone.output_channels)
        self.register_buffer("anchor", torch.tensor([32.0, 32.0]))

    @property
    def stride(self) -> int:
        return self.reference_branch.stride

    def set_anchor(self, w: float, h: float):
        self.anchor.copy_(torch.tensor([w, h], dtype=self.anchor.dtype))

    def forward(self, query: torch.Tensor, reference: torch.Tensor) -> torch.Tensor:
        q = self.query_branch(query)
        r = self.reference_branch(reference)
        return self.head(self.fusion(q, r))

    @torch.no_grad()
    def predict(self, query: torch.Tensor, reference: torch.Tensor) -> list[tuple[BBox, float]]:
        grid = activate(self(query, reference))
        return best_boxes(grid, self.stride, *self.anchor.tolist())


def decode_boxes(grid: torch.Tensor, stride: int, anchor_w: float, anchor_h: float) -> torch.Tensor:
    """Per-cell boxes (cx, cy, w, h) from an activated grid, shape B x S_h x S_w x 4."""
    sh, sw = grid.shape[1:3]
    rows = torch.arange(sh, dtype=grid.dtype, device=grid.device)[:, None]
    cols = torch.arange(sw, dtype=grid.dtype, device=grid.device)[None, :]
    cx = (cols + grid[..., TX]) * stride
    cy = (rows + grid[..., TY]) * stride
    w = anchor_w * torch.exp(grid[..., TW])
    h = anchor_h * torch.exp(grid[..., TH])
    return torch.stack([cx, cy, w, h], dim=-1)


def best_boxes(grid: torch.Tensor, stride: int, anchor_w: float, anchor_h: float) -> list[tuple[BBox, float]]:
    boxes = decode_boxes(grid, stride, anchor_w, anchor_h)
    out = []
    for b in range(grid.shape[0]):
        obj = grid[b, ..., OBJ]
        k = int(torch.argmax(obj))  # first maximum in row-major order
        i, j = divmod(k, obj.shape[1])
        out.append((BBox(*map(float, boxes[b, i, j])), float(obj[i, j])))
    return out


def encode_target(gt: BBox, grid_h: int, grid_w: int, stride: int, anchor_w: float, anchor_h: float):
    """Positive cell and regression targets ``(i, j, tx, ty, tw, th)`` for one box."""
    if not (0 <= gt.cx < grid_w * stride and 0 <= gt.cy < grid_h * stride):
        raise ValueError(f"box center ({gt.cx}, {gt.cy}) outside {grid_h * stride}x{grid_w * stride} image")
    if gt.w <= 0 or gt.h <= 0:
        raise ValueError(f"degenerate box {gt}")
    j = min(int(gt.cx // stride), grid_w - 1)
    i = min(int(gt.cy // stride), grid_h - 1)
    tx = gt.cx / stride - j
    ty = gt.cy / stride - i
    tw = torch.log(torch.tensor(gt.w / anchor_w, dtype=torch.float64)).item()
    th = torch.log(torch.tensor(gt.h / anchor_h, dtype=torch.float64)).item()
    return i, j, tx, ty, tw, th


def target_grid(gt: BBox, grid_h: int, grid_w: int, stride: int, anchor_w: float, anchor_h: float,
                dtype=torch.float64) -> torch.Tensor:
    """Activated grid that decodes exactly to ``gt``: objectness 1 at the positive cell, 0 elsewhere."""
    i, j, tx, ty, tw, th = encode_target(gt, grid_h, grid_w, stride, anchor_w, anchor_h)
    grid = torch.zeros(1, grid_h, grid_w, 5, dtype=dtype)
    grid[0, i, j] = torch.tensor([tx, ty, tw, th, 1.0], dtype=dtype)
    return grid


def detection_loss(raw: torch.Tensor, gts: list[BBox], stride: int, anchor_w: float, anchor_h: float,
                   box_weight: float = BOX_LOSS_WEIGHT) -> torch.Tensor:
    """Objectness BCE averaged over all cells plus weighted squared box error at the positive cell.

    ``raw`` is the pre-activation head output; the result is averaged over the batch.
    """
    b, sh, sw, _ = raw.shape
    if len(gts) != b:
        raise ValueError(f"{len(gts)} boxes for batch of {b}")
    obj_target = torch.zeros(b, sh, sw, dtype=raw.dtype, device=raw.device)
    pos_pred, pos_target = [], []
    for n, gt in enumerate(gts):
        i, j, tx, ty, tw, th = encode_target(gt, sh, sw, stride, anchor_w, anchor_h)
        obj_target[n, i, j] = 1.0
        cell = raw[n, i, j]
        pos_pred.append(torch.stack([torch.sigmoid(cell[TX]), torch.sigmoid(cell[TY]), cell[TW], cell[TH]]))
        pos_target.append([tx, ty, tw, th])
    bce = F.binary_cross_entropy_with_logits(raw[..., OBJ], obj_target, reduction="none").mean(dim=(1, 2))
    pos_target = torch.tensor(pos_target, dtype=raw.dtype, device=raw.device)
    box = ((torch.stack(pos_pred) - pos_target) ** 2).sum(dim=1)
    return (bce + box_weight * box).mean()
