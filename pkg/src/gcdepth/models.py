"""Pluggable depth and pose network interfaces with a tiny reference backbone.

The reference backbone is a 4-level encoder-decoder sized for desk-scale
synthetic scenes; real backbones plug in through the same builder registry.
Depth comes out of a sigmoid head mapped to disparity between 1/max_depth and
1/min_depth, so predictions stay inside the configured range by construction.
"""

from __future__ import annotations

import hashlib
import io
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .geometry import sigmoid_to_depth

DOWNSAMPLE_FACTOR = 16


@dataclass(frozen=True)
class DepthNetworkSpec:
    backbone: str = "ref"
    scales: tuple = (0, 1)
    min_depth: float = 0.1
    max_depth: float = 100.0
    base_channels: int = 16

    def __post_init__(self):
        if len(self.scales) == 0:
            raise ValueError("need at least one output scale")
        if not self.min_depth < self.max_depth:
            raise ValueError("min_depth must be below max_depth")


@dataclass(frozen=True)
class PoseNetworkSpec:
    backbone: str = "ref"
    base_channels: int = 16


class _ConvBlock(nn.Module):
    def __init__(self, c_in, c_out, stride=1):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1)

    def forward(self, x):
        return F.elu(self.conv(x))


class ReferenceDepthNet(nn.Module):
    """4-level encoder-decoder emitting sigmoid disparity heads per scale.

    Scale s has resolution H/2^s x W/2^s; scale 0 is produced by bilinearly
    upsampling the finest decoder features so no full-resolution feature conv
    is needed.
    """

    def __init__(self, spec: DepthNetworkSpec):
        super().__init__()
        for s in spec.scales:
            if s not in (0, 1, 2, 3):
                raise ValueError("reference backbone supports scales 0..3, got %r" % (s,))
        self.spec = spec
        c = spec.base_channels
        chans = [c, int(1.5 * c), int(2.5 * c), 4 * c]
        self.enc = nn.ModuleList([
            nn.Sequential(_ConvBlock(3, chans[0], stride=2), _ConvBlock(chans[0], chans[0])),
            nn.Sequential(_ConvBlock(chans[0], chans[1], stride=2), _ConvBlock(chans[1], chans[1])),
            nn.Sequential(_ConvBlock(chans[1], chans[2], stride=2), _ConvBlock(chans[2], chans[2])),
            nn.Sequential(_ConvBlock(chans[2], chans[3], stride=2), _ConvBlock(chans[3], chans[3])),
        ])
        self.dec = nn.ModuleList([
            _ConvBlock(chans[3], chans[2]),
            _ConvBlock(2 * chans[2], chans[2]),
            _ConvBlock(chans[2], chans[1]),
            _ConvBlock(2 * chans[1], chans[1]),
            _ConvBlock(chans[1], chans[0]),
            _ConvBlock(2 * chans[0], chans[0]),
        ])
        self.heads = nn.ModuleDict({
            str(s): nn.Conv2d(chans[0] if s <= 1 else chans[min(s, 2)], 1, 3, padding=1)
            for s in spec.scales
        })
        # bias the sigmoid low so a fresh network starts near mid-scene depth
        # instead of hugging the near plane
        for head in self.heads.values():
            nn.init.constant_(head.bias, -3.2)

    def forward(self, x):
        e0 = self.enc[0](x)
        e1 = self.enc[1](e0)
        e2 = self.enc[2](e1)
        e3 = self.enc[3](e2)
        d = self.dec[0](e3)
        d = F.interpolate(d, scale_factor=2, mode="nearest")
        d = self.dec[1](torch.cat([d, e2], 1))
        feat2 = d
        d = self.dec[2](d)
        d = F.interpolate(d, scale_factor=2, mode="nearest")
        d = self.dec[3](torch.cat([d, e1], 1))
        d = self.dec[4](d)
        d = F.interpolate(d, scale_factor=2, mode="nearest")
        d = self.dec[5](torch.cat([d, e0], 1))
        feat1 = d
        outputs = {}
        for s in self.spec.scales:
            if s == 0:
                feat = F.interpolate(feat1, scale_factor=2, mode="bilinear", align_corners=False)
            elif s == 1:
                feat = feat1
            else:
                feat = feat2 if s == 2 else F.avg_pool2d(feat2, 2)
            outputs[s] = torch.sigmoid(self.heads[str(s)](feat))
        return outputs


class ReferencePoseNet(nn.Module):
    """Frame-pair to 6-vector (axis-angle, translation) ego-motion regressor.

    Output is scaled by 0.01 so a freshly initialized network predicts poses
    near identity; a zeroed final layer maps exactly to the identity.
    """

    def __init__(self, spec: PoseNetworkSpec):
        super().__init__()
        c = spec.base_channels
        self.body = nn.Sequential(
            _ConvBlock(6, c, stride=2),
            _ConvBlock(c, int(1.5 * c), stride=2),
            _ConvBlock(int(1.5 * c), 2 * c, stride=2),
            _ConvBlock(2 * c, 3 * c, stride=2),
        )
        self.head = nn.Conv2d(3 * c, 6, 1)

    def forward(self, frame_a, frame_b):
        x = torch.cat([frame_a, frame_b], 1)
        x = self.head(self.body(x))
        return 0.01 * x.mean(dim=(2, 3))


_DEPTH_BACKBONES = {"ref": ReferenceDepthNet}
_POSE_BACKBONES = {"ref": ReferencePoseNet}


def register_depth_backbone(name: str, factory) -> None:
    _DEPTH_BACKBONES[name] = factory


def register_pose_backbone(name: str, factory) -> None:
    _POSE_BACKBONES[name] = factory


def build_depth_network(spec: DepthNetworkSpec) -> nn.Module:
    try:
        return _DEPTH_BACKBONES[spec.backbone](spec)
    except KeyError:
        raise ValueError("unknown depth backbone %r (have %s)"
                         % (spec.backbone, sorted(_DEPTH_BACKBONES))) from None


def build_pose_network(spec: PoseNetworkSpec) -> nn.Module:
    try:
        return _POSE_BACKBONES[spec.backbone](spec)
    except KeyError:
        raise ValueError("unknown pose backbone %r (have %s)"
                         % (spec.backbone, sorted(_POSE_BACKBONES))) from None


def check_input_size(height: int, width: int) -> None:
    if height % DOWNSAMPLE_FACTOR or width % DOWNSAMPLE_FACTOR:
        pad_h = (-height) % DOWNSAMPLE_FACTOR
        pad_w = (-width) % DOWNSAMPLE_FACTOR
        raise ValueError(
            "input %dx%d not divisible by %d; pad by (%d, %d) to %dx%d"
            % (height, width, DOWNSAMPLE_FACTOR, pad_h, pad_w,
               height + pad_h, width + pad_w))


def depth_forward(net: nn.Module, image: torch.Tensor, spec: DepthNetworkSpec) -> dict:
    """Run the depth network; returns per-scale full-resolution disparity and depth.

    Result: {"disp": {scale: (B, H, W)}, "depth": {scale: (B, H, W)}} with every
    scale bilinearly upsampled to the input resolution.
    """
    squeeze = image.dim() == 3
    if squeeze:
        image = image[None]
    b, _, h, w = image.shape
    check_input_size(h, w)
    raw = net(image)
    disps, depths = {}, {}
    for s, sig in raw.items():
        if sig.shape[-2:] != (h, w):
            sig = F.interpolate(sig, size=(h, w), mode="bilinear", align_corners=False)
        disp, depth = sigmoid_to_depth(sig[:, 0], spec.min_depth, spec.max_depth)
        disps[s] = disp[0] if squeeze else disp
        depths[s] = depth[0] if squeeze else depth
    return {"disp": disps, "depth": depths}


def pose_forward(net: nn.Module, frame_a: torch.Tensor, frame_b: torch.Tensor) -> torch.Tensor:
    """Predict the 6-vector ego-motion from frame_a to frame_b; (B, 6) or (6,)."""
    squeeze = frame_a.dim() == 3
    if squeeze:
        frame_a, frame_b = frame_a[None], frame_b[None]
    vec = net(frame_a, frame_b)
    return vec[0] if squeeze else vec


def state_dict_hash(module: nn.Module) -> str:
    """Content hash of a module's weights, for frozen-network invariants."""
    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(path, depth_net: nn.Module, pose_net: nn.Module,
                    stage: str, epoch: int, config_hash: str,
                    depth_spec: DepthNetworkSpec, pose_spec: PoseNetworkSpec,
                    extra: dict | None = None) -> None:
    """Self-describing checkpoint: weights, stage tag, epoch and config hash."""
    payload = {
        "format": "gcdepth-checkpoint-v1",
        "stage": stage,
        "epoch": epoch,
        "config_hash": config_hash,
        "depth_spec": depth_spec.__dict__.copy(),
        "pose_spec": pose_spec.__dict__.copy(),
        "depth_state": depth_net.state_dict(),
        "pose_state": pose_net.state_dict(),
        "extra": extra or {},
    }
    torch.save(payload, path)


@dataclass
class Checkpoint:
    stage: str
    epoch: int
    config_hash: str
    depth_spec: DepthNetworkSpec
    pose_spec: PoseNetworkSpec
    depth_state: dict
    pose_state: dict
    extra: dict = field(default_factory=dict)

    def build_depth(self) -> nn.Module:
        net = build_depth_network(self.depth_spec)
        net.load_state_dict(self.depth_state)
        return net

    def build_pose(self) -> nn.Module:
        net = build_pose_network(self.pose_spec)
        net.load_state_dict(self.pose_state)
        return net


def load_checkpoint(path) -> Checkpoint:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != "gcdepth-checkpoint-v1":
        raise ValueError("not a recognized checkpoint file: %s" % path)
    dspec = payload["depth_spec"].copy()
    dspec["scales"] = tuple(dspec["scales"])
    return Checkpoint(
        stage=payload["stage"],
        epoch=payload["epoch"],
        config_hash=payload["config_hash"],
        depth_spec=DepthNetworkSpec(**dspec),
        pose_spec=PoseNetworkSpec(**payload["pose_spec"]),
        depth_state=payload["depth_state"],
        pose_state=payload["pose_state"],
        extra=payload["extra"],
    )
