"""Position, Localization and Orientation networks.

The translation module is a residual encoder shared by two heads: fully
connected layers regressing ``t`` and an upscaling decoder with encoder skip
connections that produces ``H`` heatmaps at input resolution. The heatmaps are
combined by a bias-free 1x1 convolution, softmax-normalized and reduced to a
center estimate with DSNT. The orientation network is a separate encoder fed
with the ROI crop (optionally with the heatmaps concatenated channel-wise).
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .heatmap import dsnt, normalize_heatmap, normalized_to_pixel
from .roi import OutOfFrameWarning, RoiConfig, assemble_orientation_input

log = logging.getLogger(__name__)

BACKBONES = ("small", "resnet18", "resnet50")
TORCHVISION_WEIGHTS = {
    "resnet18": "resnet18-f37072fd.pth",
    "resnet50": "resnet50-0676ba61.pth",
}
MIN_DEPTH = 0.5


class PretrainedWeightsUnavailable(FileNotFoundError):
    pass


class NetworkContractError(ValueError):
    pass


@dataclass
class ModelConfig:
    backbone: str = "small"
    position_init: str = "random"
    orientation_init: str = "random"
    pretrained_path: str | None = None
    hc_enabled: bool = False
    heat_channels: int = 64
    input_size: tuple[int, int] = (256, 409)
    image_channels: int = 1
    crop_size: int = 224
    k_object: float = 5000.0
    base_width: int = 16
    head_width: int = 128
    decoder_width: int = 32

    def __post_init__(self):
        self.input_size = tuple(int(s) for s in self.input_size)
        if self.backbone not in BACKBONES:
            raise ValueError(f"backbone must be one of {BACKBONES}, got {self.backbone!r}")
        for name in ("position_init", "orientation_init"):
            if getattr(self, name) not in ("random", "pretrained"):
                raise ValueError(f"{name} must be 'random' or 'pretrained'")
        if self.heat_channels < 1:
            raise ValueError("heat_channels must be >= 1")
        if min(self.input_size) < 32:
            raise ValueError("input dimensions must be >= 32")

    @property
    def orientation_channels(self) -> int:
        return self.image_channels + (self.heat_channels if self.hc_enabled else 0)

    def roi_config(self, cda_r: float = 0.15) -> RoiConfig:
        return RoiConfig(k_object=self.k_object, crop_size=self.crop_size, cda_r=cda_r,
                         hc_enabled=self.hc_enabled, hc_channels=self.heat_channels)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_size"] = list(self.input_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class TranslationOutput:
    t_pred: torch.Tensor       # (B, 3) meters
    heatstack: torch.Tensor    # (B, H, h, w) non-normalized
    heatmap: torch.Tensor      # (B, h, w) normalized
    center_pred: torch.Tensor  # (B, 2) normalized coordinates


# --------------------------------------------------------------------------- encoders


class BasicBlock(nn.Module):
    def __init__(self, cin, cout, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.downsample = None
        if stride != 1 or cin != cout:
            self.downsample = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        identity = x if self.downsample is None else self.downsample(x)
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + identity)


class SmallEncoder(nn.Module):
    """Reduced-depth residual encoder with the ResNet stage layout.

    Exposes five feature maps at strides 2, 4, 8, 16 and 32.
    """

    def __init__(self, in_channels: int, base: int = 16):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, base, 5, 2, 2, bias=False)
        self.bn1 = nn.BatchNorm2d(base)
        self.maxpool = nn.MaxPool2d(3, 2, 1)
        widths = [base, base * 2, base * 4, base * 8]
        self.layer1 = BasicBlock(base, widths[0], 1)
        self.layer2 = BasicBlock(widths[0], widths[1], 2)
        self.layer3 = BasicBlock(widths[1], widths[2], 2)
        self.layer4 = BasicBlock(widths[2], widths[3], 2)
        self.channels = [base] + widths

    def forward(self, x):
        s = F.relu(self.bn1(self.conv1(x)))
        l1 = self.layer1(self.maxpool(s))
        l2 = self.layer2(l1)
        l3 = self.layer3(l2)
        l4 = self.layer4(l3)
        return [s, l1, l2, l3, l4]


class TorchvisionEncoder(nn.Module):
    """ResNet18/50 trunk from torchvision, re-exposing the stage outputs."""

    def __init__(self, arch: str, in_channels: int):
        super().__init__()
        import torchvision

        net = getattr(torchvision.models, arch)(weights=None)
        if in_channels != 3:
            net.conv1 = nn.Conv2d(in_channels, 64, 7, 2, 3, bias=False)
        self.conv1, self.bn1, self.maxpool = net.conv1, net.bn1, net.maxpool
        self.layer1, self.layer2, self.layer3, self.layer4 = net.layer1, net.layer2, net.layer3, net.layer4
        expansion = 4 if arch == "resnet50" else 1
        self.channels = [64] + [w * expansion for w in (64, 128, 256, 512)]

    def forward(self, x):
        s = F.relu(self.bn1(self.conv1(x)))
        l1 = self.layer1(self.maxpool(s))
        l2 = self.layer2(l1)
        l3 = self.layer3(l2)
        l4 = self.layer4(l3)
        return [s, l1, l2, l3, l4]


def make_encoder(cfg: ModelConfig, in_channels: int) -> nn.Module:
    if cfg.backbone == "small":
        return SmallEncoder(in_channels, cfg.base_width)
    return TorchvisionEncoder(cfg.backbone, in_channels)


def adapt_first_conv(weight: torch.Tensor, image_channels: int, total_channels: int) -> torch.Tensor:
    """Adapt a pretrained 3-channel first-layer kernel to a new input layout.

    The image occupies the last ``image_channels`` input channels (heatmaps,
    if any, come first). A grayscale image gets the sum of the RGB kernels so a
    gray input replicated to RGB produces the same activations; heatmap
    channels start at zero.
    """
    out_ch, in_ch, kh, kw = weight.shape
    if in_ch != 3:
        raise NetworkContractError(f"expected a 3-channel pretrained kernel, got {in_ch}")
    new = torch.zeros(out_ch, total_channels, kh, kw, dtype=weight.dtype)
    if image_channels == 3:
        new[:, -3:] = weight
    elif image_channels == 1:
        new[:, -1] = weight.sum(dim=1)
    else:
        raise NetworkContractError(f"unsupported image channel count {image_channels}")
    return new


def _pretrained_state(cfg: ModelConfig) -> dict:
    if cfg.pretrained_path:
        path = Path(cfg.pretrained_path)
    elif cfg.backbone in TORCHVISION_WEIGHTS:
        path = Path(torch.hub.get_dir()) / "checkpoints" / TORCHVISION_WEIGHTS[cfg.backbone]
    else:
        raise PretrainedWeightsUnavailable(
            "no published classification weights exist for the 'small' backbone; train or "
            "supply an encoder state dict and set pretrained_path")
    if not path.exists():
        name = TORCHVISION_WEIGHTS.get(cfg.backbone, "<weights>.pth")
        raise PretrainedWeightsUnavailable(
            f"pretrained weights not found at {path}. Download "
            f"https://download.pytorch.org/models/{name} into {path.parent} "
            "or point pretrained_path at a local copy.")
    state = torch.load(path, map_location="cpu", weights_only=True)
    return {k: v for k, v in state.items() if not k.startswith("fc.")}


def load_pretrained(encoder: nn.Module, cfg: ModelConfig, in_channels: int):
    state = dict(_pretrained_state(cfg))
    if "conv1.weight" in state and state["conv1.weight"].shape[1] != in_channels:
        state["conv1.weight"] = adapt_first_conv(state["conv1.weight"], cfg.image_channels, in_channels)
    missing, unexpected = encoder.load_state_dict(state, strict=False)
    missing = [k for k in missing if not k.endswith("num_batches_tracked")]
    if missing or unexpected:
        raise NetworkContractError(
            f"pretrained weights do not match the {cfg.backbone} encoder "
            f"(missing {missing[:3]}, unexpected {unexpected[:3]})")


def init_random(module: nn.Module):
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


# --------------------------------------------------------------------------- heads


class UpBlock(nn.Module):
    def __init__(self, cin, cskip, cout):
        super().__init__()
        self.conv = nn.Sequential(
            nn.Conv2d(cin + cskip, cout, 3, 1, 1, bias=False), nn.BatchNorm2d(cout), nn.ReLU(inplace=True))

    def forward(self, x, skip):
        x = F.interpolate(x, size=skip.shape[-2:], mode="nearest")
        return self.conv(torch.cat([x, skip], dim=1))


class TranslationNet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.encoder = make_encoder(cfg, cfg.image_channels)
        ch = self.encoder.channels
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.position_head = nn.Sequential(
            nn.Flatten(), nn.Linear(ch[4], cfg.head_width), nn.ReLU(inplace=True),
            nn.Linear(cfg.head_width, cfg.head_width), nn.ReLU(inplace=True),
            nn.Linear(cfg.head_width, 3))
        w = cfg.decoder_width
        self.up3 = UpBlock(ch[4], ch[3], 4 * w)
        self.up2 = UpBlock(4 * w, ch[2], 2 * w)
        self.up1 = UpBlock(2 * w, ch[1], w)
        self.up0 = UpBlock(w, ch[0], w)
        self.to_heat = nn.Conv2d(w + cfg.image_channels, cfg.heat_channels, 3, 1, 1)
        self.combine = nn.Conv2d(cfg.heat_channels, 1, 1, bias=False)
        self.register_buffer("t_mean", torch.zeros(3))
        self.register_buffer("t_std", torch.ones(3))

    def forward(self, x) -> TranslationOutput:
        s, l1, l2, l3, l4 = self.encoder(x)
        t = self.position_head(self.pool(l4)) * self.t_std + self.t_mean
        d = self.up3(l4, l3)
        d = self.up2(d, l2)
        d = self.up1(d, l1)
        d = self.up0(d, s)
        d = F.interpolate(d, size=x.shape[-2:], mode="nearest")
        heatstack = self.to_heat(torch.cat([d, x], dim=1))
        heatmap = normalize_heatmap(self.combine(heatstack)[:, 0])
        return TranslationOutput(t, heatstack, heatmap, dsnt(heatmap))


class OrientationNet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.encoder = make_encoder(cfg, cfg.orientation_channels)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.head = nn.Sequential(
            nn.Flatten(), nn.Linear(self.encoder.channels[4], cfg.head_width), nn.ReLU(inplace=True),
            nn.Linear(cfg.head_width, 4))

    def forward(self, roi):
        raw = self.head(self.pool(self.encoder(roi)[4]))
        return raw / torch.linalg.vector_norm(raw, dim=-1, keepdim=True).clamp_min(1e-12)


# --------------------------------------------------------------------------- full model


class PoseModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.translation = TranslationNet(cfg)
        self.orientation = OrientationNet(cfg)

    def set_translation_stats(self, mean, std):
        self.translation.t_mean.copy_(torch.as_tensor(mean, dtype=torch.float32))
        self.translation.t_std.copy_(torch.as_tensor(std, dtype=torch.float32).clamp_min(1e-3))


def build_model(cfg: ModelConfig, seed: int = 0) -> PoseModel:
    """Construct the model deterministically from ``seed``."""
    if cfg.hc_enabled and cfg.orientation_init == "pretrained":
        log.warning("pretrained initialization of the orientation encoder with heatmap "
                    "concatenation tends to hurt orientation accuracy; random init is preferred")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = PoseModel(cfg)
        init_random(model)
        nn.init.constant_(model.translation.combine.weight, 1.0 / cfg.heat_channels)
    if cfg.position_init == "pretrained":
        load_pretrained(model.translation.encoder, cfg, cfg.image_channels)
    if cfg.orientation_init == "pretrained":
        load_pretrained(model.orientation.encoder, cfg, cfg.orientation_channels)
    return model


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad)


def forward_translation(model: PoseModel, images: torch.Tensor) -> TranslationOutput:
    if images.dim() != 4 or images.shape[1] != model.cfg.image_channels \
            or tuple(images.shape[-2:]) != model.cfg.input_size:
        raise NetworkContractError(
            f"expected images of shape (B, {model.cfg.image_channels}, {model.cfg.input_size[0]}, "
            f"{model.cfg.input_size[1]}), got {tuple(images.shape)}")
    return model.translation(images)


def forward_orientation(model: PoseModel, rois: torch.Tensor) -> torch.Tensor:
    if rois.dim() != 4 or rois.shape[1] != model.cfg.orientation_channels:
        raise NetworkContractError(
            f"orientation input must have {model.cfg.orientation_channels} channels, "
            f"got shape {tuple(rois.shape)}")
    return model.orientation(rois)


def predicted_boxes(out: TranslationOutput, width: int, height: int, k_object: float) -> torch.Tensor:
    """``(B, 3)`` rows of ``(u, v, side)`` in original-image pixels, detached."""
    uv = normalized_to_pixel(out.center_pred.detach(), width, height)
    z = out.t_pred.detach()[:, 2].clamp_min(MIN_DEPTH)
    return torch.cat([uv, (k_object / z)[:, None]], dim=1)


def forward_pose(model: PoseModel, images: torch.Tensor, originals: torch.Tensor | None = None,
                 mode: str = "eval", cda_r: float | None = None,
                 rng: np.random.Generator | None = None, translation: TranslationOutput | None = None,
                 roi_angles: torch.Tensor | None = None):
    """Run the full pipeline.

    ``images`` are network-sized inputs; ``originals`` the full-resolution
    images the ROI is cropped from (defaults to ``images``). Center
    augmentation is applied only in train mode when ``cda_r`` is given; its
    offsets are constants. ``roi_angles`` rotates each crop in the image
    plane (training augmentation). Predicted depths are floored at
    ``MIN_DEPTH`` before sizing the box. Returns ``(t_pred, q_pred, translation_output, boxes)``.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    out = translation if translation is not None else forward_translation(model, images)
    src = images if originals is None else originals
    height, width = src.shape[-2:]
    boxes = predicted_boxes(out, width, height, model.cfg.k_object)
    if mode == "train" and cda_r:
        if rng is None:
            raise ValueError("center augmentation needs an explicit random generator")
        offsets = rng.normal(0.0, 1.0, size=(boxes.shape[0], 2)) * cda_r
        boxes = boxes.clone()
        boxes[:, :2] += torch.as_tensor(offsets, dtype=boxes.dtype) * boxes[:, 2:3]
    roi_cfg = model.cfg.roi_config(cda_r or 0.15)
    heat = out.heatstack if model.cfg.hc_enabled else None
    crop_boxes = boxes if roi_angles is None else torch.cat([boxes, roi_angles.to(boxes)[:, None]], dim=1)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", OutOfFrameWarning)
        rois, _ = assemble_orientation_input(src, heat, crop_boxes, roi_cfg)
    q = forward_orientation(model, rois)
    return out.t_pred, q, out, boxes
