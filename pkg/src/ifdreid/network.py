"""Dual-stream feature extractor.

The main stream sees the original image and the attention stream sees the
clothing-masked image. Both use the same backbone architecture with separate
weights. Channel-pooled attention-stream maps are turned into a spatial
weight map that rescales the main-stream features; a clothing-gated,
batch-normalized pooling of the refined features yields the clothing feature
used by the contrastive loss.
"""
from __future__ import annotations

import json
import struct
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import NumericError, ValidationError

BN_EPS = 1e-5


@dataclass
class BackboneConfig:
    arch: str = "small-conv"
    widths: tuple[int, ...] = (16, 32, 64, 64)
    output_stride: int = 8
    pretrained_path: str | None = None

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if self.arch not in ("small-conv", "resnet50"):
            raise ValueError(f"unknown backbone architecture {self.arch!r}")
        if self.output_stride not in (1, 2, 4, 8, 16, 32):
            raise ValueError(f"output stride must be a power of two, got {self.output_stride}")

    @property
    def channels(self) -> int:
        return 2048 if self.arch == "resnet50" else self.widths[-1]


@dataclass
class VariantSpec:
    """Which parts of the model a training run uses."""

    name: str
    attention_stream: bool
    cbd: bool
    weighted_ccl: bool = field(default=True)


VARIANTS: dict[str, VariantSpec] = {
    "baseline": VariantSpec("baseline", attention_stream=False, cbd=False, weighted_ccl=False),
    "ikt": VariantSpec("ikt", attention_stream=True, cbd=False, weighted_ccl=False),
    "cbd": VariantSpec("cbd", attention_stream=False, cbd=True, weighted_ccl=True),
    "ifd-cl": VariantSpec("ifd-cl", attention_stream=True, cbd=True, weighted_ccl=False),
    "ifd": VariantSpec("ifd", attention_stream=True, cbd=True, weighted_ccl=True),
}


def get_variant(name: str) -> VariantSpec:
    try:
        return VARIANTS[name]
    except KeyError:
        raise ValueError(f"unknown variant {name!r}; choose from {list(VARIANTS)}") from None


# --------------------------------------------------------------------------
# functional operators


def ikt_attention(feat_a: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    """Spatial attention from attention-stream maps.

    ``feat_a`` is N x C x H x W; ``weight`` is 1 x 2 x k x k with k odd. The
    channel max and channel mean are stacked (max first), convolved under
    zero padding k // 2 and squashed by a sigmoid. Returns N x 1 x H x W.
    """
    k = weight.shape[-1]
    if k % 2 != 1 or weight.shape[-2] != k:
        raise ValueError(f"attention kernel must be square with odd size, got {tuple(weight.shape)}")
    if torch.isnan(feat_a).any():
        raise NumericError("NaN in attention-stream features")
    pooled = torch.cat([feat_a.amax(dim=1, keepdim=True), feat_a.mean(dim=1, keepdim=True)], dim=1)
    return torch.sigmoid(F.conv2d(pooled, weight, bias, padding=k // 2))


def apply_attention(attention: torch.Tensor, feat_g: torch.Tensor) -> torch.Tensor:
    if attention.dim() == 3:
        attention = attention.unsqueeze(1)
    if attention.shape[-2:] != feat_g.shape[-2:] or attention.shape[1] != 1:
        raise ValueError(f"attention {tuple(attention.shape)} does not match features {tuple(feat_g.shape)}")
    return attention * feat_g


def clothing_feature(feat_rg: torch.Tensor, clothing_mask: torch.Tensor, bn: nn.BatchNorm2d) -> torch.Tensor:
    """Gate features by the clothing mask, batch-normalize, average-pool, L2-normalize.

    A zero pooled vector maps to the zero vector.
    """
    if clothing_mask.dim() == 3:
        clothing_mask = clothing_mask.unsqueeze(1)
    if clothing_mask.shape[-2:] != feat_rg.shape[-2:]:
        raise ValueError(
            f"clothing mask {tuple(clothing_mask.shape[-2:])} does not match features {tuple(feat_rg.shape[-2:])}"
        )
    if not torch.any(clothing_mask != 0):
        warnings.warn("clothing mask is zero for the whole batch; clothing features are degenerate", RuntimeWarning)
    feat_c = bn(clothing_mask * feat_rg)
    return F.normalize(feat_c.mean(dim=(2, 3)), dim=1)


# --------------------------------------------------------------------------
# modules


def _conv_bn(cin: int, cout: int, stride: int) -> list[nn.Module]:
    return [nn.Conv2d(cin, cout, 3, stride, 1, bias=False), nn.BatchNorm2d(cout, eps=BN_EPS), nn.ReLU(inplace=True)]


class SmallConvBackbone(nn.Module):
    """Four conv stages; the first log2(output_stride) of them halve the resolution."""

    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.output_stride = config.output_stride
        n_down = int(np.log2(config.output_stride))
        if n_down > len(config.widths):
            raise ValueError("output stride needs more stages than configured")
        layers, cin = [], 3
        for i, width in enumerate(config.widths):
            stride = 2 if i < n_down else 1
            layers.append(nn.Sequential(*_conv_bn(cin, width, stride), *_conv_bn(width, width, 1)))
            cin = width
        self.stages = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.stages(x)


class ResNet50Backbone(nn.Module):
    def __init__(self, config: BackboneConfig):
        super().__init__()
        from torchvision.models import resnet50

        net = resnet50(weights=None)
        if config.output_stride == 16:
            net.layer4[0].conv2.stride = (1, 1)
            net.layer4[0].downsample[0].stride = (1, 1)
        elif config.output_stride != 32:
            raise ValueError("resnet50 supports output stride 16 or 32")
        if config.pretrained_path:
            state = torch.load(config.pretrained_path, map_location="cpu")
            net.load_state_dict(state, strict=False)
        self.output_stride = config.output_stride
        self.body = nn.Sequential(
            net.conv1, net.bn1, net.relu, net.maxpool, net.layer1, net.layer2, net.layer3, net.layer4
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.body(x)


def build_backbone(config: BackboneConfig) -> nn.Module:
    if config.arch == "resnet50":
        return ResNet50Backbone(config)
    return SmallConvBackbone(config)


def backbone_forward(backbone: nn.Module, images: torch.Tensor) -> torch.Tensor:
    """Run a backbone on N x 3 x H x W images (H, W multiples of the output stride)."""
    stride = backbone.output_stride
    h, w = images.shape[-2:]
    if h < stride or w < stride or h % stride or w % stride:
        raise ValueError(f"image size {h}x{w} is not a positive multiple of output stride {stride}")
    return backbone(images)


class IKT(nn.Module):
    def __init__(self, kernel_size: int = 7):
        super().__init__()
        if kernel_size % 2 != 1:
            raise ValueError("attention kernel size must be odd")
        self.kernel_size = kernel_size
        self.conv = nn.Conv2d(2, 1, kernel_size, padding=kernel_size // 2, bias=True)

    def forward(self, feat_a: torch.Tensor) -> torch.Tensor:
        return ikt_attention(feat_a, self.conv.weight, self.conv.bias)


class IdentityHead(nn.Module):
    def __init__(self, channels: int, num_ids: int):
        super().__init__()
        self.classifier = nn.Linear(channels, num_ids, bias=False)

    def forward(self, fmap: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        pooled = fmap.mean(dim=(2, 3))
        return pooled, self.classifier(pooled)


class IFDNetwork(nn.Module):
    """Main stream plus, depending on the variant, attention stream and CBD path."""

    def __init__(self, backbone: BackboneConfig, num_ids: int, variant: str = "ifd", ikt_kernel: int = 7):
        super().__init__()
        self.backbone_config = backbone
        self.variant = get_variant(variant)
        self.num_ids = num_ids
        self.ikt_kernel = ikt_kernel
        channels = backbone.channels
        self.main = build_backbone(backbone)
        self.main_head = IdentityHead(channels, num_ids)
        if self.variant.attention_stream:
            self.attn = build_backbone(backbone)
            self.attn_head = IdentityHead(channels, num_ids)
            self.ikt = IKT(ikt_kernel)
        if self.variant.cbd:
            self.cbd_bn = nn.BatchNorm2d(channels, eps=BN_EPS)

    @property
    def has_attention(self) -> bool:
        return self.variant.attention_stream

    def attention_parameters(self) -> list[nn.Parameter]:
        if not self.has_attention:
            return []
        return list(self.attn.parameters()) + list(self.attn_head.parameters())

    def forward_attention(self, masked: torch.Tensor) -> dict[str, torch.Tensor]:
        feat_a = backbone_forward(self.attn, masked)
        _, logits = self.attn_head(feat_a)
        return {"feat_a": feat_a, "logits_attn": logits}

    def forward(
        self,
        images: torch.Tensor,
        masked: torch.Tensor | None = None,
        clothing_mask: torch.Tensor | None = None,
    ) -> dict[str, torch.Tensor]:
        out: dict[str, torch.Tensor] = {}
        feat = backbone_forward(self.main, images)
        if self.has_attention:
            if masked is None:
                raise ValueError("this variant needs clothing-masked images")
            out.update(self.forward_attention(masked))
            out["attention"] = self.ikt(out["feat_a"])
            feat = apply_attention(out["attention"], feat)
        out["feat_map"] = feat
        out["feature"], out["logits_main"] = self.main_head(feat)
        if self.variant.cbd and clothing_mask is not None:
            out["f_c"] = clothing_feature(feat, clothing_mask, self.cbd_bn)
        return out

    def feature_size(self, image_size: tuple[int, int]) -> tuple[int, int]:
        s = self.backbone_config.output_stride
        return image_size[0] // s, image_size[1] // s


# --------------------------------------------------------------------------
# checkpoint format
#
# 8-byte magic, little-endian uint64 header length, UTF-8 JSON header, then the
# tensors back to back as raw little-endian float32 in header order.

MAGIC = b"IFDCKPT1"


def save_checkpoint(path: str | Path, tensors: dict[str, torch.Tensor | np.ndarray], header: dict[str, Any]) -> None:
    entries, blobs, offset = [], [], 0
    for name, value in tensors.items():
        if isinstance(value, torch.Tensor):
            value = value.detach().cpu().numpy()
        arr = np.asarray(value, dtype="<f4")  # keeps 0-d tensors 0-d
        data = arr.tobytes(order="C")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    head = json.dumps({**header, "tensors": entries}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for data in blobs:
            fh.write(data)


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ValidationError(f"{path} is not an ifdreid checkpoint")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
    base = 16 + hlen
    tensors = {}
    for e in header.pop("tensors"):
        start = base + e["offset"]
        arr = np.frombuffer(raw[start : start + e["nbytes"]], dtype="<f4").reshape(e["shape"])
        tensors[e["name"]] = arr.copy()
    return tensors, header


def network_header(net: IFDNetwork) -> dict[str, Any]:
    return {
        "backbone": asdict(net.backbone_config),
        "ikt_kernel": net.ikt_kernel,
        "variant": net.variant.name,
        "num_ids": net.num_ids,
    }


def load_state_into(net: nn.Module, tensors: dict[str, np.ndarray], prefix: str = "") -> None:
    """Copy checkpoint arrays into a module, reporting every shape mismatch at once."""
    state = net.state_dict()
    problems = []
    for name, ref in state.items():
        key = prefix + name
        if key not in tensors:
            problems.append(f"missing {key} {tuple(ref.shape)}")
        elif tuple(tensors[key].shape) != tuple(ref.shape):
            problems.append(f"{key}: checkpoint {tuple(tensors[key].shape)} vs model {tuple(ref.shape)}")
    extra = [k for k in tensors if k.startswith(prefix) and k[len(prefix):] not in state]
    problems.extend(f"unexpected {k}" for k in extra)
    if problems:
        raise ValidationError("checkpoint does not match model:\n  " + "\n  ".join(problems))
    new_state = {name: torch.from_numpy(tensors[prefix + name]).to(ref.dtype) for name, ref in state.items()}
    net.load_state_dict(new_state)


def network_from_checkpoint(path: str | Path) -> tuple[IFDNetwork, dict[str, Any]]:
    tensors, header = load_checkpoint(path)
    net = IFDNetwork(BackboneConfig(**header["backbone"]), header["num_ids"], header["variant"], header["ikt_kernel"])
    model_tensors = {k: v for k, v in tensors.items() if k.startswith("model.")}
    load_state_into(net, model_tensors, prefix="model.")
    return net, header
