"""Local feature extractor: VGG-16 conv1_1..conv4_3 followed by a dilated stack."""

from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import CheckpointError, ShapeError
from .tensorio import load_weights

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
DOWNSAMPLE = 8


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str  # conv | maxpool | upsample
    out_channels: int = 0
    kernel: int = 3
    stride: int = 1
    dilation: int = 1
    activation: str = "relu"

    def __post_init__(self):
        if self.dilation < 1:
            raise ValueError("dilation must be >= 1")
        if self.kind == "conv" and self.kernel % 2 == 0:
            raise ValueError("conv kernels must be odd")

    @property
    def padding(self):
        return self.dilation * (self.kernel - 1) // 2


def frontend_specs(width_divisor=1, conv3_channels=256):
    plan = [
        ("conv1", 64, 2),
        ("conv2", 128, 2),
        ("conv3", conv3_channels, 3),
        ("conv4", 512, 3),
    ]
    specs = []
    for block, (prefix, channels, reps) in enumerate(plan):
        for i in range(reps):
            specs.append(LayerSpec(f"{prefix}_{i + 1}", "conv", max(1, channels // width_divisor)))
        if block < len(plan) - 1:
            specs.append(LayerSpec(f"pool{block + 1}", "maxpool", kernel=2, stride=2))
    return specs


def dilation_specs(width_divisor=1):
    return [
        LayerSpec(f"dil{i + 1}", "conv", max(1, c // width_divisor), dilation=2)
        for i, c in enumerate((512, 512, 512, 256, 128, 64))
    ]


def receptive_field(specs):
    """Return (receptive field size, cumulative stride) of a layer stack."""
    size, jump = 1, 1
    for s in specs:
        size += (s.kernel - 1) * s.dilation * jump
        jump *= s.stride
    return size, jump


def _build(specs, in_channels):
    layers = OrderedDict()
    c = in_channels
    for s in specs:
        if s.kind == "conv":
            layers[s.name] = nn.Conv2d(c, s.out_channels, s.kernel, s.stride, s.padding, s.dilation)
            if s.activation == "relu":
                layers[f"relu_{s.name}"] = nn.ReLU()
            c = s.out_channels
        elif s.kind == "maxpool":
            layers[s.name] = nn.MaxPool2d(s.kernel, s.stride)
        else:
            raise ValueError(f"unsupported layer kind {s.kind!r}")
    seq = nn.Sequential(layers)
    seq.out_channels = c
    return seq


def init_conv_weights(module, init="normal"):
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            if init == "normal":
                nn.init.normal_(m.weight, std=0.01)
            elif init == "kaiming":
                nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
            else:
                raise ValueError(f"unknown init {init!r}")
            if m.bias is not None:
                nn.init.zeros_(m.bias)


def load_pretrained(module, source):
    """Copy tensors into ``module`` by parameter name.

    ``source`` is a weight directory or a mapping of name -> array. Only the
    names present in ``module`` are consulted; every one must be supplied.
    """
    if isinstance(source, (str, Path)):
        source = load_weights(source)
    params = module.state_dict()
    for name, target in params.items():
        if name not in source:
            raise CheckpointError(f"pretrained source has no tensor for layer {name!r}")
        value = torch.as_tensor(np.asarray(source[name]))
        if tuple(value.shape) != tuple(target.shape):
            raise CheckpointError(
                f"layer {name!r}: pretrained shape {tuple(value.shape)} != expected {tuple(target.shape)}"
            )
        params[name] = value.to(target.dtype)
    module.load_state_dict(params)


def build_backbone(pretrained=None, width_divisor=1, conv3_channels=256, init="normal"):
    frontend = _build(frontend_specs(width_divisor, conv3_channels), 3)
    init_conv_weights(frontend, init)
    if pretrained is not None:
        load_pretrained(frontend, pretrained)
    return frontend


def build_dilation_module(in_channels=512, width_divisor=1, init="normal"):
    dilation = _build(dilation_specs(width_divisor), in_channels)
    init_conv_weights(dilation, init)
    return dilation


class LocalFeatureExtractor(nn.Module):
    def __init__(self, frontend, dilation):
        super().__init__()
        self.frontend = frontend
        self.dilation = dilation

    @property
    def out_channels(self):
        return self.dilation.out_channels

    def forward(self, x):
        check_divisible(x.shape[-2:])
        return self.dilation(self.frontend(x))


def build_feature_extractor(pretrained=None, width_divisor=1, conv3_channels=256, init="normal"):
    frontend = build_backbone(pretrained, width_divisor, conv3_channels, init)
    return LocalFeatureExtractor(
        frontend, build_dilation_module(frontend.out_channels, width_divisor, init)
    )


def check_divisible(spatial):
    h, w = (int(v) for v in spatial)
    if h % DOWNSAMPLE or w % DOWNSAMPLE:
        raise ShapeError(
            f"input size {h}x{w} is not divisible by {DOWNSAMPLE}; pad or resize the image first"
        )


def normalize_image(image, imagenet=False, dtype=torch.float32):
    """HxWx3 uint8 -> 3xHxW tensor in [0, 1], optionally ImageNet-standardised."""
    x = torch.as_tensor(np.array(image), dtype=dtype).permute(2, 0, 1) / 255.0
    if imagenet:
        mean = torch.tensor(IMAGENET_MEAN, dtype=dtype).view(3, 1, 1)
        std = torch.tensor(IMAGENET_STD, dtype=dtype).view(3, 1, 1)
        x = (x - mean) / std
    return x.contiguous()


@torch.no_grad()
def extract_features(extractor, image):
    """Run the extractor in inference mode on a 3xHxW (or batched) tensor."""
    batched = image.dim() == 4
    x = image if batched else image.unsqueeze(0)
    was_training = extractor.training
    extractor.eval()
    try:
        out = extractor(x)
    finally:
        extractor.train(was_training)
    return out if batched else out[0]
