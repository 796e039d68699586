"""The four ablation variants, density prediction and checkpoint I/O."""

import hashlib
import json
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .attention import ChannelAttention, SpatialAttention, fuse, FUSIONS
from .backbone import DOWNSAMPLE, build_feature_extractor, check_divisible, init_conv_weights, normalize_image
from .errors import CheckpointError, ConfigError
from .tensorio import load_weights, save_weights

VARIANTS = ("FCN", "FCN+SAM", "FCN+CAM", "SCAR")
CHECKPOINT_FORMAT = "SCARCKPT1"
ARCH_KEYS = ("variant", "fusion", "width_divisor", "conv3_channels", "sam_reduction", "imagenet", "density_scale")


def upsample_density(grid, factor=DOWNSAMPLE):
    """Bilinear upsample followed by a 1/factor**2 rescale; preserves the grid's sum."""
    return F.interpolate(grid, scale_factor=factor, mode="bilinear", align_corners=False) / factor**2


class SCARModel(nn.Module):
    def __init__(
        self,
        variant="SCAR",
        fusion=None,
        width_divisor=1,
        conv3_channels=256,
        sam_reduction=1,
        init="normal",
        pretrained=None,
        density_scale=1.0,
    ):
        super().__init__()
        if variant not in VARIANTS:
            raise ConfigError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
        if variant != "SCAR" and fusion is not None:
            raise ConfigError(f"fusion only applies to SCAR, got fusion={fusion!r} for {variant}")
        if variant == "SCAR":
            fusion = fusion or "concat"
            if fusion not in FUSIONS:
                raise ConfigError(f"unknown fusion {fusion!r}; expected one of {FUSIONS}")
        self.variant = variant
        self.fusion = fusion
        self.width_divisor = width_divisor
        self.conv3_channels = conv3_channels
        self.sam_reduction = sam_reduction
        self.imagenet = pretrained is not None
        self.density_scale = float(density_scale)

        self.extractor = build_feature_extractor(pretrained, width_divisor, conv3_channels, init)
        c = self.extractor.out_channels
        self.sam = SpatialAttention(c, sam_reduction) if variant in ("FCN+SAM", "SCAR") else None
        self.cam = ChannelAttention(c) if variant in ("FCN+CAM", "SCAR") else None
        reg_in = 2 * c if (variant == "SCAR" and fusion == "concat") else c
        self.regress = nn.Conv2d(reg_in, 1, kernel_size=1)
        init_conv_weights(self.regress, init)

    @property
    def channels(self):
        return self.extractor.out_channels

    def arch(self):
        return {k: getattr(self, k) for k in ARCH_KEYS}

    def head(self, feats):
        """Attention + regression at 1/8 resolution; returns (density, branch outputs)."""
        branches = {}
        if self.sam is not None:
            branches["sam"] = self.sam(feats)
        if self.cam is not None:
            branches["cam"] = self.cam(feats)
        if self.variant == "SCAR":
            x = fuse(branches["sam"], branches["cam"], self.fusion)
        else:
            x = branches.get("sam", branches.get("cam", feats))
        return F.relu(self.regress(x)), branches

    def forward(self, x, return_branches=False):
        check_divisible(x.shape[-2:])
        low, branches = self.head(self.extractor(x))
        density = upsample_density(low)
        return (density, branches) if return_branches else density


def build_model(variant_name="SCAR", fusion=None, pretrained=None, **arch):
    return SCARModel(variant_name, fusion, pretrained=pretrained, **arch)


@dataclass
class PredictionResult:
    density: np.ndarray
    count: float
    attention_snapshots: dict = field(default_factory=dict)


def prepare_input(model, image):
    dtype = next(model.parameters()).dtype
    if isinstance(image, torch.Tensor):
        return image.to(dtype)
    return normalize_image(image, imagenet=model.imagenet, dtype=dtype)


@torch.no_grad()
def predict_density(model, image, keep_attention=False):
    """Predict a full-resolution density map for one image.

    ``image`` is either a normalised 3xHxW tensor or an HxWx3 uint8 array.
    """
    x = prepare_input(model, image)
    was_training = model.training
    model.eval()
    try:
        density, branches = model(x.unsqueeze(0), return_branches=True)
    finally:
        model.train(was_training)
    grid = (density[0, 0] / model.density_scale).cpu().numpy()
    snapshots = {k: v[0].cpu().numpy() for k, v in branches.items()} if keep_attention else {}
    return PredictionResult(grid, float(grid.sum()), snapshots)


def _config_hash(arch):
    return hashlib.sha256(json.dumps(arch, sort_keys=True).encode()).hexdigest()[:16]


def save_checkpoint(model, path):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    save_weights(path / "weights", model.state_dict())
    arch = model.arch()
    meta = {
        "format": CHECKPOINT_FORMAT,
        **{k: ("" if v is None else v) for k, v in arch.items()},
        "config_hash": _config_hash(arch),
        "created": datetime.now(timezone.utc).isoformat(timespec="seconds"),
    }
    (path / "meta.txt").write_text("".join(f"{k}={v}\n" for k, v in meta.items()), encoding="utf-8")
    return path


def read_meta(path):
    meta_path = Path(path) / "meta.txt"
    if not meta_path.is_file():
        raise CheckpointError(f"{path}: not a checkpoint (missing meta.txt; expected format {CHECKPOINT_FORMAT})")
    meta = {}
    for line in meta_path.read_text(encoding="utf-8").splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            meta[k.strip()] = v.strip()
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(
            f"{path}: checkpoint format {meta.get('format')!r} is not supported; expected {CHECKPOINT_FORMAT}"
        )
    return meta


def load_checkpoint(path, expected_variant=None):
    meta = read_meta(path)
    if expected_variant is not None and meta.get("variant") != expected_variant:
        raise CheckpointError(f"{path}: checkpoint holds variant {meta.get('variant')!r}, expected {expected_variant!r}")
    try:
        model = SCARModel(
            variant=meta["variant"],
            fusion=meta["fusion"] or None,
            width_divisor=int(meta["width_divisor"]),
            conv3_channels=int(meta["conv3_channels"]),
            sam_reduction=int(meta["sam_reduction"]),
            density_scale=float(meta["density_scale"]),
        )
    except (KeyError, ValueError, ConfigError) as exc:
        raise CheckpointError(f"{path}: corrupt meta.txt ({exc})") from exc
    model.imagenet = meta.get("imagenet") == "True"
    tensors = load_weights(Path(path) / "weights")
    state = model.state_dict()
    if set(tensors) != set(state):
        missing = sorted(set(state) - set(tensors))
        extra = sorted(set(tensors) - set(state))
        raise CheckpointError(f"{path}: weights do not match variant {model.variant} (missing {missing}, unexpected {extra})")
    for name, value in tensors.items():
        if tuple(value.shape) != tuple(state[name].shape):
            raise CheckpointError(f"{path}: layer {name!r} has shape {value.shape}, expected {tuple(state[name].shape)}")
        state[name] = torch.from_numpy(value)
    model.load_state_dict(state)
    return model
