"""Spatial-wise and channel-wise self-attention branches and their fusion.

Both attention matrices are indexed ``[j, i]``: row ``j`` is the receiving
position (or channel) and column ``i`` the contributing one, so every row is
a softmax over ``i``.
"""

import torch
from torch import nn

from .errors import ShapeError

FUSIONS = ("concat", "sum")


def _softmax_rows(logits):
    shifted = logits - logits.amax(dim=-1, keepdim=True)
    e = torch.exp(shifted)
    return e / e.sum(dim=-1, keepdim=True)


def spatial_attention_matrix(s1, s2):
    """(..., C, H, W) x (..., C, H, W) -> (..., HW, HW)."""
    if s1.shape != s2.shape:
        raise ShapeError(f"spatial attention inputs differ in shape: {tuple(s1.shape)} vs {tuple(s2.shape)}")
    q = s1.flatten(-2)  # (..., C, HW), column i is position i
    k = s2.flatten(-2)
    return _softmax_rows(k.transpose(-1, -2) @ q)


def channel_attention_matrix(c1, c2):
    """(..., C, HW) x (..., HW, C) -> (..., C, C)."""
    if c1.shape[-1] != c2.shape[-2] or c1.shape[-2] != c2.shape[-1]:
        raise ShapeError(f"channel attention inputs do not conform: {tuple(c1.shape)} vs {tuple(c2.shape)}")
    return _softmax_rows((c1 @ c2).transpose(-1, -2))


def _conv1x1(cin, cout):
    return nn.Conv2d(cin, cout, kernel_size=1)


class SpatialAttention(nn.Module):
    """Position-to-position attention with a learned 1x1 residual scale."""

    def __init__(self, channels, reduction=1):
        super().__init__()
        inner = max(1, channels // reduction)
        self.channels = channels
        self.query = _conv1x1(channels, inner)
        self.key = _conv1x1(channels, inner)
        self.value = _conv1x1(channels, channels)
        self.scale = _conv1x1(channels, channels)
        self.reset_parameters()

    def reset_parameters(self):
        for conv in (self.query, self.key, self.value):
            nn.init.normal_(conv.weight, std=0.01)
            nn.init.zeros_(conv.bias)
        nn.init.zeros_(self.scale.weight)
        nn.init.zeros_(self.scale.bias)

    def attention(self, f):
        return spatial_attention_matrix(self.query(f), self.key(f))

    def forward(self, f):
        if f.dim() != 4 or f.shape[1] != self.channels:
            raise ShapeError(f"expected N x {self.channels} x H x W, got {tuple(f.shape)}")
        n, c, h, w = f.shape
        attn = self.attention(f)
        v = self.value(f).flatten(2)
        context = (v @ attn.transpose(1, 2)).view(n, c, h, w)
        return self.scale(context) + f


class ChannelAttention(nn.Module):
    """Channel-to-channel attention; one shared 1x1 projection feeds all three roles."""

    def __init__(self, channels):
        super().__init__()
        self.channels = channels
        self.proj = _conv1x1(channels, channels)
        self.scale = _conv1x1(channels, channels)
        self.reset_parameters()

    def reset_parameters(self):
        nn.init.normal_(self.proj.weight, std=0.01)
        nn.init.zeros_(self.proj.bias)
        nn.init.zeros_(self.scale.weight)
        nn.init.zeros_(self.scale.bias)

    def attention(self, f):
        c1 = self.proj(f).flatten(2)
        return channel_attention_matrix(c1, c1.transpose(1, 2))

    def forward(self, f):
        if f.dim() != 4 or f.shape[1] != self.channels:
            raise ShapeError(f"expected N x {self.channels} x H x W, got {tuple(f.shape)}")
        n, c, h, w = f.shape
        c1 = self.proj(f).flatten(2)
        attn = channel_attention_matrix(c1, c1.transpose(1, 2))
        context = (attn @ c1).view(n, c, h, w)
        return self.scale(context) + f


def _batched(module, f):
    if f.dim() == 3:
        return module(f.unsqueeze(0))[0]
    return module(f)


def sam_forward(f, state):
    """Apply a SpatialAttention branch to a CxHxW or NxCxHxW feature map."""
    return _batched(state, f)


def cam_forward(f, state):
    return _batched(state, f)


def fuse(sam_out, cam_out, strategy="concat"):
    if sam_out.shape != cam_out.shape:
        raise ShapeError(f"cannot fuse {tuple(sam_out.shape)} with {tuple(cam_out.shape)}")
    if strategy == "concat":
        return torch.cat([sam_out, cam_out], dim=-3)
    if strategy == "sum":
        return sam_out + cam_out
    raise ValueError(f"unknown fusion strategy {strategy!r}; expected one of {FUSIONS}")
