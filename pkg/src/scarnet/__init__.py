"""Crowd density estimation with spatial- and channel-wise self-attention."""

__version__ = "0.1.0"
