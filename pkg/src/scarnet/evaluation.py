"""Counting errors, density-map quality metrics, reports and attention visualisation."""

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from matplotlib import colormaps
from PIL import Image
from scipy.signal import correlate2d

from .backbone import DOWNSAMPLE
from .data import generate_density_map, resize_scene
from .errors import ConfigError, DataError, ShapeError
from .model import predict_density

PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
COLORMAP = "viridis"


def _paired(gt_counts, pred_counts):
    gt = np.asarray(gt_counts, dtype=np.float64).ravel()
    pred = np.asarray(pred_counts, dtype=np.float64).ravel()
    if len(gt) != len(pred):
        raise ShapeError(f"{len(gt)} ground-truth counts vs {len(pred)} predictions")
    if len(gt) == 0:
        raise ShapeError("no counts to compare")
    return gt, pred


def mae(gt_counts, pred_counts):
    gt, pred = _paired(gt_counts, pred_counts)
    return float(np.mean(np.abs(gt - pred)))


def mse_count(gt_counts, pred_counts):
    """Root of the mean squared count error (what crowd-counting papers call MSE)."""
    gt, pred = _paired(gt_counts, pred_counts)
    return float(np.sqrt(np.mean((gt - pred) ** 2)))


def _normalized_pair(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeError(f"maps differ in shape: {pred.shape} vs {gt.shape}")
    peak = gt.max() if gt.size else 0.0
    if not peak > 0:
        raise DataError("ground-truth map has no positive values; skip this image for PSNR/SSIM")
    return pred / peak, gt / peak


def psnr(pred, gt, cap=PSNR_CAP):
    """PSNR in dB after scaling both maps by 1/max(gt) (peak signal 1)."""
    p, g = _normalized_pair(pred, gt)
    err = np.mean((p - g) ** 2)
    if err == 0:
        return cap
    return min(cap, 10.0 * math.log10(1.0 / err))


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    ax = np.arange(size) - (size - 1) / 2
    g = np.exp(-(ax**2) / (2 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(pred, gt, data_range=1.0, normalize=True):
    """Mean SSIM over all fully-covered 11x11 Gaussian windows."""
    if normalize:
        x, y = _normalized_pair(pred, gt)
    else:
        x, y = np.asarray(pred, np.float64), np.asarray(gt, np.float64)
        if x.shape != y.shape:
            raise ShapeError(f"maps differ in shape: {x.shape} vs {y.shape}")
    if min(x.shape) < SSIM_WINDOW:
        raise ShapeError(f"SSIM needs maps of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {x.shape}")
    win = gaussian_window()
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2

    def filt(a):
        return correlate2d(a, win, mode="valid")

    mx, my = filt(x), filt(y)
    vx = filt(x * x) - mx * mx
    vy = filt(y * y) - my * my
    cov = filt(x * y) - mx * my
    num = (2 * mx * my + c1) * (2 * cov + c2)
    den = (mx * mx + my * my + c1) * (vx + vy + c2)
    return float(np.clip(np.mean(num / den), -1.0, 1.0))


@dataclass
class MetricsReport:
    mae: float
    mse: float
    psnr: float
    ssim: float
    n_images: int
    per_image: list = field(default_factory=list)
    normalization: str = "gt_max"

    def to_text(self):
        head = [
            f"mae = {self.mae!r}",
            f"mse = {self.mse!r}",
            f"psnr = {self.psnr!r}",
            f"ssim = {self.ssim!r}",
            f"n_images = {self.n_images}",
            f"normalization = {self.normalization}",
            "",
        ]
        rows = [f"{sid}\t{gt!r}\t{pred!r}" for sid, gt, pred in self.per_image]
        return "\n".join(head + rows) + "\n"

    def write(self, path):
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def from_text(cls, text):
        header, _, body = text.partition("\n\n")
        values = dict(line.split(" = ", 1) for line in header.splitlines() if " = " in line)
        per_image = []
        for line in body.splitlines():
            if line.strip():
                sid, gt, pred = line.split("\t")
                per_image.append((sid, float(gt), float(pred)))
        return cls(
            float(values["mae"]),
            float(values["mse"]),
            float(values["psnr"]),
            float(values["ssim"]),
            int(values["n_images"]),
            per_image,
            values.get("normalization", "gt_max"),
        )


def evaluate(model, test_scenes, sigma, input_size=None):
    """Count errors over all scenes, map quality over scenes with a non-empty GT."""
    if not test_scenes:
        raise DataError("no test scenes to evaluate")
    per_image, psnrs, ssims = [], [], []
    for scene in test_scenes:
        if input_size is not None:
            scene = resize_scene(scene, input_size)
        result = predict_density(model, scene.image)
        per_image.append((scene.scene_id, float(scene.count), result.count))
        if scene.count:
            gt = generate_density_map(scene.head_points, scene.shape, sigma)
            psnrs.append(psnr(result.density, gt))
            ssims.append(ssim(result.density, gt))
    gts = [g for _, g, _ in per_image]
    preds = [p for _, _, p in per_image]
    return MetricsReport(
        mae=mae(gts, preds),
        mse=mse_count(gts, preds),
        psnr=float(np.mean(psnrs)) if psnrs else float("nan"),
        ssim=float(np.mean(ssims)) if ssims else float("nan"),
        n_images=len(per_image),
        per_image=per_image,
    )


def minmax_to_uint8(a):
    a = np.asarray(a, dtype=np.float64)
    lo, hi = a.min(), a.max()
    unit = np.full_like(a, 0.5) if hi == lo else (a - lo) / (hi - lo)
    return np.rint(unit * 255).astype(np.uint8)


def colorize_density(density):
    density = np.asarray(density, dtype=np.float64)
    peak = density.max()
    unit = density / peak if peak > 0 else np.zeros_like(density)
    rgba = colormaps[COLORMAP](unit)
    return np.rint(rgba[..., :3] * 255).astype(np.uint8)


def export_attention_maps(model, image, out_dir, channel_indices=(0, 1), scene_id="scene"):
    """Write post-attention feature channels and the predicted density as PNGs.

    Feature channels are min-max scaled to grayscale and enlarged back to input
    resolution by pixel repetition. Returns the written paths.
    """
    if model.sam is None and model.cam is None:
        raise ConfigError(f"{model.variant} has no attention state to visualise")
    for k in channel_indices:
        if not 0 <= k < model.channels:
            raise ConfigError(f"channel index {k} out of range for {model.channels} attention channels")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    result = predict_density(model, image, keep_attention=True)
    written = []
    for k in channel_indices:
        for branch in ("sam", "cam"):
            if branch not in result.attention_snapshots:
                continue
            fmap = result.attention_snapshots[branch][k]
            big = np.repeat(np.repeat(minmax_to_uint8(fmap), DOWNSAMPLE, 0), DOWNSAMPLE, 1)
            path = out_dir / f"{scene_id}_{branch}_ch{k}.png"
            Image.fromarray(big, mode="L").save(path)
            written.append(path)
    path = out_dir / f"{scene_id}_density.png"
    Image.fromarray(colorize_density(result.density), mode="RGB").save(path)
    written.append(path)
    return written
