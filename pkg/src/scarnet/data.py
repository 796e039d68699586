"""Annotated scenes, ground-truth density maps and the on-disk formats for both.

Coordinates follow the image convention: a head point ``(x, y)`` has ``x``
along the width axis and ``y`` along the height axis, and pixel ``(r, c)`` is
centred on ``(x=c, y=r)``.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import AnnotationError, DataError

DENSITY_MAGIC = b"SCARDMP1"
SPLITS = ("train", "test")


@dataclass
class AnnotatedScene:
    image: np.ndarray
    head_points: np.ndarray
    scene_id: str = ""

    def __post_init__(self):
        self.image = np.asarray(self.image)
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise DataError(f"scene {self.scene_id!r}: image must be HxWx3, got {self.image.shape}")
        pts = np.asarray(self.head_points, dtype=np.float64)
        if pts.size == 0:
            pts = np.zeros((0, 2))
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise DataError(f"scene {self.scene_id!r}: head points must be Nx2")
        self.head_points = pts
        check_points(pts, self.shape, self.scene_id)

    @property
    def shape(self):
        return self.image.shape[:2]

    @property
    def count(self):
        return len(self.head_points)


@dataclass
class DatasetSplit:
    train: list = field(default_factory=list)
    test: list = field(default_factory=list)

    def __post_init__(self):
        overlap = {s.scene_id for s in self.train} & {s.scene_id for s in self.test}
        if overlap:
            raise DataError(f"scenes in both train and test: {sorted(overlap)}")


def check_points(points, shape, scene_id=""):
    """Raise AnnotationError for the first point outside ``[0, W) x [0, H)``."""
    h, w = shape
    for i, (x, y) in enumerate(np.asarray(points, dtype=np.float64).reshape(-1, 2)):
        if not (0 <= x < w and 0 <= y < h):
            raise AnnotationError(
                f"scene {scene_id!r}: point {i} ({x}, {y}) outside image of size {w}x{h}",
                point_index=i,
            )


def generate_density_map(points, shape, sigma=4.0, truncate=4.0):
    """Place one unit-mass Gaussian per head point.

    Each kernel is cut off at ``truncate * sigma`` and at the image border and
    then renormalised, so the map sums to ``len(points)``.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    h, w = (int(v) for v in shape)
    if h <= 0 or w <= 0:
        raise ValueError(f"shape must be positive, got {shape}")
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    check_points(points, (h, w))

    density = np.zeros((h, w), dtype=np.float64)
    radius = truncate * sigma
    for x, y in points:
        c0, c1 = max(0, math.ceil(x - radius)), min(w - 1, math.floor(x + radius))
        r0, r1 = max(0, math.ceil(y - radius)), min(h - 1, math.floor(y + radius))
        gx = np.exp(-((np.arange(c0, c1 + 1) - x) ** 2) / (2 * sigma**2))
        gy = np.exp(-((np.arange(r0, r1 + 1) - y) ** 2) / (2 * sigma**2))
        density[r0 : r1 + 1, c0 : c1 + 1] += np.outer(gy / gy.sum(), gx / gx.sum())
    return density


def resize_scene(scene, target):
    th, tw = (int(v) for v in target)
    if th <= 0 or tw <= 0:
        raise ValueError(f"target size must be positive, got {target}")
    h, w = scene.shape
    if (th, tw) == (h, w):
        return AnnotatedScene(scene.image.copy(), scene.head_points.copy(), scene.scene_id)
    image = np.asarray(Image.fromarray(scene.image).resize((tw, th), Image.BILINEAR))
    points = scene.head_points * np.array([tw / w, th / h])
    # guard against x * tw / w rounding up onto the border
    points = np.minimum(points, np.nextafter([tw, th], 0.0))
    return AnnotatedScene(image, points, scene.scene_id)


def _background(rng, h, w):
    coarse = rng.normal(0.0, 1.0, size=(max(2, h // 16), max(2, w // 16), 3))
    smooth = np.asarray(
        Image.fromarray(((coarse - coarse.min()) / np.ptp(coarse) * 255).astype(np.uint8)).resize(
            (w, h), Image.BILINEAR
        ),
        dtype=np.float64,
    )
    return 140.0 + 0.35 * smooth + rng.normal(0.0, 6.0, size=(h, w, 3))


def synth_scene(n_heads, shape, seed, density_gradient=False, scene_id=None):
    """Render a toy crowd: a dark disk per head on a textured background.

    With ``density_gradient`` the head density grows linearly down the image
    (pdf proportional to ``y``).
    """
    h, w = (int(v) for v in shape)
    if n_heads < 0:
        raise ValueError("n_heads must be non-negative")
    if n_heads > h * w // 4:
        raise ValueError(f"cannot place {n_heads} heads in a {h}x{w} image")
    rng = np.random.default_rng(seed)
    xs = rng.uniform(0.0, w, size=n_heads)
    u = rng.uniform(0.0, 1.0, size=n_heads)
    ys = h * np.sqrt(u) if density_gradient else h * u
    points = np.clip(np.stack([xs, ys], axis=1), 0.0, np.nextafter([w, h], 0.0))

    image = _background(rng, h, w)
    radius = max(1.5, 0.022 * min(h, w))
    rr, cc = np.mgrid[0:h, 0:w]
    for x, y in points:
        r0, r1 = max(0, int(y - radius - 1)), min(h, int(y + radius + 2))
        c0, c1 = max(0, int(x - radius - 1)), min(w, int(x + radius + 2))
        d2 = (rr[r0:r1, c0:c1] - y) ** 2 + (cc[r0:r1, c0:c1] - x) ** 2
        mask = d2 <= radius**2
        shade = 35.0 + 25.0 * np.sqrt(d2) / radius
        image[r0:r1, c0:c1][mask] = shade[mask][:, None] * np.array([1.0, 0.9, 0.8])
    image = np.clip(np.rint(image), 0, 255).astype(np.uint8)
    return AnnotatedScene(image, points, scene_id if scene_id is not None else f"synth_{seed}")


# ---------------------------------------------------------------- file formats


def format_points(points):
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(points) == 0:
        return "-"
    return ";".join(f"{float(x)!r},{float(y)!r}" for x, y in points)


def parse_points(text, line_no=None):
    text = text.strip()
    if text == "-":
        return np.zeros((0, 2))
    pts = []
    for i, item in enumerate(text.split(";")):
        try:
            x, y = item.split(",")
            pts.append((float(x), float(y)))
        except ValueError:
            where = f"line {line_no}: " if line_no is not None else ""
            raise AnnotationError(f"{where}malformed point {i}: {item!r}", point_index=i) from None
    return np.array(pts, dtype=np.float64)


def format_manifest_line(split, image_path, points):
    if split not in SPLITS:
        raise ValueError(f"split must be one of {SPLITS}")
    return f"{split}\t{image_path}\t{format_points(points)}\n"


def scene_id_for(image_path):
    return str(Path(image_path).with_suffix("").as_posix())


def read_image(path):
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def write_image(path, image):
    Image.fromarray(np.asarray(image, dtype=np.uint8)).save(path, format="PNG")


def load_annotations(root_path, manifest):
    """Load every scene named in a manifest, eagerly reading its image."""
    root = Path(root_path)
    scenes = {"train": [], "test": []}
    lines = Path(manifest).read_text(encoding="utf-8").splitlines()
    for line_no, line in enumerate(lines, 1):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != 3 or fields[0] not in SPLITS:
            raise DataError(f"{manifest}:{line_no}: expected '<train|test>\\t<image>\\t<points>'")
        which, rel, pts_text = fields
        scene_id = scene_id_for(rel)
        path = root / rel
        if not path.is_file():
            raise DataError(f"scene {scene_id!r}: image file not found: {path}")
        try:
            image = read_image(path)
        except OSError as exc:
            raise DataError(f"scene {scene_id!r}: cannot read image {path}: {exc}") from exc
        scene = AnnotatedScene(image, parse_points(pts_text, line_no), scene_id)
        scenes[which].append(scene)
    return DatasetSplit(scenes["train"], scenes["test"])


def save_density(path, density):
    density = np.asarray(density)
    if density.ndim != 2:
        raise ValueError("density map must be 2-D")
    h, w = density.shape
    with open(path, "wb") as f:
        f.write(DENSITY_MAGIC)
        f.write(struct.pack("<II", h, w))
        f.write(np.ascontiguousarray(density, dtype="<f4").tobytes())


def load_density(path):
    raw = Path(path).read_bytes()
    if raw[:8] != DENSITY_MAGIC:
        raise DataError(f"{path}: not a density map file (expected magic {DENSITY_MAGIC.decode()})")
    if len(raw) < 16:
        raise DataError(f"{path}: truncated header")
    h, w = struct.unpack("<II", raw[8:16])
    body = raw[16:]
    if len(body) != 4 * h * w:
        raise DataError(f"{path}: expected {h * w} floats, found {len(body) // 4}")
    return np.frombuffer(body, dtype="<f4").reshape(h, w).astype(np.float32)
