"""MSE training loop, learning-rate schedule, config files and the ablation driver."""

import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import generate_density_map, resize_scene
from .errors import ConfigError, DataError, NumericalError, ShapeError
from .model import VARIANTS, build_model, prepare_input, save_checkpoint

log = logging.getLogger(__name__)

DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass
class TrainConfig:
    lr_initial: float = 1e-5
    lr_decay: float = 0.995
    batch_size: int = 4
    epochs: int = 400
    input_size: tuple = (576, 768)
    sigma: float = 4.0
    seed: int = 0
    variant: str = "SCAR"
    fusion: str = "concat"
    loss_reduction: str = "mean"
    gt_scale: float = 1.0
    width_divisor: int = 1
    conv3_channels: int = 256
    sam_reduction: int = 1
    init: str = "normal"
    pretrained: str = ""
    dtype: str = "float32"
    checkpoint_every: int = 50
    out_dir: str = ""
    manifest: str = ""
    root: str = ""

    def __post_init__(self):
        if not self.lr_initial > 0:
            raise ConfigError("lr_initial must be > 0")
        if not 0 < self.lr_decay <= 1:
            raise ConfigError("lr_decay must be in (0, 1]")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}")
        if self.loss_reduction not in ("mean", "sum"):
            raise ConfigError("loss_reduction must be 'mean' or 'sum'")
        if self.dtype not in DTYPES:
            raise ConfigError(f"dtype must be one of {tuple(DTYPES)}")
        self.input_size = tuple(int(v) for v in self.input_size)

    @classmethod
    def keys(cls):
        return [f.name for f in dataclasses.fields(cls)]

    @classmethod
    def from_mapping(cls, values):
        known = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            kwargs[key] = coerce(known[key].type, raw, key)
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path, overrides=None):
        values = read_config_file(path) if path else {}
        values.update(overrides or {})
        return cls.from_mapping(values)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_text(self):
        out = []
        for key, value in dataclasses.asdict(self).items():
            if key == "input_size":
                value = f"{value[0]}x{value[1]}"
            out.append(f"{key} = {value}\n")
        return "".join(out)


def parse_size(text):
    parts = str(text).lower().replace(",", "x").split("x")
    if len(parts) != 2:
        raise ValueError(f"expected HxW, got {text!r}")
    return tuple(int(p) for p in parts)


def coerce(kind, raw, key=""):
    if not isinstance(raw, str):
        return raw
    try:
        if kind in (int, "int"):
            return int(raw)
        if kind in (float, "float"):
            return float(raw)
        if kind in (bool, "bool"):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind in (tuple, "tuple"):
            return parse_size(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key!r}: {raw!r}") from exc
    return raw


def parse_config_text(text, source="<config>"):
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key] = value
    return values


def read_config_file(path):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text, str(path))


def lr_at(config, epoch):
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return config.lr_initial * config.lr_decay**epoch


def mse_loss(pred, gt, reduction="mean"):
    """Per-image pixel mean (or sum) of squared error, averaged over the batch."""
    pred = torch.as_tensor(pred)
    gt = torch.as_tensor(gt, dtype=pred.dtype)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {tuple(pred.shape)} and ground truth {tuple(gt.shape)} differ")
    sq = (pred - gt) ** 2
    if sq.dim() <= 2:
        sq = sq.unsqueeze(0)
    per_item = sq.flatten(1)
    per_item = per_item.mean(1) if reduction == "mean" else per_item.sum(1)
    return per_item.mean()


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    loss: float
    wall_time: float


@dataclass
class TrainLog:
    records: list = field(default_factory=list)
    checkpoint: str = ""

    @property
    def final_loss(self):
        return self.records[-1].loss if self.records else float("nan")

    def to_jsonl(self):
        return "".join(json.dumps(dataclasses.asdict(r)) + "\n" for r in self.records)

    def write(self, path):
        Path(path).write_text(self.to_jsonl(), encoding="utf-8")

    @classmethod
    def read(cls, path):
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([EpochRecord(**json.loads(line)) for line in lines if line.strip()])


def prepare_scene(scene, size, sigma, gt_scale=1.0):
    """Resize to the training size and build its ground truth from scaled points."""
    scaled = resize_scene(scene, size)
    return scaled, generate_density_map(scaled.head_points, size, sigma) * gt_scale


def batch_order(seed, epoch, n):
    return np.random.default_rng([seed, epoch]).permutation(n)


def train(config, split, out_dir=None, on_epoch=None):
    """Fit ``config.variant`` on ``split.train``; returns (model, TrainLog)."""
    if not split.train:
        raise DataError("training split is empty")
    dtype = DTYPES[config.dtype]
    out_dir = Path(out_dir or config.out_dir) if (out_dir or config.out_dir) else None

    torch.manual_seed(config.seed)
    model = build_model(
        config.variant,
        config.fusion if config.variant == "SCAR" else None,
        pretrained=config.pretrained or None,
        width_divisor=config.width_divisor,
        conv3_channels=config.conv3_channels,
        sam_reduction=config.sam_reduction,
        init=config.init,
        density_scale=config.gt_scale,
    ).to(dtype)
    trainlog = TrainLog()
    if config.epochs == 0:
        if out_dir:
            trainlog.checkpoint = str(save_checkpoint(model, out_dir / "final"))
        return model, trainlog

    ids, xs, gts = [], [], []
    for scene in split.train:
        scaled, gt = prepare_scene(scene, config.input_size, config.sigma, config.gt_scale)
        ids.append(scene.scene_id)
        xs.append(prepare_input(model, scaled.image))
        gts.append(torch.as_tensor(gt, dtype=dtype)[None])
    xs, gts = torch.stack(xs), torch.stack(gts)

    optimizer = torch.optim.Adam(model.parameters(), lr=lr_at(config, 0))
    best = math.inf
    model.train()
    n = len(ids)
    for epoch in range(config.epochs):
        lr = lr_at(config, epoch)
        for group in optimizer.param_groups:
            group["lr"] = lr
        start = time.perf_counter()
        total = 0.0
        order = batch_order(config.seed, epoch, n)
        for b, i in enumerate(range(0, n, config.batch_size)):
            idx = torch.as_tensor(order[i : i + config.batch_size])
            optimizer.zero_grad()
            loss = mse_loss(model(xs[idx]), gts[idx], config.loss_reduction)
            if not torch.isfinite(loss):
                names = [ids[j] for j in idx.tolist()]
                raise NumericalError(f"non-finite loss at epoch {epoch}, batch {b} (scenes {names})")
            loss.backward()
            optimizer.step()
            total += loss.item() * len(idx)
        rec = EpochRecord(epoch, lr, total / n, time.perf_counter() - start)
        trainlog.records.append(rec)
        log.info("epoch %d lr %.3g loss %.6g", epoch, lr, rec.loss)
        if on_epoch is not None:
            on_epoch(rec)
        if out_dir:
            if rec.loss < best:
                best = rec.loss
                save_checkpoint(model, out_dir / "best")
            if config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
                save_checkpoint(model, out_dir / f"epoch_{epoch + 1:04d}")
    if out_dir:
        trainlog.checkpoint = str(save_checkpoint(model, out_dir / "final"))
        trainlog.write(out_dir / "train_log.jsonl")
    return model, trainlog


@dataclass
class AblationRow:
    method: str
    report: object
    log: TrainLog


ABLATION_COLUMNS = ("Method", "MAE", "MSE", "PSNR", "SSIM")


def format_ablation_table(rows):
    lines = ["\t".join(ABLATION_COLUMNS)]
    for row in rows:
        r = row.report
        lines.append(f"{row.method}\t{r.mae:.2f}\t{r.mse:.2f}\t{r.psnr:.2f}\t{r.ssim:.3f}")
    return "\n".join(lines) + "\n"


def run_ablation(base_config, split, out_dir=None):
    """Train and evaluate FCN, FCN+SAM, FCN+CAM and SCAR under one config and seed."""
    from .evaluation import evaluate

    test = split.test or split.train
    rows = []
    for variant in VARIANTS:
        sub = Path(out_dir) / variant.replace("+", "_") if out_dir else None
        cfg = base_config.replace(variant=variant, out_dir=str(sub) if sub else "")
        model, trainlog = train(cfg, split)
        report = evaluate(model, test, cfg.sigma, input_size=cfg.input_size)
        rows.append(AblationRow(variant, report, trainlog))
    if out_dir:
        Path(out_dir, "ablation.tsv").write_text(format_ablation_table(rows), encoding="utf-8")
    return rows
