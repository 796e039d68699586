"""Command-line entry point: ``scarnet <verb> [--config FILE] [--key value ...]``.

Settings are resolved as built-in defaults, then the config file, then flags.
Exit status: 0 ok, 1 usage/config error, 2 data or checkpoint error, 3
numerical failure.
"""

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import data as D
from .errors import ConfigError, ScarError
from .training import TrainConfig, coerce, parse_size, read_config_file


def _size_or_none(text):
    return parse_size(text) if str(text).strip() else None


def _pair(text):
    lo, hi = (int(v) for v in str(text).replace("x", ",").split(","))
    if lo < 0 or hi < lo:
        raise ValueError(text)
    return lo, hi


def _int_list(text):
    return [int(v) for v in str(text).split(",") if v.strip()]


TRAIN_HELP = {
    "lr_initial": "initial Adam learning rate",
    "lr_decay": "multiplicative learning-rate decay per epoch",
    "batch_size": "images per optimisation step",
    "epochs": "passes over the training split",
    "input_size": "training resolution HxW",
    "sigma": "ground-truth Gaussian standard deviation (pixels, at input_size)",
    "seed": "seed for initialisation and batch order",
    "variant": "FCN | FCN+SAM | FCN+CAM | SCAR",
    "fusion": "concat | sum (SCAR only)",
    "loss_reduction": "mean | sum over pixels",
    "gt_scale": "constant multiplier on ground-truth maps",
    "width_divisor": "divide every backbone channel count by this",
    "conv3_channels": "conv3 width before width_divisor (256, or 128 as printed in the layer table)",
    "sam_reduction": "channel reduction of the spatial query/key projections",
    "init": "normal (std 0.01) | kaiming",
    "pretrained": "weight directory for the VGG layers",
    "dtype": "float32 | float64",
    "checkpoint_every": "write a checkpoint every N epochs (0 disables)",
    "out_dir": "directory for checkpoints, logs and reports",
    "manifest": "scene manifest file",
    "root": "directory image paths are relative to (default: manifest's directory)",
}


def _train_schema():
    defaults = TrainConfig()
    return {k: (None, getattr(defaults, k), TRAIN_HELP.get(k, "")) for k in TrainConfig.keys()}


SCHEMAS = {
    "synth": {
        "n_scenes": (int, 20, "number of scenes"),
        "n_heads_range": (_pair, (5, 60), "inclusive head-count range LO,HI"),
        "shape": (parse_size, (96, 128), "image size HxW"),
        "seed": (int, 0, "random seed"),
        "density_gradient": ("bool", True, "make head density grow down the image"),
        "out_dir": (str, "synth", "output directory"),
    },
    "train": _train_schema(),
    "ablate": _train_schema(),
    "eval": {
        "checkpoint": (str, "", "checkpoint directory"),
        "manifest": (str, "", "scene manifest file"),
        "root": (str, "", "image root (default: manifest's directory)"),
        "split": (str, "test", "train | test | all"),
        "sigma": (float, 4.0, "ground-truth Gaussian standard deviation"),
        "input_size": (_size_or_none, None, "resize scenes to HxW before prediction"),
        "out": (str, "", "report path (default: stdout)"),
    },
    "visualize": {
        "checkpoint": (str, "", "checkpoint directory"),
        "image": (str, "", "input image"),
        "channels": (_int_list, [0, 1], "comma-separated feature channels"),
        "input_size": (_size_or_none, None, "resize the image to HxW first"),
        "out_dir": (str, "attention", "output directory"),
    },
    "gt": {
        "manifest": (str, "", "scene manifest file"),
        "root": (str, "", "image root (default: manifest's directory)"),
        "sigma": (float, 4.0, "Gaussian standard deviation"),
        "input_size": (_size_or_none, None, "resize scenes to HxW first"),
        "out_dir": (str, "density", "output directory"),
    },
}

DESCRIPTIONS = {
    "synth": "render a synthetic crowd dataset and its manifest",
    "train": "train one model variant",
    "eval": "evaluate a checkpoint on a manifest",
    "ablate": "train and evaluate FCN, FCN+SAM, FCN+CAM and SCAR",
    "visualize": "export attention feature maps and the predicted density",
    "gt": "write ground-truth density maps for every scene",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser():
    parser = _Parser(prog="scarnet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True, parser_class=_Parser)
    for verb, schema in SCHEMAS.items():
        p = sub.add_parser(verb, help=DESCRIPTIONS[verb], description=DESCRIPTIONS[verb])
        p.add_argument("--config", help="key = value config file")
        for key, (_, default, text) in schema.items():
            shown = f"{default[0]}x{default[1]}" if key in ("input_size", "shape") and default else default
            p.add_argument(f"--{key}", dest=key, default=None, metavar="VALUE", help=f"{text} (default: {shown})")
    return parser


def resolve(verb, args):
    """Merge defaults, config file and flags for one verb into plain values."""
    schema = SCHEMAS[verb]
    raw = read_config_file(args.config) if args.config else {}
    for key in raw:
        if key not in schema:
            raise ConfigError(f"unknown config key {key!r} for '{verb}'")
    for key in schema:
        flag = getattr(args, key)
        if flag is not None:
            raw[key] = flag
    if verb in ("train", "ablate"):
        return TrainConfig.from_mapping(raw)
    values = {}
    for key, (kind, default, _) in schema.items():
        if key not in raw:
            values[key] = default
            continue
        try:
            values[key] = coerce("bool", raw[key], key) if kind == "bool" else kind(raw[key])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad value for {key!r}: {raw[key]!r}") from exc
    return values


def _require(values, *keys):
    for key in keys:
        if not values[key]:
            raise ConfigError(f"'{key}' is required")


def _load_split(manifest, root):
    return D.load_annotations(root or Path(manifest).parent, manifest)


# ----------------------------------------------------------------- commands


def cmd_synth(n_scenes, n_heads_range, shape, seed, out_dir, density_gradient=True):
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    n_train = round(0.8 * n_scenes)
    lines = []
    for i in range(n_scenes):
        n_heads = int(rng.integers(n_heads_range[0], n_heads_range[1] + 1))
        rel = f"images/scene_{i:04d}.png"
        scene = D.synth_scene(n_heads, shape, int(rng.integers(2**31)), density_gradient, D.scene_id_for(rel))
        D.write_image(out / rel, scene.image)
        lines.append(D.format_manifest_line("train" if i < n_train else "test", rel, scene.head_points))
    manifest = out / "manifest.txt"
    manifest.write_text("".join(lines), encoding="utf-8")
    return manifest


def cmd_train(config):
    from .training import train

    _require({"manifest": config.manifest}, "manifest")
    split = _load_split(config.manifest, config.root)
    out_dir = Path(config.out_dir or "run")
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.txt").write_text(config.to_text(), encoding="utf-8")
    _, trainlog = train(config.replace(out_dir=str(out_dir)), split)
    return trainlog


def cmd_eval(checkpoint, manifest, root="", split="test", sigma=4.0, input_size=None, out=""):
    from .evaluation import evaluate
    from .model import load_checkpoint

    model = load_checkpoint(checkpoint)
    data = _load_split(manifest, root)
    scenes = {"train": data.train, "test": data.test, "all": data.train + data.test}.get(split)
    if scenes is None:
        raise ConfigError("split must be train, test or all")
    report = evaluate(model, scenes, sigma, input_size=input_size)
    if out:
        report.write(out)
    return report


def cmd_ablate(config):
    from .training import format_ablation_table, run_ablation

    _require({"manifest": config.manifest}, "manifest")
    split = _load_split(config.manifest, config.root)
    out_dir = Path(config.out_dir or "ablation")
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.txt").write_text(config.to_text(), encoding="utf-8")
    rows = run_ablation(config, split, out_dir=out_dir)
    for row in rows:
        row.report.write(out_dir / f"{row.method.replace('+', '_')}_report.txt")
    return format_ablation_table(rows), rows


def cmd_visualize(checkpoint, image, channels, out_dir, input_size=None):
    from .evaluation import export_attention_maps
    from .model import load_checkpoint

    model = load_checkpoint(checkpoint)
    pixels = D.read_image(image)
    if input_size is not None:
        pixels = D.resize_scene(D.AnnotatedScene(pixels, []), input_size).image
    return export_attention_maps(model, pixels, out_dir, channels, scene_id=Path(image).stem)


def cmd_gt(manifest, sigma, out_dir, root="", input_size=None):
    split = _load_split(manifest, root)
    written = []
    for scene in split.train + split.test:
        if input_size is not None:
            scene = D.resize_scene(scene, input_size)
        path = Path(out_dir) / f"{scene.scene_id}.bin"
        path.parent.mkdir(parents=True, exist_ok=True)
        D.save_density(path, D.generate_density_map(scene.head_points, scene.shape, sigma))
        written.append(path)
    return written


def run(verb, values):
    if verb == "synth":
        manifest = cmd_synth(**values)
        print(f"wrote {manifest}")
    elif verb == "train":
        trainlog = cmd_train(values)
        print(f"final loss {trainlog.final_loss:.6g}; checkpoint {trainlog.checkpoint}")
    elif verb == "eval":
        _require(values, "checkpoint", "manifest")
        report = cmd_eval(**values)
        if not values["out"]:
            sys.stdout.write(report.to_text())
        else:
            print(f"MAE {report.mae:.3f}  MSE {report.mse:.3f}  PSNR {report.psnr:.2f}  SSIM {report.ssim:.3f}")
    elif verb == "ablate":
        table, _ = cmd_ablate(values)
        sys.stdout.write(table)
    elif verb == "visualize":
        _require(values, "checkpoint", "image")
        for path in cmd_visualize(**values):
            print(path)
    elif verb == "gt":
        _require(values, "manifest")
        print(f"wrote {len(cmd_gt(**values))} density maps to {values['out_dir']}")


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        values = resolve(args.verb, args)
        run(args.verb, values)
    except ScarError as exc:
        print(f"scarnet {args.verb}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"scarnet {args.verb}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
