"""Command-line interface.

Subcommands cover the full workflow: synthesize a dataset (``synth``),
train (``train``), evaluate a checkpoint (``eval``), run the component
ablation table (``ablate``), sweep blend strengths (``alpha-study``) and
summarize a run directory (``report``).

Exit codes: 0 success, 1 operational failure (bad data, missing files,
diverged training), 2 usage errors.

Run settings can come from a JSON config file with sections ``model``,
``weights``, ``train`` and ``ssim``; unknown sections or keys are rejected
so typos never silently fall back to defaults. The fully resolved config is
echoed into the output directory of every run.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, asdict, field, replace
from pathlib import Path

from . import trainer
from .data import DataError, DatasetManifest, load_image, load_semantic_map, split_dataset
from .datagen import AlphaSampler, SourceImage, alpha_sweep, parse_alpha_list, synthesize_dataset
from .losses import LossWeights
from .metrics import SsimParams, format_value, read_metric_rows
from .model import CheckpointError, ModelConfig, load_checkpoint
from .trainer import NonFiniteLossError, TrainConfig

CONFIG_SCHEMA_VERSION = 1


class ConfigFileError(ValueError):
    """Malformed run configuration file."""


@dataclass
class RunConfig:
    """Resolved settings for a training or evaluation run."""

    model: ModelConfig = field(default_factory=ModelConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    train: TrainConfig = field(default_factory=TrainConfig)
    ssim: SsimParams = field(default_factory=SsimParams)

    def to_dict(self) -> dict:
        return {
            "schema_version": CONFIG_SCHEMA_VERSION,
            "model": self.model.to_dict(),
            "weights": asdict(self.weights),
            "train": self.train.to_dict(),
            "ssim": asdict(self.ssim),
        }


_SECTIONS = {
    "model": lambda doc: ModelConfig.from_dict(doc),
    "weights": lambda doc: _from_dataclass_dict(LossWeights, doc, "weights"),
    "train": lambda doc: TrainConfig.from_dict(doc),
    "ssim": lambda doc: _from_dataclass_dict(SsimParams, doc, "ssim"),
}


def _from_dataclass_dict(cls, doc: dict, section: str):
    known = set(cls.__dataclass_fields__)
    extra = set(doc) - known
    if extra:
        raise ConfigFileError(f"unknown keys in section {section!r}: {sorted(extra)}")
    return cls(**doc)


def load_run_config(path) -> RunConfig:
    """Parse a JSON run config; missing sections keep their defaults."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigFileError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise ConfigFileError(f"{path}: expected a JSON object at the top level")
    version = doc.pop("schema_version", CONFIG_SCHEMA_VERSION)
    if version != CONFIG_SCHEMA_VERSION:
        raise ConfigFileError(f"{path}: unsupported schema_version {version}")
    unknown = set(doc) - set(_SECTIONS)
    if unknown:
        raise ConfigFileError(f"{path}: unknown config sections {sorted(unknown)}")
    config = RunConfig()
    for name, build in _SECTIONS.items():
        if name in doc:
            if not isinstance(doc[name], dict):
                raise ConfigFileError(f"{path}: section {name!r} must be an object")
            try:
                setattr(config, name, build(doc[name]))
            except (TypeError, ValueError) as exc:
                raise ConfigFileError(f"{path}: section {name!r}: {exc}") from exc
    return config


def _echo_config(config: RunConfig, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    text = json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n"
    (out_dir / "run_config.json").write_text(text)


def _apply_overrides(config: RunConfig, args) -> RunConfig:
    model, train = config.model, config.train
    if args.seed is not None:
        model = replace(model, seed=args.seed)
        train = replace(train, seed=args.seed)
    if getattr(args, "variant", None):
        model = replace(model, variant=args.variant)
    if getattr(args, "steps", None) is not None:
        train = replace(train, steps=args.steps)
    if getattr(args, "batch_size", None) is not None:
        train = replace(train, batch_size=args.batch_size)
    if getattr(args, "crop_size", None) is not None:
        train = replace(train, crop_size=args.crop_size)
    if getattr(args, "lr", None) is not None:
        train = replace(train, base_lr=args.lr)
    return replace(config, model=model, train=train)


def _load_config(args) -> RunConfig:
    config = load_run_config(args.config) if args.config else RunConfig()
    return _apply_overrides(config, args)


# ---------------------------------------------------------------------------
# sources for synthesis
# ---------------------------------------------------------------------------

def _load_source_dir(path, with_labels: bool) -> list[SourceImage]:
    path = Path(path)
    img_dir = path / "images" if (path / "images").is_dir() else path
    files = sorted(img_dir.glob("*.png"))
    if not files:
        raise DataError(f"no PNG images found under {path}")
    sources = []
    for f in files:
        label = None
        if with_labels:
            label_path = path / "labels" / f.name
            if not label_path.exists():
                raise DataError(f"background {f.name} has no label map (expected {label_path})")
            label = load_semantic_map(label_path)
        sources.append(SourceImage(source_id=f.stem, image=load_image(f), label=label))
    return sources


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    backgrounds = _load_source_dir(args.backgrounds, with_labels=True)
    reflections = _load_source_dir(args.reflections, with_labels=False)
    out_dir = Path(args.out)
    if args.sweep:
        alphas = parse_alpha_list(args.sweep)
        manifest = alpha_sweep(
            backgrounds, reflections, args.pairs, alphas, args.seed, out_dir,
            crop_size=args.crop_size,
        )
        print(f"wrote {len(manifest)} records ({args.pairs} pairs x {len(alphas)} alphas) to {out_dir}")
    else:
        sampler = AlphaSampler.parse(args.alpha)
        manifest = synthesize_dataset(
            backgrounds, reflections, args.count, sampler, args.seed, out_dir,
            crop_size=args.crop_size,
        )
        if args.train_fraction is not None:
            manifest = split_dataset(manifest, args.train_fraction, args.seed)
            manifest.save(out_dir)
            n_train = len(manifest.split_records("train"))
            print(f"wrote {len(manifest)} records to {out_dir} ({n_train} train)")
        else:
            print(f"wrote {len(manifest)} records to {out_dir}")
    problems = manifest.verify()
    if problems:
        for p in problems:
            print(f"invalid record: {p}", file=sys.stderr)
        return 1
    return 0


def cmd_train(args) -> int:
    config = _load_config(args)
    out_dir = Path(args.out)
    _echo_config(config, out_dir)
    result = trainer.train(
        args.data, config.model, config.weights, config.train, out_dir,
        ssim_params=config.ssim,
    )
    last = result.rows[-1]
    print(f"trained {config.train.steps} steps; final total {format_value(last['total'])}")
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"loss log:   {result.log_path}")
    return 0


def cmd_eval(args) -> int:
    config = _load_config(args)
    bundle = load_checkpoint(args.checkpoint)
    out_dir = Path(args.out) if args.out else None
    if out_dir is not None:
        _echo_config(replace(config, model=bundle.config), out_dir)
    split = None if args.split == "all" else args.split
    result = trainer.evaluate(
        bundle.model, args.data, split=split, out_dir=out_dir,
        inject_gt=args.inject_gt, ssim_params=config.ssim,
    )
    print(f"evaluated {result.aggregates['n']} records (checkpoint step {bundle.step})")
    for key in ("psnr_b", "ssim_b", "psnr_r", "ssim_r", "miou"):
        print(f"  {key:8s} {format_value(result.aggregates[key])}")
    print(f"  input baseline: psnr_b {format_value(result.baseline['psnr_b'])} "
          f"ssim_b {format_value(result.baseline['ssim_b'])}")
    return 0


def cmd_ablate(args) -> int:
    config = _load_config(args)
    out_dir = Path(args.out)
    _echo_config(config, out_dir)
    names = args.names.split(",") if args.names else None
    summary = trainer.run_ablation(
        args.data, config.model, config.weights, config.train, out_dir,
        names=names, ssim_params=config.ssim,
    )
    print(f"{'name':14s} {'psnr_b':>10s} {'ssim_b':>10s} {'miou':>10s}")
    for name, agg in summary.items():
        miou = format_value(agg["miou"])
        print(f"{name:14s} {agg['psnr_b']:10.4f} {agg['ssim_b']:10.6f} {miou:>10s}")
    print(f"summary: {out_dir / 'ablation_summary.tsv'}")
    return 0


def cmd_alpha_study(args) -> int:
    config = _load_config(args)
    bundle = load_checkpoint(args.checkpoint)
    out_dir = Path(args.out)
    _echo_config(replace(config, model=bundle.config), out_dir)
    rows = trainer.alpha_study(
        bundle.model, args.data, out_dir=out_dir, level=args.level,
        ssim_params=config.ssim,
    )
    print(f"{'alpha':>6s} {'n':>4s} {'miou':>10s} {'ssim_b':>10s} {'psnr_b':>10s}")
    for row in rows:
        print(
            f"{row['alpha']:6.3f} {row['n']:4d} {format_value(row['miou']):>10s} "
            f"{row['ssim_b']:10.6f} {row['psnr_b']:10.4f}"
        )
    print(f"study: {out_dir / 'alpha_study.tsv'}")
    return 0


def cmd_report(args) -> int:
    run_dir = Path(args.run)
    if not run_dir.is_dir():
        raise FileNotFoundError(f"run directory not found: {run_dir}")
    found = False

    log_path = run_dir / "loss_log.tsv"
    if log_path.exists():
        found = True
        rows = read_metric_rows(log_path)
        if rows:
            first, last = rows[0], rows[-1]
            print(f"loss log: {len(rows)} steps")
            print(f"  total {format_value(first['total'])} -> {format_value(last['total'])}"
                  f" (lr {format_value(last['lr'])})")

    summary_path = run_dir / "summary.json"
    if not summary_path.exists():
        summary_path = run_dir / "eval" / "summary.json"
    if summary_path.exists():
        found = True
        doc = json.loads(summary_path.read_text())
        agg, base = doc["aggregates"], doc["baseline"]
        print(f"evaluation over {agg['n']} records:")
        for key in ("psnr_b", "ssim_b", "psnr_r", "ssim_r", "miou"):
            extra = ""
            if base.get(key) is not None:
                extra = f"   (input {format_value(base[key])})"
            print(f"  {key:8s} {format_value(agg[key])}{extra}")

    for name in ("ablation_summary.tsv", "alpha_study.tsv"):
        table = run_dir / name
        if table.exists():
            found = True
            rows = read_metric_rows(table)
            if rows:
                fields = list(rows[0])
                print(name.removesuffix(".tsv") + ":")
                print("  " + "  ".join(f"{f:>10s}" for f in fields))
                for row in rows:
                    print("  " + "  ".join(f"{format_value(row[f]):>10s}" for f in fields))

    if not found:
        print(f"no run artifacts found under {run_dir}", file=sys.stderr)
        return 1
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _add_config_args(p: argparse.ArgumentParser, with_train_overrides: bool = True):
    p.add_argument("--config", help="JSON run config file")
    p.add_argument("--seed", type=int, help="override model and train seeds")
    if with_train_overrides:
        p.add_argument("--steps", type=int, help="override training steps")
        p.add_argument("--variant", choices=("basic_guidance", "shared_no_fusion", "full_fusion"))
        p.add_argument("--batch-size", dest="batch_size", type=int)
        p.add_argument("--crop-size", dest="crop_size", type=int)
        p.add_argument("--lr", type=float, help="override base learning rate")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="semrr",
        description="semantic-guided reflection removal: data synthesis, training, evaluation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="blend source images into a quadruple dataset")
    p.add_argument("--backgrounds", required=True, help="directory with images/ and labels/")
    p.add_argument("--reflections", required=True, help="directory of reflection PNGs")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=100, help="number of records")
    p.add_argument("--alpha", default="uniform:0.1:0.9", help="fixed:A or uniform:LO:HI")
    p.add_argument("--sweep", help="sweep:START:STOP:STEP; shared pairs at each alpha")
    p.add_argument("--pairs", type=int, default=10, help="pair count for --sweep")
    p.add_argument("--crop-size", dest="crop_size", type=int, default=256)
    p.add_argument("--train-fraction", dest="train_fraction", type=float, default=0.8)
    p.add_argument("--no-split", dest="train_fraction", action="store_const", const=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model on a dataset manifest")
    p.add_argument("--data", required=True, help="dataset directory or manifest path")
    p.add_argument("--out", required=True)
    _add_config_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="write metrics.tsv and summary.json here")
    p.add_argument("--split", default="val", choices=("train", "val", "all"))
    p.add_argument("--inject-gt", dest="inject_gt", action="store_true",
                   help="use ground-truth maps as guidance")
    _add_config_args(p, with_train_overrides=False)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and evaluate the component ablation table")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--names", help="comma-separated subset of ablation rows")
    _add_config_args(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("alpha-study", help="per-alpha metrics for a sweep dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--level", type=float, default=0.95, help="confidence level")
    _add_config_args(p, with_train_overrides=False)
    p.set_defaults(func=cmd_alpha_study)

    p = sub.add_parser("report", help="print the artifacts of a run directory")
    p.add_argument("--run", required=True)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (DataError, ConfigFileError, CheckpointError, NonFiniteLossError,
            FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
