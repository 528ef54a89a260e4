"""Training and evaluation harness.

Optimization is plain heavy-ball momentum (v = m*v - lr*g; p += v) with a
step-decay learning rate floored at a minimum. Batching, cropping and
parameter initialization are pure functions of the configured seeds, so a
rerun of the same config produces byte-identical logs and checkpoints.

The loss log stores exact float reprs of every component; the logged total
is recombined from those floats, so a reader can verify each row offline.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, asdict, replace
from pathlib import Path

import numpy as np
import torch

from . import losses, metrics
from .data import DatasetManifest, ManifestRecord, Quadruple
from .datagen import random_crop
from .losses import LossWeights
from .metrics import SsimParams
from .model import ModelConfig, ReflectionRemovalModel, build_model, save_checkpoint

LOG_FIELDS = ("step", "lr", "l_b", "l_r", "l_s", "l_reg", "total", "sigma_r", "sigma_s")

SUMMARY_FIELDS = ("psnr_b", "ssim_b", "psnr_r", "ssim_r", "miou")

ABLATION_NAMES = ("full", "no_semantic", "no_fusion", "no_edge_term", "gt_semantic")

# seed stream tags so batch order and crop offsets never collide
_PERM_STREAM = 2
_CROP_STREAM = 3


class NonFiniteLossError(RuntimeError):
    """A loss component stopped being finite during training."""


@dataclass
class TrainConfig:
    steps: int = 1000
    batch_size: int = 2
    #: square crop edge for training samples; 0 trains on full images
    crop_size: int = 64
    base_lr: float = 0.007
    momentum: float = 0.99
    decay_every: int = 30000
    decay_factor: float = 0.1
    min_lr: float = 0.0001
    seed: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.crop_size < 0:
            raise ValueError(f"crop_size must be >= 0, got {self.crop_size}")
        if self.base_lr <= 0:
            raise ValueError(f"base_lr must be positive, got {self.base_lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.decay_every < 1:
            raise ValueError(f"decay_every must be >= 1, got {self.decay_every}")
        if not 0.0 < self.decay_factor <= 1.0:
            raise ValueError(f"decay_factor must be in (0, 1], got {self.decay_factor}")
        if self.min_lr < 0:
            raise ValueError(f"min_lr must be >= 0, got {self.min_lr}")
        if self.checkpoint_every < 0:
            raise ValueError(f"checkpoint_every must be >= 0, got {self.checkpoint_every}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(doc) - known
        if extra:
            raise ValueError(f"unknown train config keys: {sorted(extra)}")
        return cls(**doc)


def learning_rate(step: int, config: TrainConfig) -> float:
    """Step-decayed rate: base * factor^(step // every), floored at min_lr."""
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    lr = config.base_lr * config.decay_factor ** (step // config.decay_every)
    return max(lr, config.min_lr)


class MomentumOptimizer:
    """Classic heavy-ball update: v <- m*v - lr*grad; p <- p + v."""

    def __init__(self, parameters, momentum: float):
        self.parameters = list(parameters)
        self.momentum = momentum
        self.velocity = [torch.zeros_like(p) for p in self.parameters]

    def zero_grad(self):
        for p in self.parameters:
            if p.grad is not None:
                p.grad.detach_()
                p.grad.zero_()

    @torch.no_grad()
    def step(self, lr: float):
        for p, v in zip(self.parameters, self.velocity):
            if p.grad is None:
                v.mul_(self.momentum)
            else:
                v.mul_(self.momentum).add_(p.grad, alpha=-lr)
            p.add_(v)


# ---------------------------------------------------------------------------
# tensor plumbing
# ---------------------------------------------------------------------------

def _scalar(value) -> float:
    if isinstance(value, torch.Tensor):
        return float(value.detach())
    return float(value)


def _image_tensor(image: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1)))


def _crop_quadruple(q: Quadruple, size: int, seed) -> Quadruple:
    # random_crop derives its offset purely from the seed, so calling it per
    # plane with the same seed applies one window to the whole quadruple
    mixed, semantic = random_crop(q.mixed, q.semantic, size, seed)
    background, _ = random_crop(q.background, None, size, seed)
    reflection, _ = random_crop(q.reflection, None, size, seed)
    return replace(q, mixed=mixed, background=background, reflection=reflection, semantic=semantic)


def _batch_tensors(quads) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    try:
        mixed = torch.stack([_image_tensor(q.mixed) for q in quads])
        background = torch.stack([_image_tensor(q.background) for q in quads])
        reflection = torch.stack([_image_tensor(q.reflection) for q in quads])
    except RuntimeError as exc:
        raise ValueError(f"cannot batch quadruples of different sizes: {exc}") from exc
    semantic = torch.stack([torch.from_numpy(q.semantic.astype(np.int64)) for q in quads])
    return mixed, background, reflection, semantic


def _training_records(manifest: DatasetManifest) -> list[ManifestRecord]:
    if all(r.split is None for r in manifest.records):
        return list(manifest.records)
    recs = manifest.split_records("train")
    if not recs:
        raise ValueError("manifest has split tags but no train records")
    return recs


def _as_manifest(manifest) -> DatasetManifest:
    if isinstance(manifest, DatasetManifest):
        return manifest
    return DatasetManifest.load(manifest)


def _atomic_write_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: ReflectionRemovalModel
    checkpoint_path: Path
    log_path: Path
    rows: list
    sigma_r: float
    sigma_s: float


def train(
    manifest,
    model_config: ModelConfig,
    weights: LossWeights,
    config: TrainConfig,
    out_dir,
    ssim_params: SsimParams | None = None,
) -> TrainResult:
    """Optimize a freshly built model on the manifest's train records.

    Writes ``loss_log.tsv`` and ``model.ckpt`` (plus periodic snapshots when
    ``checkpoint_every`` is set) under ``out_dir``.
    """
    torch.set_num_threads(1)
    manifest = _as_manifest(manifest)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ssim_params = ssim_params or SsimParams()

    records = _training_records(manifest)
    quads = [manifest.load_quadruple(r) for r in records]
    if config.crop_size:
        for q in quads:
            if min(q.mixed.shape[:2]) < config.crop_size:
                raise ValueError(
                    f"record {q.record_id} ({q.mixed.shape[0]}x{q.mixed.shape[1]}) "
                    f"is smaller than crop_size {config.crop_size}"
                )

    model = build_model(model_config)
    trainables = model.trainable_parameters()
    # noise scales are learned only for tasks that are switched on; for a
    # zero-weighted task the log-sigma guard would push sigma down forever
    rho_r = rho_s = None
    if weights.sigma_mode == "learnable":
        if weights.w1 > 0 or weights.w2 > 0:
            rho_r = torch.tensor(math.log(weights.sigma_r), dtype=torch.float32, requires_grad=True)
        if weights.w3 > 0:
            rho_s = torch.tensor(math.log(weights.sigma_s), dtype=torch.float32, requires_grad=True)
    scales = [r for r in (rho_r, rho_s) if r is not None]
    optimizer = MomentumOptimizer(trainables + scales, config.momentum)

    n = len(quads)
    order: list[int] = []
    epoch = 0
    rows = []
    for step in range(config.steps):
        batch_idx = []
        while len(batch_idx) < config.batch_size:
            if not order:
                perm = np.random.default_rng([config.seed, _PERM_STREAM, epoch]).permutation(n)
                order = list(perm)
                epoch += 1
            batch_idx.append(order.pop(0))
        batch = []
        for slot, idx in enumerate(batch_idx):
            q = quads[idx]
            if config.crop_size:
                q = _crop_quadruple(q, config.crop_size, [config.seed, _CROP_STREAM, step, slot])
            batch.append(q)
        mixed, background, reflection, semantic = _batch_tensors(batch)

        out = model(mixed)
        l_b = losses.background_loss(out.background, background, weights, ssim_params)
        l_r = losses.reflection_loss(out.reflection, reflection)
        l_s = losses.semantic_loss(out.semantic_logits, semantic)
        l_reg = losses.l2_regularization(model.trainable_parameters())
        for name, value in (("l_b", l_b), ("l_r", l_r), ("l_s", l_s), ("l_reg", l_reg)):
            if not math.isfinite(_scalar(value)):
                raise NonFiniteLossError(f"{name} became non-finite at step {step}")

        s_r = torch.exp(rho_r) if rho_r is not None else None
        s_s = torch.exp(rho_s) if rho_s is not None else None
        breakdown = losses.total_loss(l_b, l_r, l_s, l_reg, weights, sigma_r=s_r, sigma_s=s_s)
        if not math.isfinite(_scalar(breakdown.total)):
            raise NonFiniteLossError(f"total became non-finite at step {step}")

        lr = learning_rate(step, config)
        sigma_r_val = _scalar(s_r) if s_r is not None else weights.sigma_r
        sigma_s_val = _scalar(s_s) if s_s is not None else weights.sigma_s
        # recombine the logged total from the logged component floats so
        # every row is verifiable from the file alone
        logged = losses.total_loss(
            _scalar(l_b), _scalar(l_r), _scalar(l_s), _scalar(l_reg), weights,
            sigma_r=sigma_r_val, sigma_s=sigma_s_val,
        )
        rows.append(
            {
                "step": step,
                "lr": lr,
                "l_b": _scalar(l_b),
                "l_r": _scalar(l_r),
                "l_s": _scalar(l_s),
                "l_reg": _scalar(l_reg),
                "total": logged.total,
                "sigma_r": sigma_r_val,
                "sigma_s": sigma_s_val,
            }
        )

        optimizer.zero_grad()
        breakdown.total.backward()
        optimizer.step(lr)

        if config.checkpoint_every and (step + 1) % config.checkpoint_every == 0:
            save_checkpoint(out_dir / f"model_step{step + 1:06d}.ckpt", model, step=step + 1)

    extra = {}
    if rho_r is not None:
        extra["rho_r"] = rho_r.detach().numpy()
    if rho_s is not None:
        extra["rho_s"] = rho_s.detach().numpy()
    checkpoint_path = save_checkpoint(out_dir / "model.ckpt", model, step=config.steps, extra=extra)

    log_lines = ["\t".join(LOG_FIELDS)]
    for row in rows:
        log_lines.append("\t".join(metrics.format_value(row[f]) for f in LOG_FIELDS))
    log_path = out_dir / "loss_log.tsv"
    _atomic_write_text(log_path, "\n".join(log_lines) + "\n")

    return TrainResult(
        model=model,
        checkpoint_path=checkpoint_path,
        log_path=log_path,
        rows=rows,
        sigma_r=float(torch.exp(rho_r.detach())) if rho_r is not None else weights.sigma_r,
        sigma_s=float(torch.exp(rho_s.detach())) if rho_s is not None else weights.sigma_s,
    )


def read_loss_log(path) -> list[dict]:
    return metrics.read_metric_rows(path)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvalResult:
    rows: list
    aggregates: dict
    baseline: dict


def _forward_full(model: ReflectionRemovalModel, quad: Quadruple, inject_gt: bool):
    """Run one full-resolution image, edge-padding to the model stride."""
    stride = model.config.total_stride
    h, w = quad.mixed.shape[:2]
    ph, pw = (-h) % stride, (-w) % stride
    mixed = quad.mixed
    semantic = quad.semantic
    if ph or pw:
        mixed = np.pad(mixed, ((0, ph), (0, pw), (0, 0)), mode="edge")
        semantic = np.pad(semantic, ((0, ph), (0, pw)), mode="edge")
    x = _image_tensor(mixed).unsqueeze(0)
    with torch.no_grad():
        if inject_gt:
            out = model.inject_semantic(x, torch.from_numpy(semantic.astype(np.int64)))
        else:
            out = model(x)
    b_hat = out.background[0, :, :h, :w].numpy().transpose(1, 2, 0)
    r_hat = out.reflection[0, :, :h, :w].numpy().transpose(1, 2, 0)
    sem_pred = out.semantic_logits[0, :, :h, :w].argmax(dim=0).numpy().astype(np.int64)
    return b_hat, r_hat, sem_pred


def evaluate(
    model: ReflectionRemovalModel,
    manifest,
    split: str | None = "val",
    out_dir=None,
    inject_gt: bool = False,
    ssim_params: SsimParams | None = None,
    records=None,
) -> EvalResult:
    """Per-record metrics plus aggregates over a manifest split.

    The baseline treats the mixed input itself as the background estimate;
    improvements over it are what training buys. With ``inject_gt`` the
    ground-truth map is used as guidance in place of the predicted one.
    """
    manifest = _as_manifest(manifest)
    ssim_params = ssim_params or SsimParams()
    if records is None:
        if split is None or all(r.split is None for r in manifest.records):
            records = list(manifest.records)
        else:
            records = manifest.split_records(split)
    if not records:
        raise ValueError("no records to evaluate")

    model.eval()
    rows = []
    counts = None
    base_psnr, base_ssim = [], []
    for rec in records:
        quad = manifest.load_quadruple(rec)
        b_hat, r_hat, sem_pred = _forward_full(model, quad, inject_gt)
        record_cm = metrics.ConfusionMatrix.from_maps(
            sem_pred, quad.semantic.astype(np.int64), manifest.class_count
        )
        counts = record_cm.counts if counts is None else counts + record_cm.counts
        rows.append(
            {
                "record_id": rec.record_id,
                "psnr_b": metrics.psnr(b_hat, quad.background),
                "ssim_b": metrics.ssim(b_hat, quad.background, ssim_params),
                "psnr_r": metrics.psnr(r_hat, quad.reflection),
                "ssim_r": metrics.ssim(r_hat, quad.reflection, ssim_params),
                "miou": record_cm.miou(),
                "alpha": rec.alpha,
            }
        )
        base_psnr.append(metrics.psnr(quad.mixed, quad.background))
        base_ssim.append(metrics.ssim(quad.mixed, quad.background, ssim_params))

    aggregates = {
        "psnr_b": float(np.mean([r["psnr_b"] for r in rows])),
        "ssim_b": float(np.mean([r["ssim_b"] for r in rows])),
        "psnr_r": float(np.mean([r["psnr_r"] for r in rows])),
        "ssim_r": float(np.mean([r["ssim_r"] for r in rows])),
        "miou": metrics.ConfusionMatrix(counts=counts).miou(),
        "n": len(rows),
    }
    baseline = {
        "psnr_b": float(np.mean(base_psnr)),
        "ssim_b": float(np.mean(base_ssim)),
        "psnr_r": None,
        "ssim_r": None,
        "miou": None,
        "n": len(rows),
    }
    result = EvalResult(rows=rows, aggregates=aggregates, baseline=baseline)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics.write_metric_rows(out_dir / "metrics.tsv", rows)
        summary = {"aggregates": aggregates, "baseline": baseline}
        _atomic_write_text(out_dir / "summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return result


# ---------------------------------------------------------------------------
# ablations
# ---------------------------------------------------------------------------

@dataclass
class AblationSpec:
    """One table row: a model/weight variation and how it is evaluated.

    ``train_as`` names another spec whose trained checkpoint is reused
    (identical training recipe, different evaluation path).
    """

    name: str
    model_config: ModelConfig
    weights: LossWeights
    inject_gt: bool = False
    train_as: str | None = None


def ablation_specs(base_model: ModelConfig, base_weights: LossWeights) -> list[AblationSpec]:
    """The standard component-removal table.

    * full          - fusion wiring with every loss term
    * no_semantic   - no fusion, semantic loss off, branch detached
    * no_fusion     - shared trunk only; semantic stays an auxiliary task
    * no_edge_term  - fusion wiring without the soft-edge background term
    * gt_semantic   - the full model evaluated with oracle guidance
    """
    full_cfg = replace(base_model, variant="full_fusion", detach_semantic=False)
    return [
        AblationSpec("full", full_cfg, base_weights),
        AblationSpec(
            "no_semantic",
            replace(base_model, variant="shared_no_fusion", detach_semantic=True),
            replace(base_weights, w3=0.0),
        ),
        AblationSpec(
            "no_fusion",
            replace(base_model, variant="shared_no_fusion", detach_semantic=False),
            base_weights,
        ),
        AblationSpec("no_edge_term", full_cfg, replace(base_weights, w1_3=0.0)),
        AblationSpec("gt_semantic", full_cfg, base_weights, inject_gt=True, train_as="full"),
    ]


def run_ablation(
    manifest,
    base_model: ModelConfig,
    base_weights: LossWeights,
    train_config: TrainConfig,
    out_dir,
    names=None,
    ssim_params: SsimParams | None = None,
) -> dict:
    """Train and evaluate each ablation row; returns name -> aggregates.

    Every row trains from the same seed so differences come from the wiring
    and weights, not initialization luck.
    """
    manifest = _as_manifest(manifest)
    out_dir = Path(out_dir)
    specs = ablation_specs(base_model, base_weights)
    if names is not None:
        unknown = set(names) - {s.name for s in specs}
        if unknown:
            raise ValueError(f"unknown ablation names: {sorted(unknown)}")
        specs = [s for s in specs if s.name in set(names)]
    for spec in specs:
        if spec.train_as and spec.train_as not in {s.name for s in specs}:
            raise ValueError(f"{spec.name} reuses training from {spec.train_as!r}, which is not selected")

    trained: dict[str, TrainResult] = {}
    summary = {}
    for spec in specs:
        if spec.train_as is None:
            trained[spec.name] = train(
                manifest, spec.model_config, spec.weights, train_config,
                out_dir / spec.name, ssim_params=ssim_params,
            )
    for spec in specs:
        result = trained[spec.train_as or spec.name]
        eval_dir = out_dir / spec.name / "eval"
        ev = evaluate(
            result.model, manifest, out_dir=eval_dir,
            inject_gt=spec.inject_gt, ssim_params=ssim_params,
        )
        summary[spec.name] = ev.aggregates

    fields = ("name",) + SUMMARY_FIELDS + ("n",)
    rows = [{"name": name, **summary[name]} for name in (s.name for s in specs)]
    metrics.write_metric_rows(out_dir / "ablation_summary.tsv", rows, fields=fields)
    return summary


# ---------------------------------------------------------------------------
# alpha study
# ---------------------------------------------------------------------------

ALPHA_STUDY_FIELDS = ("alpha", "n", "miou", "miou_ci", "ssim_b", "ssim_b_ci", "psnr_b")


def alpha_study(
    model: ReflectionRemovalModel,
    manifest,
    out_dir=None,
    level: float = 0.95,
    ssim_params: SsimParams | None = None,
) -> list[dict]:
    """Group records by blend strength and report per-group metric means.

    Each row carries the sample count, mean segmentation quality with a
    normal-approximation confidence half-width, and the background metrics.
    Rows are sorted by ascending alpha.
    """
    manifest = _as_manifest(manifest)
    tagged = [r for r in manifest.records if r.alpha is not None]
    if not tagged:
        raise ValueError("manifest has no alpha-tagged records")
    groups: dict[float, list] = {}
    for rec in tagged:
        groups.setdefault(round(float(rec.alpha), 9), []).append(rec)

    def interval(values):
        try:
            _, half = metrics.confidence_interval(values, level)
            return half
        except ValueError:
            return None

    study_rows = []
    for alpha in sorted(groups):
        ev = evaluate(model, manifest, records=groups[alpha], ssim_params=ssim_params)
        mious = [r["miou"] for r in ev.rows if r["miou"] is not None]
        ssims = [r["ssim_b"] for r in ev.rows]
        study_rows.append(
            {
                "alpha": alpha,
                "n": len(ev.rows),
                "miou": float(np.mean(mious)) if mious else None,
                "miou_ci": interval(mious) if len(mious) >= 2 else None,
                "ssim_b": float(np.mean(ssims)),
                "ssim_b_ci": interval(ssims),
                "psnr_b": ev.aggregates["psnr_b"],
            }
        )
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics.write_metric_rows(out_dir / "alpha_study.tsv", study_rows, fields=ALPHA_STUDY_FIELDS)
    return study_rows
