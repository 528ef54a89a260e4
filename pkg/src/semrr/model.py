"""Multi-task reflection-removal network at configurable desk scale.

One shared convolutional encoder feeds a multi-rate dilated context block
(spatial pyramid with a global-pooling branch). From the pooled trunk, a
semantic branch predicts per-pixel class logits; a reconstruction decoder
with encoder skip connections emits the background and reflection layers
through bounded (sigmoid) heads.

Three wirings connect the branches:

* ``shared_no_fusion``  - the decoder sees only trunk features and skips.
* ``full_fusion``       - additionally, the semantic prediction (softmax
  probability planes, average-pooled to the fusion resolution) is
  concatenated into the decoder at a configurable stage.
* ``basic_guidance``    - the decoder drops the deep trunk entirely and is
  driven by the guidance planes plus encoder skips (semantics first, then
  reconstruction).

Ground-truth maps can be injected in place of the predicted planes; the two
paths use the same plane encoding, so they coincide exactly whenever the
prediction is one-hot.
"""

from __future__ import annotations

import io
import json
import os
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import CLASS_COUNT, IGNORE_INDEX

FUSION_VARIANTS = ("basic_guidance", "shared_no_fusion", "full_fusion")

CHECKPOINT_MAGIC = b"SEMRR-CKPT 1\n"


class ModelConfigError(ValueError):
    """Inconsistent architecture description."""


class CheckpointError(RuntimeError):
    """Unreadable checkpoint or config mismatch on load."""


def default_aspp_rates(total_stride: int) -> list[int]:
    # the usual {6, 12, 18} rates assume stride 16; scale proportionally
    return [max(1, int(r * total_stride / 16 + 0.5)) for r in (6, 12, 18)]


@dataclass
class ModelConfig:
    """Architecture description; every field is covered by validation.

    ``encoder_blocks`` lists (width, stride) per stage with strides in
    {1, 2}; the decoder mirrors the stride-2 stages, so ``decoder_widths``
    must have one entry per stride-2 stage. ``skip_stage_ids`` are encoder
    stages whose features are forwarded to the matching decoder resolution.
    ``fusion_stage`` picks the decoder stage whose input receives the
    semantic guidance planes. ``freeze_encoder`` excludes the stem and
    stages (not the pyramid) from training; ``detach_semantic`` stops
    gradient flow from the semantic branch into the shared trunk.
    """

    encoder_blocks: list = field(default_factory=lambda: [[16, 1], [32, 2], [64, 2]])
    aspp_rates: list | None = None
    class_count: int = CLASS_COUNT
    decoder_widths: list = field(default_factory=lambda: [48, 32])
    skip_stage_ids: list = field(default_factory=lambda: [0, 1])
    variant: str = "full_fusion"
    fusion_stage: int = 0
    semantic_width: int = 32
    freeze_encoder: bool = False
    detach_semantic: bool = False
    seed: int = 0

    def __post_init__(self):
        self.encoder_blocks = [list(b) for b in self.encoder_blocks]
        self.decoder_widths = list(self.decoder_widths)
        self.skip_stage_ids = list(self.skip_stage_ids)
        if not self.encoder_blocks:
            raise ModelConfigError("encoder_blocks is empty")
        for width, stride in self.encoder_blocks:
            if width < 1:
                raise ModelConfigError(f"encoder width must be >= 1, got {width}")
            if stride not in (1, 2):
                raise ModelConfigError(f"encoder strides must be 1 or 2, got {stride}")
        n_down = sum(1 for _, s in self.encoder_blocks if s == 2)
        if n_down < 1:
            raise ModelConfigError("need at least one stride-2 encoder stage")
        if len(self.decoder_widths) != n_down:
            raise ModelConfigError(
                f"decoder_widths must have one entry per stride-2 stage "
                f"({n_down}), got {len(self.decoder_widths)}"
            )
        if any(w < 1 for w in self.decoder_widths):
            raise ModelConfigError("decoder widths must be >= 1")
        if self.class_count < 2:
            raise ModelConfigError(f"class_count must be >= 2, got {self.class_count}")
        if self.semantic_width < 1:
            raise ModelConfigError("semantic_width must be >= 1")
        if self.aspp_rates is None:
            self.aspp_rates = default_aspp_rates(self.total_stride)
        self.aspp_rates = list(self.aspp_rates)
        if not self.aspp_rates or any(r < 1 for r in self.aspp_rates):
            raise ModelConfigError(f"aspp_rates must be non-empty positive, got {self.aspp_rates}")
        if self.variant not in FUSION_VARIANTS:
            raise ModelConfigError(f"variant must be one of {FUSION_VARIANTS}, got {self.variant!r}")
        if not 0 <= self.fusion_stage < len(self.decoder_widths):
            raise ModelConfigError(
                f"fusion_stage {self.fusion_stage} outside [0, {len(self.decoder_widths)})"
            )
        if self.variant == "basic_guidance" and self.fusion_stage != 0:
            raise ModelConfigError("basic_guidance fuses at the decoder input (fusion_stage 0)")
        strides = self.stage_strides()
        for sid in self.skip_stage_ids:
            if not 0 <= sid < len(self.encoder_blocks):
                raise ModelConfigError(f"skip stage {sid} does not exist")
            if strides[sid] == self.total_stride:
                raise ModelConfigError(
                    f"skip stage {sid} sits at the deepest resolution; it already feeds the trunk"
                )

    def stage_strides(self) -> list[int]:
        """Cumulative stride at the output of each encoder stage."""
        out, c = [], 1
        for _, s in self.encoder_blocks:
            c *= s
            out.append(c)
        return out

    @property
    def total_stride(self) -> int:
        return self.stage_strides()[-1]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(doc) - known
        if extra:
            raise ModelConfigError(f"unknown model config keys: {sorted(extra)}")
        return cls(**doc)


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------

def _group_norm(channels: int) -> nn.GroupNorm:
    groups = next(g for g in (8, 4, 2, 1) if channels % g == 0)
    return nn.GroupNorm(groups, channels)


class ConvBlock(nn.Module):
    def __init__(self, cin: int, cout: int, kernel: int = 3, stride: int = 1, dilation: int = 1):
        super().__init__()
        pad = dilation * (kernel // 2)
        self.conv = nn.Conv2d(cin, cout, kernel, stride=stride, padding=pad, dilation=dilation)
        self.norm = _group_norm(cout)
        self.act = nn.ReLU(inplace=True)

    def forward(self, x):
        return self.act(self.norm(self.conv(x)))


class ResidualStage(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=1)
        self.norm1 = _group_norm(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.norm2 = _group_norm(cout)
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride=stride), _group_norm(cout))
        else:
            self.shortcut = nn.Identity()
        self.act = nn.ReLU(inplace=True)

    def forward(self, x):
        y = self.act(self.norm1(self.conv1(x)))
        y = self.norm2(self.conv2(y))
        return self.act(y + self.shortcut(x))


class PyramidPooling(nn.Module):
    """Parallel context branches: 1x1, dilated 3x3 per rate, global pooling."""

    def __init__(self, cin: int, cout: int, rates):
        super().__init__()
        self.branches = nn.ModuleList([ConvBlock(cin, cout, kernel=1)])
        for r in rates:
            self.branches.append(ConvBlock(cin, cout, kernel=3, dilation=r))
        # the pooled branch sees a 1x1 map, where normalizing is degenerate
        self.pool_conv = nn.Sequential(nn.Conv2d(cin, cout, 1), nn.ReLU(inplace=True))
        self.project = ConvBlock(cout * (len(rates) + 2), cout, kernel=1)

    def forward(self, x):
        feats = [branch(x) for branch in self.branches]
        pooled = self.pool_conv(F.adaptive_avg_pool2d(x, 1))
        feats.append(F.interpolate(pooled, size=x.shape[2:], mode="bilinear", align_corners=False))
        return self.project(torch.cat(feats, dim=1))


class SemanticBranch(nn.Module):
    def __init__(self, cin: int, width: int, class_count: int):
        super().__init__()
        self.conv1 = ConvBlock(cin, width)
        self.conv2 = ConvBlock(width, width)
        self.head = nn.Conv2d(width, class_count, 1)

    def forward(self, x):
        return self.head(self.conv2(self.conv1(x)))


@dataclass
class ModelOutput:
    """Per-image network outputs at input resolution."""

    semantic_logits: torch.Tensor
    background: torch.Tensor
    reflection: torch.Tensor


def encode_semantic_planes(
    semantic: torch.Tensor, class_count: int, ignore_index: int = IGNORE_INDEX
) -> torch.Tensor:
    """One-hot class planes (N, C, H, W) from an integer map.

    Ignore-index pixels become all-zero plane vectors; a map with no valid
    labels at all is rejected.
    """
    if semantic.dim() == 2:
        semantic = semantic.unsqueeze(0)
    if semantic.dim() != 3:
        raise ValueError(f"expected (H, W) or (N, H, W) map, got shape {tuple(semantic.shape)}")
    labels = semantic.long()
    scored = labels != ignore_index
    if not bool(scored.any()):
        raise ValueError("no valid guidance labels: every pixel is ignore-index")
    if ((labels < 0) | ((labels >= class_count) & scored)).any():
        raise ValueError(f"guidance labels outside [0, {class_count})")
    safe = labels.clone()
    safe[~scored] = 0
    planes = torch.zeros(
        (labels.shape[0], class_count, labels.shape[1], labels.shape[2]), dtype=torch.float32
    )
    planes.scatter_(1, safe.unsqueeze(1), 1.0)
    planes = planes * scored.unsqueeze(1)
    return planes


class ReflectionRemovalModel(nn.Module):
    """Shared encoder + context pyramid with semantic and reconstruction heads."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        blocks = config.encoder_blocks

        w0, s0 = blocks[0]
        self.stem = ConvBlock(3, w0, stride=s0)
        self.stages = nn.ModuleList()
        cin = w0
        for width, stride in blocks[1:]:
            self.stages.append(ResidualStage(cin, width, stride))
            cin = width
        self.trunk_width = cin
        self.pyramid = PyramidPooling(cin, cin, config.aspp_rates)
        self.semantic = SemanticBranch(cin, config.semantic_width, config.class_count)

        # map each skip stage / the fusion stage to its decoder join point
        strides = config.stage_strides()
        total = config.total_stride
        n_dec = len(config.decoder_widths)
        self._skips_at: dict[int, list[int]] = {j: [] for j in range(n_dec)}
        for sid in config.skip_stage_ids:
            join = int(np.log2(total // strides[sid])) - 1
            self._skips_at[join].append(sid)

        widths = [w0] + [w for w, _ in blocks[1:]]
        self.decoder = nn.ModuleList()
        prev = {
            "basic_guidance": config.class_count,
            "shared_no_fusion": self.trunk_width,
            "full_fusion": self.trunk_width,
        }[config.variant]
        for j, dw in enumerate(config.decoder_widths):
            cin_j = prev
            if config.variant == "full_fusion" and config.fusion_stage == j:
                cin_j += config.class_count
            cin_j += sum(widths[sid] for sid in self._skips_at[j])
            self.decoder.append(ConvBlock(cin_j, dw))
            prev = dw
        self.head_background = nn.Conv2d(prev, 3, 3, padding=1)
        self.head_reflection = nn.Conv2d(prev, 3, 3, padding=1)

        if config.freeze_encoder:
            for p in self.stem.parameters():
                p.requires_grad_(False)
            for p in self.stages.parameters():
                p.requires_grad_(False)

    # -- plumbing ----------------------------------------------------------

    def _check_input(self, image: torch.Tensor) -> torch.Tensor:
        if image.dim() == 3:
            image = image.unsqueeze(0)
        if image.dim() != 4 or image.shape[1] != 3:
            raise ValueError(f"expected (N, 3, H, W) input, got shape {tuple(image.shape)}")
        s = self.config.total_stride
        if image.shape[2] % s or image.shape[3] % s:
            raise ValueError(
                f"input {image.shape[2]}x{image.shape[3]} not divisible by total stride {s}"
            )
        return image

    def _encode(self, image: torch.Tensor):
        feats = self.stem(image)
        stage_outputs = [feats]
        for stage in self.stages:
            feats = stage(feats)
            stage_outputs.append(feats)
        return stage_outputs

    def _semantic_logits(self, trunk: torch.Tensor, full_size) -> torch.Tensor:
        sem_in = trunk.detach() if self.config.detach_semantic else trunk
        logits_low = self.semantic(sem_in)
        if logits_low.shape[2:] == tuple(full_size):
            return logits_low
        return F.interpolate(logits_low, size=full_size, mode="bilinear", align_corners=False)

    def _pool_guidance(self, planes_full: torch.Tensor) -> torch.Tensor:
        factor = self.config.total_stride // (2**self.config.fusion_stage)
        if factor == 1:
            return planes_full
        return F.avg_pool2d(planes_full, kernel_size=factor)

    def _decode(self, trunk: torch.Tensor, stage_outputs, guidance: torch.Tensor | None):
        cfg = self.config
        if cfg.variant == "basic_guidance":
            feats = guidance
        else:
            feats = trunk
        for j, block in enumerate(self.decoder):
            if cfg.variant == "full_fusion" and cfg.fusion_stage == j:
                feats = torch.cat([feats, guidance], dim=1)
            feats = F.interpolate(feats, scale_factor=2, mode="bilinear", align_corners=False)
            if self._skips_at[j]:
                feats = torch.cat([feats] + [stage_outputs[sid] for sid in self._skips_at[j]], dim=1)
            feats = block(feats)
        background = torch.sigmoid(self.head_background(feats))
        reflection = torch.sigmoid(self.head_reflection(feats))
        return background, reflection

    # -- public API ---------------------------------------------------------

    def forward(self, image: torch.Tensor) -> ModelOutput:
        """Predict semantic logits and both layers from the mixed image."""
        image = self._check_input(image)
        stage_outputs = self._encode(image)
        trunk = self.pyramid(stage_outputs[-1])
        logits = self._semantic_logits(trunk, image.shape[2:])
        guidance = None
        if self.config.variant != "shared_no_fusion":
            guidance = self._pool_guidance(torch.softmax(logits, dim=1))
        background, reflection = self._decode(trunk, stage_outputs, guidance)
        return ModelOutput(semantic_logits=logits, background=background, reflection=reflection)

    def inject_semantic(self, image: torch.Tensor, semantic: torch.Tensor) -> ModelOutput:
        """Run reconstruction with a provided label map as guidance.

        The map is one-hot encoded exactly like a predicted map, so outputs
        match ``forward`` whenever the prediction is one-hot. Logits are
        still reported from the semantic branch.
        """
        if self.config.variant == "shared_no_fusion":
            raise ValueError("variant shared_no_fusion has no fusion point to inject into")
        image = self._check_input(image)
        if semantic.dim() == 2:
            semantic = semantic.unsqueeze(0)
        if tuple(semantic.shape[-2:]) != tuple(image.shape[2:]) or semantic.shape[0] != image.shape[0]:
            raise ValueError(
                f"semantic map shape {tuple(semantic.shape)} does not match image {tuple(image.shape)}"
            )
        stage_outputs = self._encode(image)
        trunk = self.pyramid(stage_outputs[-1])
        logits = self._semantic_logits(trunk, image.shape[2:])
        planes = encode_semantic_planes(semantic, self.config.class_count).to(image.dtype)
        guidance = self._pool_guidance(planes)
        background, reflection = self._decode(trunk, stage_outputs, guidance)
        return ModelOutput(semantic_logits=logits, background=background, reflection=reflection)

    # -- reporting ----------------------------------------------------------

    def encoder_parameters(self):
        yield from self.stem.parameters()
        yield from self.stages.parameters()

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]

    def parameter_counts(self) -> dict:
        total = sum(p.numel() for p in self.parameters())
        trainable = sum(p.numel() for p in self.parameters() if p.requires_grad)
        return {"total": total, "trainable": trainable, "frozen": total - trainable}

    def summary(self) -> str:
        lines = [f"variant={self.config.variant} total_stride={self.config.total_stride}"]
        for name, p in self.named_parameters():
            flag = "" if p.requires_grad else "  [frozen]"
            lines.append(f"{name:60s} {str(tuple(p.shape)):20s} {p.numel():>8d}{flag}")
        counts = self.parameter_counts()
        lines.append(
            f"parameters: total={counts['total']} trainable={counts['trainable']} "
            f"frozen={counts['frozen']}"
        )
        return "\n".join(lines)


def build_model(config: ModelConfig) -> ReflectionRemovalModel:
    """Construct a model with parameters seeded from config.seed."""
    torch.manual_seed(config.seed)
    return ReflectionRemovalModel(config)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

@dataclass
class CheckpointBundle:
    model: ReflectionRemovalModel
    config: ModelConfig
    step: int
    extra: dict


def save_checkpoint(path, model: ReflectionRemovalModel, step: int = 0, extra: dict | None = None) -> Path:
    """Write a deterministic, versioned container: config echo + named arrays.

    The file is written to a temp name and renamed into place so readers
    never observe a partial checkpoint.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = [(name, tensor.detach().cpu().numpy()) for name, tensor in model.state_dict().items()]
    extra = extra or {}
    extra_arrays = [(name, np.asarray(value)) for name, value in sorted(extra.items())]

    header = {
        "format": 1,
        "step": int(step),
        "config": model.config.to_dict(),
        "arrays": [
            {"name": n, "dtype": a.dtype.str, "shape": list(a.shape)} for n, a in arrays
        ],
        "extra": [
            {"name": n, "dtype": a.dtype.str, "shape": list(a.shape)} for n, a in extra_arrays
        ],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")

    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(f"{len(header_bytes)}\n".encode("ascii"))
    buf.write(header_bytes)
    for _, a in arrays + extra_arrays:
        buf.write(np.ascontiguousarray(a).tobytes())

    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(buf.getvalue())
    os.replace(tmp, path)
    return path


def load_checkpoint(path, expected_config: ModelConfig | None = None) -> CheckpointBundle:
    """Rebuild the model stored at ``path``; reject mismatched configs."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    blob = path.read_bytes()
    if not blob.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    rest = blob[len(CHECKPOINT_MAGIC):]
    newline = rest.index(b"\n")
    header_len = int(rest[:newline])
    header_start = newline + 1
    try:
        header = json.loads(rest[header_start : header_start + header_len])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    if header.get("format") != 1:
        raise CheckpointError(f"{path}: unsupported format {header.get('format')}")

    config = ModelConfig.from_dict(header["config"])
    if expected_config is not None and expected_config.to_dict() != config.to_dict():
        raise CheckpointError(f"{path}: checkpoint config does not match the expected config")

    offset = header_start + header_len
    def take(desc):
        nonlocal offset
        dtype = np.dtype(desc["dtype"])
        shape = tuple(desc["shape"])
        nbytes = dtype.itemsize * int(np.prod(shape)) if shape else dtype.itemsize
        arr = np.frombuffer(rest, dtype=dtype, count=max(1, int(np.prod(shape))), offset=offset)
        offset += nbytes
        return arr.reshape(shape).copy()

    state = {desc["name"]: torch.as_tensor(take(desc)) for desc in header["arrays"]}
    extra = {desc["name"]: take(desc) for desc in header["extra"]}

    model = build_model(config)
    model.load_state_dict(state, strict=True)
    return CheckpointBundle(model=model, config=config, step=int(header["step"]), extra=extra)
