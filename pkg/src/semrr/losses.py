"""Differentiable loss stack for joint layer separation and segmentation.

The background layer is penalized by a weighted mix of (1 - SSIM), L1 and a
soft-edge Frobenius term; the reflection layer by plain L1; the semantic
branch by per-pixel per-class binary cross entropy over softmax probabilities.
The task losses are combined under per-task observation-noise scales
(1 / (2 * sigma_R^2) for the image terms, 1 / sigma_S^2 for the semantic
term) plus an L2 parameter-norm penalty.

L1 and cross entropy reduce by per-pixel means so the default weights are
resolution independent; the edge term keeps its Frobenius (norm) scale.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from . import ops
from .metrics import SsimParams

PROB_EPS = 1e-7

SIGMA_MODES = ("fixed", "learnable")


class NoScoredPixelsError(ValueError):
    """Raised when every target pixel carries the ignore index."""


@dataclass
class LossWeights:
    """Scalar weights and noise parameters of the combined objective.

    w1/w2 scale the background/reflection losses inside the image task,
    w1_1/w1_2/w1_3 the SSIM/L1/edge sub-terms of the background loss, w3 the
    semantic loss and w4 the parameter regularizer. sigma_r and sigma_s are
    the per-task observation noise scales; in ``learnable`` mode they are
    optimized as exponentials of free scalars and the combined loss gains the
    log(sigma_r) + log(sigma_s) guard term.
    """

    w1: float = 1.0
    w1_1: float = 0.6
    w1_2: float = 1.0
    w1_3: float = 0.0003
    w2: float = 0.8
    w3: float = 1.0
    w4: float = 1.0
    sigma_r: float = 1.0
    sigma_s: float = 1.0
    sigma_mode: str = "fixed"

    def __post_init__(self):
        for name in ("w1", "w1_1", "w1_2", "w1_3", "w2", "w3", "w4"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.sigma_r <= 0 or self.sigma_s <= 0:
            raise ValueError("sigma_r and sigma_s must be positive")
        if self.sigma_mode not in SIGMA_MODES:
            raise ValueError(f"sigma_mode must be one of {SIGMA_MODES}, got {self.sigma_mode!r}")


@dataclass
class LossBreakdown:
    """Component losses and their weighted combination.

    Fields are floats when built from floats and 0-dim tensors when built
    from tensors (the training path backpropagates through ``total``).
    """

    l_b: "float | torch.Tensor"
    l_r: "float | torch.Tensor"
    l_s: "float | torch.Tensor"
    l_reg: "float | torch.Tensor"
    total: "float | torch.Tensor"

    def as_floats(self) -> "LossBreakdown":
        values = []
        for name in ("l_b", "l_r", "l_s", "l_reg", "total"):
            v = getattr(self, name)
            values.append(float(v.detach()) if isinstance(v, torch.Tensor) else float(v))
        return LossBreakdown(*values)


def background_loss(
    b_hat: torch.Tensor,
    b: torch.Tensor,
    weights: LossWeights | None = None,
    ssim_params: SsimParams | None = None,
) -> torch.Tensor:
    """w1_1 * (1 - SSIM) + w1_2 * mean-L1 + w1_3 * soft-edge Frobenius distance."""
    weights = weights or LossWeights()
    params = ssim_params or SsimParams()
    if b_hat.shape != b.shape:
        raise ValueError(f"dimension mismatch: {tuple(b_hat.shape)} vs {tuple(b.shape)}")
    loss = b_hat.new_zeros(())
    if weights.w1_1 != 0.0:
        sim = ops.ssim(
            b_hat,
            b,
            window_size=params.window_size,
            window_sigma=params.window_sigma,
            k1=params.k1,
            k2=params.k2,
            dynamic_range=params.dynamic_range,
        )
        loss = loss + weights.w1_1 * (1.0 - sim)
    if weights.w1_2 != 0.0:
        loss = loss + weights.w1_2 * (b_hat - b).abs().mean()
    if weights.w1_3 != 0.0:
        loss = loss + weights.w1_3 * ops.frobenius_distance(ops.soft_edge(b_hat), ops.soft_edge(b))
    return loss


def reflection_loss(r_hat: torch.Tensor, r: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference between estimated and true reflection."""
    if r_hat.shape != r.shape:
        raise ValueError(f"dimension mismatch: {tuple(r_hat.shape)} vs {tuple(r.shape)}")
    return (r_hat - r).abs().mean()


def semantic_loss(
    logits: torch.Tensor,
    target: torch.Tensor,
    ignore_index: int = 255,
    eps: float = PROB_EPS,
) -> torch.Tensor:
    """Per-pixel, per-class binary cross entropy against one-hot targets.

    ``logits`` is (C, H, W) or (N, C, H, W) unnormalized scores; ``target``
    the matching (H, W) / (N, H, W) integer map. Probabilities come from a
    softmax over classes, clipped to [eps, 1 - eps]; each scored pixel
    contributes the sum of its C binary terms and the result is the mean over
    scored pixels. Ignore-index pixels are excluded; if nothing is scored a
    NoScoredPixelsError is raised.
    """
    if logits.dim() == 3:
        logits = logits.unsqueeze(0)
        target = target.unsqueeze(0)
    if logits.dim() != 4 or target.dim() != 3:
        raise ValueError(f"bad shapes: logits {tuple(logits.shape)}, target {tuple(target.shape)}")
    if logits.shape[0] != target.shape[0] or logits.shape[2:] != target.shape[1:]:
        raise ValueError(f"dimension mismatch: logits {tuple(logits.shape)} vs target {tuple(target.shape)}")
    class_count = logits.shape[1]
    scored = target != ignore_index
    if not bool(scored.any()):
        raise NoScoredPixelsError("every pixel carries the ignore index")
    labels = target.clone().long()
    if ((labels < 0) | ((labels >= class_count) & scored)).any():
        raise ValueError(f"target labels outside [0, {class_count}) in scored pixels")
    labels[~scored] = 0  # placeholder; masked out below

    probs = torch.softmax(logits, dim=1).clamp(eps, 1.0 - eps)
    one_hot = torch.zeros_like(probs)
    one_hot.scatter_(1, labels.unsqueeze(1), 1.0)
    per_class = -(one_hot * torch.log(probs) + (1.0 - one_hot) * torch.log(1.0 - probs))
    per_pixel = per_class.sum(dim=1)
    return per_pixel[scored].mean()


def l2_regularization(parameters) -> torch.Tensor:
    """Sum of the L2 norms of trainable parameter groups.

    Groups with ``requires_grad == False`` (a frozen backbone) contribute
    nothing. Returns a scalar tensor; 0 for an empty list.
    """
    total = None
    for p in parameters:
        if not p.requires_grad:
            continue
        norm = ops.safe_sqrt((p * p).sum())
        total = norm if total is None else total + norm
    if total is None:
        return torch.zeros(())
    return total


def _log(x):
    return torch.log(x) if isinstance(x, torch.Tensor) else math.log(x)


def total_loss(
    l_b,
    l_r,
    l_s,
    l_reg,
    weights: LossWeights | None = None,
    sigma_r=None,
    sigma_s=None,
) -> LossBreakdown:
    """Combine component losses under the active weights and noise scales.

    total = (1 / (2 sigma_r^2)) * (w1 l_b + w2 l_r) + (w3 / sigma_s^2) * l_s
            + w4 * l_reg, plus log(sigma_r) + log(sigma_s) in learnable mode.

    Components may be floats or scalar tensors; sigma overrides (tensors in
    learnable mode) default to the fixed values in ``weights``.
    """
    weights = weights or LossWeights()
    for name, val in (("l_b", l_b), ("l_r", l_r), ("l_s", l_s), ("l_reg", l_reg)):
        v = float(val.detach()) if isinstance(val, torch.Tensor) else float(val)
        if not math.isfinite(v):
            raise ValueError(f"non-finite component {name}: {v}")
        if v < 0:
            raise ValueError(f"negative component {name}: {v}")
    s_r = weights.sigma_r if sigma_r is None else sigma_r
    s_s = weights.sigma_s if sigma_s is None else sigma_s
    total = (
        (0.5 / (s_r * s_r)) * (weights.w1 * l_b + weights.w2 * l_r)
        + (weights.w3 / (s_s * s_s)) * l_s
        + weights.w4 * l_reg
    )
    if weights.sigma_mode == "learnable":
        total = total + _log(s_r) + _log(s_s)
    return LossBreakdown(l_b=l_b, l_r=l_r, l_s=l_s, l_reg=l_reg, total=total)
