"""Evaluation measures: PSNR, SSIM, mIoU, edge maps and confidence intervals.

All functions take numpy arrays (images H x W x 3 in [0, 1], label maps
H x W uint8) and return plain Python numbers. Internals that need windowed
convolutions delegate to the differentiable implementations in ``ops`` so
that evaluation and training see the same definitions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage, stats

from . import ops
from .data import CLASS_COUNT, IGNORE_INDEX

#: column order for per-record metric rows
METRIC_FIELDS = ("record_id", "psnr_b", "ssim_b", "psnr_r", "ssim_r", "miou", "alpha")


@dataclass
class SsimParams:
    """Window and stabilization constants for SSIM; defaults follow the
    standard reference parameterization with dynamic range 1.0."""

    window_size: int = 11
    window_sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    dynamic_range: float = 1.0

    def __post_init__(self):
        if self.window_size < 3 or self.window_size % 2 == 0:
            raise ValueError(f"window_size must be odd and >= 3, got {self.window_size}")
        if self.k1 <= 0 or self.k2 <= 0:
            raise ValueError("k1 and k2 must be positive")
        if self.dynamic_range <= 0:
            raise ValueError("dynamic_range must be positive")
        if self.window_sigma <= 0:
            raise ValueError("window_sigma must be positive")


def psnr(a: np.ndarray, b: np.ndarray, dynamic_range: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; +inf when the images are identical."""
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(dynamic_range**2 / mse)


def ssim(a: np.ndarray, b: np.ndarray, params: SsimParams | None = None) -> float:
    """Mean SSIM over valid Gaussian windows, averaged across channels."""
    params = params or SsimParams()
    ta = torch.as_tensor(_channels_first(a), dtype=torch.float64)
    tb = torch.as_tensor(_channels_first(b), dtype=torch.float64)
    value = ops.ssim(
        ta,
        tb,
        window_size=params.window_size,
        window_sigma=params.window_sigma,
        k1=params.k1,
        k2=params.k2,
        dynamic_range=params.dynamic_range,
    )
    return float(value)


def _channels_first(image: np.ndarray) -> np.ndarray:
    if image.ndim == 2:
        return image[np.newaxis].astype(np.float64)
    if image.ndim == 3:
        return np.transpose(image, (2, 0, 1)).astype(np.float64)
    raise ValueError(f"expected H x W or H x W x C array, got shape {image.shape}")


# ---------------------------------------------------------------------------
# segmentation quality
# ---------------------------------------------------------------------------

@dataclass
class ConfusionMatrix:
    """Class-by-class pixel counts; rows are ground truth, columns prediction."""

    counts: np.ndarray

    @classmethod
    def from_maps(
        cls,
        pred: np.ndarray,
        gt: np.ndarray,
        class_count: int = CLASS_COUNT,
        ignore_index: int = IGNORE_INDEX,
    ) -> "ConfusionMatrix":
        if pred.shape != gt.shape:
            raise ValueError(f"dimension mismatch: {pred.shape} vs {gt.shape}")
        scored = gt != ignore_index
        g = gt[scored].astype(np.int64)
        p = pred[scored].astype(np.int64)
        if np.any(p >= class_count) or np.any(g >= class_count):
            raise ValueError("label outside [0, class_count) in scored pixels")
        counts = np.bincount(g * class_count + p, minlength=class_count * class_count)
        return cls(counts=counts.reshape(class_count, class_count))

    def total(self) -> int:
        return int(self.counts.sum())

    def miou(self) -> float | None:
        """Mean IoU over classes present in ground truth or prediction.

        Returns None when no pixels were scored.
        """
        if self.total() == 0:
            return None
        gt_per_class = self.counts.sum(axis=1)
        pred_per_class = self.counts.sum(axis=0)
        inter = np.diag(self.counts)
        union = gt_per_class + pred_per_class - inter
        present = union > 0
        iou = inter[present] / union[present]
        return float(iou.mean())


def miou(
    pred: np.ndarray,
    gt: np.ndarray,
    class_count: int = CLASS_COUNT,
    ignore_index: int = IGNORE_INDEX,
) -> float | None:
    """Mean intersection-over-union; None signals "no scored pixels"."""
    return ConfusionMatrix.from_maps(pred, gt, class_count, ignore_index).miou()


# ---------------------------------------------------------------------------
# edges
# ---------------------------------------------------------------------------

EDGE_MODES = ("evaluation_canny", "training_soft")


def edge_map(
    image: np.ndarray,
    mode: str = "evaluation_canny",
    sigma: float = 1.4,
    low: float = 0.1,
    high: float = 0.2,
) -> np.ndarray:
    """Edge strength of an image (H x W float32 output).

    ``evaluation_canny`` runs the classic pipeline (Gaussian smoothing, Sobel
    gradients, non-maximum suppression, double-threshold hysteresis at
    low/high fractions of the max gradient) and returns a binary map.
    ``training_soft`` returns the smooth Sobel magnitude used inside the
    background loss.
    """
    if mode not in EDGE_MODES:
        raise ValueError(f"unknown edge mode {mode!r}; expected one of {EDGE_MODES}")
    if mode == "training_soft":
        t = torch.as_tensor(_channels_first(image), dtype=torch.float64)
        return ops.soft_edge(t, sigma=sigma).squeeze(0).numpy().astype(np.float32)
    return _canny(image, sigma=sigma, low=low, high=high)


def _gray(image: np.ndarray) -> np.ndarray:
    if image.ndim == 2:
        return image.astype(np.float64)
    if image.ndim == 3 and image.shape[2] == 3:
        return image.astype(np.float64) @ np.asarray(ops.LUMA_WEIGHTS, dtype=np.float64)
    raise ValueError(f"expected H x W or H x W x 3 image, got shape {image.shape}")


def _canny(image: np.ndarray, sigma: float, low: float, high: float) -> np.ndarray:
    if not 0.0 < low <= high:
        raise ValueError(f"need 0 < low <= high, got low={low} high={high}")
    gray = _gray(image)
    taps = ops.gaussian_kernel_1d(sigma)
    smoothed = ndimage.correlate1d(gray, taps, axis=0, mode="reflect")
    smoothed = ndimage.correlate1d(smoothed, taps, axis=1, mode="reflect")
    gx = ndimage.correlate(smoothed, np.array([[-1.0, 0, 1], [-2.0, 0, 2], [-1.0, 0, 1]]), mode="reflect")
    gy = ndimage.correlate(smoothed, np.array([[-1.0, -2, -1], [0.0, 0, 0], [1.0, 2, 1]]), mode="reflect")
    mag = np.hypot(gx, gy)
    peak = mag.max()
    # near-constant inputs leave only accumulation noise in the gradients;
    # thresholds are fractions of the peak, so guard with an absolute floor
    if peak <= 1e-12:
        return np.zeros(gray.shape, dtype=np.float32)

    thinned = _non_max_suppression(mag, gx, gy)
    strong = thinned >= high * peak
    weak = thinned >= low * peak
    edges = ndimage.binary_propagation(strong, mask=weak, structure=np.ones((3, 3), bool))
    return edges.astype(np.float32)


def _non_max_suppression(mag: np.ndarray, gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    """Keep pixels that are local maxima along the quantized gradient direction."""
    padded = np.pad(mag, 1, mode="constant")
    h, w = mag.shape

    def shifted(dy: int, dx: int) -> np.ndarray:
        return padded[1 + dy : 1 + dy + h, 1 + dx : 1 + dx + w]

    angle = np.rad2deg(np.arctan2(gy, gx)) % 180.0
    bins = np.zeros(mag.shape, dtype=np.int8)
    bins[(angle >= 22.5) & (angle < 67.5)] = 1
    bins[(angle >= 67.5) & (angle < 112.5)] = 2
    bins[(angle >= 112.5) & (angle < 157.5)] = 3

    neighbors = {
        0: (shifted(0, 1), shifted(0, -1)),
        1: (shifted(-1, 1), shifted(1, -1)),
        2: (shifted(1, 0), shifted(-1, 0)),
        3: (shifted(1, 1), shifted(-1, -1)),
    }
    keep = np.zeros(mag.shape, dtype=bool)
    for b, (n1, n2) in neighbors.items():
        sel = bins == b
        keep |= sel & (mag >= n1) & (mag >= n2)
    out = mag.copy()
    out[~keep] = 0.0
    return out


def edge_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Frobenius norm of the elementwise difference of two edge tensors."""
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    diff = a.astype(np.float64) - b.astype(np.float64)
    return float(np.sqrt(np.sum(diff * diff)))


# ---------------------------------------------------------------------------
# statistics and report rows
# ---------------------------------------------------------------------------

def confidence_interval(samples, level: float = 0.95) -> tuple[float, float]:
    """Normal-approximation interval: (mean, z(level) * s / sqrt(n))."""
    values = np.asarray(list(samples), dtype=np.float64)
    if values.size < 2:
        raise ValueError(f"need at least 2 samples, got {values.size}")
    if not 0.0 < level < 1.0:
        raise ValueError(f"level must be in (0, 1), got {level}")
    mean = float(values.mean())
    s = float(values.std(ddof=1))
    z = float(stats.norm.ppf(0.5 + level / 2.0))
    return mean, z * s / math.sqrt(values.size)


def format_value(value) -> str:
    if value is None:
        return "NA"
    if isinstance(value, float):
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return repr(value)
    return str(value)


def parse_value(text: str):
    if text == "NA":
        return None
    if text == "inf":
        return math.inf
    if text == "-inf":
        return -math.inf
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        return text


def write_metric_rows(path, rows, fields=METRIC_FIELDS) -> Path:
    """Emit per-record metric rows as tab-separated text with a header."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["\t".join(fields)]
    for row in rows:
        lines.append("\t".join(format_value(row.get(f)) for f in fields))
    path.write_text("\n".join(lines) + "\n")
    return path


def read_metric_rows(path) -> list[dict]:
    lines = Path(path).read_text().splitlines()
    if not lines:
        return []
    fields = lines[0].split("\t")
    rows = []
    for line in lines[1:]:
        if not line.strip():
            continue
        parts = line.split("\t")
        rows.append({f: parse_value(v) for f, v in zip(fields, parts)})
    return rows
