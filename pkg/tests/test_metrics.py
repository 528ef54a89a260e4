import math

import numpy as np
import pytest

from _oracles import (
    edge_distance_reference,
    miou_reference,
    psnr_reference,
    ssim_reference,
)
from semrr.metrics import (
    ConfusionMatrix,
    SsimParams,
    confidence_interval,
    edge_distance,
    edge_map,
    format_value,
    miou,
    parse_value,
    psnr,
    read_metric_rows,
    ssim,
    write_metric_rows,
)


def test_psnr_frozen_values():
    # 0.25 is exact in binary, so MSE is exactly 1/16 -> 10 log10(16) dB
    a = np.zeros((8, 8, 3), dtype=np.float32)
    b = np.full((8, 8, 3), 0.25, dtype=np.float32)
    assert psnr(a, b) == pytest.approx(10.0 * math.log10(16.0), abs=1e-12)
    assert psnr(np.zeros((4, 4, 3)), np.ones((4, 4, 3))) == pytest.approx(0.0, abs=1e-12)
    assert psnr(a, a) == math.inf


def test_psnr_dynamic_range():
    a = np.zeros((4, 4, 3))
    b = np.full((4, 4, 3), 25.5)
    assert psnr(a, b, dynamic_range=255.0) == pytest.approx(20.0, abs=1e-9)


def test_psnr_shape_mismatch():
    with pytest.raises(ValueError, match="dimension mismatch"):
        psnr(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))


def test_ssim_identical_is_one(rng):
    img = rng.random((16, 16, 3), dtype=np.float32)
    assert ssim(img, img) == pytest.approx(1.0, abs=1e-9)


def test_ssim_constant_images_closed_form():
    # variance-free images leave only the luminance term:
    # (2 * 0.2 * 0.8 + 1e-4) / (0.2^2 + 0.8^2 + 1e-4)
    a = np.full((16, 16, 3), 0.2, dtype=np.float64)
    b = np.full((16, 16, 3), 0.8, dtype=np.float64)
    assert ssim(a, b) == pytest.approx(0.470666078517865, abs=1e-12)


def test_ssim_symmetry_and_range(rng):
    a = rng.random((14, 15, 3), dtype=np.float32)
    b = rng.random((14, 15, 3), dtype=np.float32)
    v1, v2 = ssim(a, b), ssim(b, a)
    assert v1 == pytest.approx(v2, abs=1e-12)
    assert -1.0 <= v1 <= 1.0


def test_ssim_window_must_fit():
    with pytest.raises(ValueError, match="smaller than SSIM window"):
        ssim(np.zeros((8, 8, 3)), np.zeros((8, 8, 3)))  # default window 11


def test_ssim_matches_reference(rng):
    a = rng.random((16, 16, 3), dtype=np.float64)
    b = np.clip(a + rng.normal(0, 0.1, a.shape), 0, 1)
    assert ssim(a, b) == pytest.approx(ssim_reference(a, b), abs=1e-9)


def test_ssim_params_validation():
    with pytest.raises(ValueError):
        SsimParams(window_size=4)
    with pytest.raises(ValueError):
        SsimParams(k1=0.0)
    with pytest.raises(ValueError):
        SsimParams(dynamic_range=-1.0)


def test_miou_hand_example():
    # class 0: intersection 1, union 2 -> 1/2; class 1: intersection 2,
    # union 3 -> 2/3; mean = 7/12. Class 2 appears nowhere and is skipped.
    gt = np.array([[0, 0], [1, 1]], dtype=np.uint8)
    pred = np.array([[0, 1], [1, 1]], dtype=np.uint8)
    assert miou(pred, gt, class_count=3) == pytest.approx(7.0 / 12.0, abs=1e-12)


def test_miou_perfect_prediction(rng):
    gt = rng.integers(0, 5, size=(10, 10)).astype(np.uint8)
    assert miou(gt, gt, class_count=5) == pytest.approx(1.0)


def test_miou_ignore_index():
    gt = np.array([[0, 255], [255, 1]], dtype=np.uint8)
    pred = np.array([[0, 1], [0, 0]], dtype=np.uint8)
    # scored pixels are (0,0) and (1,1). class 0: intersection {(0,0)},
    # union {(0,0),(1,1)} -> 1/2; class 1: intersection 0, union {(1,1)} -> 0
    assert miou(pred, gt, class_count=3) == pytest.approx(0.25)


def test_miou_all_ignored_is_none():
    gt = np.full((4, 4), 255, dtype=np.uint8)
    assert miou(np.zeros((4, 4), dtype=np.uint8), gt) is None


def test_miou_matches_reference(rng):
    for _ in range(10):
        gt = rng.integers(0, 6, size=(12, 12)).astype(np.int64)
        gt[rng.random(gt.shape) < 0.1] = 255
        pred = rng.integers(0, 6, size=(12, 12)).astype(np.int64)
        assert miou(pred, gt, class_count=6) == pytest.approx(
            miou_reference(pred, gt, 6), abs=1e-12
        )


def test_confusion_matrix_counts():
    gt = np.array([[0, 1], [1, 1]], dtype=np.uint8)
    pred = np.array([[0, 1], [0, 1]], dtype=np.uint8)
    cm = ConfusionMatrix.from_maps(pred, gt, class_count=2)
    assert cm.counts.tolist() == [[1, 0], [1, 2]]
    assert cm.total() == 4


def test_confusion_matrix_rejects_out_of_range():
    with pytest.raises(ValueError, match="class_count"):
        ConfusionMatrix.from_maps(np.array([[9]]), np.array([[0]]), class_count=3)


# ---------------------------------------------------------------------------
# edges
# ---------------------------------------------------------------------------

def _step_image(size=32, column=16, lo=0.1, hi=0.9):
    img = np.full((size, size, 3), lo, dtype=np.float32)
    img[:, column:] = hi
    return img


def test_canny_constant_image_no_edges():
    out = edge_map(np.full((16, 16, 3), 0.5, dtype=np.float32))
    assert out.shape == (16, 16)
    assert not out.any()


def test_canny_step_edge_position_and_thinness():
    out = edge_map(_step_image(column=16))
    cols = np.unique(np.where(out[4:-4] > 0)[1])
    # a thin vertical response within a pixel of the true transition
    assert len(cols) >= 1
    assert all(14 <= c <= 17 for c in cols)
    assert len(cols) <= 2


def test_canny_binary_output(rng):
    out = edge_map(rng.random((24, 24, 3), dtype=np.float32))
    assert set(np.unique(out)).issubset({0.0, 1.0})


def test_canny_transpose_symmetry():
    vertical = edge_map(_step_image())
    horizontal = edge_map(np.transpose(_step_image(), (1, 0, 2)))
    assert np.array_equal(vertical, horizontal.T)


def test_canny_agrees_with_library_on_step_edge():
    # same family of detector (different NMS details), so compare the located
    # edge band rather than exact pixels
    skimage_feature = pytest.importorskip("skimage.feature")
    img = _step_image(column=12)
    ours = edge_map(img)
    theirs = skimage_feature.canny(
        img[:, :, 0].astype(np.float64), sigma=1.4, low_threshold=0.1, high_threshold=0.2,
        use_quantiles=False,
    )
    our_cols = np.unique(np.where(ours[4:-4] > 0)[1])
    their_cols = np.unique(np.where(theirs[4:-4])[1])
    assert len(our_cols) and len(their_cols)
    assert abs(float(our_cols.mean()) - float(their_cols.mean())) <= 1.5


def test_canny_hysteresis_drops_weak_isolated_response():
    img = _step_image(column=16, lo=0.4, hi=0.9)
    img[8, 4] += 0.02  # a faint blip far from the strong edge
    out = edge_map(np.clip(img, 0, 1))
    assert out[8, 4] == 0.0


def test_soft_edge_constant_zero_and_offset_invariance(rng):
    const = np.full((12, 12, 3), 0.3, dtype=np.float32)
    assert not edge_map(const, mode="training_soft").any()
    img = 0.1 + 0.6 * rng.random((12, 12, 3))
    e1 = edge_map(img.astype(np.float32), mode="training_soft")
    e2 = edge_map((img + 0.2).astype(np.float32), mode="training_soft")
    assert np.allclose(e1, e2, atol=1e-5)


def test_edge_map_rejects_unknown_mode():
    with pytest.raises(ValueError, match="unknown edge mode"):
        edge_map(np.zeros((8, 8, 3)), mode="sobel")


def test_edge_distance_frozen_value():
    a = np.zeros((1, 10, 10))
    b = np.full((1, 10, 10), 0.3)
    # sqrt(100 * 0.09) = 3
    assert edge_distance(a, b) == pytest.approx(3.0, abs=1e-12)


def test_edge_distance_metric_properties(rng):
    a = rng.random((6, 6))
    b = rng.random((6, 6))
    c = rng.random((6, 6))
    assert edge_distance(a, a) == 0.0
    assert edge_distance(a, b) == pytest.approx(edge_distance(b, a), abs=1e-12)
    assert edge_distance(a, c) <= edge_distance(a, b) + edge_distance(b, c) + 1e-12


def test_edge_distance_matches_reference(rng):
    a = rng.random((9, 9))
    b = rng.random((9, 9))
    assert edge_distance(a, b) == pytest.approx(edge_distance_reference(a, b), abs=1e-12)


# ---------------------------------------------------------------------------
# statistics and rows
# ---------------------------------------------------------------------------

def test_confidence_interval_frozen():
    mean, half = confidence_interval([1.0, 2.0, 3.0, 4.0, 5.0], level=0.95)
    assert mean == pytest.approx(3.0, abs=1e-12)
    assert half == pytest.approx(1.3859038243496777, abs=1e-12)


def test_confidence_interval_validation():
    with pytest.raises(ValueError, match="at least 2"):
        confidence_interval([1.0])
    with pytest.raises(ValueError, match="level"):
        confidence_interval([1.0, 2.0], level=1.5)


def test_format_parse_roundtrip():
    values = [None, math.inf, -math.inf, 0.1, 1.0 / 3.0, 7, "syn00001"]
    for v in values:
        assert parse_value(format_value(v)) == v


def test_float_repr_roundtrips_exactly():
    x = 0.1234567890123456789
    assert parse_value(format_value(x)) == x


def test_metric_rows_roundtrip(tmp_path):
    rows = [
        {"record_id": "a", "psnr_b": 20.5, "ssim_b": 0.97, "psnr_r": math.inf,
         "ssim_r": 0.5, "miou": None, "alpha": 0.3},
        {"record_id": "b", "psnr_b": 18.25, "ssim_b": 0.9, "psnr_r": 11.0,
         "ssim_r": 0.4, "miou": 0.75, "alpha": None},
    ]
    path = write_metric_rows(tmp_path / "m.tsv", rows)
    back = read_metric_rows(path)
    assert back == rows
