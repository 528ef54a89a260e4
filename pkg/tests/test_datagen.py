import numpy as np
import pytest

from semrr.data import DatasetManifest, load_image
from semrr.datagen import (
    AlphaSampler,
    BlendSpec,
    alpha_sweep,
    blend,
    derive_reflection,
    parse_alpha_list,
    random_crop,
    synthesize_dataset,
)


def test_blend_matches_formula(rng):
    b = rng.random((6, 6, 3), dtype=np.float32)
    r = rng.random((6, 6, 3), dtype=np.float32)
    out = blend(b, r, 0.3)
    assert out.dtype == np.float32
    assert np.allclose(out, 0.7 * b + 0.3 * r, atol=1e-7)


def test_blend_convex_combination_stays_in_range(rng):
    b = rng.random((6, 6, 3), dtype=np.float32)
    r = rng.random((6, 6, 3), dtype=np.float32)
    for alpha in (0.0, 0.25, 1.0):
        out = blend(b, r, alpha)
        assert out.min() >= 0.0 and out.max() <= 1.0


def test_blend_input_validation(rng):
    b = rng.random((6, 6, 3), dtype=np.float32)
    with pytest.raises(ValueError, match="dimension mismatch"):
        blend(b, b[:4], 0.5)
    with pytest.raises(ValueError, match="alpha"):
        blend(b, b, 1.2)


def test_derive_reflection_clamps(rng):
    mixed = rng.random((5, 5, 3), dtype=np.float32)
    background = rng.random((5, 5, 3), dtype=np.float32)
    out = derive_reflection(mixed, background)
    assert np.allclose(out, np.clip(mixed - background, 0.0, 1.0), atol=1e-7)
    assert out.min() >= 0.0


def test_blend_spec_validation():
    BlendSpec(alpha=0.5, crop_size=8)
    with pytest.raises(ValueError):
        BlendSpec(alpha=-0.1)
    with pytest.raises(ValueError):
        BlendSpec(alpha=0.5, crop_size=0)


def test_alpha_sampler_parse_and_sample(rng):
    fixed = AlphaSampler.parse("fixed:0.3")
    assert fixed.sample(rng) == 0.3
    uniform = AlphaSampler.parse("uniform:0.2:0.4")
    draws = [uniform.sample(rng) for _ in range(50)]
    assert all(0.2 <= a <= 0.4 for a in draws)
    assert len(set(draws)) > 1


@pytest.mark.parametrize("spec", ["fixed", "uniform:0.1", "gauss:0:1", "fixed:2.0", "uniform:0.9:0.1"])
def test_alpha_sampler_rejects_bad_specs(spec):
    with pytest.raises(ValueError):
        AlphaSampler.parse(spec)


def test_parse_alpha_list_inclusive_grid():
    alphas = parse_alpha_list("sweep:0.1:0.9:0.1")
    assert len(alphas) == 9
    assert alphas[0] == 0.1 and alphas[-1] == 0.9
    assert np.allclose(np.diff(alphas), 0.1)


def test_parse_alpha_list_rejects_bad_specs():
    with pytest.raises(ValueError):
        parse_alpha_list("sweep:0.1:0.9")
    with pytest.raises(ValueError):
        parse_alpha_list("sweep:0.5:1.5:0.5")


def test_random_crop_deterministic_and_aligned(rng):
    image = rng.random((20, 30, 3), dtype=np.float32)
    label = rng.integers(0, 5, size=(20, 30)).astype(np.uint8)
    img1, lab1 = random_crop(image, label, 8, seed=[1, 2])
    img2, lab2 = random_crop(image, label, 8, seed=[1, 2])
    assert np.array_equal(img1, img2) and np.array_equal(lab1, lab2)
    # the label window tracks the image window
    ys, xs = np.where(np.all(image == img1[0, 0], axis=-1))
    top, left = int(ys[0]), int(xs[0])
    assert np.array_equal(label[top : top + 8, left : left + 8], lab1)


def test_random_crop_too_small(rng):
    with pytest.raises(ValueError, match="smaller than crop"):
        random_crop(rng.random((4, 4, 3), dtype=np.float32), None, 8, seed=0)


def test_synthesize_dataset_contents(dataset):
    assert len(dataset) == 8
    ids = [r.record_id for r in dataset.records]
    assert ids == [f"syn{i:05d}" for i in range(8)]
    for rec in dataset.records:
        assert 0.2 <= rec.alpha <= 0.6
        assert rec.background_id and rec.reflection_id and rec.pair_id
        quad = dataset.load_quadruple(rec)
        assert quad.mixed.shape == (32, 32, 3)


def test_synthesize_dataset_deterministic(tmp_path, toy_sources):
    backgrounds, reflections = toy_sources
    sampler = AlphaSampler(kind="uniform", low=0.2, high=0.6)
    m1 = synthesize_dataset(backgrounds, reflections, 4, sampler, 7, tmp_path / "a", crop_size=24)
    m2 = synthesize_dataset(backgrounds, reflections, 4, sampler, 7, tmp_path / "b", crop_size=24)
    assert (tmp_path / "a" / "manifest.json").read_bytes() == (tmp_path / "b" / "manifest.json").read_bytes()
    rec = m1.records[2]
    assert (tmp_path / "a" / rec.mixed).read_bytes() == (tmp_path / "b" / rec.mixed).read_bytes()
    assert [r.alpha for r in m1.records] == [r.alpha for r in m2.records]


def test_synthesize_dataset_per_record_streams(tmp_path, toy_sources):
    # records are a pure function of (seed, index): a shorter run is a prefix
    backgrounds, reflections = toy_sources
    sampler = AlphaSampler(kind="uniform", low=0.2, high=0.6)
    m_long = synthesize_dataset(backgrounds, reflections, 5, sampler, 7, tmp_path / "long", crop_size=24)
    m_short = synthesize_dataset(backgrounds, reflections, 3, sampler, 7, tmp_path / "short", crop_size=24)
    for a, b in zip(m_short.records, m_long.records[:3]):
        assert a.alpha == b.alpha and a.background_id == b.background_id
        assert (tmp_path / "short" / a.mixed).read_bytes() == (tmp_path / "long" / b.mixed).read_bytes()


def test_synthesize_dataset_requires_labeled_backgrounds(tmp_path, toy_sources):
    backgrounds, reflections = toy_sources
    unlabeled = [type(b)(source_id=b.source_id, image=b.image, label=None) for b in backgrounds]
    with pytest.raises(ValueError, match="no semantic label"):
        synthesize_dataset(unlabeled, reflections, 2, AlphaSampler(), 0, tmp_path, crop_size=16)


def test_sweep_shares_layers_within_pair(sweep_manifest):
    assert len(sweep_manifest) == 9  # 3 pairs x 3 alphas
    by_pair = {}
    for rec in sweep_manifest.records:
        by_pair.setdefault(rec.pair_id, []).append(rec)
    assert len(by_pair) == 3
    for pair_records in by_pair.values():
        assert len(pair_records) == 3
        # one shared background/reflection/label per pair, distinct mixed images
        assert len({r.background for r in pair_records}) == 1
        assert len({r.semantic for r in pair_records}) == 1
        assert len({r.mixed for r in pair_records}) == 3
        alphas = sorted(r.alpha for r in pair_records)
        assert alphas == [0.2, 0.5, 0.8]


def test_sweep_mixed_follows_alpha(sweep_manifest):
    recs = [r for r in sweep_manifest.records if r.pair_id == "p00000"]
    background = load_image(sweep_manifest.resolve(recs[0].background))
    reflection = load_image(sweep_manifest.resolve(recs[0].reflection))
    for rec in recs:
        mixed = load_image(sweep_manifest.resolve(rec.mixed))
        expected = (1 - rec.alpha) * background + rec.alpha * reflection
        assert np.max(np.abs(mixed - expected)) <= 1.5 / 255.0


def test_sweep_validates_inputs(tmp_path, toy_sources):
    backgrounds, reflections = toy_sources
    with pytest.raises(ValueError, match="pairs"):
        alpha_sweep(backgrounds, reflections, 0, [0.5], 0, tmp_path)
    with pytest.raises(ValueError, match="alphas"):
        alpha_sweep(backgrounds, reflections, 1, [], 0, tmp_path)
