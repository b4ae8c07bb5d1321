import hashlib
import json
from dataclasses import replace

import numpy as np
import pytest

from sarfuse.data import load_scene, read_manifest
from sarfuse.synth import CLASS_NAMES, DEFAULT_CLASSES, CoverClass, SynthConfig, class_map, generate_benchmark, generate_scene


def per_class_means(cfg):
    labels = class_map(cfg)
    s = generate_scene(cfg)
    return {name: (s.vv[labels == i].mean(), s.vh[labels == i].mean()) for i, name in enumerate(CLASS_NAMES)}


def test_large_looks_limit():
    cfg = SynthConfig(looks=10**6, seed=1)
    for c in DEFAULT_CLASSES:
        vv, vh = per_class_means(cfg)[c.name]
        assert abs(vv / c.mean_vv - 1) < 0.005 and abs(vh / c.mean_vh - 1) < 0.005


def test_speckle_mean_at_four_looks():
    cfg = SynthConfig(height=512, width=512, seed=2)
    for c in DEFAULT_CLASSES:
        vv, vh = per_class_means(cfg)[c.name]
        assert abs(vv / c.mean_vv - 1) < 0.03 and abs(vh / c.mean_vh - 1) < 0.03


def test_speckle_unit_mean_gamma_shape():
    cfg = SynthConfig(height=512, width=512, seed=4, looks=4)
    labels = class_map(cfg)
    s = generate_scene(cfg)
    g = s.vv[labels == 1] / DEFAULT_CLASSES[1].mean_vv
    # gamma(L, 1/L): variance 1/L
    assert abs(g.var() - 0.25) < 0.01


def test_mask_is_flooded_union():
    cfg = SynthConfig(height=128, width=128, seed=5)
    labels = class_map(cfg)
    flooded = np.isin(labels, [CLASS_NAMES.index("open_water"), CLASS_NAMES.index("flooded_vegetation")])
    np.testing.assert_array_equal(generate_scene(cfg).mask, flooded.astype(np.uint8))


def test_all_classes_present_and_fractions_exact():
    cfg = SynthConfig(seed=6)
    labels = class_map(cfg)
    assert set(np.unique(labels)) == {0, 1, 2, 3}
    assert generate_scene(cfg).mask.sum() == round(0.35 * labels.size)


def test_determinism():
    a, b = generate_scene(SynthConfig(seed=9)), generate_scene(SynthConfig(seed=9))
    assert a.vv.tobytes() == b.vv.tobytes() and a.vh.tobytes() == b.vh.tobytes()
    assert a.mask.tobytes() == b.mask.tobytes()
    assert generate_scene(SynthConfig(seed=10)).vv.tobytes() != a.vv.tobytes()


def test_frozen_digest():
    # guards against silent changes to the generator or its random source
    s = generate_scene(SynthConfig(height=64, width=64, seed=0))
    assert (s.vv.dtype, s.vh.dtype, s.mask.dtype) == (np.float32, np.float32, np.uint8)
    assert int(s.mask.sum()) == round(0.35 * 64 * 64)
    digest = hashlib.sha256(s.vv.tobytes() + s.vh.tobytes() + s.mask.tobytes()).hexdigest()
    assert digest == "5b5a6574acd10d9206d27221dd6245df131d69df78c50c4601f71edc421ccaaa"


def _bayes_error(a, b, bins=40):
    """Histogram-overlap estimate of the two-class Bayes error at equal priors."""
    lo, hi = np.minimum(a.min(0), b.min(0)), np.maximum(a.max(0), b.max(0))
    edges = [np.linspace(l, h, bins + 1) for l, h in zip(lo, hi)]
    ha, _ = np.histogramdd(a, edges)
    hb, _ = np.histogramdd(b, edges)
    return 0.5 * np.minimum(ha / len(a), hb / len(b)).sum()


@pytest.fixture(scope="module")
def samples():
    # independent sampler: numpy's generator, not the package's stream
    r = np.random.default_rng(7)
    n = 100_000
    return {c.name: np.log(np.stack([c.mean_vv * r.gamma(4, 0.25, n), c.mean_vh * r.gamma(4, 0.25, n)], 1))
            for c in DEFAULT_CLASSES}


def _errors(samples, a, b):
    return [_bayes_error(samples[a][:, d], samples[b][:, d]) for d in ([0], [1], [0, 1])]


def test_open_water_separable_in_vv(samples):
    vv, vh, joint = _errors(samples, "open_water", "dry_land")
    assert vv < 0.06 and joint < 0.01


def test_flooded_vegetation_hides_in_vv(samples):
    vv, vh, joint = _errors(samples, "flooded_vegetation", "dry_land")
    assert vv > 0.45 and vh < 0.2
    c = {c.name: c for c in DEFAULT_CLASSES}
    assert abs(c["flooded_vegetation"].mean_vv / c["dry_land"].mean_vv - 1) < 0.10


def test_flooded_vs_dry_forest_needs_both(samples):
    vv, vh, joint = _errors(samples, "flooded_vegetation", "dry_forest")
    assert vv > 0.4 and vh > 0.4
    assert joint < min(vv, vh) - 0.01


def test_benchmark_layout(tmp_path):
    cfg = SynthConfig(height=64, width=64)
    manifest = generate_benchmark(cfg, 10, tmp_path)
    rows = read_manifest(manifest)
    assert len(rows) == 10 and len(list(tmp_path.glob("*.json"))) == 11  # 10 sidecars + synth_config
    scenes = [load_scene(tmp_path / r.path) for r in rows]
    assert len({s.vv.tobytes() for s in scenes}) == 10
    assert json.loads((tmp_path / "synth_config.json").read_text())["looks"] == 4


def test_default_benchmark_flood_fraction(tmp_path):
    manifest = generate_benchmark(SynthConfig(), 10, tmp_path)
    masks = [load_scene(tmp_path / r.path).mask for r in read_manifest(manifest)]
    frac = np.mean([m.mean() for m in masks])
    assert 0.15 <= frac <= 0.55


def test_benchmark_needs_two_scenes(tmp_path):
    with pytest.raises(ValueError):
        generate_benchmark(SynthConfig(), 1, tmp_path)


def test_unwritable_destination(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        generate_benchmark(SynthConfig(height=64, width=64), 2, blocker / "sub")


@pytest.mark.parametrize("kwargs", [dict(looks=0), dict(looks=2.5), dict(height=100), dict(flood_fraction=1.5),
                                    dict(smoothness=0)])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        SynthConfig(**kwargs)


def test_cover_class_validation():
    with pytest.raises(ValueError):
        CoverClass("dry_land", 0.06, 0.0, False)
    with pytest.raises(ValueError):
        CoverClass("dry_land", 0.06, 0.01, True)
    with pytest.raises(ValueError):
        SynthConfig(classes=DEFAULT_CLASSES[:3])
    custom = replace(SynthConfig(), classes=(CoverClass("open_water", 0.02, 0.004, True),) + DEFAULT_CLASSES[1:])
    assert custom.class_by_name("open_water").mean_vv == 0.02
