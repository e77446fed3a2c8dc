import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dlebm.biomarkers import volume_table, welch_pvalues
from dlebm.synthgen import (BASELINE, SynthConfig, head_mask, load_cohort, make_atlas, make_cohort,
                            sample_subject, save_cohort)

SMALL = dict(dims=(12, 14, 12), n_regions=6)


def test_atlas_two_regions_partition_mask():
    cfg = SynthConfig(dims=(10, 10, 10), n_regions=2)
    a = make_atlas(cfg)
    lab = a.labels.data
    mask = head_mask(cfg.dims, cfg.head_fraction)
    assert set(np.unique(lab[mask])) == {1.0, 2.0}
    assert np.all(lab[~mask] == 0)
    assert sum((lab == r).sum() for r in (1, 2)) == mask.sum()


def test_atlas_deterministic_and_seed_dependent():
    a = make_atlas(SynthConfig(**SMALL, seed=3)).labels.data
    b = make_atlas(SynthConfig(**SMALL, seed=3)).labels.data
    c = make_atlas(SynthConfig(**SMALL, seed=4)).labels.data
    assert np.array_equal(a, b) and not np.array_equal(a, c)


def test_atlas_too_many_regions():
    cfg = SynthConfig(dims=(8, 8, 8), n_regions=2)
    cfg.n_regions = int(head_mask(cfg.dims).sum()) + 1
    with pytest.raises(ValueError):
        make_atlas(cfg)


@settings(max_examples=10)
@given(st.integers(2, 12), st.integers(0, 1000))
def test_atlas_regions_cover_mask(m, seed):
    cfg = SynthConfig(dims=(10, 12, 10), n_regions=m, seed=seed)
    lab = make_atlas(cfg).labels.data
    counts = np.bincount(lab.astype(int).ravel(), minlength=m + 1)
    assert np.all(counts[1:] > 0)
    assert counts[1:].sum() == head_mask(cfg.dims).sum()


def test_config_validation():
    with pytest.raises(ValueError):
        SynthConfig(dims=(4, 10, 10))
    with pytest.raises(ValueError):
        SynthConfig(effects=[(17, 0.4)])
    with pytest.raises(ValueError):
        SynthConfig(interactions=[(2, 2)])
    assert SynthConfig.from_dict(SynthConfig(effects=[(1, 0.2)]).to_dict()) == SynthConfig(effects=[(1, 0.2)])


def test_null_model_classes_match_up_to_scale():
    cfg = SynthConfig(**SMALL, noise_sd=0.0)
    atlas = make_atlas(cfg)
    a = sample_subject(cfg, atlas, 0, np.random.default_rng(1))
    b = sample_subject(cfg, atlas, 1, np.random.default_rng(1))
    assert np.array_equal(a.volume.data, b.volume.data)
    c = sample_subject(cfg, atlas, 1, np.random.default_rng(2))
    mask = atlas.mask()
    assert np.allclose(c.volume.data[mask] / c.scale, BASELINE) and np.all(c.volume.data[~mask] == 0)


def test_half_reduction_exact():
    cfg = SynthConfig(**SMALL, noise_sd=0.0, effects=[(2, 0.5)])
    atlas = make_atlas(cfg)
    neg = sample_subject(cfg, atlas, 0, np.random.default_rng(7))
    pos = sample_subject(cfg, atlas, 1, np.random.default_rng(7))
    assert neg.scale == pos.scale
    r = atlas.region_mask(2)
    assert pos.volume.data[r].mean() == 0.5 * neg.volume.data[r].mean()
    assert np.array_equal(pos.volume.data[~r], neg.volume.data[~r])


def test_interaction_hit_rule():
    cfg = SynthConfig(**SMALL, noise_sd=0.0, interactions=[(1, 2)], hit_probability=0.5)
    atlas = make_atlas(cfg)
    seen = set()
    for s in range(40):
        neg = sample_subject(cfg, atlas, 0, np.random.default_rng(s))
        pos = sample_subject(cfg, atlas, 1, np.random.default_rng(s))
        ha, hb = pos.hits[0]
        seen.add((ha, hb))
        ratio1 = pos.volume.data[atlas.region_mask(1)].mean() / neg.volume.data[atlas.region_mask(1)].mean()
        assert ratio1 == pytest.approx(0.6 if ha and hb else 1.0, abs=1e-12)
        assert neg.hits == [(False, False)]
    assert seen == {(False, False), (False, True), (True, False), (True, True)}


@settings(max_examples=10)
@given(st.integers(0, 1000), st.floats(0.0, 2.0))
def test_values_clamped(seed, sd):
    cfg = SynthConfig(**SMALL, noise_sd=sd, effects=[(1, 0.3)])
    v = sample_subject(cfg, make_atlas(cfg), seed % 2, np.random.default_rng(seed)).volume.data
    assert v.min() >= 0.0 and v.max() <= 1.0


def test_cohort_size_and_determinism():
    cfg = SynthConfig(**SMALL, n_per_class=10, effects=[(1, 0.3)])
    a, b = make_cohort(cfg), make_cohort(cfg)
    assert len(a) == 20 and a.labels.sum() == 10
    assert all(np.array_equal(x.data, y.data) for x, y in zip(a.volumes, b.volumes))
    assert np.array_equal(a.icv, b.icv)
    mask_n = a.atlas.mask().sum()
    assert np.all((a.icv >= 0.9 * mask_n) & (a.icv <= 1.1 * mask_n))


def test_label_noise_flips():
    cfg = SynthConfig(**SMALL, n_per_class=100, label_noise=0.2)
    c = make_cohort(cfg)
    flipped = np.mean(c.labels != c.true_labels)
    assert 0.1 < flipped < 0.3


def test_planted_effect_detectable():
    cfg = SynthConfig(n_per_class=60, effects=[(3, 0.4)], noise_sd=0.05, seed=0)
    c = make_cohort(cfg)
    t = volume_table(c.volumes, c.labels, c.icv, c.atlas)
    p = welch_pvalues(t.data.features, c.labels)
    assert p[2] < 1e-6
    assert int(np.argmin(p)) == 2


def test_save_load_roundtrip(tmp_path):
    cfg = SynthConfig(**SMALL, n_per_class=3, interactions=[(1, 2)])
    c = make_cohort(cfg)
    save_cohort(c, tmp_path / "co")
    d = load_cohort(tmp_path / "co")
    assert d.ids == c.ids and np.array_equal(d.labels, c.labels) and np.array_equal(d.icv, c.icv)
    assert all(np.array_equal(x.data, y.data) for x, y in zip(c.volumes, d.volumes))
    assert np.array_equal(d.atlas.labels.data, c.atlas.labels.data) and d.config == c.config
