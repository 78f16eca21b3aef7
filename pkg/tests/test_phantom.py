import json
from dataclasses import replace

import numpy as np
import pytest

from fdp.analysis import cohort_consistency
from fdp.config import PhantomConfig
from fdp.errors import ArtifactError, DegenerateLesionError, LesionPlacementError
from fdp.phantom import (
    band_limited_field,
    ellipsoid_mask,
    gen_dataset,
    gen_healthy,
    gen_sample,
    inject_lesion,
    load_dataset,
    read_manifest,
    regenerate,
)
from fdp.spectral import build_filter, dft2_centered


@pytest.fixture
def single_bump():
    return PhantomConfig(dims=(16, 64, 64), lesion_count=(1, 1), lesion_radius=(6.0, 6.0))


def test_same_seed_same_volume(small_phantom):
    a = gen_healthy(small_phantom, 5)
    b = gen_healthy(small_phantom, 5)
    c = gen_healthy(small_phantom, 6)
    assert np.array_equal(a.volume.voxels, b.volume.voxels)
    assert not np.array_equal(a.volume.voxels, c.volume.voxels)


def test_healthy_sample_is_valid(small_phantom):
    sample = gen_healthy(small_phantom, 1)
    assert sample.healthy
    assert sample.volume.dims == (12, 32, 32)
    assert sample.volume.voxels.min() >= 0 and sample.volume.voxels.max() <= 1
    assert np.array_equal(sample.volume.mask, sample.brain_mask)
    assert all(sample.brain_mask[z].any() for z in range(12))


def test_mask_is_the_analytic_ellipsoid():
    dims, axes = (6, 20, 16), (1.5, 0.4, 0.34)
    mask = ellipsoid_mask(dims, axes)
    for z, y, x in np.ndindex(*dims):
        inside = sum(((i - (n - 1) / 2) / (a * n)) ** 2 for i, n, a in zip((z, y, x), dims, axes)) <= 1
        assert mask[z, y, x] == inside


def test_band_limited_field_spectrum(rng):
    field = band_limited_field((32, 32), 4, rng)
    assert field.mean() == pytest.approx(0, abs=1e-12)
    assert field.std() == pytest.approx(1)

    spectrum = np.abs(dft2_centered(field))
    outside = build_filter(32, 32, 4 / 32).pass_mask
    assert spectrum[outside].max() < 1e-9


def test_untextured_slices_keep_energy_at_low_frequencies():
    config = PhantomConfig(dims=(4, 64, 64), texture_amplitude=0.0)
    disk = build_filter(64, 64, (config.band_limit + 1) / 64).stop_mask
    sample = gen_healthy(config, 3)
    for s in sample.volume.slices():
        energy = np.abs(dft2_centered(s)) ** 2
        assert energy[disk].sum() >= 0.99 * energy.sum()


def test_single_bump_lesion_size(single_bump):
    lesioned = inject_lesion(gen_healthy(single_bump, 0), seed=4)
    assert len(lesioned.lesions) == 1

    # added value > contrast / 4  <=>  distance < sigma * sqrt(2 ln 4)
    level = 3.0 * np.sqrt(2 * np.log(4))
    analytic = 4 / 3 * np.pi * level ** 3
    assert abs(lesioned.lesion_mask.sum() - analytic) <= 0.2 * analytic


def test_lesion_energy_is_low_frequency(single_bump):
    healthy = gen_healthy(single_bump, 2)
    lesioned = inject_lesion(healthy, seed=2)
    z = lesioned.lesions[0][0]

    diff = lesioned.volume.slice(z).astype(np.float64) - healthy.volume.slice(z)
    energy = np.abs(dft2_centered(diff)) ** 2
    disk = build_filter(64, 64, 0.2).stop_mask
    assert energy[disk].sum() >= 0.9 * energy.sum()


@pytest.mark.parametrize('seed', range(10))
def test_lesions_stay_inside_the_brain(small_phantom, seed):
    lesioned = inject_lesion(gen_healthy(small_phantom, seed), seed)
    assert lesioned.lesion_mask.any()
    assert not np.any(lesioned.lesion_mask & ~lesioned.brain_mask)
    assert 1 <= len(lesioned.lesions) <= 3
    assert 0 < lesioned.lesion_mask.mean() < 0.05
    assert lesioned.volume.voxels.min() >= 0 and lesioned.volume.voxels.max() <= 1


def test_pinned_lesions(small_phantom):
    lesioned = inject_lesion(gen_healthy(small_phantom, 0), seed=1, slice_index=6)
    assert all(z == 6 for z, *_ in lesioned.lesions)
    assert lesioned.lesion_mask[6].any()


def test_zero_contrast_is_rejected(small_phantom):
    flat = replace(small_phantom, lesion_contrast=0.0)
    with pytest.raises(DegenerateLesionError, match='degenerate lesion'):
        inject_lesion(gen_healthy(flat, 0), seed=0)


def test_lesion_too_large_for_the_brain():
    config = PhantomConfig(dims=(12, 32, 32), lesion_radius=(9.0, 10.0))
    with pytest.raises(LesionPlacementError):
        inject_lesion(gen_healthy(config, 0), seed=0)


def test_only_healthy_samples_take_lesions(small_phantom):
    lesioned = gen_sample(small_phantom, 'val', 3)
    assert not lesioned.healthy
    with pytest.raises(ValueError):
        inject_lesion(lesioned, seed=1)


def test_healthy_cohort_is_more_consistent():
    config = PhantomConfig()
    healthy = [s for seed in range(3) for s in gen_healthy(config, seed).volume.slices()]
    lesioned = [s for seed in range(100, 104) for s in gen_sample(config, 'test', seed).volume.slices()]
    stats = cohort_consistency(healthy, lesioned, m=0.10)
    assert stats['healthy'] <= 0.5 * stats['lesioned']


def test_dataset_layout(tmp_path, small_phantom):
    path = gen_dataset(small_phantom, 7, 3, 2, 2, tmp_path / 'data')
    manifest = json.loads(path.read_text())

    assert manifest['version'] == 1 and manifest['cohort_seed'] == 7
    assert [e['role'] for e in manifest['entries']] == ['train'] * 3 + ['val'] * 2 + ['test'] * 2
    assert len({e['seed'] for e in manifest['entries']}) == 7
    for entry in manifest['entries']:
        assert (tmp_path / 'data' / entry['path']).exists()
        assert ('lesion_path' in entry) == (entry['role'] != 'train')


def test_dataset_roundtrip(tmp_path, small_phantom):
    gen_dataset(small_phantom, 7, 2, 1, 1, tmp_path / 'data')
    dataset = load_dataset(tmp_path / 'data')

    assert [len(dataset[role]) for role in ('train', 'val', 'test')] == [2, 1, 1]
    assert all(s.healthy for s in dataset['train'])
    assert not any(s.healthy for s in dataset['val'] + dataset['test'])
    assert dataset['val'][0].config.seed == 7

    expected = gen_sample(dataset['val'][0].config, 'val', dataset['val'][0].seed)
    assert np.array_equal(dataset['val'][0].lesion_mask, expected.lesion_mask)


def test_regeneration_is_byte_identical(tmp_path, small_phantom):
    first = gen_dataset(small_phantom, 3, 2, 1, 1, tmp_path / 'a', threads=2)
    regenerate(first, tmp_path / 'b', threads=1)
    for f in sorted((tmp_path / 'a').iterdir()):
        assert f.read_bytes() == (tmp_path / 'b' / f.name).read_bytes()


def test_manifest_errors(tmp_path, small_phantom):
    with pytest.raises(ArtifactError):
        read_manifest(tmp_path)
    (tmp_path / 'manifest.json').write_text('{"version": 9}')
    with pytest.raises(ArtifactError):
        read_manifest(tmp_path)
    with pytest.raises(ValueError):
        gen_dataset(small_phantom, 0, 1, 0, 1, tmp_path / 'data')
