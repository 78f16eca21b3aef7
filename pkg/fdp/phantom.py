from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import json
import logging

import numpy as np
from scipy.ndimage import distance_transform_edt, gaussian_filter

from .config import PhantomConfig
from .errors import ArtifactError, DegenerateLesionError, LesionPlacementError
from .utils import parallel_map
from .volume import Volume, read_volume, write_volume

logger = logging.getLogger(__name__)

MANIFEST_VERSION = 1
MANIFEST_NAME = 'manifest.json'
ROLES = ('train', 'val', 'test')
PLACEMENT_TRIES = 100
LESION_STREAM = 1


@dataclass(frozen=True, eq=False)
class PhantomSample:
    volume: Volume
    brain_mask: np.ndarray
    lesion_mask: np.ndarray
    seed: int
    config: PhantomConfig
    # (z, y, x, radius) of every injected bump
    lesions: Tuple[Tuple[int, int, int, float], ...] = ()

    @property
    def healthy(self) -> bool:
        return not self.lesion_mask.any()


def ellipsoid_mask(dims: Tuple[int, int, int], axes: Tuple[float, float, float]) -> np.ndarray:
    '''
    Voxels with sum(((i - c) / a)^2) <= 1, centred on the grid, semi-axes
    a given as fractions of the dims.
    '''
    grids = np.meshgrid(*[np.arange(n, dtype=np.float64) for n in dims], indexing='ij')
    total = np.zeros(dims)
    for g, n, frac in zip(grids, dims, axes):
        total += ((g - (n - 1) / 2) / (frac * n)) ** 2
    return total <= 1


def band_limited_field(shape: Tuple[int, ...], band_limit: float, rng: np.random.Generator) -> np.ndarray:
    '''
    Zero-mean random field with unit std whose spectrum is a Gaussian
    envelope exp(-(k / b)^2) truncated at b cycles.
    '''
    freqs = np.meshgrid(*[np.fft.fftfreq(n) * n for n in shape], indexing='ij')
    radius = np.sqrt(sum(f ** 2 for f in freqs))
    envelope = np.exp(-(radius / band_limit) ** 2) * (radius <= band_limit)
    envelope[(0,) * len(shape)] = 0

    coeffs = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    field = np.fft.ifftn(coeffs * envelope).real
    std = field.std()
    return field / std if std > 0 else field


def texture_noise(
    dims: Tuple[int, int, int],
    band_limit: float,
    amplitude: float,
    mask: np.ndarray,
    rng: np.random.Generator,
) -> np.ndarray:
    '''
    White noise with every in-plane frequency up to b + 1 cycles removed,
    kept inside the mask and scaled there to std = amplitude.
    '''
    noise = rng.standard_normal(dims)
    if amplitude == 0 or not mask.any():
        return np.zeros(dims)

    _, h, w = dims
    ky, kx = np.meshgrid(np.fft.fftfreq(h) * h, np.fft.fftfreq(w) * w, indexing='ij')
    keep = np.sqrt(ky ** 2 + kx ** 2) > band_limit + 1

    noise = np.fft.ifft2(np.fft.fft2(noise, axes=(1, 2)) * keep, axes=(1, 2)).real
    noise = noise * mask
    std = noise[mask].std()
    return noise * (amplitude / std) if std > 0 else noise


def cohort_pattern(config: PhantomConfig) -> np.ndarray:
    '''
    In-plane base pattern shared by every sample of a cohort; constant along z.
    '''
    rng = np.random.default_rng(config.seed)
    _, h, w = config.dims
    return config.base_level + config.base_amplitude * band_limited_field((h, w), config.band_limit, rng)


def gen_healthy(config: PhantomConfig, seed: int) -> PhantomSample:
    '''
    Healthy phantom: the cohort base pattern plus a per-sample band-limited
    field on a softened ellipsoidal support, plus high-frequency texture,
    clamped to [0, 1].

    Parameters:
    config: The phantom configuration (config.seed is the cohort seed)
    seed: The per-sample seed
    '''
    rng = np.random.default_rng(seed)
    dims = tuple(config.dims)

    brain = ellipsoid_mask(dims, config.brain_axes)
    support = gaussian_filter(brain.astype(np.float64), sigma=(0, config.edge_sigma, config.edge_sigma))

    field = config.field_amplitude * band_limited_field(dims, config.band_limit, rng)
    texture = texture_noise(dims, config.band_limit, config.texture_amplitude, brain, rng)

    voxels = (cohort_pattern(config)[None] + field) * support + texture
    volume = Volume(np.clip(voxels, 0, 1), mask=brain)
    return PhantomSample(volume, brain, np.zeros(dims, dtype=bool), seed, config)


def _lesion_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng([seed, LESION_STREAM])


def _place(
    inside: np.ndarray,
    config: PhantomConfig,
    rng: np.random.Generator,
    slice_index: Optional[int],
) -> Tuple[Tuple[int, int, int], float]:
    for _ in range(PLACEMENT_TRIES):
        radius = float(rng.uniform(*config.lesion_radius))
        valid = inside > radius
        if slice_index is not None:
            pinned = np.zeros_like(valid)
            pinned[slice_index] = valid[slice_index]
            valid = pinned

        candidates = np.flatnonzero(valid)
        if candidates.size:
            centre = np.unravel_index(candidates[rng.integers(candidates.size)], valid.shape)
            return tuple(int(c) for c in centre), radius

    raise LesionPlacementError(f'cannot place a lesion inside the brain after {PLACEMENT_TRIES} tries')


def inject_lesion(
    sample: PhantomSample,
    seed: int,
    config: Optional[PhantomConfig] = None,
    slice_index: Optional[int] = None,
) -> PhantomSample:
    '''
    Adds Gaussian bumps (sigma = radius / 2, amplitude = contrast) whose
    radius-balls lie inside the brain. The lesion mask holds the voxels where
    the added value exceeds a quarter of the contrast.

    Parameters:
    sample: A healthy phantom
    seed: The lesion seed
    config: Overrides the sample's configuration (count, radii, contrast)
    slice_index: Pins every bump centre to this slice
    '''
    config = config or sample.config
    if config.lesion_contrast == 0:
        raise DegenerateLesionError('degenerate lesion: zero contrast leaves the volume unchanged')
    if not sample.healthy:
        raise ValueError('inject_lesion expects a healthy sample')

    rng = _lesion_rng(seed)
    dims = sample.volume.dims
    grids = np.meshgrid(*[np.arange(n, dtype=np.float64) for n in dims], indexing='ij')

    # zero padding makes the volume border count as outside the brain
    padded = np.pad(sample.brain_mask, 1)
    inside = distance_transform_edt(padded)[1:-1, 1:-1, 1:-1]

    added = np.zeros(dims)
    lesions = []
    for _ in range(rng.integers(config.lesion_count[0], config.lesion_count[1] + 1)):
        centre, radius = _place(inside, config, rng, slice_index)
        sigma = radius / 2
        distance2 = sum((g - c) ** 2 for g, c in zip(grids, centre))
        added += config.lesion_contrast * np.exp(-distance2 / (2 * sigma ** 2))
        lesions.append((*centre, radius))

    lesion_mask = (np.abs(added) > abs(config.lesion_contrast) / 4) & sample.brain_mask
    voxels = np.clip(sample.volume.voxels.astype(np.float64) + added, 0, 1)
    logger.debug(f'inject_lesion: {len(lesions)} bumps, {int(lesion_mask.sum())} lesion voxels')

    return replace(
        sample,
        volume=sample.volume.with_voxels(voxels),
        lesion_mask=lesion_mask,
        lesions=tuple(lesions),
    )


def gen_sample(config: PhantomConfig, role: str, seed: int) -> PhantomSample:
    sample = gen_healthy(config, seed)
    if role == 'train':
        return sample
    return inject_lesion(sample, seed)


def _entry_seeds(cohort_seed: int, n: int) -> List[int]:
    children = np.random.SeedSequence(cohort_seed).spawn(n)
    return [int(child.generate_state(1)[0]) for child in children]


def _write_entry(out: Path, config: PhantomConfig, entry: dict) -> None:
    sample = gen_sample(config, entry['role'], entry['seed'])
    write_volume(sample.volume, out / entry['path'])
    if entry.get('lesion_path'):
        write_volume(Volume(sample.lesion_mask.astype(np.float32)), out / entry['lesion_path'])


def _write_manifest(out: Path, config: PhantomConfig, entries: List[dict], threads: Optional[int]) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    parallel_map(lambda entry: _write_entry(out, config, entry), entries, threads)

    manifest = {
        'version': MANIFEST_VERSION,
        'cohort_seed': config.seed,
        'config': asdict(config),
        'entries': entries,
    }
    path = out / MANIFEST_NAME
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + '\n')
    return path


def gen_dataset(
    config: PhantomConfig,
    cohort_seed: int,
    n_train: int,
    n_val: int,
    n_test: int,
    out,
    threads: Optional[int] = 1,
) -> Path:
    '''
    Writes n_train healthy and n_val + n_test lesioned phantoms as FVOL
    files (lesion masks in companion files) plus a JSON manifest.

    Returns the manifest path.
    '''
    logger.info('`gen_dataset` has started')
    if min(n_train, n_val, n_test) < 1:
        raise ValueError('every split needs at least one sample')

    config = replace(config, seed=cohort_seed)
    counts = dict(zip(ROLES, (n_train, n_val, n_test)))
    seeds = iter(_entry_seeds(cohort_seed, sum(counts.values())))

    entries = []
    for role, n in counts.items():
        for i in range(n):
            entry = {'role': role, 'seed': next(seeds), 'path': f'{role}_{i:03d}.fvol'}
            if role != 'train':
                entry['lesion_path'] = f'{role}_{i:03d}_lesion.fvol'
            entries.append(entry)

    path = _write_manifest(Path(out), config, entries, threads)
    logger.info(f'wrote {len(entries)} phantoms to {path.parent}')
    logger.info('`gen_dataset` has ended')
    return path


def read_manifest(path) -> Tuple[dict, PhantomConfig]:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    if not path.exists():
        raise ArtifactError(f'manifest {path} does not exist')

    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ArtifactError(f'manifest {path} is not valid JSON: {e}') from e

    if manifest.get('version') != MANIFEST_VERSION:
        raise ArtifactError(f'unsupported manifest version {manifest.get("version")!r}')
    for key in ('cohort_seed', 'config', 'entries'):
        if key not in manifest:
            raise ArtifactError(f'manifest {path} lacks {key!r}')

    config = manifest['config']
    config = PhantomConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in config.items()})
    return manifest, config


def regenerate(manifest_path, out, threads: Optional[int] = 1) -> Path:
    '''
    Rebuilds a dataset from the seeds recorded in a manifest.
    '''
    manifest, config = read_manifest(manifest_path)
    return _write_manifest(Path(out), config, manifest['entries'], threads)


def load_dataset(directory) -> Dict[str, List[PhantomSample]]:
    '''
    Reads a generated dataset back, grouped by role.
    '''
    directory = Path(directory)
    manifest, config = read_manifest(directory)

    dataset = {role: [] for role in ROLES}
    for entry in manifest['entries']:
        volume = read_volume(directory / entry['path'])
        if volume.mask is None:
            raise ArtifactError(f'{entry["path"]} carries no brain mask')

        lesion = np.zeros(volume.dims, dtype=bool)
        if entry.get('lesion_path'):
            lesion = read_volume(directory / entry['lesion_path']).voxels > 0.5

        sample = PhantomSample(volume, volume.mask, lesion, entry['seed'], config)
        dataset.setdefault(entry['role'], []).append(sample)

    return dataset
