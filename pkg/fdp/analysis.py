from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence

import logging

import numpy as np
import pandas as pd
from sklearn.decomposition import PCA
from sklearn.neighbors import NearestNeighbors

from .errors import DegenerateDataError, DuplicatePointError, EmptyLesionsError, GeometryMismatchError
from .evaluation import greedy_threshold
from .phantom import PhantomSample
from .spectral import build_filter, decompose, dft2_centered, highfreq_image
from .utils import parallel_map
from .volume import as_slice

logger = logging.getLogger(__name__)

SWEEP_GRID = (0.01, 0.05, 0.10, 0.20, 0.30)
DISPERSION_BANDS = (0.0, 0.02, 0.05, 0.10, 0.20, 0.30, 0.50)
NORM_FLOOR = 1e-12
HISTOGRAM_BINS = 20


@dataclass
class SweepCurve:
    grid: np.ndarray
    values: np.ndarray
    metadata: Dict = field(default_factory=dict)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({'m': self.grid, 'value': self.values})


def _check_grid(m_grid) -> np.ndarray:
    grid = np.asarray(m_grid, dtype=np.float64)
    if grid.size == 0:
        raise ValueError('empty m grid')
    if np.any(np.diff(grid) <= 0):
        raise ValueError(f'm grid must be strictly increasing, got {grid.tolist()}')
    return grid


def freq_sweep_dice(
    samples: Sequence[PhantomSample],
    m_grid: Sequence[float] = SWEEP_GRID,
    grid_size: int = 100,
    threads: Optional[int] = 1,
) -> SweepCurve:
    '''
    How well the high-frequency part alone localizes lesions: for every m,
    |I_h| inside the brain is binarized at its best-DICE threshold and the
    per-slice DICE over lesion-bearing slices is recorded.

    Parameters:
    samples: Lesioned phantoms
    m_grid: Strictly increasing thresholds in (0, 0.5]
    grid_size: The candidate count of the threshold search
    threads: The worker count
    '''
    logger.info('`freq_sweep_dice` has started')
    grid = _check_grid(m_grid)
    if grid[0] <= 0 or grid[-1] > 0.5:
        raise ValueError(f'm grid must lie in (0, 0.5], got {grid.tolist()}')
    if not any(s.lesion_mask.any() for s in samples):
        raise EmptyLesionsError('empty lesions: the sweep needs lesioned samples')

    gts = [s.lesion_mask for s in samples]
    areas = [s.brain_mask for s in samples]

    values = []
    for m in grid:
        def high_map(sample, m=m):
            return np.stack([np.abs(highfreq_image(s, m)) for s in sample.volume.slices()])

        maps = parallel_map(high_map, samples, threads)
        result = greedy_threshold(maps, gts, areas, grid_size, skip_empty_gt=True)
        values.append(result.best_dice)
        logger.info(f'freq sweep: m={m:.2f} DICE={result.best_dice:.4f}')

    logger.info('`freq_sweep_dice` has ended')
    metadata = {'samples': len(samples), 'seeds': [int(s.seed) for s in samples]}
    return SweepCurve(grid, np.array(values), metadata)


@dataclass
class DispersionStats:
    '''
    Per band, cohort and part (real / imag): mean and std across the cohort
    of the normalized signed-log band statistic.
    '''
    bands: np.ndarray
    table: pd.DataFrame

    def std(self, cohort: str, part: str = 'real') -> np.ndarray:
        rows = self.table[(self.table['cohort'] == cohort) & (self.table['part'] == part)]
        return rows.sort_values('band_high')['std'].to_numpy()

    def mean(self, cohort: str, part: str = 'real') -> np.ndarray:
        rows = self.table[(self.table['cohort'] == cohort) & (self.table['part'] == part)]
        return rows.sort_values('band_high')['mean'].to_numpy()

    def to_frame(self) -> pd.DataFrame:
        return self.table.copy()


def _stack_slices(slices, name):
    if len(slices) == 0:
        raise ValueError(f'{name} cohort is empty')
    return np.stack([as_slice(s).astype(np.float64) for s in slices])


def band_masks(H: int, W: int, edges: Sequence[float]):
    '''
    Annuli between consecutive m values; the first is closed at its lower
    edge, every other one open.
    '''
    edges = _check_grid(edges)
    if edges.size < 2:
        raise ValueError('need at least two band edges')

    masks = []
    for i, (low, high) in enumerate(zip(edges[:-1], edges[1:])):
        outer = build_filter(H, W, high)
        inner = build_filter(H, W, low)
        if i == 0:
            band = outer.stop_mask & (outer.distance >= inner.d0)
        else:
            band = outer.stop_mask & ~inner.stop_mask
        if not band.any():
            raise ValueError(f'band ({low}, {high}] holds no frequency on a {H}x{W} grid')
        masks.append(band)
    return masks


def _signed_log(x):
    return np.sign(x) * np.log1p(np.abs(x))


def lowfreq_dispersion(
    healthy_slices: Sequence,
    lesioned_slices: Sequence,
    m_bands: Sequence[float] = DISPERSION_BANDS,
) -> DispersionStats:
    '''
    Spread of low-frequency content across a cohort. Every slice gets, per
    band and per part, the band mean of sign(x) log(1 + |x|); each statistic
    is divided by its maximum absolute value over both cohorts.
    '''
    healthy = _stack_slices(healthy_slices, 'healthy')
    lesioned = _stack_slices(lesioned_slices, 'lesioned')
    if healthy.shape[1:] != lesioned.shape[1:]:
        raise GeometryMismatchError(f'cohort slices differ: {healthy.shape[1:]} vs {lesioned.shape[1:]}')

    edges = _check_grid(m_bands)
    masks = band_masks(*healthy.shape[1:], edges)

    spectra = {
        'healthy': np.stack([dft2_centered(s) for s in healthy]),
        'lesioned': np.stack([dft2_centered(s) for s in lesioned]),
    }

    rows = []
    for low, high, band in zip(edges[:-1], edges[1:], masks):
        for part, take in (('real', np.real), ('imag', np.imag)):
            stats = {c: _signed_log(take(f[:, band])).mean(axis=1) for c, f in spectra.items()}
            scale = max(np.abs(s).max() for s in stats.values())
            for cohort, s in stats.items():
                s = s / scale if scale >= NORM_FLOOR else np.zeros_like(s)
                rows.append({
                    'band_low': low,
                    'band_high': high,
                    'cohort': cohort,
                    'part': part,
                    'mean': float(s.mean()),
                    'std': float(s.std()),
                })

    return DispersionStats(edges, pd.DataFrame(rows))


def cohort_consistency(healthy_slices: Sequence, lesioned_slices: Sequence, m: float = 0.10) -> Dict[str, float]:
    '''
    Mean over the low disk of the per-coefficient standard deviation across
    each cohort.
    '''
    out = {}
    for cohort, slices in (('healthy', healthy_slices), ('lesioned', lesioned_slices)):
        stack = _stack_slices(slices, cohort)
        lows = np.stack([decompose(s, m).low.values for s in stack])
        out[cohort] = float(np.std(lows, axis=0).mean())
    return out


def pca_variance(data) -> np.ndarray:
    '''
    Explained-variance ratios of the principal components, descending.
    '''
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2 or data.shape[0] < 2:
        raise ValueError(f'pca_variance needs an [N >= 2, d] matrix, got shape {data.shape}')
    if np.allclose(data, data.mean(axis=0)):
        raise DegenerateDataError('degenerate data: zero variance')

    pca = PCA(svd_solver='full').fit(data)
    return pca.explained_variance_ratio_


@dataclass
class IntrinsicDimResult:
    estimates: np.ndarray
    mean: float
    histogram: np.ndarray
    bin_edges: np.ndarray

    def to_json(self) -> dict:
        return {
            'mean': self.mean,
            'n_points': int(self.estimates.size),
            'histogram': self.histogram.tolist(),
            'bin_edges': self.bin_edges.tolist(),
        }


def intrinsic_dim_mle(data, k_neighbors: int = 10, bins: int = HISTOGRAM_BINS) -> IntrinsicDimResult:
    '''
    Maximum-likelihood intrinsic dimension from exact nearest neighbors:
    per point, the inverse of (1 / (k - 1)) sum_{j < k} log(T_k / T_j).

    Parameters:
    data: The [N, d] point cloud (no duplicate rows)
    k_neighbors: k, with N > k >= 3
    bins: The histogram bin count of the per-point estimates
    '''
    data = np.asarray(data, dtype=np.float64)
    n = data.shape[0]
    if k_neighbors < 3 or n <= k_neighbors:
        raise ValueError(f'need N > k >= 3, got N={n}, k={k_neighbors}')

    if np.unique(data, axis=0).shape[0] < n:
        raise DuplicatePointError('zero neighbor distance: data holds duplicate points')

    # brute force keeps the neighbor sets exact; kneighbors() without a query
    # leaves every point out of its own neighborhood
    knn = NearestNeighbors(n_neighbors=k_neighbors, algorithm='brute').fit(data)
    distances, _ = knn.kneighbors()

    if np.any(distances[:, 0] <= 0):
        raise DuplicatePointError('zero neighbor distance: data holds duplicate points')

    logs = np.log(distances[:, -1:] / distances[:, :-1]).sum(axis=1) / (k_neighbors - 1)
    if np.any(logs <= 0):
        raise DegenerateDataError('degenerate data: equidistant neighborhoods')

    estimates = 1 / logs
    histogram, edges = np.histogram(estimates, bins=bins)
    logger.info(f'intrinsic dimension: mean {estimates.mean():.3f} over {n} points (k={k_neighbors})')
    return IntrinsicDimResult(estimates, float(estimates.mean()), histogram, edges)
