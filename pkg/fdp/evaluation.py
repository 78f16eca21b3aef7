from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import logging

import numpy as np
import pandas as pd
from scipy.ndimage import binary_erosion, generate_binary_structure, uniform_filter
from sklearn.metrics import average_precision_score, roc_auc_score

from .config import EvaluationConfig
from .errors import EmptyLesionsError, GeometryMismatchError, UndefinedMetricError
from .utils import parallel_map

logger = logging.getLogger(__name__)

# 6-connected cross
CROSS_3D = generate_binary_structure(3, 1)


def _check_dims(a: np.ndarray, b: np.ndarray, what: str):
    if a.shape != b.shape:
        raise GeometryMismatchError(f'{what}: dims {a.shape} and {b.shape} differ')


def dice(pred, gt) -> float:
    '''
    2 |A & B| / (|A| + |B|); two empty masks score 1.
    '''
    pred, gt = np.asarray(pred, dtype=bool), np.asarray(gt, dtype=bool)
    _check_dims(pred, gt, 'dice')

    total = pred.sum() + gt.sum()
    if total == 0:
        return 1.0
    return float(2 * np.logical_and(pred, gt).sum() / total)


def _scores_labels(scores, labels) -> Tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels, dtype=bool).ravel()
    _check_dims(scores, labels, 'scores/labels')
    return scores, labels


def auroc(scores, labels) -> float:
    scores, labels = _scores_labels(scores, labels)
    if labels.all() or not labels.any():
        raise UndefinedMetricError('undefined AUROC: labels hold a single class')
    return float(roc_auc_score(labels, scores))


def auprc(scores, labels) -> float:
    '''
    Average precision, sum over descending thresholds of
    (R_n - R_{n-1}) * P_n.
    '''
    scores, labels = _scores_labels(scores, labels)
    if not labels.any():
        raise UndefinedMetricError('undefined AUPRC: no positive labels')
    return float(average_precision_score(labels, scores))


def mean_filter_3d(amap, k: int = 5) -> np.ndarray:
    '''
    Mean over the k^3 neighborhood of every voxel, replicating the border
    voxels outside the grid.
    '''
    if k < 1 or k % 2 == 0:
        raise ValueError(f'mean filter kernel must be odd and >= 1, got {k}')
    amap = np.asarray(amap, dtype=np.float64)
    return uniform_filter(amap, size=k, mode='nearest')


def erode_mask(mask, iters: int = 3) -> np.ndarray:
    '''
    Iterated erosion with the 6-connected cross; voxels outside the grid
    count as background.
    '''
    if iters < 0:
        raise ValueError(f'erosion iterations must be >= 0, got {iters}')
    mask = np.asarray(mask, dtype=bool)
    if iters == 0:
        # scipy reads iterations=0 as "erode until nothing changes"
        return mask.copy()
    return binary_erosion(mask, structure=CROSS_3D, iterations=iters, border_value=0)


def binarize(amap, threshold: float) -> np.ndarray:
    return np.asarray(amap) >= threshold


def postprocess(
    amaps: Sequence[np.ndarray],
    brain_masks: Sequence[np.ndarray],
    config: EvaluationConfig = EvaluationConfig(),
) -> Tuple[List[np.ndarray], List[np.ndarray]]:
    '''
    Mean filter on the anomaly maps, then erosion of the brain masks into
    the effective areas.
    '''
    if len(amaps) != len(brain_masks):
        raise GeometryMismatchError(f'{len(amaps)} maps but {len(brain_masks)} brain masks')

    filtered = [mean_filter_3d(a, config.filter_kernel) for a in amaps]
    areas = [erode_mask(m, config.erosion_iters) for m in brain_masks]
    for a, m in zip(filtered, areas):
        _check_dims(a, m, 'anomaly map/brain mask')
    return filtered, areas


@dataclass
class ThresholdSearchResult:
    threshold: float
    grid: np.ndarray
    dice: np.ndarray

    @property
    def best_dice(self) -> float:
        return float(self.dice.max())


def _slice_dice_counts(amap, gt, area, thresholds) -> Tuple[np.ndarray, np.ndarray]:
    '''
    Per-slice DICE for every threshold, [n_thresholds, D], and the mask of
    slices with a non-empty effective area.
    '''
    gt = gt & area
    gt_count = gt.sum(axis=(1, 2))
    counted = area.any(axis=(1, 2))

    out = np.empty((len(thresholds), amap.shape[0]))
    for i, t in enumerate(thresholds):
        pred = (amap >= t) & area
        overlap = (pred & gt).sum(axis=(1, 2))
        total = pred.sum(axis=(1, 2)) + gt_count
        with np.errstate(invalid='ignore', divide='ignore'):
            out[i] = np.where(total == 0, 1.0, 2 * overlap / np.maximum(total, 1))
    return out, counted


def greedy_threshold(
    amaps: Sequence[np.ndarray],
    gts: Sequence[np.ndarray],
    masks: Sequence[np.ndarray],
    grid_size: int = 100,
    skip_empty_gt: bool = False,
    threads: Optional[int] = 1,
) -> ThresholdSearchResult:
    '''
    Picks the binarization threshold with the best volume-averaged DICE on
    a lesioned validation set.

    Parameters:
    amaps: The (post-processed) validation anomaly maps
    gts: The lesion masks
    masks: The effective areas (eroded brain masks)
    grid_size: The number of quantiles of the pooled in-area scores tried
    skip_empty_gt: Average DICE over lesion-bearing slices only
    threads: The worker count for the per-volume DICE tables
    '''
    logger.info('`greedy_threshold` has started')
    if len(amaps) == 0 or not len(amaps) == len(gts) == len(masks):
        raise ValueError('greedy_threshold needs equally many (non-empty) maps, lesion masks and areas')
    if grid_size < 1:
        raise ValueError(f'grid size must be >= 1, got {grid_size}')

    amaps = [np.asarray(a, dtype=np.float64) for a in amaps]
    gts = [np.asarray(g, dtype=bool) for g in gts]
    masks = [np.asarray(m, dtype=bool) for m in masks]
    for a, g, m in zip(amaps, gts, masks):
        _check_dims(a, g, 'anomaly map/lesion mask')
        _check_dims(a, m, 'anomaly map/effective area')

    if not any((g & m).any() for g, m in zip(gts, masks)):
        raise EmptyLesionsError('empty lesions: the validation set holds no lesion voxels')

    pooled = np.concatenate([a[m] for a, m in zip(amaps, masks)])
    grid = np.unique(np.quantile(pooled, np.linspace(0, 1, grid_size)))

    def volume_dice(args):
        amap, gt, area = args
        per_slice, counted = _slice_dice_counts(amap, gt, area, grid)
        if skip_empty_gt:
            counted = counted & (gt & area).any(axis=(1, 2))
        if not counted.any():
            return None
        return per_slice[:, counted].mean(axis=1)

    tables = [t for t in parallel_map(volume_dice, zip(amaps, gts, masks), threads) if t is not None]
    scores = np.mean(tables, axis=0)

    # argmax keeps the first maximum, i.e. the smallest threshold on ties
    best = int(np.argmax(scores))
    logger.info(f'threshold search: {grid.size} candidates, best {grid[best]:.6f} (DICE {scores[best]:.4f})')
    logger.info('`greedy_threshold` has ended')
    return ThresholdSearchResult(float(grid[best]), grid, scores)


@dataclass
class MetricsReport:
    threshold: float
    slices: pd.DataFrame  # one row per (volume, slice) with a non-empty area
    excluded_empty_area: int = 0
    excluded_single_class: int = 0
    volumes: pd.DataFrame = field(init=False)

    def __post_init__(self):
        columns = ['dice', 'auprc', 'auroc']
        grouped = self.slices.groupby('volume', sort=True)
        volumes = grouped[columns].mean()
        volumes['threshold'] = self.threshold
        volumes['slices_counted'] = grouped.size()
        self.volumes = volumes.reset_index()

    @property
    def slices_counted(self) -> int:
        return len(self.slices)

    @property
    def dice(self) -> float:
        return float(self.volumes['dice'].mean())

    @property
    def auprc(self) -> float:
        return float(self.volumes['auprc'].mean())

    @property
    def auroc(self) -> float:
        return float(self.volumes['auroc'].mean())

    def to_frame(self) -> pd.DataFrame:
        return self.volumes[['volume', 'dice', 'auprc', 'auroc', 'threshold', 'slices_counted']].copy()

    def to_json(self) -> dict:
        def clean(x):
            return None if pd.isna(x) else float(x)

        return {
            'threshold': self.threshold,
            'dice': clean(self.dice),
            'auprc': clean(self.auprc),
            'auroc': clean(self.auroc),
            'slices_counted': self.slices_counted,
            'excluded_empty_area': self.excluded_empty_area,
            'excluded_single_class': self.excluded_single_class,
            'slices': [
                {
                    'volume': int(row.volume),
                    'slice': int(row.slice),
                    'dice': clean(row.dice),
                    'auprc': clean(row.auprc),
                    'auroc': clean(row.auroc),
                }
                for row in self.slices.itertuples(index=False)
            ],
        }


def evaluate(
    amaps: Sequence[np.ndarray],
    gts: Sequence[np.ndarray],
    masks: Sequence[np.ndarray],
    threshold: float,
) -> MetricsReport:
    '''
    Per-slice metrics over the effective area, averaged per volume and then
    over volumes. Slices with an empty area are skipped; slices whose area
    holds a single class keep their DICE but get no AUPRC/AUROC.
    '''
    if not len(amaps) == len(gts) == len(masks):
        raise GeometryMismatchError('evaluate needs equally many maps, lesion masks and areas')

    rows = []
    excluded_area = excluded_class = 0
    for v, (amap, gt, area) in enumerate(zip(amaps, gts, masks)):
        amap = np.asarray(amap, dtype=np.float64)
        gt, area = np.asarray(gt, dtype=bool), np.asarray(area, dtype=bool)
        _check_dims(amap, gt, 'anomaly map/lesion mask')
        _check_dims(amap, area, 'anomaly map/effective area')

        for z in range(amap.shape[0]):
            region = area[z]
            if not region.any():
                excluded_area += 1
                continue

            scores, labels = amap[z][region], gt[z][region]
            row = {
                'volume': v,
                'slice': z,
                'dice': dice(binarize(scores, threshold), labels),
                'auprc': np.nan,
                'auroc': np.nan,
            }
            if labels.any() and not labels.all():
                row['auprc'] = auprc(scores, labels)
                row['auroc'] = auroc(scores, labels)
            else:
                excluded_class += 1
            rows.append(row)

    slices = pd.DataFrame(rows, columns=['volume', 'slice', 'dice', 'auprc', 'auroc'])
    logger.info(f'evaluate: {len(slices)} slices counted, {excluded_area} without area, '
                f'{excluded_class} without both classes')
    return MetricsReport(threshold, slices, excluded_area, excluded_class)
