import numpy as np
import pytest
from scipy.ndimage import distance_transform_cdt

from fdp.config import EvaluationConfig
from fdp.errors import EmptyLesionsError, GeometryMismatchError, UndefinedMetricError
from fdp.evaluation import (
    auprc,
    auroc,
    binarize,
    dice,
    erode_mask,
    evaluate,
    greedy_threshold,
    mean_filter_3d,
    postprocess,
)


def ball(shape, radius):
    center = [(n - 1) / 2 for n in shape]
    grid = np.indices(shape).astype(np.float64)
    rho = np.sqrt(sum((g - c) ** 2 for g, c in zip(grid, center)))
    return rho <= radius, rho


def test_dice_examples():
    a = np.zeros((2, 4, 4), dtype=bool)
    assert dice(a, a) == 1.0

    b = a.copy()
    b[0, :2, :2] = True
    assert dice(b, b) == 1.0
    assert dice(b, a) == 0.0

    c = a.copy()
    c[0, :2, :3] = True
    assert dice(b, c) == pytest.approx(2 * 4 / (4 + 6))

    with pytest.raises(GeometryMismatchError):
        dice(a, np.zeros((2, 4, 5), dtype=bool))


def test_dice_counts_overlap():
    pred = np.zeros(10, dtype=bool)
    gt = np.zeros(10, dtype=bool)
    pred[:5] = True
    gt[2:7] = True
    assert dice(pred, gt) == pytest.approx(0.6)
    assert dice(gt, pred) == dice(pred, gt)


def test_auroc_and_auprc_examples():
    assert auroc(np.array([0.1, 0.4, 0.35, 0.8]), np.array([0, 0, 1, 1])) == pytest.approx(0.75)
    assert auprc(np.array([0.8, 0.4, 0.35, 0.1]), np.array([1, 0, 1, 0])) == pytest.approx(5 / 6, abs=1e-9)
    assert auprc(np.full(8, 0.3), np.arange(8) < 3) == pytest.approx(3 / 8)


    scores = np.array([0.9, 0.8, 0.7, 0.1])
    labels = np.array([True, False, True, False])
    assert auroc(scores, labels) == pytest.approx(0.75)
    # ranks 1 and 3 are positives: (1/2) * 1 + (1/2) * (2/3)
    assert auprc(scores, labels) == pytest.approx(5 / 6)


def test_metrics_of_perfect_ranking():
    scores = np.linspace(0, 1, 10)
    labels = scores > 0.5
    assert auroc(scores, labels) == 1.0
    assert auprc(scores, labels) == 1.0


def pairwise_auroc(scores, labels):
    pos, neg = scores[labels], scores[~labels]
    wins = (pos[:, None] > neg[None]).sum() + 0.5 * (pos[:, None] == neg[None]).sum()
    return wins / (pos.size * neg.size)


def enumerated_auprc(scores, labels):
    total, recall = 0.0, 0.0
    for t in np.unique(scores)[::-1]:
        hit = scores >= t
        tp = (hit & labels).sum()
        total += (tp / labels.sum() - recall) * tp / hit.sum()
        recall = tp / labels.sum()
    return total


def test_metrics_match_brute_force(rng):
    for _ in range(100):
        scores = rng.random(50)
        labels = rng.random(50) < 0.4
        labels[:2] = [True, False]
        assert auroc(scores, labels) == pytest.approx(pairwise_auroc(scores, labels), abs=1e-9)
        assert auprc(scores, labels) == pytest.approx(enumerated_auprc(scores, labels), abs=1e-9)


def test_auroc_of_inverted_scores(rng):
    for _ in range(20):
        scores = rng.integers(0, 5, 40).astype(np.float64)
        labels = rng.random(40) < 0.5
        labels[:2] = [True, False]
        assert auroc(-scores, labels) == pytest.approx(1 - auroc(scores, labels), abs=1e-12)


def test_undefined_metrics():
    with pytest.raises(UndefinedMetricError, match='undefined AUROC'):
        auroc(np.arange(4.0), np.ones(4, dtype=bool))
    with pytest.raises(UndefinedMetricError, match='undefined AUROC'):
        auroc(np.arange(4.0), np.zeros(4, dtype=bool))
    with pytest.raises(UndefinedMetricError, match='undefined AUPRC'):
        auprc(np.arange(4.0), np.zeros(4, dtype=bool))


def test_mean_filter_keeps_constants():
    assert np.allclose(mean_filter_3d(np.full((4, 6, 6), 0.25)), 0.25)


def test_mean_filter_with_unit_kernel_is_identity(rng):
    amap = rng.random((3, 8, 8))
    assert np.allclose(mean_filter_3d(amap, 1), amap)


def clamped_mean(amap, k):
    out = np.zeros_like(amap)
    offsets = range(-(k // 2), k // 2 + 1)
    for dz in offsets:
        for dy in offsets:
            for dx in offsets:
                idx = [np.clip(np.arange(n) + d, 0, n - 1) for n, d in zip(amap.shape, (dz, dy, dx))]
                out += amap[np.ix_(*idx)]
    return out / k ** 3


@pytest.mark.parametrize('seed', range(5))
def test_mean_filter_matches_clamped_oracle(seed):
    amap = np.random.default_rng(seed).random((8, 8, 8))
    assert np.allclose(mean_filter_3d(amap, 5), clamped_mean(amap, 5), rtol=0, atol=1e-12)
    assert np.allclose(mean_filter_3d(amap, 3), clamped_mean(amap, 3), rtol=0, atol=1e-12)


def test_mean_filter_spreads_an_impulse():
    amap = np.zeros((9, 9, 9))
    amap[4, 4, 4] = 1.0
    filtered = mean_filter_3d(amap)

    expected = np.zeros_like(amap)
    expected[2:7, 2:7, 2:7] = 1 / 125
    assert np.allclose(filtered, expected, rtol=0, atol=1e-15)


def test_mean_filter_rejects_even_kernel():
    with pytest.raises(ValueError):
        mean_filter_3d(np.zeros((4, 4, 4)), 4)


def test_erosion_of_a_ball():
    mask, rho = ball((21, 21, 21), 8)
    eroded = erode_mask(mask, 3)
    assert np.all(eroded[rho <= 5])
    assert not np.any(eroded[rho > 6])


@pytest.mark.parametrize('seed', range(5))
def test_erosion_matches_taxicab_distance(seed):
    rng = np.random.default_rng(seed)
    mask = rng.random((10, 16, 16)) < 0.85
    expected = distance_transform_cdt(np.pad(mask, 1), metric='taxicab')[1:-1, 1:-1, 1:-1] > 3
    assert np.array_equal(erode_mask(mask, 3), expected)


def test_erosion_edge_cases(rng):
    mask = rng.random((4, 8, 8)) < 0.5
    assert np.array_equal(erode_mask(mask, 0), mask)
    assert not erode_mask(np.ones((4, 8, 8), dtype=bool), 3).any()
    assert not erode_mask(np.zeros((4, 8, 8), dtype=bool), 3).any()
    with pytest.raises(ValueError):
        erode_mask(mask, -1)


def test_binarize_is_inclusive():
    assert binarize(np.array([0.1, 0.5, 0.9]), 0.5).tolist() == [False, True, True]


def test_postprocess(rng):
    amaps = [rng.random((8, 16, 16)) for _ in range(2)]
    masks = [np.ones((8, 16, 16), dtype=bool)] * 2
    filtered, areas = postprocess(amaps, masks, EvaluationConfig(filter_kernel=3, erosion_iters=1))
    assert len(filtered) == len(areas) == 2
    assert filtered[0].std() < amaps[0].std()
    assert areas[0].sum() == 6 * 14 * 14

    with pytest.raises(GeometryMismatchError):
        postprocess(amaps, masks[:1])


@pytest.fixture
def lesioned_maps(rng):
    gts, amaps, areas = [], [], []
    for _ in range(3):
        gt = np.zeros((4, 16, 16), dtype=bool)
        gt[1:3, 4:9, 5:10] = True
        gts.append(gt)
        amaps.append(gt.astype(np.float64))
        areas.append(np.ones_like(gt))
    return amaps, gts, areas


def test_perfect_maps_reach_full_dice(lesioned_maps):
    result = greedy_threshold(*lesioned_maps)
    assert result.best_dice == pytest.approx(1.0)
    assert 0 < result.threshold <= 1
    assert result.grid.size <= 100


def test_ties_resolve_to_smallest_threshold(lesioned_maps):
    result = greedy_threshold(*lesioned_maps)
    assert result.threshold == result.grid[result.grid > 0].min()
    assert np.all(np.diff(result.grid) > 0)


def test_threshold_search_is_thread_independent(lesioned_maps, rng):
    amaps, gts, areas = lesioned_maps
    noisy = [a + 0.3 * rng.random(a.shape) for a in amaps]
    one = greedy_threshold(noisy, gts, areas, threads=1)
    four = greedy_threshold(noisy, gts, areas, threads=4)
    assert one.threshold == four.threshold
    assert np.array_equal(one.dice, four.dice)


def test_skip_empty_gt_ignores_healthy_slices(lesioned_maps):
    amaps, gts, areas = lesioned_maps
    # healthy slices light up as brightly as the lesions
    noisy = [np.where(g.any(axis=(1, 2))[:, None, None], a, 1.0) for a, g in zip(amaps, gts)]
    assert greedy_threshold(noisy, gts, areas, skip_empty_gt=True).best_dice == pytest.approx(1.0)
    assert greedy_threshold(noisy, gts, areas).best_dice < 1.0


def test_single_candidate_grid(lesioned_maps, rng):
    amaps, gts, areas = lesioned_maps
    noisy = [a + rng.random(a.shape) for a in amaps]
    result = greedy_threshold(noisy, gts, areas, grid_size=1)
    assert result.grid.size == 1
    assert result.threshold == min(a.min() for a in noisy)


def test_uninformative_scores_stay_below_half(rng):
    # a quarter of every slice is lesion, so predicting everything scores 0.4
    gts = []
    for _ in range(4):
        gt = np.zeros((6, 16, 16), dtype=bool)
        gt[:, 4:12, 4:12] = True
        gts.append(gt)
    amaps = [rng.random(g.shape) for g in gts]
    areas = [np.ones_like(g) for g in gts]

    assert greedy_threshold(amaps, gts, areas).best_dice < 0.5


def test_threshold_search_errors(lesioned_maps):
    amaps, gts, areas = lesioned_maps
    empty = [np.zeros_like(g) for g in gts]
    with pytest.raises(EmptyLesionsError, match='empty lesions'):
        greedy_threshold(amaps, empty, areas)
    with pytest.raises(ValueError):
        greedy_threshold([], [], [])
    with pytest.raises(ValueError):
        greedy_threshold(amaps, gts, areas, grid_size=0)


def toy_case():
    amap = np.zeros((3, 4, 4))
    gt = np.zeros((3, 4, 4), dtype=bool)
    area = np.zeros((3, 4, 4), dtype=bool)

    area[0] = True
    gt[0, :2, :2] = True
    amap[0, :2, :2] = 0.9
    amap[0, 3, 3] = 0.9

    area[1, 0] = True
    return amap, gt, area


def test_evaluate_toy_volume():
    amap, gt, area = toy_case()
    report = evaluate([amap], [gt], [area], threshold=0.5)

    assert report.slices_counted == 2
    assert report.excluded_empty_area == 1
    assert report.excluded_single_class == 1

    first = report.slices.iloc[0]
    assert first.dice == pytest.approx(8 / 9)
    assert first.auroc == pytest.approx(11.5 / 12)
    assert first.auprc == pytest.approx(0.8)
    assert report.slices.iloc[1].dice == 1.0
    assert np.isnan(report.slices.iloc[1].auroc)

    assert report.dice == pytest.approx((8 / 9 + 1) / 2)
    assert report.auroc == pytest.approx(11.5 / 12)


def test_report_averages_volumes_first():
    amap, gt, area = toy_case()
    perfect = np.zeros_like(amap)
    perfect[0, :2, :2] = 0.9
    report = evaluate([amap, perfect], [gt, gt], [area, area], threshold=0.5)

    frame = report.to_frame()
    assert list(frame.columns) == ['volume', 'dice', 'auprc', 'auroc', 'threshold', 'slices_counted']
    assert frame.dice.tolist() == pytest.approx([(8 / 9 + 1) / 2, 1.0])
    assert report.dice == pytest.approx(((8 / 9 + 1) / 2 + 1) / 2)
    assert frame.slices_counted.tolist() == [2, 2]


def test_report_json():
    amap, gt, area = toy_case()
    data = evaluate([amap], [gt], [area], threshold=0.5).to_json()
    assert data['threshold'] == 0.5
    assert data['excluded_single_class'] == 1
    assert len(data['slices']) == 2
    assert data['slices'][1]['auroc'] is None
