import numpy as np
import pytest
from scipy import ndimage

from tcsm.autodiff import Tensor
from tcsm.errors import ShapeError
from tcsm.metrics import (ConfusionCounts, MetricScores, confusion, evaluate,
                          fill_holes, metrics, predict_mask, threshold)
from tcsm.network import SegNetConfig, init_params


def confusion_oracle(pred, true):
    """Pixel-loop reference count."""
    tp = tn = fp = fn = 0
    for p, t in zip(pred.ravel(), true.ravel()):
        if p == 1 and t == 1:
            tp += 1
        elif p == 0 and t == 0:
            tn += 1
        elif p == 1 and t == 0:
            fp += 1
        else:
            fn += 1
    return ConfusionCounts(tp, tn, fp, fn)


def test_confusion_perfect_prediction():
    true = np.zeros((4, 4), dtype=np.int64)
    true[1:3, 1:3] = 1
    assert confusion(true, true) == ConfusionCounts(tp=4, tn=12, fp=0, fn=0)


def test_confusion_inverted_prediction():
    true = (np.arange(16).reshape(4, 4) % 3 == 0).astype(np.int64)
    counts = confusion(1 - true, true)
    assert counts.tp == 0
    assert counts.tn == 0
    assert counts.fp + counts.fn == 16


def test_confusion_matches_loop_oracle():
    rng = np.random.default_rng(1)
    for _ in range(200):
        pred = rng.integers(0, 2, (16, 16))
        true = rng.integers(0, 2, (16, 16))
        counts = confusion(pred, true)
        assert counts == confusion_oracle(pred, true)
        assert sum(counts) == 256


def test_confusion_rejects_bad_input():
    with pytest.raises(ShapeError):
        confusion(np.array([[0, 2]]), np.array([[0, 1]]))
    with pytest.raises(ShapeError):
        confusion(np.array([[0.5]]), np.array([[1]]))
    with pytest.raises(ShapeError):
        confusion(np.zeros((2, 2)), np.zeros((3, 3)))


def test_metrics_hand_case():
    scores = metrics(ConfusionCounts(tp=2, tn=1, fp=1, fn=1))
    assert scores.ja == 0.5
    assert scores.di == 2 / 3
    assert scores.ac == 0.6
    assert scores.se == 2 / 3
    assert scores.sp == 0.5


def test_metrics_perfect():
    assert metrics(ConfusionCounts(5, 11, 0, 0)) == MetricScores(1.0, 1.0, 1.0, 1.0, 1.0)


def test_metrics_zero_over_zero_convention():
    # both masks empty: every undefined ratio is a perfect match
    scores = metrics(ConfusionCounts(0, 9, 0, 0))
    assert scores == MetricScores(1.0, 1.0, 1.0, 1.0, 1.0)
    # empty truth, non-empty prediction: SE is 0/0, the rest are defined
    scores = metrics(ConfusionCounts(0, 5, 4, 0))
    assert scores.se == 1.0
    assert scores.ja == 0.0
    assert scores.sp == 5 / 9


def test_metrics_dice_jaccard_identity():
    rng = np.random.default_rng(2)
    for _ in range(300):
        counts = ConfusionCounts(*(int(v) for v in rng.integers(0, 50, 4)))
        scores = metrics(counts)
        if counts.tp + counts.fn + counts.fp > 0:
            np.testing.assert_allclose(scores.di, 2 * scores.ja / (1 + scores.ja),
                                       rtol=0, atol=1e-12)
        assert all(0.0 <= v <= 1.0 for v in scores)


def test_metrics_rejects_negative_counts():
    with pytest.raises(ShapeError):
        metrics(ConfusionCounts(-1, 0, 0, 0))


def test_threshold_tie_is_foreground():
    probs = np.full((2, 2, 2), 0.5)
    assert threshold(probs).all()


def test_threshold_below_half_is_empty():
    probs = np.stack([np.full((3, 3), 0.6), np.full((3, 3), 0.4)])
    assert not threshold(probs).any()


def test_threshold_matches_argmax_off_ties():
    rng = np.random.default_rng(3)
    p1 = rng.uniform(0, 1, (8, 8))
    probs = np.stack([1 - p1, p1])
    ties = p1 == 0.5
    pred = threshold(probs)
    argmax = probs.argmax(axis=0)
    assert np.array_equal(pred[~ties], argmax[~ties])


def test_threshold_accepts_tensor():
    probs = Tensor(np.stack([np.zeros((2, 2)), np.ones((2, 2))]))
    assert threshold(probs).all()


def test_threshold_rejects_bad_shape():
    with pytest.raises(ShapeError):
        threshold(np.zeros((4, 4)))
    with pytest.raises(ShapeError):
        threshold(np.zeros((1, 4, 4)))


def test_fill_holes_solid_square_unchanged():
    mask = np.zeros((8, 8), dtype=np.int64)
    mask[2:6, 2:6] = 1
    assert np.array_equal(fill_holes(mask), mask)


def test_fill_holes_donut_becomes_disk():
    mask = np.zeros((9, 9), dtype=np.int64)
    mask[2:7, 2:7] = 1
    mask[3:6, 3:6] = 0
    filled = fill_holes(mask)
    expected = np.zeros((9, 9), dtype=np.int64)
    expected[2:7, 2:7] = 1
    assert np.array_equal(filled, expected)


def test_fill_holes_border_background_survives():
    # a bay open to the border is not a hole
    mask = np.ones((6, 6), dtype=np.int64)
    mask[0:4, 3] = 0
    assert np.array_equal(fill_holes(mask), mask)


def test_fill_holes_diagonal_gap_is_a_leak_for_foreground_only():
    # background connectivity is 4-way: a diagonal background "channel"
    # does not connect the interior to the border
    mask = np.ones((5, 5), dtype=np.int64)
    mask[2, 2] = 0
    mask[1, 1] = 0
    mask[0, 0] = 0
    filled = fill_holes(mask)
    assert filled[2, 2] == 1
    assert filled[1, 1] == 1
    assert filled[0, 0] == 0


def _random_masks(count, rng):
    masks = []
    for _ in range(count):
        speckle = rng.integers(0, 2, (16, 16))
        blob = ndimage.uniform_filter(rng.standard_normal((16, 16)), 5) > 0
        masks.append(speckle.astype(np.int64))
        masks.append(blob.astype(np.int64))
    return masks


def test_fill_holes_matches_scipy_oracle():
    rng = np.random.default_rng(4)
    for mask in _random_masks(100, rng):
        expected = ndimage.binary_fill_holes(mask).astype(np.int64)
        assert np.array_equal(fill_holes(mask), expected)


def test_fill_holes_idempotent_and_monotone():
    rng = np.random.default_rng(5)
    for mask in _random_masks(100, rng):
        once = fill_holes(mask)
        assert np.array_equal(fill_holes(once), once)
        assert (once >= mask).all()


def test_fill_holes_rejects_bad_input():
    with pytest.raises(ShapeError):
        fill_holes(np.zeros((2, 2, 2), dtype=np.int64))
    with pytest.raises(ShapeError):
        fill_holes(np.array([[0, 3]]))


class _Example:
    def __init__(self, id, image, mask):
        self.id = id
        self.image = image
        self.mask = mask


def _constant_background_params(config):
    """Zero every weight and bias the head toward class 0."""
    params = init_params(config, seed=0)
    for name, tensor in params.items():
        tensor.data[...] = 0.0
    params["head.bias"].data[0] = 4.0
    return params


def _toy_pool(n, seed=0, size=16):
    rng = np.random.default_rng(seed)
    pool = []
    for i in range(n):
        image = rng.standard_normal((size, size))
        mask = (ndimage.uniform_filter(rng.standard_normal((size, size)), 7) > 0)
        pool.append(_Example(f"case{i}", image, mask.astype(np.int64)))
    return pool


def test_evaluate_constant_background_model():
    config = SegNetConfig(base_channels=4, depth=1)
    params = _constant_background_params(config)
    pool = _toy_pool(4)
    report = evaluate(params, pool, config)
    # empty predictions: AC equals each image's background fraction
    for case, ex in zip(report.cases, pool):
        assert case.scores.ac == 1.0 - ex.mask.mean()
        assert case.scores.sp == 1.0
        assert case.scores.se == 0.0
    assert report.ac == np.mean([1.0 - ex.mask.mean() for ex in pool])


def test_evaluate_is_deterministic():
    config = SegNetConfig(base_channels=4, depth=1)
    params = init_params(config, seed=3)
    pool = _toy_pool(3, seed=1)
    a = evaluate(params, pool, config)
    b = evaluate(params, pool, config)
    assert a.ja == b.ja
    assert a.pooled == b.pooled
    assert a.per_case_dice == b.per_case_dice


def test_evaluate_per_case_dice_mean_is_hand_mean():
    config = SegNetConfig(base_channels=4, depth=1)
    params = init_params(config, seed=7)
    pool = _toy_pool(3, seed=2)
    report = evaluate(params, pool, config)
    by_hand = []
    for ex in pool:
        pred = predict_mask(config, params, ex.image)
        by_hand.append(metrics(confusion(pred, ex.mask)).di)
    np.testing.assert_allclose(report.per_case_dice, by_hand, rtol=0, atol=0)
    assert report.per_case_dice_mean == np.mean(by_hand)


def test_evaluate_means_match_case_scores():
    config = SegNetConfig(base_channels=4, depth=1)
    params = init_params(config, seed=9)
    pool = _toy_pool(5, seed=3)
    report = evaluate(params, pool, config)
    for i, name in enumerate(("ja", "di", "ac", "se", "sp")):
        hand = np.mean([case.scores[i] for case in report.cases])
        assert getattr(report, name) == hand


def test_evaluate_pooled_identity_and_infer_config():
    config = SegNetConfig(base_channels=4, depth=1)
    params = init_params(config, seed=11)
    pool = _toy_pool(4, seed=4)
    report = evaluate(params, pool)  # architecture recovered from params
    pooled = report.pooled
    if pooled.ja > 0:
        np.testing.assert_allclose(pooled.di, 2 * pooled.ja / (1 + pooled.ja),
                                   rtol=0, atol=1e-12)


def test_evaluate_rejects_empty_pool():
    config = SegNetConfig(base_channels=4, depth=1)
    params = init_params(config, seed=0)
    with pytest.raises(ShapeError):
        evaluate(params, [], config)
