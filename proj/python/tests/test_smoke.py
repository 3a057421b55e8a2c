import math

import numpy as np
import pytest

import mtuda


def test_style_transfer_identity_at_zero_beta():
    rng = np.random.default_rng(0)
    src, tgt = rng.random((32, 32)), rng.random((32, 32))
    out = mtuda.fft_style_transfer(src, tgt, beta=0.0)
    assert out.shape == (32, 32)
    assert np.abs(out - src).max() < 1e-9


def test_histogram_match_constant_target():
    src = np.random.default_rng(1).random((16, 16))
    out = mtuda.histogram_match(src, np.full((16, 16), 0.25))
    assert np.all(out == 0.25)


def test_metrics_identity():
    rng = np.random.default_rng(2)
    for _ in range(20):
        p = (rng.random((8, 8)) < 0.5).astype(np.uint8)
        t = (rng.random((8, 8)) < 0.5).astype(np.uint8)
        i, d = mtuda.iou(p, t), mtuda.dice(p, t)
        assert d == pytest.approx(2 * i / (1 + i), abs=1e-12)


def test_sample_stats():
    mean, std = mtuda.sample_stats([0.60, 0.61, 0.62, 0.63, 0.64])
    assert mean == pytest.approx(0.62, abs=1e-9)
    assert std == pytest.approx(math.sqrt(0.00025), abs=1e-9)


def test_select_patch():
    sal = np.zeros((4, 4))
    sal[1, 1] = sal[1, 2] = 1.0
    sel = mtuda.select_patch(sal, 64, 64, 16, 16)
    assert (sel["row"], sel["col"], sel["fallback"]) == (16, 32, False)
    assert mtuda.select_patch(np.ones((4, 4)), 64, 64, 16, 16)["fallback"]


def test_synthetic_pair_and_errors():
    source, target = mtuda.synthetic_pair(image_size=16, cases=2, slices_per_case=2, seed=3)
    assert len(source) == 4 and len(target) == 4
    image, mask, case = source[0]
    assert image.shape == (16, 16) and mask.dtype == np.uint8 and case
    with pytest.raises(mtuda.Error):
        mtuda.iou(np.zeros((4, 4), np.uint8), np.zeros((4, 5), np.uint8))


def test_cli_usage_code():
    code, _, _ = mtuda.run_cli([])
    assert code == 2
