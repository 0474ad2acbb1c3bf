import csv
import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from vera.contrastive import StubEncoder
from vera.errors import DomainError
from vera.evaluation import (CentroidLandmarks, GaussianSummary, cosine_distance, deid_rate,
                             feature_frechet, frechet_distance, mask_iou, match_rate,
                             mean_landmark_offset, pair_consistency, region_l1, region_psnr,
                             write_report)


def oracle_frechet(mu_p, s_p, mu_q, s_q):
    """Trace of ``(S_p S_q)^(1/2)`` from the eigenvalues of the (non-symmetric) product."""
    ev = np.linalg.eigvals(s_p @ s_q)
    cross = np.sqrt(np.clip(ev.real, 0, None)).sum()
    d = mu_p - mu_q
    return float(d @ d + np.trace(s_p) + np.trace(s_q) - 2 * cross)


def random_psd(rng, d, rank=None):
    a = rng.normal(size=(d, rank or d))
    return a @ a.T


def test_region_metrics_loop_oracle(rng):
    a = rng.uniform(-1, 1, (3, 6, 5))
    b = rng.uniform(-1, 1, (3, 6, 5))
    m = rng.random((6, 5)) > 0.5
    diffs = [abs((a[c, y, x] - b[c, y, x]) * 127.5) for y in range(6) for x in range(5)
             if m[y, x] for c in range(3)]
    assert region_l1(torch.from_numpy(a), torch.from_numpy(b), m) == pytest.approx(
        sum(diffs) / len(diffs), rel=1e-12)
    mse = sum(d * d for d in diffs) / len(diffs)
    assert region_psnr(torch.from_numpy(a), torch.from_numpy(b), m) == pytest.approx(
        10 * math.log10(255 ** 2 / mse), rel=1e-12)
    assert region_psnr(torch.from_numpy(a), torch.from_numpy(a), m) == 99.0
    assert region_l1(a.transpose(1, 2, 0), b.transpose(1, 2, 0), m) == pytest.approx(
        sum(diffs) / len(diffs), rel=1e-12)


def test_region_metric_empty_mask():
    x = np.zeros((4, 4, 3))
    with pytest.raises(DomainError):
        region_l1(x, x, np.zeros((4, 4), bool))


def test_mask_iou():
    a = np.array([[1, 1, 0, 0]], bool)
    b = np.array([[0, 1, 1, 0]], bool)
    assert mask_iou(a, b) == pytest.approx(1 / 3)
    assert mask_iou(a, a) == 1.0
    assert mask_iou(np.zeros((2, 2)), np.zeros((2, 2))) == 1.0
    with pytest.raises(ValueError):
        mask_iou(a, b.T)


def test_landmarks():
    labels = np.zeros((5, 5), int)
    labels[1:3, 1:3] = 2
    pts = CentroidLandmarks([2, 7]).detect(labels)
    np.testing.assert_allclose(pts, [[1.5, 1.5], [2.0, 2.0]])
    assert mean_landmark_offset(pts, pts + [3, 4]) == pytest.approx(5.0)
    with pytest.raises(ValueError):
        mean_landmark_offset(pts, pts[:1])


def test_cosine_distance():
    assert cosine_distance([1, 0], [0, 2]) == pytest.approx(1.0)
    assert cosine_distance([1, 1], [2, 2]) == pytest.approx(0.0, abs=1e-15)
    with pytest.raises(DomainError):
        cosine_distance([0, 0], [1, 0])


def test_identity_rates():
    enc = StubEncoder(0)
    x = torch.rand(3, 16, 16) * 2 - 1
    y = -x
    assert match_rate([(x, x)], enc) == 1.0
    assert deid_rate([(x, x), (x, y)], enc) == pytest.approx(0.5 if cosine_distance(
        enc.embed(x), enc.embed(y)) > enc.match_threshold else 0.0)
    with pytest.raises(ValueError):
        deid_rate([], enc)
    pc = pair_consistency([(x, x)], [(x, y)], enc)
    assert pc.reid_rate == 1.0
    assert pc.distance_delta == pytest.approx(-cosine_distance(enc.embed(x), enc.embed(y)))


def test_frechet_identical_and_shifted():
    s = np.array([[2.0, 0.3], [0.3, 1.0]])
    p = GaussianSummary(np.array([1.0, -1.0]), s)
    assert abs(frechet_distance(p, p)) <= 1e-9
    one = GaussianSummary(np.array([0.0]), np.array([[1.0]]))
    two = GaussianSummary(np.array([1.0]), np.array([[1.0]]))
    assert frechet_distance(one, two) == 1.0


@given(st.integers(1, 4), st.integers(0, 2 ** 32 - 1), st.booleans())
def test_frechet_matches_eigen_oracle(d, seed, low_rank):
    rng = np.random.default_rng(seed)
    rank = max(1, d - 1) if low_rank else d
    mu_p, mu_q = rng.normal(size=d), rng.normal(size=d)
    s_p, s_q = random_psd(rng, d, rank), random_psd(rng, d)
    got = frechet_distance(GaussianSummary(mu_p, s_p), GaussianSummary(mu_q, s_q))
    assert got == pytest.approx(oracle_frechet(mu_p, s_p, mu_q, s_q), abs=1e-6, rel=1e-9)
    # symmetric; sqrt of a singular matrix amplifies rounding to ~1e-8
    assert got == pytest.approx(
        frechet_distance(GaussianSummary(mu_q, s_q), GaussianSummary(mu_p, s_p)), abs=1e-6)


def test_frechet_rejects_bad_input():
    good = GaussianSummary(np.zeros(2), np.eye(2))
    with pytest.raises(DomainError):
        frechet_distance(good, GaussianSummary(np.zeros(2), -np.eye(2)))
    with pytest.raises(ValueError):
        frechet_distance(good, GaussianSummary(np.zeros(3), np.eye(3)))


def test_feature_frechet(rng):
    x = rng.normal(size=(400, 3))
    assert feature_frechet(x, x) == pytest.approx(0.0, abs=1e-9)
    assert feature_frechet(x, x + [2, 0, 0]) == pytest.approx(4.0, rel=1e-9)


def test_write_report(tmp_path):
    rows = [{'name': 'a', 'l1': 0.5}, {'name': 'b', 'psnr': 30.0}]
    j, c = write_report(tmp_path / 'metrics', rows, {'n': 2})
    doc = json.loads(j.read_text())
    assert doc['summary'] == {'n': 2} and doc['rows'] == rows
    with open(c) as f:
        got = list(csv.DictReader(f))
    assert got[0] == {'name': 'a', 'l1': '0.500000', 'psnr': ''}
    assert got[1]['psnr'] == '30.000000'
