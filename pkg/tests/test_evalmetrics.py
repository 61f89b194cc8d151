import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import linalg
from scipy.stats import special_ortho_group

from fsiad import evalmetrics as M


def test_rank1_examples():
    gal = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert M.rank1(gal, [0, 1], gal, [0, 1]) == 1.0
    probes = np.array([[0.9, 0.1], [0.2, 0.98], [0.0, 1.0]])
    # exhaustive nearest neighbour by hand: probe 2 of subject A is closer to B
    assert M.rank1(gal, ["A", "B"], probes, ["A", "A", "B"]) == pytest.approx(2 / 3)
    eye = np.eye(6)
    noisy = eye + 1e-3 * np.random.default_rng(0).standard_normal((6, 6))
    assert M.rank1(eye, range(6), noisy, range(6)) == 1.0


def test_rank1_ties_and_errors():
    gal = np.array([[1.0, 0.0], [1.0, 0.0]])
    assert M.rank1(gal, [5, 6], np.array([[1.0, 0.0]]), [5]) == 1.0
    assert M.rank1(gal, [6, 5], np.array([[1.0, 0.0]]), [5]) == 0.0
    with pytest.raises(ValueError):
        M.rank1(np.zeros((0, 2)), [], np.ones((1, 2)), [0])
    with pytest.raises(ValueError, match="unique"):
        M.rank1(np.eye(2), [1, 1], np.eye(2), [1, 1])


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**16))
def test_rank1_rotation_invariant(seed):
    rng = np.random.default_rng(seed)
    gal = rng.standard_normal((6, 5))
    probes = gal[rng.integers(0, 6, 10)] + 0.8 * rng.standard_normal((10, 5))
    ids = rng.integers(0, 6, 10)
    R = special_ortho_group.rvs(5, random_state=seed)
    assert M.rank1(gal, range(6), probes, ids) == M.rank1(gal @ R, range(6), probes @ R, ids)


def _brute_vr(g, imp, f):
    best = 0.0
    for thr in sorted(set(g) | set(imp), reverse=True):
        far = np.mean(np.asarray(imp) >= thr)
        if far <= f:
            best = np.mean(np.asarray(g) >= thr)
    return best


def test_roc_examples():
    roc = M.roc_and_vr(M.ScoreSet([0.9, 0.8], [0.1, 0.2]), far_levels=(0.5,))
    assert roc.vr_at[0.5] == 1.0 == _brute_vr([0.9, 0.8], [0.1, 0.2], 0.5)
    assert len(roc.thresholds) == 4


def test_roc_brute_force_agreement():
    rng = np.random.default_rng(3)
    for _ in range(20):
        g = np.round(rng.uniform(-1, 1, 15), 2)
        imp = np.round(rng.uniform(-1, 1, 40), 2)
        roc = M.roc_and_vr(M.ScoreSet(g, imp), far_levels=(0.01, 0.1, 0.3, 1.0))
        for f, v in roc.vr_at.items():
            assert v == _brute_vr(g, imp, f)


def test_roc_chance_and_monotone():
    rng = np.random.default_rng(0)
    scores = rng.uniform(-1, 1, 4000)
    roc = M.roc_and_vr(M.ScoreSet(scores[:2000], scores[2000:]), far_levels=(0.1, 0.01))
    assert abs(roc.vr_at[0.1] - 0.1) < 0.03
    assert roc.vr_at[0.01] <= roc.vr_at[0.1]
    same = rng.uniform(-1, 1, 500)
    r2 = M.roc_and_vr(M.ScoreSet(same, same), far_levels=(0.1,))
    assert abs(r2.vr_at[0.1] - 0.1) <= 1 / 500


def test_roc_errors_and_csv(tmp_path):
    with pytest.raises(ValueError):
        M.roc_and_vr(M.ScoreSet([], [0.1]))
    with pytest.raises(ValueError, match="FAR"):
        M.roc_and_vr(M.ScoreSet([0.5], [0.1]), far_levels=(0.0,))
    roc = M.roc_and_vr(M.ScoreSet([0.9, 0.3], [0.1, 0.5]))
    roc.write_csv(tmp_path / "roc.csv")
    lines = (tmp_path / "roc.csv").read_text().splitlines()
    assert lines[0] == "threshold,far,vr" and len(lines) == 5


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**16), st.sampled_from(["exp", "cube", "affine"]))
def test_roc_invariant_under_monotone_transform(seed, kind):
    rng = np.random.default_rng(seed)
    g, imp = rng.uniform(-1, 1, 30), rng.uniform(-1, 1, 60)
    fn = {"exp": np.exp, "cube": lambda x: x ** 3, "affine": lambda x: 3 * x + 7}[kind]
    a = M.roc_and_vr(M.ScoreSet(g, imp), far_levels=(0.05, 0.2))
    b = M.roc_and_vr(M.ScoreSet(fn(g), fn(imp)), far_levels=(0.05, 0.2))
    assert a.vr_at == b.vr_at
    assert np.array_equal(a.far, b.far) and np.array_equal(a.vr, b.vr)


def test_score_sets():
    s = M.score_sets(np.eye(3), [0, 1, 2], np.eye(3), [0, 1, 2])
    assert sorted(s.genuine) == [1.0, 1.0, 1.0] and len(s.impostor) == 6


def _fid_oracle(a, b):
    covmean = linalg.sqrtm(a.cov @ b.cov).real
    d = a.mean - b.mean
    return float(d @ d + np.trace(a.cov) + np.trace(b.cov) - 2 * np.trace(covmean))


def test_fid_against_sqrtm_and_symmetry():
    rng = np.random.default_rng(0)
    for dim in (1, 3, 8):
        fa = M.MomentSummary.from_features(rng.standard_normal((200, dim)))
        fb = M.MomentSummary.from_features(rng.standard_normal((200, dim)) * 1.5 + 0.3)
        v = M.fid(fa, fb)
        assert v == pytest.approx(_fid_oracle(fa, fb), rel=1e-6, abs=1e-9)
        assert abs(v - M.fid(fb, fa)) < 1e-6
        assert M.fid(fa, fa) == pytest.approx(0.0, abs=1e-8)


def test_fid_rank_deficient_and_errors():
    rng = np.random.default_rng(1)
    feats = rng.standard_normal((5, 20))  # covariance rank 4 < 20
    a = M.MomentSummary.from_features(feats)
    assert M.fid(a, a) == pytest.approx(0.0, abs=1e-8)
    with pytest.raises(ValueError, match="dimension"):
        M.fid(a, M.MomentSummary(np.zeros(3), np.eye(3)))
    with pytest.raises(ValueError, match="indefinite"):
        M.fid(M.MomentSummary(np.zeros(2), np.diag([1.0, -1.0])), M.MomentSummary(np.zeros(2), np.eye(2)))


def test_attribute_ssim_properties():
    rng = np.random.default_rng(0)
    a = rng.uniform(-1, 1, (3, 3, 32, 32)).astype(np.float32)
    b = np.clip(a + 0.2 * rng.standard_normal(a.shape), -1, 1).astype(np.float32)
    assert M.attribute_ssim(a, a) == pytest.approx(1.0, abs=1e-12)
    assert M.attribute_ssim(a, b) == pytest.approx(M.attribute_ssim(b, a), abs=1e-12)
    noise = rng.uniform(-1, 1, a.shape)
    assert M.attribute_ssim(a, noise) < M.attribute_ssim(a, b)
    with pytest.raises(ValueError, match="shape"):
        M.attribute_ssim(a, b[:2])
