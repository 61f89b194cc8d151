"""Identification, verification, FID and SSIM scoring."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
import torch

from .losses import SsimConfig, ssim

FAR_LEVELS = (0.01, 0.001, 0.0001)
PSD_TOL = 1e-8
EIG_CLIP = 1e-10


def _unit(x):
    x = np.asarray(x, np.float64)
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def rank1(gallery_emb, gallery_ids, probe_emb, probe_ids) -> float:
    """Fraction of probes whose most cosine-similar gallery entry shares their subject.

    Ties resolve to the lowest gallery index.
    """
    gallery_ids = np.asarray(gallery_ids)
    probe_ids = np.asarray(probe_ids)
    if len(gallery_ids) == 0 or len(probe_ids) == 0:
        raise ValueError("gallery and probe sets must be non-empty")
    if len(set(gallery_ids.tolist())) != len(gallery_ids):
        raise ValueError("gallery subjects must be unique")
    sims = _unit(probe_emb) @ _unit(gallery_emb).T
    best = np.argmax(sims, axis=1)
    return float(np.mean(gallery_ids[best] == probe_ids))


@dataclass
class ScoreSet:
    genuine: np.ndarray
    impostor: np.ndarray

    def __post_init__(self):
        self.genuine = np.asarray(self.genuine, np.float64).ravel()
        self.impostor = np.asarray(self.impostor, np.float64).ravel()


def score_sets(gallery_emb, gallery_ids, probe_emb, probe_ids) -> ScoreSet:
    """All gallery x probe cosine scores split by same / different subject."""
    sims = _unit(probe_emb) @ _unit(gallery_emb).T
    same = np.asarray(probe_ids)[:, None] == np.asarray(gallery_ids)[None, :]
    return ScoreSet(sims[same], sims[~same])


@dataclass
class RocResult:
    thresholds: np.ndarray
    far: np.ndarray
    vr: np.ndarray
    vr_at: dict

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["threshold", "far", "vr"])
            for t, f, v in zip(self.thresholds, self.far, self.vr):
                w.writerow([repr(float(t)), repr(float(f)), repr(float(v))])


def roc_and_vr(scores: ScoreSet, far_levels=FAR_LEVELS) -> RocResult:
    """Threshold sweep over every distinct score, accept when score >= threshold.

    VR at a FAR level is read at the smallest threshold whose FAR does not
    exceed it; no interpolation. If no threshold qualifies the VR is 0.
    """
    g, imp = scores.genuine, scores.impostor
    if g.size == 0 or imp.size == 0:
        raise ValueError("genuine and impostor score sets must be non-empty")
    for f in far_levels:
        if not 0.0 < f <= 1.0:
            raise ValueError(f"FAR level {f} outside (0, 1]")
    thr = np.unique(np.concatenate([g, imp]))[::-1]
    g_sorted, i_sorted = np.sort(g), np.sort(imp)
    vr = (g.size - np.searchsorted(g_sorted, thr, side="left")) / g.size
    far = (imp.size - np.searchsorted(i_sorted, thr, side="left")) / imp.size
    vr_at = {}
    for f in far_levels:
        ok = np.nonzero(far <= f)[0]
        # far is non-decreasing as thresholds fall, so the last qualifying row is the smallest threshold
        vr_at[f] = float(vr[ok[-1]]) if ok.size else 0.0
    return RocResult(thr, far, vr, vr_at)


@dataclass
class MomentSummary:
    mean: np.ndarray
    cov: np.ndarray

    @classmethod
    def from_features(cls, feats) -> "MomentSummary":
        feats = np.asarray(feats, np.float64)
        if feats.ndim != 2 or feats.shape[0] < 2:
            raise ValueError("need at least two feature vectors")
        return cls(feats.mean(axis=0), np.atleast_2d(np.cov(feats, rowvar=False)))


def _psd_sqrt(cov):
    cov = 0.5 * (cov + cov.T)
    w, v = np.linalg.eigh(cov)
    if w.size and w.min() < -PSD_TOL * max(1.0, abs(w).max()):
        raise ValueError(f"covariance is indefinite (min eigenvalue {w.min():.3g})")
    w = np.clip(w, 0.0, None)
    return (v * np.sqrt(w)) @ v.T


def fid(a: MomentSummary, b: MomentSummary) -> float:
    """Frechet distance between two Gaussians via a symmetric eigendecomposition."""
    mu1, mu2 = np.atleast_1d(a.mean), np.atleast_1d(b.mean)
    s1, s2 = np.atleast_2d(a.cov), np.atleast_2d(b.cov)
    if mu1.shape != mu2.shape or s1.shape != s2.shape or s1.shape[0] != mu1.shape[0]:
        raise ValueError("moment summaries have mismatched dimensions")
    r1 = _psd_sqrt(s1)
    _psd_sqrt(s2)  # validates the second covariance
    m = r1 @ s2 @ r1
    ev = np.linalg.eigvalsh(0.5 * (m + m.T))
    if ev.size and ev.min() < -PSD_TOL * max(1.0, abs(ev).max()):
        raise ValueError("covariance product is indefinite beyond tolerance")
    ev = np.where(ev < EIG_CLIP, 0.0, ev)
    diff = mu1 - mu2
    val = diff @ diff + np.trace(s1) + np.trace(s2) - 2.0 * np.sqrt(ev).sum()
    return float(max(val, 0.0))


def attribute_ssim(references, synthetics, cfg: SsimConfig = SsimConfig()) -> float:
    """Mean single-scale SSIM over aligned (reference, synthetic) pairs."""
    x = torch.as_tensor(np.asarray(references), dtype=torch.float64)
    y = torch.as_tensor(np.asarray(synthetics), dtype=torch.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
    return float(ssim(x, y, cfg))
