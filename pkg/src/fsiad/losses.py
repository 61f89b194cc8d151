"""Training objectives and the SSIM / MS-SSIM primitives.

Every loss sums over feature or pixel dimensions and averages over the batch.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .core import GaussianPosterior, TrainConfig

PROB_CLAMP = 1e-7

LOSS_FIELDS = ("dis", "kl", "rec", "ip", "attr", "sim", "adv_d", "adv_g",
               "int", "iad", "fsm", "ce", "in", "hfr")


@dataclass(frozen=True)
class SsimConfig:
    window: int = 7
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    data_range: float = 2.0
    weights: tuple = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)

    def with_scales(self, n: int) -> "SsimConfig":
        """Keep the first ``n`` scale weights, renormalised to their original sum."""
        w = self.weights[:n]
        total = sum(self.weights)
        return SsimConfig(self.window, self.sigma, self.k1, self.k2, self.data_range,
                          tuple(x * total / sum(w) for x in w))

    def max_scales(self, side: int) -> int:
        n = len(self.weights)
        while n > 1 and side < self.window * 2 ** (n - 1):
            n -= 1
        return n


def gaussian_window(size: int, sigma: float, dtype=torch.float64) -> torch.Tensor:
    coords = torch.arange(size, dtype=dtype) - (size - 1) / 2
    g = torch.exp(-coords ** 2 / (2 * sigma ** 2))
    return g / g.sum()


def _blur(x: torch.Tensor, win: torch.Tensor) -> torch.Tensor:
    # separable 'valid' Gaussian filter applied per channel
    c = x.shape[1]
    k = win.to(x.dtype)
    x = F.conv2d(x, k.view(1, 1, 1, -1).expand(c, 1, 1, -1), groups=c)
    return F.conv2d(x, k.view(1, 1, -1, 1).expand(c, 1, -1, 1), groups=c)


def _ssim_components(x, y, cfg: SsimConfig):
    """Spatially averaged (ssim, cs) maps, each B x C."""
    win = gaussian_window(cfg.window, cfg.sigma)
    c1 = (cfg.k1 * cfg.data_range) ** 2
    c2 = (cfg.k2 * cfg.data_range) ** 2
    mx, my = _blur(x, win), _blur(y, win)
    sxx = _blur(x * x, win) - mx * mx
    syy = _blur(y * y, win) - my * my
    sxy = _blur(x * y, win) - mx * my
    cs_map = (2 * sxy + c2) / (sxx + syy + c2)
    lum_map = (2 * mx * my + c1) / (mx * mx + my * my + c1)
    return (lum_map * cs_map).mean(dim=(2, 3)), cs_map.mean(dim=(2, 3))


def _check_pair(x, y):
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")


def ssim(x, y, cfg: SsimConfig = SsimConfig(), reduce: bool = True):
    """Single-scale SSIM; per-image values when ``reduce`` is False."""
    _check_pair(x, y)
    if min(x.shape[-2:]) < cfg.window:
        raise ValueError(f"image smaller than the {cfg.window}px window")
    s, _ = _ssim_components(x, y, cfg)
    s = s.mean(dim=1)
    return s.mean() if reduce else s


def ms_ssim(x, y, cfg: SsimConfig = SsimConfig()):
    _check_pair(x, y)
    levels = len(cfg.weights)
    need = cfg.window * 2 ** (levels - 1)
    side = min(x.shape[-2:])
    if side < need:
        raise ValueError(f"image too small for {levels} scales: side {side} < {need}")
    weights = torch.tensor(cfg.weights, dtype=x.dtype)
    mcs = []
    for level in range(levels):
        s, cs = _ssim_components(x, y, cfg)
        if level < levels - 1:
            mcs.append(torch.relu(cs))
            pad = [d % 2 for d in x.shape[2:]]
            x = F.avg_pool2d(x, 2, padding=pad)
            y = F.avg_pool2d(y, 2, padding=pad)
    stack = torch.stack(mcs + [torch.relu(s)], dim=0)
    val = torch.prod(stack ** weights.view(-1, 1, 1), dim=0)
    return val.mean()


# --------------------------------------------------------------------------
# disentanglement and distribution learning


def _cos(a, b):
    na, nb = a.norm(dim=-1), b.norm(dim=-1)
    if bool((na == 0).any()) or bool((nb == 0).any()):
        raise ValueError("cosine similarity of a zero-norm vector")
    return (a * b).sum(-1) / (na * nb)


def loss_dis(z_id, z_n, z_v):
    """|cos(z_id, z_n)| + |cos(z_id, z_v)|, batch mean; zero iff orthogonal."""
    if not (z_id.shape == z_n.shape == z_v.shape):
        raise ValueError("identity and attribute codes must share a shape")
    return (_cos(z_id, z_n).abs() + _cos(z_id, z_v).abs()).mean()


def kl_to_standard_normal(post: GaussianPosterior):
    """Closed-form KL(N(mu, sigma^2) || N(0, I)) per sample."""
    return 0.5 * (post.mu ** 2 + torch.exp(post.logvar) - 1.0 - post.logvar).sum(dim=-1)


def loss_kl(post_n: GaussianPosterior, post_v: GaussianPosterior):
    for p in (post_n, post_v):
        if bool((p.logvar == -math.inf).any()):
            raise ValueError("posterior sigma must be strictly positive")
    return kl_to_standard_normal(post_n).mean() + kl_to_standard_normal(post_v).mean()


# --------------------------------------------------------------------------
# synthesis objectives


def _sq_dist(a, b):
    _check_pair(a, b)
    return (a - b).pow(2).flatten(1).sum(dim=1)


def loss_rec(I_N, I_V, rec_N, rec_V):
    return (_sq_dist(I_N, rec_N) + _sq_dist(I_V, rec_V)).mean()


def loss_ip(z_id, embeddings):
    """Squared distance of each synthetic image's identity embedding to z_id."""
    total = 0.0
    for e in embeddings:
        if e.shape != z_id.shape:
            raise ValueError(f"embedding shape {tuple(e.shape)} != identity code {tuple(z_id.shape)}")
        total = total + (z_id - e).pow(2).sum(dim=-1)
    return total.mean()


def loss_attr(z_n, z_v, zhat_n, zhat_v):
    return (_sq_dist(z_n, zhat_n) + _sq_dist(z_v, zhat_v)).mean()


def loss_sim(X, X_hat, alpha: float, cfg: SsimConfig = SsimConfig()):
    """(1 - alpha) * L1 + alpha * (1 - MS-SSIM)."""
    _check_pair(X, X_hat)
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    l1 = (X - X_hat).abs().mean()
    if alpha == 0.0:
        return l1
    return (1 - alpha) * l1 + alpha * (1 - ms_ssim(X, X_hat, cfg))


def _clamp(p):
    return p.clamp(PROB_CLAMP, 1 - PROB_CLAMP)


def loss_adv_d(d_real, d_fake):
    return -torch.log(_clamp(d_real)).mean() - torch.log(1 - _clamp(d_fake)).mean()


def loss_adv_g(d_fake):
    """Non-saturating generator objective."""
    return -torch.log(_clamp(d_fake)).mean()


# --------------------------------------------------------------------------
# recognition objectives


def loss_ce(logits_n, logits_v, labels):
    n_classes = logits_n.shape[1]
    if bool((labels < 0).any()) or bool((labels >= n_classes).any()):
        raise ValueError(f"label out of range for {n_classes} classes")
    return F.cross_entropy(logits_n, labels) + F.cross_entropy(logits_v, labels)


def loss_in(f_n, f_v):
    return _sq_dist(f_n, f_v).mean()


# --------------------------------------------------------------------------
# bookkeeping


def aggregate(report: dict, cfg: TrainConfig) -> dict:
    """Fill in the weighted totals from the component losses."""
    need = ("dis", "kl", "rec", "ip", "attr", "sim", "adv_g")
    missing = [k for k in need if k not in report]
    if missing:
        raise KeyError(f"missing loss component: {missing[0]}")
    out = dict(report)
    out["iad"] = cfg.lambda_dis * out["dis"] + out["kl"]
    out["int"] = out["ip"] + out["attr"] + out["sim"]
    out["fsm"] = out["rec"] + cfg.lambda_int * out["int"] + cfg.lambda_adv * out["adv_g"]
    out["all"] = out["iad"] + out["fsm"]
    if "ce" in out and "in" in out:
        out["hfr"] = out["ce"] + cfg.gamma * out["in"]
    return out


def first_nonfinite(report: dict):
    for k in LOSS_FIELDS:
        v = report.get(k)
        if v is not None and not math.isfinite(float(v)):
            return k
    return None


def csv_header() -> str:
    return "iteration," + ",".join(LOSS_FIELDS)


def csv_row(iteration: int, report: dict) -> str:
    vals = (float(report.get(k, float("nan"))) for k in LOSS_FIELDS)
    return f"{iteration}," + ",".join(repr(v) for v in vals)
