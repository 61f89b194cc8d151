import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from fsiad import losses as L
from fsiad.core import GaussianPosterior, TrainConfig
from fsiad.gradcheck import check_gradients
from loss_oracles import loss_oracle_cases, relerr

D = torch.float64


@pytest.mark.parametrize("case", loss_oracle_cases(), ids=lambda c: c[0])
def test_oracle_values(case):
    name, value, oracle, frozen = case
    assert relerr(value, oracle) < 1e-4
    assert relerr(value, frozen) < 1e-4


def test_ssim_config_constants():
    cfg = L.SsimConfig()
    assert abs(sum(cfg.weights) - 1.0001) < 1e-3
    assert abs(float(L.gaussian_window(cfg.window, cfg.sigma).sum()) - 1.0) < 1e-12
    assert (cfg.window, cfg.sigma, cfg.k1, cfg.k2, cfg.data_range) == (7, 1.5, 0.01, 0.03, 2.0)
    four = cfg.with_scales(4)
    assert len(four.weights) == 4 and abs(sum(four.weights) - sum(cfg.weights)) < 1e-12
    assert cfg.max_scales(128) == 5 and cfg.max_scales(64) == 4 and cfg.max_scales(32) == 3


def test_loss_dis_trivial_cases_and_errors():
    zid = torch.tensor([[1.0, 0.0, 0.0]], dtype=D)
    perp1, perp2 = torch.tensor([[0.0, 1.0, 0.0]], dtype=D), torch.tensor([[0.0, 0.0, 2.0]], dtype=D)
    assert L.loss_dis(zid, perp1, perp2).item() == 0.0
    assert abs(L.loss_dis(zid, zid, zid).item() - 2.0) < 1e-12
    with pytest.raises(ValueError, match="zero"):
        L.loss_dis(zid, torch.zeros(1, 3, dtype=D), zid)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.01, 100), st.floats(0.01, 100), st.floats(0.01, 100), st.integers(0, 2**16))
def test_loss_dis_scale_invariant(a, b, c, seed):
    g = torch.Generator().manual_seed(seed)
    x, y, z = (torch.randn(3, 8, dtype=D, generator=g) for _ in range(3))
    base = L.loss_dis(x, y, z).item()
    assert abs(L.loss_dis(a * x, b * y, c * z).item() - base) < 1e-9
    assert base >= 0


def test_loss_kl_prior_zero_and_positive_sigma():
    prior = GaussianPosterior(torch.zeros(2, 5, dtype=D), torch.zeros(2, 5, dtype=D))
    assert L.loss_kl(prior, prior).item() == 0.0
    bad = GaussianPosterior(torch.zeros(1, 2, dtype=D), torch.tensor([[0.0, -math.inf]], dtype=D))
    with pytest.raises(ValueError, match="sigma"):
        L.loss_kl(bad, prior)


def test_loss_rec_properties(rng):
    a = torch.as_tensor(rng.uniform(-1, 1, (2, 3, 4, 4)))
    b = torch.as_tensor(rng.uniform(-1, 1, (2, 3, 4, 4)))
    assert L.loss_rec(a, a, a, a).item() == 0.0
    assert L.loss_rec(a, b, b, a).item() == L.loss_rec(b, a, a, b).item()
    with pytest.raises(ValueError, match="shape"):
        L.loss_rec(a, a, a[:1], a)


def test_loss_ip_attr_nonneg_and_errors(rng):
    z = torch.as_tensor(rng.standard_normal((3, 256)))
    embs = [torch.as_tensor(rng.standard_normal((3, 256))) for _ in range(4)]
    assert L.loss_ip(z, [z] * 4).item() == 0.0
    assert L.loss_ip(z, embs).item() >= 0
    with pytest.raises(ValueError):
        L.loss_ip(z, [z[:, :10]] * 4)
    assert L.loss_attr(z, z, z, z).item() == 0.0
    assert L.loss_attr(z, embs[0], embs[1], embs[2]).item() >= 0
    with pytest.raises(ValueError):
        L.loss_attr(z, z, z[:, :4], z)


def test_ms_ssim_self_and_size_errors(rng):
    x = torch.as_tensor(rng.uniform(-1, 1, (2, 3, 128, 128)))
    assert abs(L.ms_ssim(x, x).item() - 1.0) < 1e-6
    with pytest.raises(ValueError, match="too small"):
        L.ms_ssim(x[..., :64, :64], x[..., :64, :64])
    with pytest.raises(ValueError, match="shape"):
        L.ms_ssim(x, x[:1])


def test_loss_sim_boundaries(rng):
    x = torch.as_tensor(rng.uniform(-1, 1, (2, 3, 32, 32)))
    y = torch.as_tensor(rng.uniform(-1, 1, (2, 3, 32, 32)))
    cfg = L.SsimConfig().with_scales(3)
    assert abs(L.loss_sim(x, x, 0.84, cfg).item()) < 1e-6
    assert L.loss_sim(x, y, 0.0, cfg).item() == (x - y).abs().mean().item()
    with pytest.raises(ValueError):
        L.loss_sim(x, y, 1.5, cfg)


def test_adversarial_limits():
    assert L.loss_adv_d(torch.tensor([1.0]), torch.tensor([0.0])).item() < 1e-6
    assert math.isfinite(L.loss_adv_d(torch.tensor([0.0]), torch.tensor([1.0])).item())
    assert L.loss_adv_g(torch.tensor([0.3, 0.7])).item() > 0


def test_loss_ce_margin_and_permutation():
    labels = torch.tensor([0, 2])
    uniform = L.loss_ce(torch.zeros(2, 4), torch.zeros(2, 4), labels).item()
    logits = torch.zeros(2, 4)
    logits[0, 0] = logits[1, 2] = 3.0
    expected = 2 * -math.log(math.exp(3) / (math.exp(3) + 3))
    val = L.loss_ce(logits, logits, labels).item()
    assert val < uniform and abs(val - expected) < 1e-5
    perm = torch.tensor([3, 0, 1, 2])
    inv = torch.argsort(perm)
    g = torch.Generator().manual_seed(0)
    ln, lv = torch.randn(5, 4, generator=g), torch.randn(5, 4, generator=g)
    y = torch.tensor([0, 1, 2, 3, 1])
    assert abs(L.loss_ce(ln, lv, y).item() - L.loss_ce(ln[:, perm], lv[:, perm], inv[y]).item()) < 1e-6
    with pytest.raises(ValueError, match="label"):
        L.loss_ce(ln, lv, torch.tensor([0, 1, 2, 3, 4]))


def test_loss_in_errors():
    assert L.loss_in(torch.ones(2, 3), torch.ones(2, 3)).item() == 0.0
    with pytest.raises(ValueError):
        L.loss_in(torch.ones(2, 3), torch.ones(2, 4))


def test_aggregate_examples():
    cfg = TrainConfig()
    r = L.aggregate(dict(dis=1.0, kl=0.5, rec=3.0, ip=0.0, attr=0.0, sim=0.0, adv_g=0.25), cfg)
    assert r["iad"] == 2.5
    assert r["int"] == 0.0 and r["fsm"] == 3.0 + 0.25
    assert r["all"] == r["iad"] + r["fsm"]
    with pytest.raises(KeyError, match="kl"):
        L.aggregate(dict(dis=1.0), cfg)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0, 50), min_size=16, max_size=16))
def test_aggregate_superposition(vals):
    keys = ("dis", "kl", "rec", "ip", "attr", "sim", "adv_g", "ce")
    a = dict(zip(keys, vals[:8]), **{"in": vals[7]})
    b = dict(zip(keys, vals[8:]), **{"in": vals[15]})
    zero = {k: 0.0 for k in a}
    cfg = TrainConfig(lambda_dis=1.5, lambda_int=3.0, lambda_adv=0.5, gamma=0.01)
    s = {k: a[k] + b[k] for k in a}
    A, B, S, Z = (L.aggregate(x, cfg) for x in (a, b, s, zero))
    for k in ("iad", "int", "fsm", "all", "hfr"):
        assert abs(S[k] - (A[k] + B[k] - Z[k])) <= 1e-6 * max(1.0, abs(S[k]))


def test_csv_schema():
    assert L.csv_header().split(",") == ["iteration", *L.LOSS_FIELDS]
    assert len(L.LOSS_FIELDS) == 14
    row = L.csv_row(3, {k: 1.0 for k in L.LOSS_FIELDS}).split(",")
    assert row[0] == "3" and len(row) == 15
    assert L.first_nonfinite({"dis": 1.0, "kl": float("nan"), "rec": float("inf")}) == "kl"


# ---- gradient checks ---------------------------------------------------------

def _leaf(rng, shape, lo=-1.0, hi=1.0):
    return torch.as_tensor(rng.uniform(lo, hi, shape)).requires_grad_(True)


def test_grad_loss_dis(rng):
    a, b, c = (_leaf(rng, (3, 16)) for _ in range(3))
    worst, _ = check_gradients(lambda: L.loss_dis(a, b, c), [a, b, c], rng=rng)
    assert worst < 1e-3


def test_grad_loss_kl(rng):
    mu1, lv1, mu2, lv2 = (_leaf(rng, (2, 8)) for _ in range(4))
    fn = lambda: L.loss_kl(GaussianPosterior(mu1, lv1), GaussianPosterior(mu2, lv2))  # noqa: E731
    worst, _ = check_gradients(fn, [mu1, lv1, mu2, lv2], rng=rng)
    assert worst < 1e-3


def test_grad_loss_rec(rng):
    ts = [_leaf(rng, (2, 3, 4, 4)) for _ in range(4)]
    worst, _ = check_gradients(lambda: L.loss_rec(*ts), ts, rng=rng)
    assert worst < 1e-3


def test_grad_loss_sim(rng):
    x = torch.as_tensor(rng.uniform(-1, 1, (2, 3, 32, 32)))
    y = _leaf(rng, (2, 3, 32, 32))
    cfg = L.SsimConfig().with_scales(3)
    worst, _ = check_gradients(lambda: L.loss_sim(x, y, 0.84, cfg), [y], n_probe=12, rng=rng)
    assert worst < 1e-3


def test_grad_ms_ssim_eight_pixels(rng):
    base = torch.as_tensor(rng.uniform(-1, 1, (1, 1, 112, 112)))
    x = torch.as_tensor(rng.uniform(-1, 1, (1, 1, 112, 112)))
    y = (0.6 * base + 0.4 * x).requires_grad_(True)
    worst, rows = check_gradients(lambda: L.ms_ssim(base, y), [y], n_probe=8, rng=rng)
    assert len(rows) == 8 and worst < 1e-3
