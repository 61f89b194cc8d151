import numpy as np
import pytest
import torch

from fsiad.core import GaussianPosterior
from fsiad.gradcheck import check_gradients, module_params64, relative_error
from fsiad.nets import (AttributeEncoder, Discriminator, Generator, Recognizer, adain, average_identity,
                        build_fsiad_nets, discriminate, encode_attributes, encode_identity, generate,
                        recognize, reparameterize)

TABLE_I = [(32, 128, 128), (64, 64, 64), (128, 32, 32), (256, 16, 16), (512, 8, 8), (512, 4, 4),
           ((256,), (256,))]
TABLE_II = [(8192,), (256, 8, 8), (128, 16, 16), (64, 32, 32), (32, 64, 64), (32, 128, 128),
            (32, 128, 128), (3, 128, 128), (3, 128, 128)]
TABLE_III = [(3, 134, 134), (64, 128, 128), (128, 64, 64), (256, 32, 32), (256, 32, 32), (256, 32, 32),
             (256, 32, 32), (1,)]


@pytest.fixture(scope="module")
def canonical():
    torch.manual_seed(0)
    return AttributeEncoder(128, 1.0), Generator(128, 1.0), Discriminator(1.0)


def test_encoder_table_shapes(canonical):
    enc, _, _ = canonical
    trace = []
    with torch.no_grad():
        post = enc(torch.zeros(1, 3, 128, 128), trace)
    assert trace == TABLE_I
    assert tuple(post.mu.shape) == (1, 256) and bool((post.sigma > 0).all())


def test_generator_table_shapes(canonical):
    _, gen, _ = canonical
    trace = []
    with torch.no_grad():
        out = gen(torch.randn(2, 256), torch.randn(2, 256), trace)
    assert trace == TABLE_II
    assert float(out.abs().max()) <= 1.0


def test_discriminator_table_shapes(canonical):
    _, _, disc = canonical
    trace = []
    with torch.no_grad():
        y = disc(torch.rand(2, 3, 128, 128) * 2 - 1, trace)
    assert trace == TABLE_III
    assert tuple(y.shape) == (2,) and bool(((y > 0) & (y < 1)).all())


@pytest.mark.parametrize("res", [32, 64])
def test_desk_resolutions_keep_bottleneck(res):
    enc, gen = AttributeEncoder(res, 0.125), Generator(res, 0.125)
    tr = []
    with torch.no_grad():
        post = enc(torch.zeros(1, 3, res, res), tr)
        out = gen(torch.randn(1, 256), post.mu)
    assert tr[-2][1:] == (4, 4)
    assert tuple(out.shape) == (1, 3, res, res)
    with pytest.raises(ValueError, match="px"):
        enc(torch.zeros(1, 3, 128, 128))


def test_generator_code_length_error():
    gen = Generator(32, 0.125)
    with pytest.raises(ValueError, match="length"):
        gen(torch.randn(1, 128), torch.randn(1, 256))


def test_generator_deterministic():
    gen = Generator(32, 0.125)
    z1, z2 = torch.randn(2, 256), torch.randn(2, 256)
    with torch.no_grad():
        assert torch.equal(generate(gen, z1, z2), generate(gen, z1, z2))


def test_encode_identity_examples():
    u = torch.nn.functional.normalize(torch.randn(1, 256), dim=1)
    assert torch.allclose(average_identity(u, u), u, atol=1e-6)
    e_n = torch.zeros(1, 256, dtype=torch.float64)
    e_v = torch.zeros(1, 256, dtype=torch.float64)
    e_n[0, 0] = 1.0
    e_v[0, 1] = 1.0
    z = average_identity(e_n, e_v)
    assert abs(z[0, 0].item() - 0.70711) < 1e-5 and abs(z[0, 1].item() - 0.70711) < 1e-5
    assert float(z[0, 2:].abs().max()) == 0.0
    rec = Recognizer(5)
    with torch.no_grad():
        zz = encode_identity(rec, torch.rand(3, 3, 32, 32), torch.rand(3, 3, 32, 32))
        assert torch.allclose(zz.norm(dim=1), torch.ones(3), atol=1e-5)
        with pytest.raises(ValueError, match="batch"):
            encode_identity(rec, torch.rand(3, 3, 32, 32), torch.rand(2, 3, 32, 32))


def test_encode_attributes_sigma_positive():
    enc = AttributeEncoder(32, 0.125)
    with torch.no_grad():
        post = encode_attributes(enc, torch.rand(4, 3, 32, 32) * 2 - 1)
    assert tuple(post.mu.shape) == tuple(post.sigma.shape) == (4, 256)
    assert bool((post.sigma > 0).all())


def test_reparameterize_zero_noise_and_statistics():
    mu = torch.randn(3, 256)
    post = GaussianPosterior(mu, torch.zeros(3, 256))
    assert torch.equal(reparameterize(post, eps=torch.zeros(3, 256)), mu)
    big = GaussianPosterior(torch.zeros(100_000, 256, dtype=torch.float64),
                            torch.zeros(100_000, 256, dtype=torch.float64))
    z = reparameterize(big, np.random.default_rng(0)).numpy()
    assert np.abs(z.mean(axis=0)).max() <= 0.02
    s = z.std(axis=0)
    assert s.min() >= 0.98 and s.max() <= 1.02


def test_reparameterize_gradient():
    g = torch.Generator().manual_seed(0)
    mu = torch.randn(2, 256, dtype=torch.float64, generator=g, requires_grad=True)
    logvar = torch.randn(2, 256, dtype=torch.float64, generator=g, requires_grad=True)
    eps = torch.randn(2, 256, dtype=torch.float64, generator=g)
    w = torch.randn(2, 256, dtype=torch.float64, generator=g)
    fn = lambda: (w * reparameterize(GaussianPosterior(mu, logvar), eps=eps) ** 2).sum()  # noqa: E731
    worst, rows = check_gradients(fn, [mu, logvar], n_probe=10)
    assert worst < 1e-5, rows


def test_adain_examples():
    g = torch.Generator().manual_seed(1)
    x = torch.randn(2, 4, 8, 8, dtype=torch.float64, generator=g) * 3 + 1
    mean = x.mean(dim=(2, 3))
    std = x.var(dim=(2, 3), unbiased=False).sqrt()
    assert torch.allclose(adain(x, std, mean), x, atol=1e-4)
    y = adain(x, torch.ones(2, 4, dtype=torch.float64), torch.zeros(2, 4, dtype=torch.float64))
    assert float(y.mean(dim=(2, 3)).abs().max()) < 1e-4
    assert float((y.std(dim=(2, 3), unbiased=False) - 1).abs().max()) < 1e-3
    const = torch.full((1, 2, 4, 4), 0.7)
    out = adain(const, torch.ones(1, 2), torch.zeros(1, 2))
    assert torch.equal(out, torch.zeros_like(out))
    with pytest.raises(ValueError, match="channels"):
        adain(x, torch.ones(2, 3, dtype=torch.float64), torch.zeros(2, 3, dtype=torch.float64))


def test_discriminate_range():
    d = Discriminator(0.125)
    with torch.no_grad():
        p = discriminate(d, torch.rand(5, 3, 32, 32) * 2 - 1)
    assert tuple(p.shape) == (5,) and bool(((p > 0) & (p < 1)).all())


def test_recognizer_outputs_and_independence():
    torch.manual_seed(0)
    e_id, f = Recognizer(6), Recognizer(6)
    x = torch.rand(3, 3, 64, 64) * 2 - 1
    with torch.no_grad():
        emb, logits = recognize(f, x)
        emb2, _ = recognize(e_id, x)
    assert torch.allclose(emb.norm(dim=1), torch.ones(3), atol=1e-5)
    assert tuple(logits.shape) == (3, 6)
    assert not torch.equal(emb, emb2)
    ids = {id(p) for p in e_id.parameters()}
    assert not any(id(p) in ids for p in f.parameters())
    with torch.no_grad():
        f.fc.weight.add_(1.0)
        emb3, _ = recognize(e_id, x)
    assert torch.equal(emb2, emb3)


def test_build_fsiad_nets_seeded():
    a = build_fsiad_nets(32, 0.125, 5)
    b = build_fsiad_nets(32, 0.125, 5)
    for k in a:
        for (n1, p1), (n2, p2) in zip(a[k].named_parameters(), b[k].named_parameters()):
            assert n1 == n2 and torch.equal(p1, p2)


@pytest.mark.parametrize("name", ["encoder", "generator", "discriminator", "recognizer"])
def test_network_parameter_gradients(name):
    torch.manual_seed(0)
    g = torch.Generator().manual_seed(2)
    if name == "encoder":
        net = AttributeEncoder(32, 0.125)
        x = torch.rand(2, 3, 32, 32, dtype=torch.float64, generator=g) * 2 - 1
        fn = lambda: (net(x).mu.sin().sum() + net(x).logvar.cos().sum())  # noqa: E731
    elif name == "generator":
        net = Generator(32, 0.125)
        z1 = torch.randn(2, 256, dtype=torch.float64, generator=g)
        z2 = torch.randn(2, 256, dtype=torch.float64, generator=g)
        w = torch.randn(2, 3, 32, 32, dtype=torch.float64, generator=g)
        fn = lambda: (net(z1, z2) * w).sum()  # noqa: E731
    elif name == "discriminator":
        net = Discriminator(0.125, n_res=1)
        x = torch.rand(4, 3, 32, 32, dtype=torch.float64, generator=g) * 2 - 1
        fn = lambda: net.logits(x).pow(2).sum()  # noqa: E731
    else:
        net = Recognizer(4)
        x = torch.rand(2, 3, 32, 32, dtype=torch.float64, generator=g) * 2 - 1
        fn = lambda: net(x)[1].pow(2).sum() + net(x)[0][:, :8].sum()  # noqa: E731
    params = module_params64(net)
    # one random coordinate from each of ten random parameter tensors
    rng = np.random.default_rng(3)
    chosen = [params[i] for i in rng.choice(len(params), size=min(10, len(params)), replace=False)]
    worst, rows = check_gradients(fn, chosen, n_probe=1, rng=rng)
    assert len(rows) >= 10
    # parameters feeding an instance norm (conv biases) have an exactly zero gradient; compare
    # those on an absolute scale just above the central-difference round-off floor
    worst = max(relative_error(a, n, floor=1e-5) for _, _, a, n in rows)
    assert worst < 1e-3, rows
