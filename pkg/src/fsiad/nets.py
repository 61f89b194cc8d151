"""Attribute encoders, AdaIN generator, discriminator and the small recognizer.

Channel layouts follow the canonical 128x128 tables; ``width`` scales every
hidden channel count (1.0 reproduces the canonical shapes exactly) and lower
resolutions drop stride-2 stages so the 4x4 bottleneck is kept.
"""
from __future__ import annotations

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .core import LATENT_DIM, RESOLUTIONS, GaussianPosterior

LRELU_SLOPE = 0.2
ADAIN_EPS = 1e-5

ENCODER_CHANNELS = (64, 128, 256, 512, 512)
GENERATOR_CHANNELS = (256, 128, 64, 32, 32)
FC_CHANNELS = 512  # 512 x 4 x 4 = 8192


def _c(n: int, width: float) -> int:
    return max(1, int(round(n * width)))


def _n_down(resolution: int) -> int:
    if resolution not in RESOLUTIONS:
        raise ValueError(f"resolution must be one of {RESOLUTIONS}, got {resolution}")
    return int(np.log2(resolution // 4))


class ConvINAct(nn.Sequential):
    """Convolution + instance normalization + LeakyReLU."""

    def __init__(self, cin, cout, k, s, p):
        super().__init__(
            nn.Conv2d(cin, cout, k, s, p),
            nn.InstanceNorm2d(cout, affine=True),
            nn.LeakyReLU(LRELU_SLOPE),
        )


class AttributeEncoder(nn.Module):
    def __init__(self, resolution: int = 128, width: float = 1.0, latent_dim: int = LATENT_DIM):
        super().__init__()
        self.resolution = resolution
        n = _n_down(resolution)
        chans = [_c(32, width)] + [_c(c, width) for c in ENCODER_CHANNELS[:n]]
        self.stages = nn.ModuleList([ConvINAct(3, chans[0], 5, 1, 2)])
        for cin, cout in zip(chans[:-1], chans[1:]):
            self.stages.append(ConvINAct(cin, cout, 3, 2, 1))
        self.fc = nn.Linear(chans[-1] * 16, 2 * latent_dim)
        self.latent_dim = latent_dim

    def forward(self, x, trace: list | None = None) -> GaussianPosterior:
        if x.shape[-1] != self.resolution or x.shape[-2] != self.resolution:
            raise ValueError(f"encoder built for {self.resolution}px input, got {tuple(x.shape[-2:])}")
        for stage in self.stages:
            x = stage(x)
            if trace is not None:
                trace.append(tuple(x.shape[1:]))
        h = self.fc(x.flatten(1))
        mu, logvar = h.split(self.latent_dim, dim=1)
        if trace is not None:
            trace.append((tuple(mu.shape[1:]), tuple(logvar.shape[1:])))
        return GaussianPosterior(mu, logvar)


def reparameterize(post: GaussianPosterior, rng: np.random.Generator | None = None,
                   eps: torch.Tensor | None = None) -> torch.Tensor:
    """z = mu + sigma * eps, eps ~ N(0, I) drawn from ``rng`` unless given."""
    if eps is None:
        noise = rng.standard_normal(tuple(post.mu.shape))
        eps = torch.as_tensor(noise, dtype=post.mu.dtype)
    return post.mu + post.sigma * eps


def adain(x: torch.Tensor, scale: torch.Tensor, shift: torch.Tensor) -> torch.Tensor:
    """Per-sample, per-channel renormalisation of ``x`` to (scale, shift).

    ``scale``/``shift`` are B x C (or broadcastable to it).
    """
    if scale.shape[-1] != x.shape[1] or shift.shape[-1] != x.shape[1]:
        raise ValueError(f"style has {scale.shape[-1]} channels, feature map has {x.shape[1]}")
    # accumulate the mean in float64 so a constant channel centres to exactly zero
    mean = x.mean(dim=(2, 3), keepdim=True, dtype=torch.float64).to(x.dtype)
    var = (x - mean).pow(2).mean(dim=(2, 3), keepdim=True)
    std = torch.sqrt(var + 1e-12)
    normed = (x - mean) / (std + ADAIN_EPS)
    return scale[..., None, None] * normed + shift[..., None, None]


class AdaIN(nn.Module):
    """Learned affine map from an attribute code to AdaIN (scale, shift)."""

    def __init__(self, channels: int, style_dim: int = LATENT_DIM):
        super().__init__()
        self.channels = channels
        self.affine = nn.Linear(style_dim, 2 * channels)

    def forward(self, x, style):
        if x.shape[1] != self.channels:
            raise ValueError(f"AdaIN layer expects {self.channels} channels, got {x.shape[1]}")
        gamma, beta = self.affine(style).split(self.channels, dim=1)
        return adain(x, 1.0 + gamma, beta)


class ResidualBlock(nn.Module):
    """Channel-preserving 3x3 conv-IN-LReLU x2 with identity skip."""

    def __init__(self, channels):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(channels, channels, 3, 1, 1),
            nn.InstanceNorm2d(channels, affine=True),
            nn.LeakyReLU(LRELU_SLOPE),
            nn.Conv2d(channels, channels, 3, 1, 1),
            nn.InstanceNorm2d(channels, affine=True),
        )

    def forward(self, x):
        return F.leaky_relu(x + self.body(x), LRELU_SLOPE)


class TransConvStage(nn.Module):
    def __init__(self, cin, cout):
        super().__init__()
        self.up = nn.ConvTranspose2d(cin, cout, 4, 2, 1)
        self.norm = AdaIN(cout)
        self.res = ResidualBlock(cout)

    def forward(self, x, style):
        x = F.leaky_relu(self.norm(self.up(x), style), LRELU_SLOPE)
        return self.res(x)


class Generator(nn.Module):
    def __init__(self, resolution: int = 128, width: float = 1.0, latent_dim: int = LATENT_DIM):
        super().__init__()
        self.resolution = resolution
        self.latent_dim = latent_dim
        n = _n_down(resolution)
        self.fc_channels = _c(FC_CHANNELS, width)
        self.fc = nn.Linear(2 * latent_dim, self.fc_channels * 16)
        chans = [self.fc_channels] + [_c(c, width) for c in GENERATOR_CHANNELS[len(GENERATOR_CHANNELS) - n:]]
        self.stages = nn.ModuleList(TransConvStage(a, b) for a, b in zip(chans[:-1], chans[1:]))
        last = chans[-1]
        self.refine = ConvINAct(last, _c(32, width), 3, 1, 1)
        self.to_rgb = nn.Conv2d(_c(32, width), 3, 3, 1, 1)

    def forward(self, z_id, z_attr, trace: list | None = None):
        if z_id.shape[-1] != self.latent_dim or z_attr.shape[-1] != self.latent_dim:
            raise ValueError(f"codes must have length {self.latent_dim}, got {z_id.shape[-1]} and {z_attr.shape[-1]}")
        h = self.fc(torch.cat([z_id, z_attr], dim=1))
        if trace is not None:
            trace.append(tuple(h.shape[1:]))
        x = F.leaky_relu(h, LRELU_SLOPE).view(-1, self.fc_channels, 4, 4)
        for stage in self.stages:
            x = stage(x, z_attr)
            if trace is not None:
                trace.append(tuple(x.shape[1:]))
        x = self.refine(x)
        if trace is not None:
            trace.append(tuple(x.shape[1:]))
        x = self.to_rgb(x)
        if trace is not None:
            trace.append(tuple(x.shape[1:]))
        x = torch.tanh(x)
        if trace is not None:
            trace.append(tuple(x.shape[1:]))
        return x


def _conv_bn_relu(cin, cout, k, s, p):
    return nn.Sequential(nn.Conv2d(cin, cout, k, s, p),
                         nn.BatchNorm2d(cout, track_running_stats=False),
                         nn.ReLU())


class DiscResBlock(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.body = nn.Sequential(
            nn.ReflectionPad2d(1),
            _conv_bn_relu(channels, channels, 3, 1, 0),
            nn.ReflectionPad2d(1),
            _conv_bn_relu(channels, channels, 3, 1, 0),
        )

    def forward(self, x):
        return x + self.body(x)


class Discriminator(nn.Module):
    """Image-level real/fake probability.

    BatchNorm always uses batch statistics so that the discriminator carries no
    buffers that a generator step could mutate.
    """

    def __init__(self, width: float = 1.0, n_res: int = 3):
        super().__init__()
        c1, c2, c3 = _c(64, width), _c(128, width), _c(256, width)
        self.pad = nn.ReflectionPad2d(3)
        self.stages = nn.ModuleList([
            _conv_bn_relu(3, c1, 7, 1, 0),
            _conv_bn_relu(c1, c2, 3, 2, 1),
            _conv_bn_relu(c2, c3, 3, 2, 1),
        ])
        self.res = nn.ModuleList(DiscResBlock(c3) for _ in range(n_res))
        self.head = nn.Linear(c3, 1)

    def logits(self, x, trace: list | None = None):
        x = self.pad(x)
        if trace is not None:
            trace.append(tuple(x.shape[1:]))
        for block in list(self.stages) + list(self.res):
            x = block(x)
            if trace is not None:
                trace.append(tuple(x.shape[1:]))
        return self.head(x.mean(dim=(2, 3))).squeeze(1)

    def forward(self, x, trace: list | None = None):
        p = torch.sigmoid(self.logits(x, trace))
        if trace is not None:
            trace.append((1,))
        return p


class Recognizer(nn.Module):
    """Four stride-2 conv stages, pooled 256-d embedding and an identity head.

    Serves both as the frozen identity encoder and as the HFR network.
    """

    def __init__(self, n_classes: int, embed_dim: int = LATENT_DIM):
        super().__init__()
        chans = (3, 32, 64, 128, 256)
        self.backbone = nn.Sequential(*[ConvINAct(a, b, 3, 2, 1) for a, b in zip(chans[:-1], chans[1:])])
        self.fc = nn.Linear(chans[-1], embed_dim)
        self.head = nn.Linear(embed_dim, n_classes)
        self.n_classes = n_classes

    def features(self, x):
        """Un-normalised penultimate features."""
        return self.fc(self.backbone(x).mean(dim=(2, 3)))

    def forward(self, x):
        f = self.features(x)
        return F.normalize(f, dim=1, eps=1e-12), self.head(f)


def recognize(params: Recognizer, img: torch.Tensor):
    return params(img)


def encode_identity(params: Recognizer, I_N: torch.Tensor, I_V: torch.Tensor) -> torch.Tensor:
    """Average of the two domains' unit embeddings, projected back to the sphere."""
    if I_N.shape[0] != I_V.shape[0]:
        raise ValueError(f"batch sizes differ: {I_N.shape[0]} vs {I_V.shape[0]}")
    e_n, _ = params(I_N)
    e_v, _ = params(I_V)
    return average_identity(e_n, e_v)


def average_identity(e_n: torch.Tensor, e_v: torch.Tensor) -> torch.Tensor:
    e_n = F.normalize(e_n, dim=-1)
    e_v = F.normalize(e_v, dim=-1)
    return F.normalize(0.5 * (e_n + e_v), dim=-1)


def encode_attributes(params: AttributeEncoder, img: torch.Tensor) -> GaussianPosterior:
    return params(img)


def generate(params: Generator, z_id, z_attr):
    return params(z_id, z_attr)


def discriminate(params: Discriminator, img):
    return params(img)


def build_fsiad_nets(resolution: int, width: float, seed: int):
    """Freshly initialised attribute encoders (N, V), generator and discriminator."""
    torch.manual_seed(seed)
    return {
        "enc_n": AttributeEncoder(resolution, width),
        "enc_v": AttributeEncoder(resolution, width),
        "gen": Generator(resolution, width),
        "disc": Discriminator(width),
    }
