"""Toy DDPM face swapper.

The identity pathway is a noise-predicting denoiser conditioned on a unit-norm
identity embedding. A time-ramped mask blends it with a target pathway that
reconstructs the target image, so the background is kept while the face
region takes the source identity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Protocol

import torch
import torch.nn.functional as F
from torch import nn

from .errors import NumericError, ValidationError


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    betas: torch.Tensor

    def __post_init__(self):
        b = torch.as_tensor(self.betas, dtype=torch.float64)
        if b.ndim != 1 or b.numel() < 1:
            raise ValidationError("betas must be a non-empty vector")
        if (b < 0).any() or (b >= 1).any():
            raise ValidationError("betas must lie in [0, 1)")
        if (b[1:] < b[:-1]).any():
            raise ValidationError("betas must be non-decreasing")
        object.__setattr__(self, "betas", b)

    @classmethod
    def linear(cls, steps: int = 100, start: float = 1e-4, end: float = 2e-2):
        return cls(torch.linspace(start, end, steps, dtype=torch.float64))

    @property
    def steps(self) -> int:
        return self.betas.numel()

    @property
    def alphas(self) -> torch.Tensor:
        return 1.0 - self.betas

    @property
    def alpha_bars(self) -> torch.Tensor:
        return torch.cumprod(self.alphas, 0)

    def alpha_bar(self, t: int) -> float:
        """Cumulative product up to step t; ``alpha_bar(0) == 1``."""
        return 1.0 if t == 0 else float(self.alpha_bars[t - 1])

    def _check(self, t: int, lo: int = 1):
        if not lo <= t <= self.steps:
            raise ValidationError(f"diffusion step {t} outside [{lo}, {self.steps}]")


def _noised(x0, t, noise, sched: NoiseSchedule):
    ab = sched.alpha_bar(t)
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * noise


def q_sample(x0: torch.Tensor, t: int, noise: torch.Tensor, sched: NoiseSchedule):
    """Closed-form forward noising ``sqrt(ab_t) x0 + sqrt(1 - ab_t) noise``."""
    sched._check(t)
    return _noised(x0, t, noise, sched)


def denoised_estimate(x_t, t: int, eps, sched: NoiseSchedule):
    ab = sched.alpha_bar(t)
    return (x_t - math.sqrt(1.0 - ab) * eps) / math.sqrt(ab)


def p_step(x_t: torch.Tensor, t: int, denoiser: Callable, sched: NoiseSchedule,
           generator: torch.Generator | None = None, noise: torch.Tensor | None = None,
           sigma_scale: float = 1.0):
    """One ancestral DDPM step from ``x_t`` to a sample of ``x_{t-1}``.

    ``denoiser(x_t, t)`` predicts the noise. The variance is the posterior
    variance; ``sigma_scale=0`` (or ``t == 1``) makes the step deterministic.
    """
    sched._check(t)
    eps = denoiser(x_t, t)
    if eps.shape != x_t.shape:
        raise ValidationError(f"denoiser output {tuple(eps.shape)} != input {tuple(x_t.shape)}")
    if not torch.isfinite(eps).all():
        raise NumericError(f"denoiser produced non-finite output at step {t}")
    beta = float(sched.betas[t - 1])
    ab, ab_prev = sched.alpha_bar(t), sched.alpha_bar(t - 1)
    coef = beta / math.sqrt(1.0 - ab) if beta > 0 else 0.0
    mean = (x_t - coef * eps) / math.sqrt(1.0 - beta)
    if t == 1 or sigma_scale == 0 or beta == 0:
        return mean
    var = beta * (1.0 - ab_prev) / (1.0 - ab)
    if noise is None:
        noise = torch.randn(x_t.shape, generator=generator, dtype=x_t.dtype)
    return mean + sigma_scale * math.sqrt(var) * noise


# -- target-preserving mask --------------------------------------------------

@dataclass(frozen=True, eq=False)
class MaskSchedule:
    mask: torch.Tensor          # rigid mask U, [1, H, W] in [0, 1]
    steps: int                  # T
    ramp: int                   # T_hat

    def __post_init__(self):
        if self.ramp <= 0:
            raise ValidationError(f"mask ramp T_hat must be positive, got {self.ramp}")
        if self.steps <= 0:
            raise ValidationError("mask schedule needs T > 0")


def mask_at(ms: MaskSchedule, t: int) -> torch.Tensor:
    """``U_t = min(1, (T - t) / T_hat * U)``."""
    if not 0 <= t <= ms.steps:
        raise ValidationError(f"mask step {t} outside [0, {ms.steps}]")
    return torch.clamp((ms.steps - t) / ms.ramp * ms.mask, max=1.0)


def blended_step(x_t, t: int, target_pathway: Callable, id_pathway: Callable,
                 ms: MaskSchedule):
    """``(1 - U_t) * target(x_t, t) + U_t * identity(x_t, t)``."""
    a = target_pathway(x_t, t)
    b = id_pathway(x_t, t)
    if a.shape != b.shape:
        raise ValidationError(f"pathway outputs differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    u = mask_at(ms, t).to(a.dtype)
    return (1 - u) * a + u * b


# -- identity embedding --------------------------------------------------------

class IdentityEmbedder(Protocol):
    def __call__(self, image: torch.Tensor) -> torch.Tensor: ...


class ToyEmbedder(nn.Module):
    """Gray 8x8 average-pooled thumbnail, flattened and L2-normalized.

    Accepts ``[C, H, W]`` or ``[B, C, H, W]``; differentiable.
    """

    def __init__(self, grid: int = 8):
        super().__init__()
        self.grid = grid

    @property
    def dim(self) -> int:
        return self.grid * self.grid

    def forward(self, image):
        single = image.ndim == 3
        x = image[None] if single else image
        gray = x.mean(1, keepdim=True)
        v = F.adaptive_avg_pool2d(gray, self.grid).flatten(1)
        v = v / v.norm(dim=1, keepdim=True).clamp_min(1e-12)
        return v[0] if single else v


def cover_image_loss(pred_noise, true_noise, id_src, id_denoised):
    """Noise-prediction squared error plus ``1 - cos`` identity term.

    Squared error is summed over each sample; both terms are averaged over the
    batch when inputs are batched.
    """
    if id_src.norm(dim=-1).min() == 0 or id_denoised.norm(dim=-1).min() == 0:
        raise ValidationError("identity embeddings must be non-zero")
    err = (pred_noise - true_noise) ** 2
    err = err.flatten(1).sum(1) if err.ndim == 4 else err.sum()
    cos = F.cosine_similarity(id_src, id_denoised, dim=-1)
    return (err + 1.0 - cos).mean()


# -- networks ------------------------------------------------------------------

def timestep_embedding(t, dim: int = 32):
    t = torch.as_tensor(t, dtype=torch.get_default_dtype()).reshape(-1)
    half = dim // 2
    freqs = torch.exp(-math.log(1000.0) * torch.arange(half, dtype=t.dtype) / half)
    args = t[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], 1)


class FiLM(nn.Module):
    """Feature-wise affine modulation from an identity vector; starts neutral."""

    def __init__(self, id_dim: int, channels: int):
        super().__init__()
        self.proj = nn.Linear(id_dim, 2 * channels)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def forward(self, h, id_emb):
        if id_emb is None:
            return h
        gamma, beta = self.proj(id_emb).chunk(2, -1)
        return h * (1 + gamma[..., None, None]) + beta[..., None, None]


class ResBlock(nn.Module):
    def __init__(self, in_ch, out_ch, t_dim, id_dim):
        super().__init__()
        self.norm1 = nn.GroupNorm(min(8, in_ch), in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.temb = nn.Linear(t_dim, out_ch)
        self.norm2 = nn.GroupNorm(min(8, out_ch), out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.film = FiLM(id_dim, out_ch)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, temb, id_emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(temb)[..., None, None]
        h = self.film(self.norm2(h), id_emb)
        h = self.conv2(F.silu(h))
        return h + self.skip(x)


class DenoiserNet(nn.Module):
    """Three-level U-net predicting noise; identity enters through FiLM.

    Called without ``id_emb`` it is the unconditioned backbone.
    """

    def __init__(self, channels: int = 3, widths=(16, 32, 64), id_dim: int = 64,
                 t_dim: int = 32):
        super().__init__()
        w1, w2, w3 = widths
        self.t_dim = t_dim
        self.t_mlp = nn.Sequential(nn.Linear(t_dim, t_dim), nn.SiLU(), nn.Linear(t_dim, t_dim))
        self.inp = nn.Conv2d(channels, w1, 3, padding=1)
        self.enc1 = ResBlock(w1, w1, t_dim, id_dim)
        self.down1 = nn.Conv2d(w1, w2, 3, stride=2, padding=1)
        self.enc2 = ResBlock(w2, w2, t_dim, id_dim)
        self.down2 = nn.Conv2d(w2, w3, 3, stride=2, padding=1)
        self.mid = ResBlock(w3, w3, t_dim, id_dim)
        self.up2 = nn.ConvTranspose2d(w3, w2, 4, stride=2, padding=1)
        self.dec2 = ResBlock(2 * w2, w2, t_dim, id_dim)
        self.up1 = nn.ConvTranspose2d(w2, w1, 4, stride=2, padding=1)
        self.dec1 = ResBlock(2 * w1, w1, t_dim, id_dim)
        self.out = nn.Conv2d(w1, channels, 3, padding=1)

    def forward(self, x, t, id_emb=None):
        single = x.ndim == 3
        if single:
            x = x[None]
            id_emb = None if id_emb is None else id_emb.reshape(1, -1)
        t = torch.as_tensor(t, dtype=x.dtype).reshape(-1).expand(x.shape[0])
        temb = self.t_mlp(timestep_embedding(t, self.t_dim).to(x.dtype))
        h1 = self.enc1(self.inp(x), temb, id_emb)
        h2 = self.enc2(self.down1(h1), temb, id_emb)
        h = self.mid(self.down2(h2), temb, id_emb)
        h = self.dec2(torch.cat([self.up2(h), h2], 1), temb, id_emb)
        h = self.dec1(torch.cat([self.up1(h), h1], 1), temb, id_emb)
        eps = self.out(F.silu(h))
        return eps[0] if single else eps


class TinyDenoiser(nn.Module):
    """Two conv layers with identity FiLM; small enough for finite differences."""

    def __init__(self, channels: int = 3, hidden: int = 4, id_dim: int = 64):
        super().__init__()
        self.c1 = nn.Conv2d(channels, hidden, 3, padding=1)
        self.film = nn.Linear(id_dim, 2 * hidden)
        self.c2 = nn.Conv2d(hidden, channels, 3, padding=1)

    def forward(self, x, t, id_emb=None):
        h = torch.tanh(self.c1(x) + 0.01 * float(t))
        if id_emb is not None:
            g, b = self.film(id_emb).chunk(2, -1)
            h = h * (1 + g[..., None, None]) + b[..., None, None]
        return self.c2(h)


def swap_face(source: torch.Tensor, target: torch.Tensor, mask: torch.Tensor,
              net: nn.Module, sched: NoiseSchedule, ramp: int, seed: int = 0,
              embedder: IdentityEmbedder | None = None) -> torch.Tensor:
    """Generate the cover frame: target background, source identity in ``mask``.

    The target pathway returns the target noised to level ``t - 1`` with a
    fixed noise draw (the target itself at ``t = 1``); the identity pathway is
    an ancestral step of ``net`` conditioned on the source embedding.
    """
    embedder = embedder or ToyEmbedder()
    if source.shape != target.shape:
        raise ValidationError("source and target frames must share a shape")
    ms = MaskSchedule(mask.to(target.dtype), sched.steps, ramp)
    gen = torch.Generator().manual_seed(seed)
    target_noise = torch.randn(target.shape, generator=gen, dtype=target.dtype)
    x = torch.randn(target.shape, generator=gen, dtype=target.dtype)
    with torch.no_grad():
        id_emb = embedder(source)

        def target_pathway(x_t, t):
            return _noised(target, t - 1, target_noise, sched)

        def id_pathway(x_t, t):
            return p_step(x_t, t, lambda z, s: net(z, s, id_emb), sched, generator=gen)

        for t in range(sched.steps, 0, -1):
            x = blended_step(x, t, target_pathway, id_pathway, ms)
    return x.clamp(0.0, 1.0)
