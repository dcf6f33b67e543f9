"""Invertible coupling network that hides a packed secret stream in a packed
cover stream.

Each block updates the cover branch additively from the secret branch, then
the secret branch affinely from the updated cover::

    cover'  = cover + xi(phi1(eta1(secret)))
    secret' = secret * exp(s(cover')) + phi3(eta3(cover'))
    s(.)    = c * tanh(phi2(eta2(.)) / c)

Both updates are undone exactly in reverse order, so the same parameters
recover (secret, cover) from (stego, residual).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from typing import Callable

import torch
from torch import nn

from .errors import NumericError, ValidationError


@dataclass(frozen=True)
class HidingConfig:
    channels: int = 36          # 4 * G * C for G=3 RGB frames
    n_blocks: int = 4
    hidden: int = 32
    growth: int = 16
    clamp: float = 2.0

    def digest(self) -> bytes:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).digest()


class DenseBlock(nn.Module):
    """Five conv layers with dense connectivity; the last one projects to
    ``out_ch`` and starts at zero so the block initially outputs 0."""

    def __init__(self, in_ch: int, out_ch: int, growth: int = 16):
        super().__init__()
        self.convs = nn.ModuleList(
            nn.Conv2d(in_ch + i * growth, growth, 3, padding=1) for i in range(4))
        self.out = nn.Conv2d(in_ch + 4 * growth, out_ch, 3, padding=1)
        self.act = nn.LeakyReLU(0.2)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, x):
        feats = [x]
        for conv in self.convs:
            feats.append(self.act(conv(torch.cat(feats, 1))))
        return self.out(torch.cat(feats, 1))


class Subnet(nn.Module):
    """A 3x3 conv (eta) followed by a dense block (phi)."""

    def __init__(self, in_ch: int, out_ch: int, hidden: int = 32, growth: int = 16):
        super().__init__()
        self.eta = nn.Conv2d(in_ch, hidden, 3, padding=1)
        self.phi = DenseBlock(hidden, out_ch, growth)

    def forward(self, x):
        return self.phi(self.eta(x))


class AdditiveBranch(nn.Module):
    """xi(phi1(eta1(.))): the secret-to-cover update."""

    def __init__(self, channels: int, hidden: int, growth: int):
        super().__init__()
        self.sub = Subnet(channels, channels, hidden, growth)
        self.xi = nn.Conv2d(channels, channels, 1, bias=False)

    def forward(self, x):
        return self.xi(self.sub(x))


class CouplingBlock(nn.Module):
    def __init__(self, additive: nn.Module, scale: nn.Module, shift: nn.Module,
                 clamp: float | None = 2.0):
        super().__init__()
        self.additive = additive
        self.scale = scale
        self.shift = shift
        self.clamp = clamp

    @classmethod
    def build(cls, channels: int, hidden: int = 32, growth: int = 16, clamp: float = 2.0):
        return cls(AdditiveBranch(channels, hidden, growth),
                   Subnet(channels, channels, hidden, growth),
                   Subnet(channels, channels, hidden, growth), clamp)

    def log_scale(self, cover):
        s = self.scale(cover)
        if self.clamp is None:
            return s
        return self.clamp * torch.tanh(s / self.clamp)

    def forward(self, cover, secret):
        cover = cover + self.additive(secret)
        secret = secret * torch.exp(self.log_scale(cover)) + self.shift(cover)
        return cover, secret

    def inverse(self, cover, secret):
        secret = (secret - self.shift(cover)) * torch.exp(-self.log_scale(cover))
        cover = cover - self.additive(secret)
        return cover, secret


class CouplingNet(nn.Module):
    """Stack of coupling blocks. Its config plus parameters form the stego key."""

    def __init__(self, config: HidingConfig | None = None, blocks=None):
        super().__init__()
        self.config = config or HidingConfig()
        if blocks is None:
            c = self.config
            blocks = [CouplingBlock.build(c.channels, c.hidden, c.growth, c.clamp)
                      for _ in range(c.n_blocks)]
        self.blocks = nn.ModuleList(blocks)

    def forward(self, cover, secret):
        for k, block in enumerate(self.blocks):
            cover, secret = block(cover, secret)
            _check_finite(k, cover, secret)
        return cover, secret

    def inverse(self, stego, residual):
        cover, secret = stego, residual
        for k in reversed(range(len(self.blocks))):
            cover, secret = self.blocks[k].inverse(cover, secret)
            _check_finite(k, cover, secret)
        return secret, cover

    @property
    def config_hash(self) -> bytes:
        return self.config.digest()

    def checkpoint_id(self) -> str:
        h = hashlib.sha256()
        for name, tensor in sorted(self.state_dict().items()):
            h.update(name.encode())
            h.update(tensor.detach().cpu().float().contiguous().numpy().tobytes())
        return h.hexdigest()[:16]


def _check_finite(k: int, *tensors):
    for t in tensors:
        if not torch.isfinite(t).all():
            raise NumericError(f"non-finite activation in coupling block {k}")


def _check_pair(a, b, what):
    if a.shape != b.shape:
        raise ValidationError(f"{what} shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")


def hide_forward(cover: torch.Tensor, secret: torch.Tensor, net: CouplingNet):
    """Return ``(stego, residual)`` for packed cover/secret stacks."""
    _check_pair(cover, secret, "cover/secret")
    return net(cover, secret)


def recover_backward(stego: torch.Tensor, residual: torch.Tensor, net: CouplingNet):
    """Exact inverse of :func:`hide_forward`; returns ``(secret, cover)``."""
    _check_pair(stego, residual, "stego/residual")
    return net.inverse(stego, residual)


# -- generic two-branch affine coupling ------------------------------------

def _split(x):
    if x.shape[1] % 2:
        raise ValidationError(f"channel count {x.shape[1]} cannot be split in halves")
    return x.chunk(2, dim=1)


def affine_couple(x: torch.Tensor, gamma1: Callable, eps1: Callable,
                  gamma2: Callable, eps2: Callable):
    """Split ``x`` along channels and apply the two-step affine coupling.

    ``x1' = x1 * gamma1(x2) + eps1(x2)``, then
    ``x2' = x2 * gamma2(x1') + eps2(x1')``.
    """
    x1, x2 = _split(x)
    y1 = x1 * gamma1(x2) + eps1(x2)
    y2 = x2 * gamma2(y1) + eps2(y1)
    return y1, y2


def affine_uncouple(y1, y2, gamma1, eps1, gamma2, eps2):
    x2 = (y2 - eps2(y1)) / gamma2(y1)
    x1 = (y1 - eps1(x2)) / gamma1(x2)
    return torch.cat([x1, x2], 1)


# -- loss and residual handling --------------------------------------------

def cf_weights(groups: int, mode: str = "center") -> torch.Tensor:
    """Temporal weights over a frame group, summing to 1.

    ``center`` is one-hot on the middle frame; ``triangular`` ramps linearly
    to the center; ``uniform`` weights all frames equally.
    """
    if mode == "center":
        w = torch.zeros(groups)
        w[groups // 2] = 1.0
    elif mode == "triangular":
        mid = (groups - 1) / 2
        w = torch.tensor([mid + 1 - abs(i - mid) for i in range(groups)])
    elif mode == "uniform":
        w = torch.ones(groups)
    else:
        raise ValidationError(f"unknown CF mode {mode!r}")
    return w / w.sum()


def channel_weights(cf: torch.Tensor, channels: int) -> torch.Tensor:
    """Expand per-frame weights to the packed channel layout ``[4*G*C, 1, 1]``."""
    w = cf.reshape(1, -1, 1).expand(4, -1, channels)
    return w.reshape(-1, 1, 1)


def hiding_loss(stego, cover, rec_secret, secret, rec_cover, cf, lambda_b: float = 2.0,
                channels: int = 3):
    """Weighted squared-error hiding objective on packed stacks.

    Returns ``(total, {"forward": ..., "backward": ...})`` where
    ``total = forward + lambda_b * backward``; sums run over all elements and
    are averaged over any leading batch dimension.
    """
    if lambda_b < 0:
        raise ValidationError(f"lambda_b must be non-negative, got {lambda_b}")
    cf = torch.as_tensor(cf, dtype=stego.dtype)
    if abs(float(cf.sum()) - 1.0) > 1e-6:
        raise ValidationError(f"CF weights must sum to 1, got {float(cf.sum())}")
    w = channel_weights(cf, channels).to(stego.dtype)

    def sq(a, b):
        d = ((a - b) * w) ** 2
        return d.sum() / (d.shape[0] if d.ndim == 4 else 1)

    forward = sq(stego, cover)
    backward = sq(rec_secret, secret) + sq(rec_cover, cover)
    return forward + lambda_b * backward, {"forward": forward, "backward": backward}


def residual_embedding_policy(residual: torch.Tensor, mode: str = "attach"):
    """Decide what travels with the stego stream.

    ``attach`` returns the residual itself (lossless recovery); ``discard``
    returns None and recovery substitutes zeros.
    """
    if mode == "attach":
        return residual.detach().clone()
    if mode == "discard":
        return None
    raise ValidationError(f"unknown residual mode {mode!r}")


def residual_for_recovery(payload, like: torch.Tensor) -> torch.Tensor:
    return torch.zeros_like(like) if payload is None else payload
