"""CNN encoder, shifted-window spatiotemporal attention translator, CNN decoder.

The predictor maps ``T`` observed frames to ``T'`` future frames. Each future
frame is the last observed frame plus a decoded correction; the readout that
produces the correction starts at zero, so an untrained model is exactly the
copy (persistence) baseline.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
from torch import nn

from .errors import NumericError, ValidationError
from .video import VideoClip


# -- convolutional encoder / decoder ----------------------------------------

@dataclass(frozen=True)
class EncoderConfig:
    in_channels: int = 3
    widths: tuple = (32, 64)
    stride: int = 2

    @property
    def total_stride(self) -> int:
        return self.stride ** len(self.widths)

    @property
    def out_channels(self) -> int:
        return self.widths[-1] if self.widths else self.in_channels

    def latent_shape(self, t: int, h: int, w: int) -> tuple[int, int, int, int]:
        s = self.total_stride
        return (t, self.out_channels, h // s, w // s)


class EncoderStack(nn.Module):
    """``n_i`` layers of Conv2d -> LayerNorm -> ReLU.

    LayerNorm normalizes each frame's feature map over (C, H, W).
    """

    def __init__(self, cfg: EncoderConfig = EncoderConfig()):
        super().__init__()
        self.cfg = cfg
        layers = []
        c = cfg.in_channels
        for w in cfg.widths:
            layers += [nn.Conv2d(c, w, 3, stride=cfg.stride, padding=1),
                       nn.GroupNorm(1, w), nn.ReLU()]
            c = w
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return encode(x, self)


def encode(x: torch.Tensor, enc: EncoderStack) -> torch.Tensor:
    """``[T, C, H, W]`` -> ``[T, C', H / s, W / s]``."""
    s = enc.cfg.total_stride
    if x.shape[-1] % s or x.shape[-2] % s:
        raise ValidationError(f"frame size {tuple(x.shape[-2:])} not divisible by total stride {s}")
    if x.shape[-3] != enc.cfg.in_channels:
        raise ValidationError(f"expected {enc.cfg.in_channels} channels, got {x.shape[-3]}")
    return enc.net(x)


class DecoderStack(nn.Module):
    """Mirror of :class:`EncoderStack` with transposed convolutions."""

    def __init__(self, cfg: EncoderConfig = EncoderConfig()):
        super().__init__()
        self.cfg = cfg
        layers = []
        widths = list(cfg.widths)
        for i in reversed(range(len(widths))):
            c_in = widths[i]
            c_out = widths[i - 1] if i > 0 else widths[0]
            layers += [nn.ConvTranspose2d(c_in, c_out, 4 if cfg.stride == 2 else cfg.stride,
                                          stride=cfg.stride, padding=1 if cfg.stride == 2 else 0),
                       nn.GroupNorm(1, c_out), nn.ReLU()]
        self.net = nn.Sequential(*layers)
        self.readout = nn.Conv2d(widths[0] if widths else cfg.in_channels, cfg.in_channels, 1)
        nn.init.zeros_(self.readout.weight)
        nn.init.zeros_(self.readout.bias)

    def forward(self, z):
        return self.readout(self.net(z))


# -- attention ---------------------------------------------------------------

def window_attention(q, k, v, mask=None):
    """``softmax(q k^T / sqrt(d_k) + mask) v`` over the last two axes.

    ``mask`` is additive (0 or -inf) and broadcast against the logits.
    """
    d_k = q.shape[-1]
    logits = q @ k.transpose(-2, -1) / math.sqrt(d_k)
    if not torch.isfinite(logits).all():
        raise NumericError("non-finite attention logits")
    if mask is not None:
        logits = logits + mask
    return torch.softmax(logits, dim=-1) @ v


def attention_weights(q, k, mask=None):
    logits = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
    if mask is not None:
        logits = logits + mask
    return torch.softmax(logits, dim=-1)


class MultiHeadAttention(nn.Module):
    def __init__(self, dim: int = 64, heads: int = 4, bias: bool = True):
        super().__init__()
        if dim % heads:
            raise ValidationError(f"model dim {dim} not divisible by {heads} heads")
        self.dim, self.heads = dim, heads
        self.q = nn.Linear(dim, dim, bias=bias)
        self.k = nn.Linear(dim, dim, bias=bias)
        self.v = nn.Linear(dim, dim, bias=bias)
        self.o = nn.Linear(dim, dim, bias=bias)

    def forward(self, tokens, mask=None):
        return multi_head(tokens, self, mask)


def multi_head(tokens: torch.Tensor, mha: MultiHeadAttention, mask=None) -> torch.Tensor:
    """``Concat(head_1..head_H) W^O`` for tokens ``[..., N, d]``.

    ``mask`` may be ``[N, N]`` or ``[W, N, N]`` when tokens are ``[B*W, N, d]``.
    """
    if tokens.shape[-1] != mha.dim:
        raise ValidationError(f"token dim {tokens.shape[-1]} != model dim {mha.dim}")
    *lead, n, d = tokens.shape
    h = mha.heads

    def split(x):
        return x.reshape(*lead, n, h, d // h).transpose(-3, -2)

    q, k, v = split(mha.q(tokens)), split(mha.k(tokens)), split(mha.v(tokens))
    if mask is not None and mask.ndim == 3:
        nw = mask.shape[0]
        b = q.shape[0] // nw
        q, k, v = (x.reshape(b, nw, h, n, d // h) for x in (q, k, v))
        out = window_attention(q, k, v, mask[None, :, None])
        out = out.reshape(b * nw, h, n, d // h)
    else:
        out = window_attention(q, k, v, mask)
    out = out.transpose(-3, -2).reshape(*lead, n, d)
    return mha.o(out)


# -- shifted windows ---------------------------------------------------------

def _check_window(size, window, shift):
    for s, w, sh in zip(size, window, shift):
        if w > s:
            raise ValidationError(f"window {tuple(window)} larger than latent extent {tuple(size)}")
        if s % w:
            raise ValidationError(f"latent extent {tuple(size)} not divisible by window {tuple(window)}")
        if not 0 <= sh < w:
            raise ValidationError(f"shift {tuple(shift)} must be smaller than window {tuple(window)}")


def window_partition(x, window):
    """``[B, T, H, W, C]`` -> ``[B * nW, wt * wh * ww, C]``."""
    b, t, h, w, c = x.shape
    wt, wh, ww = window
    x = x.reshape(b, t // wt, wt, h // wh, wh, w // ww, ww, c)
    return x.permute(0, 1, 3, 5, 2, 4, 6, 7).reshape(-1, wt * wh * ww, c)


def window_merge(windows, window, shape):
    b, t, h, w, c = shape
    wt, wh, ww = window
    x = windows.reshape(b, t // wt, h // wh, w // ww, wt, wh, ww, c)
    return x.permute(0, 1, 4, 2, 5, 3, 6, 7).reshape(b, t, h, w, c)


def shift_mask(size, window, shift) -> torch.Tensor | None:
    """Additive ``[nW, N, N]`` mask that blocks attention across wrap-around seams."""
    if not any(shift):
        return None
    t, h, w = size
    region = torch.zeros(1, t, h, w, 1)
    cnt = 0
    slices = [(slice(0, -wi), slice(-wi, -si), slice(-si, None)) if si else (slice(None),)
              for wi, si in zip(window, shift)]
    for st in slices[0]:
        for sh in slices[1]:
            for sw in slices[2]:
                region[:, st, sh, sw, :] = cnt
                cnt += 1
    ids = window_partition(region, window).squeeze(-1)          # [nW, N]
    diff = ids[:, :, None] != ids[:, None, :]
    mask = torch.zeros(diff.shape)
    return mask.masked_fill(diff, float("-inf"))


def shifted_window_attention(x, mha: MultiHeadAttention, window, shift):
    """Cyclic shift, windowed multi-head attention, inverse shift.

    ``x`` is ``[B, T, H, W, C]``; a zero shift gives plain window attention.
    """
    b, t, h, w, c = x.shape
    _check_window((t, h, w), window, shift)
    if any(shift):
        x = torch.roll(x, tuple(-s for s in shift), dims=(1, 2, 3))
    mask = shift_mask((t, h, w), window, shift)
    if mask is not None:
        mask = mask.to(x.dtype)
    out = multi_head(window_partition(x, window), mha, mask)
    out = window_merge(out, window, x.shape)
    if any(shift):
        out = torch.roll(out, tuple(shift), dims=(1, 2, 3))
    return out


class ShiftedBlock(nn.Module):
    """Pre-norm transformer block over 3-D windows; odd layers are shifted."""

    def __init__(self, dim=64, heads=4, window=(2, 4, 4), shift=(1, 2, 2),
                 layer_index: int = 0, mlp_ratio: float = 2.0):
        super().__init__()
        self.window = tuple(window)
        self.shift = tuple(shift) if layer_index % 2 else (0, 0, 0)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x):
        x = x + shifted_window_attention(self.norm1(x), self.attn, self.window, self.shift)
        return x + self.mlp(self.norm2(x))


def shifted_block(latent, block: ShiftedBlock):
    """Apply one block to a latent ``[T, C, H, W]``."""
    x = latent.permute(0, 2, 3, 1)[None]
    return block(x)[0].permute(0, 3, 1, 2)


# -- predictor ---------------------------------------------------------------

@dataclass(frozen=True)
class PredictorConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    t_in: int = 8
    t_out: int = 8
    depth: int = 2
    heads: int = 4
    window: tuple = (2, 4, 4)
    shift: tuple = (1, 2, 2)


class VideoPredictor(nn.Module):
    def __init__(self, cfg: PredictorConfig = PredictorConfig()):
        super().__init__()
        self.cfg = cfg
        dim = cfg.encoder.out_channels
        self.encoder = EncoderStack(cfg.encoder)
        self.blocks = nn.ModuleList(
            ShiftedBlock(dim, cfg.heads, cfg.window, cfg.shift, i) for i in range(cfg.depth))
        self.temporal = nn.Linear(cfg.t_in, cfg.t_out)
        with torch.no_grad():
            self.temporal.weight.zero_()
            self.temporal.weight[:, -1] = 1.0
            self.temporal.bias.zero_()
        self.decoder = DecoderStack(cfg.encoder)

    def latent(self, frames):
        z = encode(frames, self.encoder)
        for blk in self.blocks:
            z = shifted_block(z, blk)
        return z

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        """``[T, C, H, W]`` (or batched ``[B, T, C, H, W]``) -> ``T'`` frames."""
        if frames.ndim == 5:
            return torch.stack([self(f) for f in frames])
        if frames.shape[0] != self.cfg.t_in:
            raise ValidationError(f"predictor expects {self.cfg.t_in} frames, got {frames.shape[0]}")
        z = self.latent(frames)
        z = self.temporal(z.permute(1, 2, 3, 0)).permute(3, 0, 1, 2)
        return frames[-1:] + self.decoder(z)


def predict(clip: VideoClip, t_prime: int, model: VideoPredictor) -> VideoClip:
    if t_prime != model.cfg.t_out:
        raise ValidationError(f"model predicts {model.cfg.t_out} frames, asked for {t_prime}")
    if len(clip) != model.cfg.t_in:
        raise ValidationError(f"model expects {model.cfg.t_in} input frames, clip has {len(clip)}")
    with torch.no_grad():
        out = model(clip.frames).clamp(0.0, 1.0)
    return VideoClip(out, fps=clip.fps, meta={**clip.meta, "predicted": "true"})
