"""One-level orthonormal Haar DWT and cross-frame band packing.

A packed stack for a group of G frames with C channels has ``4*G*C``
channels ordered band-major (LL, HL, LH, HH), then frame, then channel.
"""

from __future__ import annotations

import torch

from .errors import ValidationError

BANDS = ("LL", "HL", "LH", "HH")


def dwt2(frame: torch.Tensor):
    """Split ``[..., H, W]`` into four ``[..., H/2, W/2]`` sub-bands.

    For each 2x2 block [[a, b], [c, d]]: LL=(a+b+c+d)/2, HL=(a+b-c-d)/2,
    LH=(a-b+c-d)/2, HH=(a-b-c+d)/2.
    """
    h, w = frame.shape[-2:]
    if h % 2 or w % 2:
        raise ValidationError(f"DWT needs even height and width, got {h}x{w}")
    a = frame[..., 0::2, 0::2]
    b = frame[..., 0::2, 1::2]
    c = frame[..., 1::2, 0::2]
    d = frame[..., 1::2, 1::2]
    return ((a + b + c + d) / 2, (a + b - c - d) / 2,
            (a - b + c - d) / 2, (a - b - c + d) / 2)


def idwt2(ll, hl, lh, hh) -> torch.Tensor:
    if not (ll.shape == hl.shape == lh.shape == hh.shape):
        raise ValidationError("sub-bands must share one shape, got "
                              f"{[tuple(x.shape) for x in (ll, hl, lh, hh)]}")
    out = ll.new_empty(*ll.shape[:-2], 2 * ll.shape[-2], 2 * ll.shape[-1])
    out[..., 0::2, 0::2] = (ll + hl + lh + hh) / 2
    out[..., 0::2, 1::2] = (ll + hl - lh - hh) / 2
    out[..., 1::2, 0::2] = (ll - hl + lh - hh) / 2
    out[..., 1::2, 1::2] = (ll - hl - lh + hh) / 2
    return out


def pack_bands(bands: torch.Tensor) -> torch.Tensor:
    """``[..., 4, G, C, h, w]`` -> ``[..., 4*G*C, h, w]`` (pure reshape)."""
    return bands.reshape(*bands.shape[:-5], -1, *bands.shape[-2:])


def unpack_bands(stack: torch.Tensor, groups: int, channels: int) -> torch.Tensor:
    if stack.shape[-3] != 4 * groups * channels:
        raise ValidationError(f"stack has {stack.shape[-3]} channels, expected "
                              f"4*G*C = {4 * groups * channels}")
    return stack.reshape(*stack.shape[:-3], 4, groups, channels, *stack.shape[-2:])


def band_pack(frames) -> torch.Tensor:
    """DWT every frame of a group and pack same-band coefficients together.

    ``frames`` is a list of ``[C, H, W]`` tensors or a tensor ``[..., G, C, H, W]``.
    """
    if isinstance(frames, (list, tuple)):
        if not frames:
            raise ValidationError("band_pack needs at least one frame")
        shapes = {tuple(f.shape) for f in frames}
        if len(shapes) != 1:
            raise ValidationError(f"frames differ in shape: {sorted(shapes)}")
        frames = torch.stack(list(frames))
    if frames.ndim < 4 or frames.shape[-4] < 1:
        raise ValidationError(f"expected [..., G, C, H, W], got {tuple(frames.shape)}")
    bands = torch.stack(dwt2(frames), dim=-5)
    return pack_bands(bands)


def band_unpack(stack: torch.Tensor, groups: int, channels: int) -> torch.Tensor:
    """Inverse of :func:`band_pack`; returns ``[..., G, C, H, W]``."""
    b = unpack_bands(stack, groups, channels)
    return idwt2(b[..., 0, :, :, :, :], b[..., 1, :, :, :, :],
                 b[..., 2, :, :, :, :], b[..., 3, :, :, :, :])


def group_frames(frames: torch.Tensor, groups: int) -> torch.Tensor:
    """``[T, C, H, W]`` -> ``[ceil(T/G), G, C, H, W]``.

    A trailing partial group is padded by repeating the last frame.
    """
    t = frames.shape[0]
    n = -(-t // groups)
    pad = n * groups - t
    if pad:
        frames = torch.cat([frames, frames[-1:].expand(pad, *frames.shape[1:])])
    return frames.reshape(n, groups, *frames.shape[1:])


def pack_clip(frames: torch.Tensor, groups: int) -> torch.Tensor:
    """Clip ``[T, C, H, W]`` -> stacks ``[n_groups, 4*G*C, H/2, W/2]``."""
    return band_pack(group_frames(frames, groups))


def unpack_clip(stacks: torch.Tensor, groups: int, channels: int, n_frames: int) -> torch.Tensor:
    frames = band_unpack(stacks, groups, channels)
    return frames.reshape(-1, *frames.shape[2:])[:n_frames]
