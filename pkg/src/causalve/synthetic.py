"""Synthetic data: parametric faces with ground-truth tracks, natural-statistics
frames, moving-square clips and audio feature envelopes.

The parametric faces stand in for 3DMM fits and lip/blink detectors: every
quantity a loss needs (mouth aperture, eye landmarks, head pose) is known
exactly because it is the renderer input.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from scipy import ndimage

from .errors import ValidationError
from .video import VideoClip

# Face geometry, as fractions of the frame width (x) / height (y).
HEAD_AXES = (0.30, 0.40)
EYE_OFFSET = (0.12, -0.08)
EYE_HALF_W = 0.06
EYE_HALF_H = 0.045
MOUTH_OFFSET = (0.0, 0.18)
MOUTH_HALF_W = 0.10
MOUTH_HALF_H = 0.08
BACKGROUND = (0.22, 0.27, 0.33)


@dataclass(frozen=True)
class SyntheticFaceParams:
    head_center: tuple[float, float]
    head_tilt: float = 0.0
    eye_open_left: float = 1.0
    eye_open_right: float = 1.0
    mouth_open: float = 0.0
    identity_seed: int = 0

    def __post_init__(self):
        for name in ("eye_open_left", "eye_open_right", "mouth_open"):
            object.__setattr__(self, name, float(min(1.0, max(0.0, getattr(self, name)))))

    def replace(self, **kw) -> "SyntheticFaceParams":
        d = dict(self.__dict__)
        d.update(kw)
        return SyntheticFaceParams(**d)


def default_params(size: tuple[int, int], **kw) -> SyntheticFaceParams:
    h, w = size
    return SyntheticFaceParams(head_center=(w / 2, h / 2), **kw)


def _face_coords(params: SyntheticFaceParams, size):
    h, w = size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64) + 0.5
    dx = xx - params.head_center[0]
    dy = yy - params.head_center[1]
    c, s = math.cos(params.head_tilt), math.sin(params.head_tilt)
    # rotate image offsets into the head's frame
    return (c * dx + s * dy) / w, (-s * dx + c * dy) / h


def _ellipse(fx, fy, cx, cy, ax, ay):
    if ax <= 0 or ay <= 0:
        return np.zeros_like(fx, dtype=bool)
    return ((fx - cx) / ax) ** 2 + ((fy - cy) / ay) ** 2 <= 1.0


def _identity_look(identity_seed: int, size):
    rng = np.random.default_rng([identity_seed, 7919])
    skin = rng.uniform([0.45, 0.30, 0.22], [0.95, 0.80, 0.70])
    hair = rng.uniform(0.02, 0.45, 3)
    hair_line = rng.uniform(-0.30, -0.18)
    lo = rng.standard_normal((3, max(2, size[0] // 4), max(2, size[1] // 4)))
    tex = np.stack([ndimage.zoom(ch, (size[0] / lo.shape[1], size[1] / lo.shape[2]), order=1)
                    for ch in lo])
    return skin, hair, hair_line, 0.05 * tex


def face_mask(params: SyntheticFaceParams, size) -> torch.Tensor:
    """Binary head-ellipse mask ``[1, H, W]``; the rigid swap mask at desk scale."""
    fx, fy = _face_coords(params, size)
    m = _ellipse(fx, fy, 0.0, 0.0, *HEAD_AXES)
    return torch.from_numpy(m.astype(np.float32))[None]


def feature_masks(params: SyntheticFaceParams, size) -> dict[str, np.ndarray]:
    fx, fy = _face_coords(params, size)
    ex, ey = EYE_OFFSET
    mx, my = MOUTH_OFFSET
    return {
        "head": _ellipse(fx, fy, 0.0, 0.0, *HEAD_AXES),
        "eye_left": _ellipse(fx, fy, -ex, ey, EYE_HALF_W, EYE_HALF_H * params.eye_open_left),
        "eye_right": _ellipse(fx, fy, ex, ey, EYE_HALF_W, EYE_HALF_H * params.eye_open_right),
        "mouth": _ellipse(fx, fy, mx, my, MOUTH_HALF_W, MOUTH_HALF_H * params.mouth_open),
    }


def render_face(params: SyntheticFaceParams, size, channels: int = 3) -> torch.Tensor:
    h, w = size
    if h % 2 or w % 2:
        raise ValidationError(f"frame size must be even, got {size}")
    skin, hair, hair_line, tex = _identity_look(params.identity_seed, size)
    masks = feature_masks(params, size)
    _, fy = _face_coords(params, size)
    img = np.empty((3, h, w))
    img[:] = np.asarray(BACKGROUND)[:, None, None]
    head = masks["head"]
    img[:, head] = (skin[:, None] + tex[:, head])
    hair_mask = head & (fy < hair_line)
    img[:, hair_mask] = hair[:, None] + 0.5 * tex[:, hair_mask]
    for eye in ("eye_left", "eye_right"):
        img[:, masks[eye]] = np.array([0.08, 0.06, 0.05])[:, None]
    img[:, masks["mouth"]] = np.array([0.35, 0.05, 0.08])[:, None]
    img = np.clip(img, 0.0, 1.0)
    if channels == 1:
        img = img.mean(0, keepdims=True)
    return torch.from_numpy(img.astype(np.float32))


def eye_landmarks(open_left, open_right, tilt, cx, cy, size) -> torch.Tensor:
    """Eye corner and lid landmarks ``[T, 2, 4, 2]`` in pixels.

    Eye order is (left, right); point order (left corner, right corner, upper
    lid, lower lid). Inputs are tensors of length T and stay differentiable.
    """
    h, w = size
    vals = [torch.as_tensor(v) for v in (open_left, open_right, tilt, cx, cy)]
    dtype = next((v.dtype for v in vals if v.is_floating_point()), torch.get_default_dtype())
    open_left, open_right, tilt, cx, cy = (v.to(dtype) for v in vals)
    ex, ey = EYE_OFFSET
    eyes = []
    for sign, openness in ((-1.0, open_left), (1.0, open_right)):
        zero = torch.zeros_like(openness)
        fx = torch.stack([zero + sign * ex - EYE_HALF_W, zero + sign * ex + EYE_HALF_W,
                          zero + sign * ex, zero + sign * ex], -1) * w
        fy = torch.stack([zero + ey, zero + ey, ey - EYE_HALF_H * openness,
                          ey + EYE_HALF_H * openness], -1) * h
        eyes.append(torch.stack([fx, fy], -1))
    pts = torch.stack(eyes, 1)  # [T, 2, 4, 2] in head frame
    c, s = torch.cos(tilt)[:, None, None], torch.sin(tilt)[:, None, None]
    x = c * pts[..., 0] - s * pts[..., 1] + cx[:, None, None]
    y = s * pts[..., 0] + c * pts[..., 1] + cy[:, None, None]
    return torch.stack([x, y], -1)


def eye_gap_signal(landmarks: torch.Tensor, size) -> torch.Tensor:
    """Per-frame blink measure from eye landmarks.

    Sum of the eye-averaged width gap and height gap, each relative to the
    fully open eye: 0 for open eyes, 1 for both eyes shut.
    """
    h, w = size
    width = torch.linalg.vector_norm(landmarks[:, :, 0] - landmarks[:, :, 1], dim=-1)
    height = torch.linalg.vector_norm(landmarks[:, :, 2] - landmarks[:, :, 3], dim=-1)
    width_gap = 1.0 - width / (2 * EYE_HALF_W * w)
    height_gap = 1.0 - height / (2 * EYE_HALF_H * h)
    return width_gap.mean(1) + height_gap.mean(1)


def synth_face_clip(params_track: list[SyntheticFaceParams], size, fps: float = 25.0,
                    n_mel: int | None = None, audio_seed: int = 0):
    """Render a face clip and its ground-truth tracks.

    Returns ``(clip, lip_track [T], blink_track [T], pose_track [T, 3])`` with
    pose columns (tilt, cx, cy). When ``n_mel`` is given, synthetic audio
    features driven by the mouth track are attached to the clip.
    """
    if len(params_track) < 1:
        raise ValidationError("params_track must contain at least one frame")
    h, w = size
    if h % 2 or w % 2:
        raise ValidationError(f"frame size must be even, got {size}")
    frames = torch.stack([render_face(p, size) for p in params_track])
    lip = torch.tensor([p.mouth_open for p in params_track])
    pose = torch.tensor([[p.head_tilt, *p.head_center] for p in params_track])
    lm = eye_landmarks([p.eye_open_left for p in params_track],
                       [p.eye_open_right for p in params_track],
                       pose[:, 0], pose[:, 1], pose[:, 2], size)
    blink = eye_gap_signal(lm, size).float()
    audio = synth_audio_features(lip, n_mel, seed=audio_seed) if n_mel else None
    clip = VideoClip(frames, fps=fps, audio=audio)
    return clip, lip.float(), blink, pose.float()


# -- tracks and audio -------------------------------------------------------

def gaussian_process(n: int, rng: np.random.Generator, length_scale: float = 2.0,
                     mean: float = 0.0, scale: float = 1.0) -> np.ndarray:
    t = np.arange(n, dtype=np.float64)
    k = np.exp(-0.5 * ((t[:, None] - t[None]) / length_scale) ** 2)
    chol = np.linalg.cholesky(k + 1e-6 * np.eye(n))
    return mean + scale * chol @ rng.standard_normal(n)


def blink_signal(n: int, rng: np.random.Generator, length_scale: float = 1.5,
                 mean: float = -0.4, scale: float = 0.7) -> np.ndarray:
    """Clipped Gaussian-process signal in [0, 1]: mostly 0 with smooth blinks."""
    return np.clip(gaussian_process(n, rng, length_scale, mean, scale), 0.0, 1.0)


def make_face_track(n: int, size, seed: int = 0, identity_seed: int = 0,
                    blink: np.ndarray | None = None) -> list[SyntheticFaceParams]:
    rng = np.random.default_rng(seed)
    h, w = size
    cx = w / 2 + gaussian_process(n, rng, 3.0, 0.0, 0.04 * w)
    cy = h / 2 + gaussian_process(n, rng, 3.0, 0.0, 0.03 * h)
    tilt = gaussian_process(n, rng, 3.0, 0.0, 0.08)
    mouth = np.clip(gaussian_process(n, rng, 1.2, 0.35, 0.35), 0.0, 1.0)
    if blink is None:
        blink = blink_signal(n, rng)
    return [SyntheticFaceParams((float(cx[i]), float(cy[i])), float(tilt[i]),
                                1.0 - float(blink[i]), 1.0 - float(blink[i]),
                                float(mouth[i]), identity_seed) for i in range(n)]


def synth_audio_features(mouth_track, n_mel: int = 16, seed: int = 0,
                         noise: float = 0.05) -> torch.Tensor:
    """Mel-like band energies whose loudness follows the mouth aperture."""
    mouth = np.asarray(torch.as_tensor(mouth_track), dtype=np.float64)
    rng = np.random.default_rng([seed, 31])
    f = np.arange(n_mel)
    profile = (np.exp(-0.5 * ((f - 0.25 * n_mel) / (0.1 * n_mel + 1)) ** 2)
               + 0.6 * np.exp(-0.5 * ((f - 0.6 * n_mel) / (0.12 * n_mel + 1)) ** 2))
    feats = mouth[:, None] * profile[None] + noise * rng.standard_normal((len(mouth), n_mel))
    return torch.from_numpy(feats.astype(np.float32))


# -- natural-statistics and motion corpora ---------------------------------

def dead_leaves(rng: np.random.Generator, size, channels: int = 3, n_leaves: int = 400,
                gradient: float = 0.0015, blur: float = 0.6, noise: float = 0.6) -> np.ndarray:
    """Occluding-disk image with power-law radii, quantized to the 8-bit grid.

    Returns float64 ``[C, H, W]`` in [0, 1] whose values are multiples of 1/255.
    """
    h, w = size
    img = np.zeros((channels, h, w))
    filled = np.zeros((h, w), dtype=bool)
    yy, xx = np.mgrid[0:h, 0:w]
    for _ in range(n_leaves):
        r = min(h, w) * 0.6 * rng.random() ** 2 + 1.5
        cy, cx = rng.uniform(-r, h + r), rng.uniform(-r, w + r)
        m = ((yy - cy) ** 2 + (xx - cx) ** 2 < r * r) & ~filled
        if m.any():
            color = rng.uniform(0.05, 0.95, channels)
            gy, gx = rng.normal(0.0, gradient, 2)
            img[:, m] = color[:, None] + (gy * (yy[m] - cy) + gx * (xx[m] - cx))[None]
            filled |= m
        if filled.all():
            break
    img[:, ~filled] = 0.5
    if blur:
        img = ndimage.gaussian_filter(img, (0, blur, blur))
    img += rng.normal(0.0, noise / 255.0, img.shape)
    return np.clip(np.round(img * 255.0), 0, 255) / 255.0


def natural_clip(seed: int, n_frames: int = 8, size=(32, 32), channels: int = 3,
                 fps: float = 25.0) -> VideoClip:
    """A slow pan across a dead-leaves scene, with fresh sensor noise per frame."""
    rng = np.random.default_rng([seed, 4243])
    h, w = size
    pad = n_frames + 2
    scene = dead_leaves(rng, (h + 2 * pad, w + 2 * pad), channels, noise=0.0)
    vy, vx = rng.uniform(-1.0, 1.0, 2)
    frames = []
    for t in range(n_frames):
        oy, ox = int(round(pad + vy * t)), int(round(pad + vx * t))
        crop = scene[:, oy:oy + h, ox:ox + w] + rng.normal(0.0, 0.6 / 255.0, (channels, h, w))
        frames.append(np.clip(np.round(crop * 255.0), 0, 255) / 255.0)
    return VideoClip(torch.from_numpy(np.stack(frames).astype(np.float32)), fps=fps,
                     meta={"source": "natural", "seed": str(seed)})


def moving_square_clip(seed: int, n_frames: int = 8, size=(32, 32), channels: int = 1,
                       fps: float = 25.0) -> VideoClip:
    """A bright square moving at constant velocity, bouncing off the borders."""
    rng = np.random.default_rng([seed, 977])
    h, w = size
    side = int(rng.integers(max(2, h // 6), max(3, h // 3)))
    y, x = rng.uniform(0, h - side), rng.uniform(0, w - side)
    vy, vx = rng.uniform(1.0, 2.5, 2) * rng.choice([-1, 1], 2)
    level = rng.uniform(0.6, 1.0)
    frames = np.full((n_frames, channels, h, w), 0.1, dtype=np.float32)
    for t in range(n_frames):
        iy, ix = int(round(y)), int(round(x))
        frames[t, :, iy:iy + side, ix:ix + side] = level
        y, x = y + vy, x + vx
        if not 0 <= y <= h - side:
            vy = -vy
            y = min(max(y, 0), h - side)
        if not 0 <= x <= w - side:
            vx = -vx
            x = min(max(x, 0), w - side)
    return VideoClip(torch.from_numpy(frames), fps=fps, meta={"source": "squares"})
