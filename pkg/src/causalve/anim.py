"""Audio-driven animation of the swapped first frame.

A linear face model gives shapes ``F = F_bar + alpha r_id + beta r_ex``. An
audio encoder maps per-frame mel features to a Gaussian latent; a mapping
network turns the latent, the reference expression and a per-frame blink
style code into expression coefficients, and a motion head into head-pose
offsets. The renderer adds the expression change on top of the first frame
and applies the pose change as a rigid warp.

Expression coefficient layout: index 0 is mouth opening, 1 and 2 are left
and right eye closure; remaining dimensions are free latent expression.
Head pose rows are ``(tilt [rad], cx [px], cy [px])``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ValidationError
from .synthetic import (SyntheticFaceParams, eye_gap_signal, eye_landmarks, render_face)
from .video import VideoClip

MOUTH, EYE_L, EYE_R = 0, 1, 2


# -- linear face model --------------------------------------------------------

class FaceModel3D(nn.Module):
    def __init__(self, shape_dim: int = 64, id_dim: int = 8, expr_dim: int = 8, seed: int = 0):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        self.register_buffer("F_bar", torch.randn(shape_dim, generator=g))
        self.register_buffer("r_id", torch.randn(id_dim, shape_dim, generator=g) / math.sqrt(id_dim))
        self.register_buffer("r_ex", torch.randn(expr_dim, shape_dim, generator=g) / math.sqrt(expr_dim))

    @property
    def expr_dim(self) -> int:
        return self.r_ex.shape[0]

    @property
    def shape_dim(self) -> int:
        return self.F_bar.shape[0]


def synth_face(model: FaceModel3D, alpha: torch.Tensor, beta: torch.Tensor) -> torch.Tensor:
    """``F_bar + alpha @ r_id + beta @ r_ex`` (leading batch axes allowed)."""
    if alpha.shape[-1] != model.r_id.shape[0]:
        raise ValidationError(f"alpha has {alpha.shape[-1]} dims, basis has {model.r_id.shape[0]}")
    if beta.shape[-1] != model.r_ex.shape[0]:
        raise ValidationError(f"beta has {beta.shape[-1]} dims, basis has {model.r_ex.shape[0]}")
    return model.F_bar + alpha @ model.r_id + beta @ model.r_ex


# -- audio encoder ------------------------------------------------------------

class ResNeXtBlock1d(nn.Module):
    """Bottleneck residual block with a grouped 3-tap convolution."""

    def __init__(self, channels: int, width: int = 32, groups: int = 4):
        super().__init__()
        self.reduce = nn.Conv1d(channels, width, 1)
        self.group = nn.Conv1d(width, width, 3, padding=1, groups=groups)
        self.expand = nn.Conv1d(width, channels, 1)

    def forward(self, x):
        h = F.relu(self.reduce(x))
        h = F.relu(self.group(h))
        return F.relu(x + self.expand(h))


class ResidualMLP(nn.Module):
    def __init__(self, dim: int, depth: int = 2):
        super().__init__()
        self.layers = nn.ModuleList(nn.Linear(dim, dim) for _ in range(depth))

    def forward(self, x):
        for layer in self.layers:
            x = x + F.relu(layer(x))
        return x


class AudioEncoder(nn.Module):
    """Frame-local audio encoder (psi), mapping network (theta) and motion head.

    Every frame is processed independently, so permuting input frames permutes
    the outputs the same way.
    """

    def __init__(self, face: FaceModel3D | None = None, n_mel: int = 16, latent: int = 16,
                 channels: int = 16, cond: int = 16, hidden: int = 64, pose_dim: int = 3):
        super().__init__()
        self.face = face or FaceModel3D()
        self.n_mel, self.latent_dim = n_mel, latent
        self.stem = nn.Conv1d(1, channels, 3, padding=1)
        self.blocks = nn.Sequential(ResNeXtBlock1d(channels), ResNeXtBlock1d(channels))
        self.mean = nn.Linear(channels * n_mel, latent)
        self.logvar = nn.Linear(channels * n_mel, latent)
        self.cond = nn.Linear(self.face.shape_dim, cond)
        self.inp = nn.Linear(latent + cond + 1, hidden)
        self.theta = ResidualMLP(hidden)
        self.expr_head = nn.Linear(hidden, self.face.expr_dim)
        self.pose_head = nn.Sequential(nn.Linear(latent + 1, hidden), nn.ReLU(),
                                       nn.Linear(hidden, pose_dim))

    def psi(self, audio: torch.Tensor):
        """``[T, n_mel]`` -> per-frame latent ``(mean, logvar)``, each ``[T, latent]``."""
        if audio.ndim != 2 or audio.shape[1] != self.n_mel:
            raise ValidationError(f"audio must be [T, {self.n_mel}], got {tuple(audio.shape)}")
        if not torch.isfinite(audio).all():
            raise ValidationError("audio features contain NaN or inf")
        h = self.blocks(F.relu(self.stem(audio[:, None, :]))).flatten(1)
        return self.mean(h), self.logvar(h)

    def conditioning(self, beta0: torch.Tensor, F_bar: torch.Tensor | None = None):
        if beta0.shape[-1] != self.face.expr_dim:
            raise ValidationError(f"beta0 has {beta0.shape[-1]} dims, expected {self.face.expr_dim}")
        F_bar = self.face.F_bar if F_bar is None else F_bar
        return self.cond((beta0 @ self.face.r_ex) * F_bar)

    def decode(self, z, cond, z_style):
        t = z.shape[0]
        style = z_style.reshape(t, 1).to(z.dtype)
        h = self.theta(F.relu(self.inp(torch.cat([z, cond.expand(t, -1), style], 1))))
        return self.expr_head(h), self.pose_head(torch.cat([z, style], 1))


def _style(z_style, t: int, dtype) -> torch.Tensor:
    s = torch.as_tensor(z_style, dtype=dtype)
    return s.expand(t) if s.ndim == 0 else s


def coeffs_from_audio(enc: AudioEncoder, audio: torch.Tensor, beta0: torch.Tensor,
                      F_bar: torch.Tensor | None = None, z_style=0.0) -> torch.Tensor:
    """Deterministic (latent mean) expression coefficients ``[T, d_expr]``."""
    mean, _ = enc.psi(audio)
    expr, _ = enc.decode(mean, enc.conditioning(beta0, F_bar), _style(z_style, len(audio), mean.dtype))
    return expr


@dataclass
class AnimState:
    beta: torch.Tensor          # [T, d_expr]
    rho: torch.Tensor           # [T, 3] absolute pose (tilt, cx, cy)
    z_style: torch.Tensor       # [T]
    beta0: torch.Tensor         # [d_expr]
    rho0: torch.Tensor          # [3]
    mean: torch.Tensor | None = None
    logvar: torch.Tensor | None = None

    def __post_init__(self):
        t = self.beta.shape[0]
        if self.rho.shape[0] != t or self.z_style.shape[0] != t:
            raise ValidationError("AnimState tracks differ in length")
        for v in (self.beta, self.rho, self.z_style):
            if not torch.isfinite(v).all():
                raise ValidationError("AnimState contains non-finite values")

    def __len__(self):
        return self.beta.shape[0]


def sample_motion(enc: AudioEncoder, audio: torch.Tensor, beta0: torch.Tensor,
                  rho0: torch.Tensor, z_style=0.0, seed: int = 0,
                  deterministic: bool = False) -> AnimState:
    """Draw ``z ~ N(mean, exp(logvar))`` per frame and decode expression and pose.

    ``deterministic`` uses the latent mean. The pose head predicts offsets
    from ``rho0``.
    """
    mean, logvar = enc.psi(audio)
    t = len(audio)
    if deterministic:
        z = mean
    else:
        g = torch.Generator().manual_seed(seed)
        eps = torch.randn(mean.shape, generator=g, dtype=mean.dtype)
        z = mean + torch.exp(0.5 * logvar) * eps
    style = _style(z_style, t, mean.dtype)
    expr, dpose = enc.decode(z, enc.conditioning(beta0), style)
    rho0 = torch.as_tensor(rho0, dtype=expr.dtype)
    return AnimState(expr, rho0 + dpose, style, beta0, rho0, mean, logvar)


# -- losses ---------------------------------------------------------------------

def kl_standard_normal(mean: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """``KL(N(mean, exp(logvar)) || N(0, I))`` summed over dims, averaged over frames."""
    kl = 0.5 * (mean ** 2 + logvar.exp() - 1.0 - logvar)
    return kl.sum(-1).mean() if kl.ndim > 1 else kl.sum()


def blink_measure(beta: torch.Tensor, rho: torch.Tensor, size) -> torch.Tensor:
    """Eye-gap blink signal of the landmarks implied by the coefficients."""
    lm = eye_landmarks(1.0 - beta[:, EYE_L], 1.0 - beta[:, EYE_R],
                       rho[:, 0], rho[:, 1], rho[:, 2], size)
    return eye_gap_signal(lm, size)


@dataclass(frozen=True)
class AnimWeights:
    w3d: float = 2.0
    w2d: float = 0.01
    rebuild: float = 1.0
    kl: float = 0.7


def anim_losses(state: AnimState, lip_track, blink_track, pose_track, size,
                weights: AnimWeights = AnimWeights()):
    """Weighted lip, blink, head-motion and KL terms.

    ``blink_track`` is the ground-truth blink signal; the blink term compares
    the predicted eye-gap signal against the style code, which the caller sets
    to the ground truth during training. Pose offsets are taken relative to
    the first frame.
    """
    t = len(state)
    lip, blink, pose = (torch.as_tensor(v, dtype=state.beta.dtype) for v in (lip_track, blink_track, pose_track))
    if lip.shape[0] != t or blink.shape[0] != t or pose.shape[0] != t:
        raise ValidationError(f"track lengths {lip.shape[0]}, {blink.shape[0]}, {pose.shape[0]} "
                              f"do not match {t} predicted frames")
    l3d = ((state.beta[:, MOUTH] - lip) ** 2).mean()
    l2d = (blink_measure(state.beta, state.rho, size) - state.z_style).abs().mean()
    d_pred = state.rho - state.rho[:1]
    d_true = pose - pose[:1]
    rebuild = ((d_pred - d_true) ** 2).sum(-1).mean()
    if state.mean is not None:
        kl = kl_standard_normal(state.mean, state.logvar)
    else:
        kl = state.beta.new_zeros(())
    total = weights.w3d * l3d + weights.w2d * l2d + weights.rebuild * rebuild + weights.kl * kl
    return total, {"3d": l3d, "2d": l2d, "rebuild": rebuild, "kl": kl}


# -- rendering ----------------------------------------------------------------------

def expression_params(ref: SyntheticFaceParams, beta_row) -> SyntheticFaceParams:
    b = [float(v) for v in beta_row]
    return ref.replace(mouth_open=b[MOUTH], eye_open_left=1.0 - b[EYE_L],
                       eye_open_right=1.0 - b[EYE_R])


def coeffs_of(params: SyntheticFaceParams, expr_dim: int = 8) -> torch.Tensor:
    """Expression coefficients describing a synthetic face's current expression."""
    beta = torch.zeros(expr_dim)
    beta[MOUTH] = params.mouth_open
    beta[EYE_L] = 1.0 - params.eye_open_left
    beta[EYE_R] = 1.0 - params.eye_open_right
    return beta


def warp(frame: torch.Tensor, dtilt: float, dx: float, dy: float, center) -> torch.Tensor:
    """Rotate by ``dtilt`` about ``center`` then translate by ``(dx, dy)`` pixels."""
    c, h, w = frame.shape
    cx, cy = center
    # pixel -> normalized coordinates, output-to-input mapping
    cos, sin = math.cos(dtilt), math.sin(dtilt)
    sx, sy = 2.0 / w, 2.0 / h
    ncx, ncy = cx * sx - 1.0, cy * sy - 1.0
    ndx, ndy = dx * sx, dy * sy
    a = torch.tensor([[cos, sin * h / w], [-sin * w / h, cos]], dtype=frame.dtype)
    off = torch.tensor([ncx + ndx, ncy + ndy], dtype=frame.dtype)
    center_t = torch.tensor([ncx, ncy], dtype=frame.dtype)
    theta = torch.cat([a, (center_t - a @ off)[:, None]], 1)
    grid = F.affine_grid(theta[None], (1, c, h, w), align_corners=False)
    return F.grid_sample(frame[None], grid, mode="bilinear", padding_mode="border",
                         align_corners=False)[0]


class SyntheticRenderer:
    """Drives the parametric face renderer with expression coefficients."""

    def __init__(self, ref: SyntheticFaceParams, size):
        self.ref = ref
        self.size = tuple(size)

    def expression_delta(self, beta_row, beta0) -> torch.Tensor:
        if torch.equal(torch.as_tensor(beta_row)[:3], torch.as_tensor(beta0)[:3]):
            return torch.zeros(3, *self.size)
        now = render_face(expression_params(self.ref, beta_row), self.size)
        base = render_face(expression_params(self.ref, beta0), self.size)
        return now - base


def render_initial_cover(I_b: torch.Tensor, state: AnimState, renderer: SyntheticRenderer,
                         fps: float = 25.0) -> VideoClip:
    """One frame per animation step: expression delta on ``I_b``, then rigid pose warp."""
    if len(state) < 1:
        raise ValidationError("animation state has no frames")
    frames = []
    beta = state.beta.detach()
    rho = state.rho.detach()
    rho0 = torch.as_tensor(state.rho0).detach()
    center = (float(rho0[1]), float(rho0[2]))
    for t in range(len(state)):
        frame = I_b + renderer.expression_delta(beta[t], state.beta0).to(I_b.dtype)[: I_b.shape[0]]
        d = (rho[t] - rho0).tolist()
        if any(d):
            frame = warp(frame, d[0], d[1], d[2], center)
        frames.append(frame.clamp(0.0, 1.0))
    return VideoClip(torch.stack(frames), fps=fps)
