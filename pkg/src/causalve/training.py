"""Stage-wise training for swap, anim, predict, decide and hide.

Every stage shares one loop: Adam with a step-halving learning rate, gradient
clipping, and an abort on a non-finite loss that first writes the last good
parameters to the checkpoint path.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from . import anim as anim_mod
from .checkpoint import save_module
from .config import PipelineConfig, lr_at
from .decision import DecisionModel, total_decision_loss
from .diffusion import (DenoiserNet, NoiseSchedule, ToyEmbedder, cover_image_loss)
from .errors import NumericError, ValidationError
from .hiding import CouplingNet, HidingConfig, cf_weights, hiding_loss
from .synthetic import make_face_track, moving_square_clip, natural_clip, synth_face_clip
from .vist import EncoderConfig, PredictorConfig, VideoPredictor
from .video import augment
from .wavelet import pack_clip

log = logging.getLogger(__name__)

STAGES = ("swap", "anim", "predict", "decide", "hide")


# -- model construction -------------------------------------------------------

def hiding_config(cfg: PipelineConfig) -> HidingConfig:
    h = cfg.hide
    return HidingConfig(channels=4 * h.group * cfg.data.channels, n_blocks=h.n_blocks,
                        hidden=h.hidden, growth=h.growth, clamp=h.clamp)


def noise_schedule(cfg: PipelineConfig) -> NoiseSchedule:
    s = cfg.swap
    return NoiseSchedule.linear(s.steps, s.beta_start, s.beta_end)


def predictor_config(cfg: PipelineConfig, channels: int | None = None) -> PredictorConfig:
    p = cfg.predict
    enc = EncoderConfig(channels or cfg.data.channels, tuple(p.widths), 2)
    return PredictorConfig(enc, cfg.data.frames, cfg.data.frames, p.depth, p.heads,
                           tuple(p.window), tuple(p.shift))


def build_model(stage: str, cfg: PipelineConfig) -> torch.nn.Module:
    """Freshly initialized model for ``stage``, seeded from the config."""
    torch.manual_seed(cfg.train.seed)
    if stage == "swap":
        return DenoiserNet(cfg.data.channels, tuple(cfg.swap.widths), ToyEmbedder().dim)
    if stage == "anim":
        a = cfg.anim
        face = anim_mod.FaceModel3D(a.shape_dim, a.id_dim, a.expr_dim, seed=cfg.train.seed)
        return anim_mod.AudioEncoder(face, cfg.data.n_mel, a.latent)
    if stage == "predict":
        return VideoPredictor(predictor_config(cfg))
    if stage == "decide":
        return DecisionModel(cfg.data.channels, cfg.decide.classes, cfg.decide.mse_bins)
    if stage == "hide":
        return CouplingNet(hiding_config(cfg))
    raise ValidationError(f"unknown stage {stage!r}; expected one of {STAGES}")


def stage_hash(stage: str, cfg: PipelineConfig) -> bytes:
    """32-byte digest of the config a stage's checkpoint depends on."""
    if stage == "hide":
        return hiding_config(cfg).digest()
    section = {"swap": cfg.swap, "anim": cfg.anim, "predict": cfg.predict,
               "decide": cfg.decide}[stage]
    blob = json.dumps({"stage": stage, "section": asdict(section), "data": asdict(cfg.data)},
                      sort_keys=True).encode()
    return hashlib.sha256(blob).digest()


def checkpoint_path(cfg: PipelineConfig, stage: str, root=None) -> Path:
    return Path(root or cfg.checkpoint_dir) / f"{stage}.cvek"


# -- generic loop -------------------------------------------------------------

@dataclass
class TrainResult:
    stage: str
    losses: list
    model: torch.nn.Module
    checkpoint: Path | None = None

    @property
    def initial(self) -> float:
        return self.losses[0]

    @property
    def final(self) -> float:
        """Mean of the last 5% of steps (at least one), a less noisy end value."""
        k = max(1, len(self.losses) // 20)
        return float(np.mean(self.losses[-k:]))


def fit(model: torch.nn.Module, loss_fn: Callable[[int], torch.Tensor], steps: int,
        lr0: float, halve_every: int, grad_clip: float | None = 1.0,
        checkpoint: Path | None = None, config_hash: bytes | None = None,
        log_every: int = 0, seed: int = 0) -> list[float]:
    """Run ``steps`` optimizer steps of ``loss_fn(step)``.

    A non-finite loss or parameter update aborts with NumericError after
    restoring (and, if ``checkpoint`` is given, saving) the last good state.
    """
    torch.manual_seed(seed)
    opt = torch.optim.Adam(model.parameters(), lr=lr0)
    losses = []
    for step in range(steps):
        lr = lr_at(step, lr0, halve_every)
        for group in opt.param_groups:
            group["lr"] = lr
        good = copy.deepcopy(model.state_dict())
        loss = loss_fn(step)
        if not torch.isfinite(loss):
            _abort(model, good, checkpoint, config_hash, f"non-finite loss at step {step}")
        opt.zero_grad()
        loss.backward()
        if grad_clip:
            torch.nn.utils.clip_grad_norm_(model.parameters(), grad_clip)
        opt.step()
        if not all(torch.isfinite(p).all() for p in model.parameters()):
            _abort(model, good, checkpoint, config_hash, f"non-finite parameters after step {step}")
        losses.append(float(loss.detach()))
        if log_every and step % log_every == 0:
            log.info("step %d loss %.5f lr %.2e", step, losses[-1], lr)
    if checkpoint is not None and config_hash is not None:
        save_module(checkpoint, model, config_hash)
    return losses


def _abort(model, good_state, checkpoint, config_hash, message):
    model.load_state_dict(good_state)
    if checkpoint is not None and config_hash is not None:
        save_module(checkpoint, model, config_hash)
        message += f"; last good parameters saved to {checkpoint}"
    raise NumericError(message)


# -- datasets -----------------------------------------------------------------

def face_dataset(cfg: PipelineConfig, n: int | None = None, frames: int | None = None,
                 seed_offset: int = 0):
    """Synthetic face clips with audio and ground-truth tracks."""
    n = n or cfg.data.clips
    out = []
    for i in range(n):
        seed = cfg.data.seed + seed_offset + i
        track = make_face_track(frames or cfg.data.frames, cfg.data.size, seed=seed,
                                identity_seed=seed)
        out.append((track,) + synth_face_clip(track, cfg.data.size, cfg.data.fps,
                                              n_mel=cfg.data.n_mel, audio_seed=seed))
    return out


def natural_stacks(cfg: PipelineConfig, n: int | None = None, seed_offset: int = 0):
    g = cfg.hide.group
    clips = [natural_clip(cfg.data.seed + seed_offset + i, cfg.data.frames, cfg.data.size,
                          cfg.data.channels) for i in range(n or cfg.data.clips)]
    return torch.cat([pack_clip(c.frames, g) for c in clips]), clips


# -- stage losses ---------------------------------------------------------------

def swap_loss_fn(net: DenoiserNet, images: torch.Tensor, sched: NoiseSchedule, batch: int,
                 seed: int, embedder=None):
    embedder = embedder or ToyEmbedder()
    gen = torch.Generator().manual_seed(seed)
    ab = sched.alpha_bars.to(images.dtype)

    def loss(step):
        idx = torch.randint(0, len(images), (batch,), generator=gen)
        x0 = images[idx]
        t = torch.randint(1, sched.steps + 1, (batch,), generator=gen)
        noise = torch.randn(x0.shape, generator=gen, dtype=x0.dtype)
        a = ab[t - 1].reshape(-1, 1, 1, 1)
        x_t = a.sqrt() * x0 + (1 - a).sqrt() * noise
        id_src = embedder(x0)
        pred = net(x_t, t, id_src)
        x0_hat = ((x_t - (1 - a).sqrt() * pred) / a.sqrt()).clamp(-1.0, 2.0)
        return cover_image_loss(pred, noise, id_src, embedder(x0_hat))

    return loss


def anim_loss_fn(enc: anim_mod.AudioEncoder, data, cfg: PipelineConfig, seed: int):
    weights = anim_mod.AnimWeights(cfg.anim.w3d, cfg.anim.w2d, cfg.anim.rebuild, cfg.anim.kl)
    gen = torch.Generator().manual_seed(seed)

    def loss(step):
        i = int(torch.randint(0, len(data), (1,), generator=gen))
        track, clip, lip, blink, pose = data[i]
        beta0 = anim_mod.coeffs_of(track[0], enc.face.expr_dim)
        state = anim_mod.sample_motion(enc, clip.audio, beta0, pose[0], z_style=blink,
                                       seed=seed * 100003 + step)
        total, _ = anim_mod.anim_losses(state, lip, blink, pose, cfg.data.size, weights)
        return total

    return loss


def predict_loss_fn(model: VideoPredictor, past: torch.Tensor, future: torch.Tensor,
                    batch: int, seed: int):
    gen = torch.Generator().manual_seed(seed)

    def loss(step):
        idx = torch.randint(0, len(past), (batch,), generator=gen)
        return ((model(past[idx]) - future[idx]) ** 2).mean()

    return loss


def decide_loss_fn(model: DecisionModel, generated, predicted, cfg: PipelineConfig, seed: int):
    gen = torch.Generator().manual_seed(seed)

    def loss(step):
        i = int(torch.randint(0, len(generated), (1,), generator=gen))
        trace = model.rollout(generated[i], predicted[i], cfg.decide.mu)
        return total_decision_loss(trace, cfg.decide.lambda_ce, cfg.decide.normalize)

    return loss


def hide_loss_fn(net: CouplingNet, stacks: torch.Tensor, cfg: PipelineConfig, batch: int,
                 seed: int):
    gen = torch.Generator().manual_seed(seed)
    cf = cf_weights(cfg.hide.group, cfg.hide.cf_mode)
    discard = cfg.hide.train_residual == "discard"

    def loss(step):
        cover = stacks[torch.randint(0, len(stacks), (batch,), generator=gen)]
        secret = stacks[torch.randint(0, len(stacks), (batch,), generator=gen)]
        stego, residual = net(cover, secret)
        rec_secret, rec_cover = net.inverse(stego, torch.zeros_like(residual) if discard else residual)
        total, _ = hiding_loss(stego, cover, rec_secret, secret, rec_cover, cf,
                               cfg.hide.lambda_b, cfg.data.channels)
        return total

    return loss


# -- stage data preparation ----------------------------------------------------------

def prediction_pairs(cfg: PipelineConfig, n: int | None = None, seed_offset: int = 0,
                     kind: str = "faces"):
    """Split 2T-frame clips into (past, future) halves."""
    t = cfg.data.frames
    n = n or cfg.data.clips
    if kind == "squares":
        clips = [moving_square_clip(cfg.data.seed + seed_offset + i, 2 * t, cfg.data.size,
                                    cfg.data.channels).frames for i in range(n)]
    else:
        clips = [c[1].frames for c in face_dataset(cfg, n, 2 * t, seed_offset)]
    x = torch.stack(clips)
    return x[:, :t], x[:, t:]


def rolling_predictions(model: VideoPredictor, frames: torch.Tensor) -> torch.Tensor:
    """Frame ``k`` re-predicted from frames ``< k`` (left-padded with frame 1)."""
    t_in = model.cfg.t_in
    out = [frames[0]]
    with torch.no_grad():
        for k in range(1, len(frames)):
            ctx = frames[:k]
            pad = ctx[:1].expand(t_in - len(ctx), *ctx.shape[1:]) if len(ctx) < t_in else ctx[:0]
            ctx = torch.cat([pad, ctx])[-t_in:]
            out.append(model(ctx)[0].clamp(0, 1))
    return torch.stack(out)


def _augmented_images(cfg: PipelineConfig, data):
    frames = []
    for k, (_, clip, *_rest) in enumerate(data):
        if cfg.train.augment:
            clip = augment(clip, cfg.data.size, flip_h=bool(k % 2), flip_v=False, rng_seed=k)
        frames.append(clip.frames)
    return torch.cat(frames)


# -- public entry point ------------------------------------------------------------

def train_stage(stage: str, cfg: PipelineConfig, steps: int | None = None,
                checkpoint_dir=None, models: dict | None = None, log_every: int = 0) -> TrainResult:
    """Train one stage on synthetic data and write its checkpoint.

    ``models`` may supply already trained upstream models (the decide stage
    uses the predictor to produce re-predictions).
    """
    if stage not in STAGES:
        raise ValidationError(f"unknown stage {stage!r}; expected one of {STAGES}")
    steps = cfg.train.steps.get(stage, 500) if steps is None else steps
    model = build_model(stage, cfg)
    seed = cfg.train.seed
    batch = cfg.train.batch
    if stage == "swap":
        images = _augmented_images(cfg, face_dataset(cfg))
        loss_fn = swap_loss_fn(model, images, noise_schedule(cfg), batch, seed)
    elif stage == "anim":
        loss_fn = anim_loss_fn(model, face_dataset(cfg), cfg, seed)
    elif stage == "predict":
        past, future = prediction_pairs(cfg)
        loss_fn = predict_loss_fn(model, past, future, batch, seed)
    elif stage == "decide":
        predictor = (models or {}).get("predict") or build_model("predict", cfg)
        gen = [c[1].frames for c in face_dataset(cfg)]
        pred = [rolling_predictions(predictor, g) for g in gen]
        loss_fn = decide_loss_fn(model, gen, pred, cfg, seed)
    else:
        stacks, _ = natural_stacks(cfg)
        loss_fn = hide_loss_fn(model, stacks, cfg, batch, seed)
    path = checkpoint_path(cfg, stage, checkpoint_dir) if checkpoint_dir or cfg.checkpoint_dir else None
    losses = fit(model, loss_fn, steps, cfg.train.lr_for(stage), cfg.train.halve_every, cfg.train.grad_clip,
                 path, stage_hash(stage, cfg), log_every, seed)
    return TrainResult(stage, losses, model, path)
