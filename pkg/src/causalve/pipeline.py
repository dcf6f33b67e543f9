"""End-to-end flow: swap, animate, decide/re-predict, hide, recover, evaluate."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import torch

from . import anim as anim_mod
from .checkpoint import load_module
from .config import PipelineConfig
from .decision import export_trace
from .diffusion import swap_face
from .errors import CausalVEError, FormatError, KeyMismatch, StageError, ValidationError
from .hiding import (CouplingNet, hide_forward, recover_backward, residual_embedding_policy,
                     residual_for_recovery)
from .metrics import MetricsReport, compare, psnr
from .steganalysis import fusion_score, lsb4_hide, lsb4_recover, roc, to_uint8
from .synthetic import default_params, face_mask
from .training import STAGES, build_model, checkpoint_path, noise_schedule, rolling_predictions, stage_hash
from .video import VideoClip, load_clip, read_raw_tensor, write_raw_tensor
from .vist import VideoPredictor
from .wavelet import pack_clip, unpack_clip

log = logging.getLogger(__name__)


# -- keys and packages ---------------------------------------------------------

@dataclass(frozen=True)
class StegoKey:
    config_hash: str        # hex digest of the hiding architecture config
    checkpoint_id: str      # digest of the hiding network parameters
    group: int
    residual_mode: str

    @classmethod
    def of(cls, net: CouplingNet, group: int, residual_mode: str) -> "StegoKey":
        return cls(net.config_hash.hex(), net.checkpoint_id(), group, residual_mode)

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class StegoPackage:
    """Stego stream plus what the key holder needs to invert it.

    ``stacks`` holds the packed stego groups exactly as produced by the hiding
    network (including any padded tail frame of the last group); the viewable
    stego clip is their first ``n_frames`` frames.
    """

    stacks: torch.Tensor
    key: StegoKey
    n_frames: int
    channels: int
    fps: float = 25.0
    residual: torch.Tensor | None = None

    def stego_frames(self) -> torch.Tensor:
        return unpack_clip(self.stacks, self.key.group, self.channels, self.n_frames)

    def save(self, path) -> None:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        write_raw_tensor(path / "stego.raw", self.stacks)
        meta = {"key": self.key.to_dict(), "n_frames": self.n_frames,
                "channels": self.channels, "fps": self.fps,
                "residual": self.residual is not None}
        if self.residual is not None:
            write_raw_tensor(path / "residual.raw", self.residual)
        (path / "package.json").write_text(json.dumps(meta, indent=2))

    @classmethod
    def load(cls, path) -> "StegoPackage":
        path = Path(path)
        try:
            meta = json.loads((path / "package.json").read_text())
        except FileNotFoundError as exc:
            raise FormatError(f"{path}: no package.json") from exc
        residual = read_raw_tensor(path / "residual.raw") if meta.get("residual") else None
        return cls(read_raw_tensor(path / "stego.raw"), StegoKey(**meta["key"]),
                   meta["n_frames"], meta["channels"], meta["fps"], residual)


# -- model bundle ------------------------------------------------------------------

def load_models(cfg: PipelineConfig, checkpoint_dir=None, stub: bool = False,
                stages=STAGES) -> dict:
    """Build every stage model; load checkpoints unless ``stub``.

    Stub models are the seeded fresh initializations: the hiding network is
    then the identity and the predictor the copy baseline.
    """
    models = {}
    for stage in stages:
        model = build_model(stage, cfg)
        if not stub:
            path = checkpoint_path(cfg, stage, checkpoint_dir)
            if not path.exists():
                raise FormatError(f"missing checkpoint for stage {stage!r}: {path}")
            load_module(path, model, stage_hash(stage, cfg))
        model.eval()
        models[stage] = model
    return models


# -- stages ------------------------------------------------------------------------

def _stage(name, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except StageError:
        raise
    except (CausalVEError, ValueError, ArithmeticError, RuntimeError) as exc:
        raise StageError(name, exc) from exc


def generate_cover(secret: VideoClip, target_face: torch.Tensor, cfg: PipelineConfig,
                   models: dict, mask: torch.Tensor | None = None, ref_params=None,
                   seed: int = 0, stub_decision: bool = False) -> dict:
    """Run every stage that precedes hiding; returns the cover clip and intermediates."""
    size = tuple(secret.shape[-2:])
    if tuple(target_face.shape) != tuple(secret.shape[1:]):
        raise ValidationError(f"target face {tuple(target_face.shape)} does not match secret "
                              f"frames {tuple(secret.shape[1:])}")
    ref = ref_params or default_params(size)
    mask = face_mask(ref, size) if mask is None else mask
    T = len(secret)

    I_b = _stage("swap", swap_face, target_face, secret.frames[0], mask, models["swap"],
                 noise_schedule(cfg), cfg.swap.ramp, seed)

    def animate():
        enc = models["anim"]
        audio = secret.audio if secret.audio is not None else torch.zeros(T, cfg.data.n_mel)
        beta0 = anim_mod.coeffs_of(ref, enc.face.expr_dim)
        rho0 = torch.tensor([ref.head_tilt, *ref.head_center])
        with torch.no_grad():
            state = anim_mod.sample_motion(enc, audio, beta0, rho0, 0.0, seed)
        return anim_mod.render_initial_cover(I_b, state, anim_mod.SyntheticRenderer(ref, size),
                                             secret.fps)

    initial = _stage("anim", animate)

    def decide():
        predictor: VideoPredictor = models["predict"]
        if stub_decision:
            return T, initial.frames
        repred = rolling_predictions(predictor, initial.frames)
        x_i = models["decide"].choose_handover(initial.frames, repred, cfg.decide.exit_threshold)
        frames = initial.frames.clone()
        t_in = predictor.cfg.t_in
        with torch.no_grad():
            for k in range(max(x_i, 1), T):
                ctx = frames[:k][-t_in:]
                pad = ctx[:1].expand(t_in - len(ctx), *ctx.shape[1:])
                frames[k] = predictor(torch.cat([pad, ctx]))[0].clamp(0, 1)
        return x_i, frames

    x_i, frames = _stage("decide", decide)
    cover = VideoClip(frames, fps=secret.fps, meta={"handover": str(x_i)})
    if len(cover) != len(secret):
        raise CausalVEError(f"pipeline invariant violated: cover has {len(cover)} frames, "
                            f"secret has {len(secret)}")
    return {"I_b": I_b, "initial": initial, "cover": cover, "handover": x_i}


def hide_clip(cover: VideoClip, secret: VideoClip, net: CouplingNet, group: int,
              residual_mode: str = "attach") -> StegoPackage:
    if cover.shape != secret.shape:
        raise ValidationError(f"cover {cover.shape} and secret {secret.shape} differ in shape")
    c_stack = pack_clip(cover.frames, group)
    s_stack = pack_clip(secret.frames, group)
    with torch.no_grad():
        stego, residual = hide_forward(c_stack, s_stack, net)
    return StegoPackage(stego, StegoKey.of(net, group, residual_mode), len(secret),
                        secret.shape[1], secret.fps, residual_embedding_policy(residual, residual_mode))


def run_pipeline(secret: VideoClip, target_face: torch.Tensor, cfg: PipelineConfig,
                 models: dict, seed: int = 0, stub_decision: bool = False, **kw):
    """Generate a cover for ``secret`` and hide the secret in it.

    Returns ``(package, artifacts)``; artifacts hold the swapped first frame,
    initial and final cover clips and the handover index.
    """
    art = generate_cover(secret, target_face, cfg, models, seed=seed,
                         stub_decision=stub_decision, **kw)
    pkg = _stage("hide", hide_clip, art["cover"], secret, models["hide"], cfg.hide.group,
                 cfg.hide.residual_mode)
    return pkg, art


def recover_pipeline(pkg: StegoPackage, key: StegoKey, net: CouplingNet) -> torch.Tensor:
    """Recover the secret frames ``[T, C, H, W]``; refuses on any key mismatch."""
    if key != pkg.key:
        raise KeyMismatch("key does not match the stego package")
    if StegoKey.of(net, key.group, key.residual_mode) != key:
        raise KeyMismatch("hiding network does not match the key")
    residual = residual_for_recovery(pkg.residual, pkg.stacks)
    with torch.no_grad():
        secret, _ = recover_backward(pkg.stacks, residual, net)
    return unpack_clip(secret, key.group, pkg.channels, pkg.n_frames)


# -- evaluation ----------------------------------------------------------------------

def _corpus(path) -> list[VideoClip]:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"corpus {path} does not exist")
    items = sorted(p for p in path.iterdir() if p.is_dir() or p.suffix == ".raw")
    clips = [load_clip(p) for p in items]
    if not clips:
        raise ValidationError(f"corpus {path} contains no clips")
    return clips


def salt_and_pepper(frames: torch.Tensor, amount: float = 0.01, seed: int = 0) -> torch.Tensor:
    g = torch.Generator().manual_seed(seed)
    out = frames.clone()
    hit = torch.rand(frames.shape, generator=g) < amount
    salt = torch.rand(frames.shape, generator=g) < 0.5
    out[hit & salt] = 1.0
    out[hit & ~salt] = 0.0
    return out


def evaluate(corpus, cfg: PipelineConfig, out_dir, models: dict | None = None,
             n_steg: int | None = None, tamper: float = 0.01) -> dict:
    """Write quality tables, ROC data, decision traces and a summary for a corpus.

    Each clip in turn is the secret and the next clip the cover. Rows cover the
    cover/cover control, the 4-bit LSB baseline and the coupling network in
    both residual modes, plus recovery from salt-and-pepper tampered stego.
    ``models`` defaults to the stub bundle.
    """
    clips = corpus if isinstance(corpus, list) else _corpus(corpus)
    if not clips:
        raise ValidationError("empty corpus")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    models = models or load_models(cfg, stub=True)
    net = models["hide"]
    g = cfg.hide.group
    rows = {k: [] for k in ("control", "lsb4_cover", "lsb4_secret", "inn_cover",
                            "inn_secret_attach", "inn_secret_discard", "inn_secret_tampered")}
    trace_dir = out / "traces"
    trace_dir.mkdir(exist_ok=True)
    n = len(clips)
    for i, secret in enumerate(clips):
        cover = clips[(i + 1) % n] if n > 1 else clips[0]
        if cover.shape != secret.shape:
            raise ValidationError("corpus clips must share one shape")
        pid = f"pair{i:03d}"
        rows["control"].append(compare(pid, cover.frames, cover.frames))
        st = lsb4_hide(cover.frames, secret.frames)
        rows["lsb4_cover"].append(compare(pid, cover.frames, st))
        rows["lsb4_secret"].append(compare(pid, secret.frames, lsb4_recover(st)))
        pkg = hide_clip(cover, secret, net, g, "attach")
        rows["inn_cover"].append(compare(pid, cover.frames, pkg.stego_frames()))
        rec = recover_pipeline(pkg, pkg.key, net)
        rows["inn_secret_attach"].append(compare(pid, secret.frames, rec))
        pkg_d = StegoPackage(pkg.stacks, StegoKey.of(net, g, "discard"), pkg.n_frames,
                             pkg.channels, pkg.fps, None)
        rec_d = recover_pipeline(pkg_d, pkg_d.key, net)
        rows["inn_secret_discard"].append(compare(pid, secret.frames, rec_d))
        bad = StegoPackage(salt_and_pepper(pkg.stacks, tamper, seed=i), pkg.key, pkg.n_frames,
                           pkg.channels, pkg.fps, pkg.residual)
        rec_t = recover_pipeline(bad, bad.key, net).clamp(0, 1)
        rows["inn_secret_tampered"].append(compare(pid, secret.frames, rec_t))
        if "predict" in models and "decide" in models:
            repred = rolling_predictions(models["predict"], secret.frames)
            with torch.no_grad():
                trace = models["decide"].rollout(secret.frames, repred, cfg.decide.mu)
            export_trace(trace, trace_dir / f"{pid}.jsonl", cfg.decide.lambda_ce)
    table = {}
    for name, r in rows.items():
        rep = MetricsReport(r)
        rep.write_csv(out / f"{name}.csv")
        table[name] = rep.aggregate()
    _write_table(out / "table.csv", table)

    # steganalysis on individual frames: covers vs keyed 4-bit LSB stego
    frames = [f for c in clips for f in c.frames][: n_steg or None]
    half = len(frames) // 2
    cov = [fusion_score(to_uint8(f)) for f in frames]
    stego = [fusion_score(lsb4_hide(to_uint8(frames[j]), to_uint8(frames[(j + 1) % len(frames)]),
                                    key=j)) for j in range(len(frames))]
    curve = roc(stego, cov)
    curve.write_csv(out / "roc_lsb4.csv")
    curve.plot(out / "roc_lsb4.png", "4-bit LSB vs cover")
    control = roc(cov[0::2], cov[1::2]) if half else None
    if control is not None:
        control.write_csv(out / "roc_control.csv")
    summary = {"pairs": n, "table": table, "auc_lsb4": curve.auc,
               "auc_control": None if control is None else control.auc}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, default=_json_float))
    return summary


def _json_float(x):
    return str(x)


def _write_table(path, table: dict) -> None:
    with open(path, "w") as fh:
        fh.write("row,psnr,ssim,mae,rmse\n")
        for name, agg in table.items():
            vals = []
            for k in ("psnr", "ssim", "mae", "rmse"):
                m = agg[k][0]
                vals.append("inf" if math.isinf(m) else f"{m:.4f}")
            fh.write(",".join([name, *vals]) + "\n")


def recovery_quality(secret: torch.Tensor, recovered: torch.Tensor) -> dict:
    """PSNR plus max error, never raising on degraded input."""
    return {"psnr": psnr(secret, recovered),
            "max_abs": float((secret - recovered).abs().max()),
            "finite": bool(torch.isfinite(recovered).all())}


__all__ = ["StegoKey", "StegoPackage", "load_models", "generate_cover", "hide_clip",
           "run_pipeline", "recover_pipeline", "evaluate", "salt_and_pepper",
           "recovery_quality"]
