"""Command-line interface.

Exit codes: 0 success, 2 invalid input, 3 numeric failure, 4 key mismatch.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch

from . import anim as anim_mod
from .config import PipelineConfig
from .errors import CausalVEError, KeyMismatch, ValidationError
from .pipeline import StegoKey, StegoPackage, evaluate, hide_clip, load_models, recover_pipeline, run_pipeline
from .steganalysis import roc, steg_detectors, to_uint8
from .synthetic import default_params, face_mask, moving_square_clip, natural_clip
from .training import STAGES, face_dataset, noise_schedule, train_stage
from .video import VideoClip, load_clip, save_clip
from .vist import predict

log = logging.getLogger("causalve")


# -- config handling ---------------------------------------------------------------

def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def build_config(args) -> PipelineConfig:
    """Config file, then ``--set section.key=value`` overrides, then dedicated flags."""
    d = PipelineConfig.load(args.config).to_dict() if args.config else PipelineConfig().to_dict()
    for item in args.set or []:
        if "=" not in item:
            raise ValidationError(f"--set expects section.key=value, got {item!r}")
        dotted, value = item.split("=", 1)
        parts = dotted.split(".")
        node = d
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise ValidationError(f"unknown config path {dotted!r}")
            node = node[p]
        if parts[-1] not in node:
            raise ValidationError(f"unknown config path {dotted!r}")
        node[parts[-1]] = _parse_value(value)
    if args.seed is not None:
        d["train"]["seed"] = args.seed
        d["data"]["seed"] = args.seed
    if args.steps is not None:
        d["swap"]["steps"] = args.steps
    if args.ramp is not None:
        d["swap"]["ramp"] = args.ramp
    if args.data_root:
        d["data_root"] = args.data_root
    if args.checkpoint_dir:
        d["checkpoint_dir"] = args.checkpoint_dir
    if getattr(args, "long_schedule", False):
        d["train"]["lr"] = 1e-5
        d["train"]["halve_every"] = 25000
        d["train"]["stage_lr"] = {}
    return PipelineConfig.from_dict(d)


def _data_path(cfg: PipelineConfig, p) -> Path:
    p = Path(p)
    root = cfg.resolved_data_root()
    if not p.is_absolute() and root is not None and not p.exists():
        return root / p
    return p


def _models(cfg, args, stages=STAGES):
    return load_models(cfg, cfg.checkpoint_dir, stub=args.stub, stages=stages)


def _seed(args) -> int:
    return 0 if args.seed is None else args.seed


def _print(obj) -> None:
    print(json.dumps(obj, indent=2, default=str))


# -- commands ----------------------------------------------------------------------

def cmd_synth_data(args, cfg):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seed = _seed(args)
    if args.kind == "faces":
        for i, (_track, clip, lip, blink, pose) in enumerate(face_dataset(cfg, args.n, seed_offset=seed)):
            save_clip(clip, out / f"clip_{i:04d}")
            tracks = {"lip": lip.tolist(), "blink": blink.tolist(), "pose": pose.tolist()}
            (out / f"clip_{i:04d}" / "tracks.json").write_text(json.dumps(tracks))
    else:
        make = natural_clip if args.kind == "natural" else moving_square_clip
        for i in range(args.n):
            clip = make(seed * 100003 + i, cfg.data.frames, tuple(cfg.data.size),
                        cfg.data.channels, cfg.data.fps)
            save_clip(clip, out / f"clip_{i:04d}")
    _print({"written": args.n, "kind": args.kind, "out": str(out)})


def cmd_train(args, cfg):
    models = None
    if args.stage == "decide":
        models = {"predict": _models(cfg, args, ("predict",))["predict"]}
    res = train_stage(args.stage, cfg, args.train_steps, cfg.checkpoint_dir, models,
                      log_every=args.log_every)
    _print({"stage": args.stage, "initial_loss": res.initial, "final_loss": res.final,
            "checkpoint": str(res.checkpoint)})


def cmd_swap(args, cfg):
    from .diffusion import swap_face
    source = load_clip(_data_path(cfg, args.source)).frames[0]
    target = load_clip(_data_path(cfg, args.target)).frames[0]
    size = tuple(source.shape[-2:])
    net = _models(cfg, args, ("swap",))["swap"]
    out = swap_face(source, target, face_mask(default_params(size), size), net,
                    noise_schedule(cfg), cfg.swap.ramp, _seed(args))
    save_clip(VideoClip(out[None]), args.out)


def cmd_animate(args, cfg):
    face = load_clip(_data_path(cfg, args.face)).frames[0]
    driver = load_clip(_data_path(cfg, args.audio))
    if driver.audio is None:
        raise ValidationError(f"{args.audio} carries no audio features")
    size = tuple(face.shape[-2:])
    ref = default_params(size)
    enc = _models(cfg, args, ("anim",))["anim"]
    with torch.no_grad():
        state = anim_mod.sample_motion(enc, driver.audio, anim_mod.coeffs_of(ref, enc.face.expr_dim),
                                       torch.tensor([ref.head_tilt, *ref.head_center]), 0.0, _seed(args))
    clip = anim_mod.render_initial_cover(face, state, anim_mod.SyntheticRenderer(ref, size), driver.fps)
    save_clip(clip, args.out)


def cmd_predict(args, cfg):
    clip = load_clip(_data_path(cfg, args.clip))
    model = _models(cfg, args, ("predict",))["predict"]
    save_clip(predict(clip, args.frames or model.cfg.t_out, model), args.out)


def cmd_hide(args, cfg):
    secret = load_clip(_data_path(cfg, args.secret))
    models = _models(cfg, args)
    if args.cover:
        cover = load_clip(_data_path(cfg, args.cover))
        pkg = hide_clip(cover, secret, models["hide"], cfg.hide.group, cfg.hide.residual_mode)
        handover = None
    else:
        if not args.target:
            raise ValidationError("hide needs --cover or --target")
        target = load_clip(_data_path(cfg, args.target)).frames[0]
        pkg, art = run_pipeline(secret, target, cfg, models, seed=_seed(args))
        handover = art["handover"]
        save_clip(art["cover"], Path(args.out) / "cover")
    pkg.save(args.out)
    save_clip(VideoClip(pkg.stego_frames().clamp(0, 1), fps=pkg.fps), Path(args.out) / "stego_view")
    _print({"package": args.out, "key": pkg.key.to_dict(), "handover": handover})


def cmd_recover(args, cfg):
    pkg = StegoPackage.load(args.package)
    key = StegoKey(**json.loads(Path(args.key).read_text())) if args.key else pkg.key
    net = _models(cfg, args, ("hide",))["hide"]
    if args.key is None and StegoKey.of(net, pkg.key.group, pkg.key.residual_mode) != pkg.key:
        raise KeyMismatch("hiding checkpoint does not match the package key")
    frames = recover_pipeline(pkg, key, net)
    save_clip(VideoClip(frames.clamp(0, 1), fps=pkg.fps), args.out)


def cmd_evaluate(args, cfg):
    summary = evaluate(_data_path(cfg, args.corpus), cfg, args.out, _models(cfg, args),
                       n_steg=args.max_frames)
    _print(summary)


def cmd_steganalyze(args, cfg):
    clip = load_clip(_data_path(cfg, args.clip))
    rows = []
    for i, f in enumerate(clip.frames):
        rep = steg_detectors(to_uint8(f))
        rows.append({"frame": i, "fusion": rep.fusion, "flagged": rep.flagged(),
                     **dict(zip(("sample_pairs", "rs", "chi_square", "primary_sets"), rep.features))})
    out = {"frames": rows}
    if args.against:
        ref = load_clip(_data_path(cfg, args.against))
        neg = [steg_detectors(to_uint8(f)).fusion for f in ref.frames]
        out["auc"] = roc([r["fusion"] for r in rows], neg).auc
    _print(out)


# -- parser -------------------------------------------------------------------------

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                   help="override one config value (repeatable)")
    p.add_argument("--checkpoint-dir")
    p.add_argument("--data-root", help="base directory for relative inputs (env CAUSALVE_DATA_ROOT)")
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int, help="diffusion steps T_diff")
    p.add_argument("--ramp", type=int, help="mask ramp length T_hat")
    p.add_argument("--stub", action="store_true", help="use untrained stub models")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="causalve", description="Face-video privacy pipeline")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="write a synthetic clip corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--kind", choices=("faces", "natural", "squares"), default="faces")
    p.add_argument("-n", type=int, default=8)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train", help="train one stage")
    p.add_argument("stage", choices=STAGES)
    p.add_argument("--train-steps", type=int)
    p.add_argument("--log-every", type=int, default=100)
    p.add_argument("--long-schedule", action="store_true",
                   help="lr 1e-5 halved every 25000 steps for long runs")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("swap", help="swap the target face into the first source frame")
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_swap)

    p = sub.add_parser("animate", help="drive a face frame with a clip's audio features")
    p.add_argument("--face", required=True)
    p.add_argument("--audio", required=True, help="clip whose audio features drive the motion")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_animate)

    p = sub.add_parser("predict", help="predict future frames")
    p.add_argument("--clip", required=True)
    p.add_argument("--frames", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("hide", help="hide a secret clip (generating a cover unless --cover)")
    p.add_argument("--secret", required=True)
    p.add_argument("--cover")
    p.add_argument("--target", help="face frame for the generated cover")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_hide)

    p = sub.add_parser("recover", help="recover the secret from a stego package")
    p.add_argument("--package", required=True)
    p.add_argument("--key", help="key JSON; defaults to the key stored in the package")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_recover)

    p = sub.add_parser("evaluate", help="quality tables, ROC data and traces for a corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--max-frames", type=int)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("steganalyze", help="run the LSB detectors on a clip")
    p.add_argument("--clip", required=True)
    p.add_argument("--against", help="clean clip for an ROC AUC")
    p.set_defaults(func=cmd_steganalyze)

    for p in sub.choices.values():
        _common(p)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = build_config(args)
        args.func(args, cfg)
    except CausalVEError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ArithmeticError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
