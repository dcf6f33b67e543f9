"""Video data model, container I/O and augmentation.

Frames are float32 tensors ``[C, H, W]`` with values in ``[0, 1]``; a clip
stacks them as ``[T, C, H, W]``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import FormatError, ValidationError

RAW_MAGIC = b"CVE1"
MANIFEST = "manifest.json"


def validate_frame(frame: torch.Tensor, *, check_range: bool = True) -> torch.Tensor:
    if frame.ndim != 3:
        raise ValidationError(f"frame must be [C,H,W], got shape {tuple(frame.shape)}")
    c, h, w = frame.shape
    if c not in (1, 3):
        raise ValidationError(f"frame must have 1 or 3 channels, got {c}")
    if h % 2 or w % 2:
        raise ValidationError(f"frame height and width must be even, got {h}x{w}")
    if not torch.isfinite(frame).all():
        raise ValidationError("frame contains non-finite values")
    if check_range and (frame.min() < 0 or frame.max() > 1):
        raise ValidationError("frame values must lie in [0, 1]")
    return frame


@dataclass(frozen=True, eq=False)
class VideoClip:
    frames: torch.Tensor
    fps: float = 25.0
    audio: torch.Tensor | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        frames = torch.as_tensor(self.frames, dtype=torch.float32)
        if frames.ndim != 4:
            raise ValidationError(f"clip frames must be [T,C,H,W], got {tuple(frames.shape)}")
        if frames.shape[0] < 1:
            raise ValidationError("clip must contain at least one frame")
        if not self.fps > 0:
            raise ValidationError(f"fps must be positive, got {self.fps}")
        for f in frames:
            validate_frame(f)
        object.__setattr__(self, "frames", frames)
        if self.audio is not None:
            audio = torch.as_tensor(self.audio, dtype=torch.float32)
            if audio.ndim != 2 or audio.shape[0] != frames.shape[0]:
                raise ValidationError(
                    f"audio must be [T, n_mel] with T={frames.shape[0]}, got {tuple(audio.shape)}"
                )
            if not torch.isfinite(audio).all():
                raise ValidationError("audio contains non-finite values")
            object.__setattr__(self, "audio", audio)

    def __len__(self) -> int:
        return self.frames.shape[0]

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return tuple(self.frames.shape)

    def replace(self, **changes) -> "VideoClip":
        kw = dict(frames=self.frames, fps=self.fps, audio=self.audio, meta=dict(self.meta))
        kw.update(changes)
        return VideoClip(**kw)


# -- binary helpers ---------------------------------------------------------

def write_raw_tensor(path, frames: torch.Tensor) -> None:
    arr = np.ascontiguousarray(frames.detach().cpu().numpy(), dtype="<f4")
    t, c, h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(RAW_MAGIC)
        fh.write(struct.pack("<4I", t, c, h, w))
        fh.write(arr.tobytes())


def read_raw_tensor(path) -> torch.Tensor:
    data = Path(path).read_bytes()
    if data[:4] != RAW_MAGIC:
        raise FormatError(f"{path}: bad magic {data[:4]!r}")
    if len(data) < 20:
        raise FormatError(f"{path}: truncated header")
    t, c, h, w = struct.unpack("<4I", data[4:20])
    n = t * c * h * w
    if len(data) != 20 + 4 * n:
        raise FormatError(f"{path}: expected {n} float32 values, file holds {(len(data) - 20) // 4}")
    arr = np.frombuffer(data, dtype="<f4", offset=20).reshape(t, c, h, w)
    return torch.from_numpy(arr.astype(np.float32))


def write_audio_features(path, audio: torch.Tensor) -> None:
    """Little-endian ``uint32 T, uint32 n_mel`` header followed by float32 rows."""
    arr = np.ascontiguousarray(audio.detach().cpu().numpy(), dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<2I", *arr.shape))
        fh.write(arr.tobytes())


def read_audio_features(path) -> torch.Tensor:
    data = Path(path).read_bytes()
    if len(data) < 8:
        raise FormatError(f"{path}: truncated audio header")
    t, n_mel = struct.unpack("<2I", data[:8])
    if len(data) != 8 + 4 * t * n_mel:
        raise FormatError(f"{path}: audio payload does not match header ({t}x{n_mel})")
    arr = np.frombuffer(data, dtype="<f4", offset=8).reshape(t, n_mel)
    return torch.from_numpy(arr.astype(np.float32))


def _to_png(frame: torch.Tensor) -> Image.Image:
    arr = np.round(frame.clamp(0, 1).numpy() * 255).astype(np.uint8)
    if arr.shape[0] == 1:
        return Image.fromarray(arr[0], mode="L")
    return Image.fromarray(arr.transpose(1, 2, 0), mode="RGB")


def _from_png(path, channels: int) -> torch.Tensor:
    img = Image.open(path)
    img = img.convert("L" if channels == 1 else "RGB")
    arr = np.asarray(img, dtype=np.float32) / 255.0
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = arr.transpose(2, 0, 1)
    return torch.from_numpy(np.ascontiguousarray(arr))


# -- clip containers --------------------------------------------------------

def save_clip(clip: VideoClip, path, fmt: str = "png") -> None:
    """Write ``clip`` as a clip directory (``fmt="png"``) or a raw tensor file."""
    path = Path(path)
    try:
        if fmt == "raw":
            path.parent.mkdir(parents=True, exist_ok=True)
            write_raw_tensor(path, clip.frames)
            return
        if fmt != "png":
            raise ValidationError(f"unknown clip format {fmt!r}")
        path.mkdir(parents=True, exist_ok=True)
        t, c, h, w = clip.shape
        width = max(4, len(str(t)))
        names = [f"frame_{i:0{width}d}.png" for i in range(t)]
        for name, frame in zip(names, clip.frames):
            _to_png(frame).save(path / name)
        manifest = {"fps": clip.fps, "T": t, "C": c, "H": h, "W": w, "frame_files": names}
        if clip.audio is not None:
            write_audio_features(path / "audio.f32", clip.audio)
            manifest["audio_file"] = "audio.f32"
        if clip.meta:
            manifest["meta"] = {str(k): str(v) for k, v in clip.meta.items()}
        (path / MANIFEST).write_text(json.dumps(manifest, indent=2))
    except OSError as exc:
        raise OSError(f"cannot write clip to {path}: {exc}") from exc


def load_clip(path, fps: float = 25.0) -> VideoClip:
    """Read a clip directory or a raw ``CVE1`` tensor file.

    ``fps`` is only used for raw files, whose header carries no frame rate.
    """
    path = Path(path)
    if path.is_file():
        return VideoClip(read_raw_tensor(path), fps=fps)
    manifest_path = path / MANIFEST
    if not manifest_path.exists():
        raise FormatError(f"{path}: no {MANIFEST} and not a raw tensor file")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{manifest_path}: {exc}") from exc
    for key in ("fps", "T", "C", "H", "W", "frame_files"):
        if key not in manifest:
            raise FormatError(f"{manifest_path}: missing field {key!r}")
    files = manifest["frame_files"]
    if len(files) != manifest["T"]:
        raise FormatError(f"manifest lists {len(files)} files but claims T={manifest['T']}")
    missing = [f for f in files if not (path / f).exists()]
    if missing:
        raise FormatError(f"manifest claims {manifest['T']} frames, missing files: {missing}")
    frames = [_from_png(path / f, manifest["C"]) for f in files]
    expected = (manifest["C"], manifest["H"], manifest["W"])
    for f, fr in zip(files, frames):
        if tuple(fr.shape) != expected:
            raise ValidationError(f"{f}: shape {tuple(fr.shape)} differs from manifest {expected}")
    audio = None
    if manifest.get("audio_file"):
        audio = read_audio_features(path / manifest["audio_file"])
    return VideoClip(torch.stack(frames), fps=float(manifest["fps"]), audio=audio,
                     meta=manifest.get("meta", {}))


def augment(clip: VideoClip, crop: tuple[int, int], flip_h: bool = False,
            flip_v: bool = False, rng_seed: int = 0) -> VideoClip:
    """Random crop at one offset shared by every frame, then optional flips."""
    _, _, h, w = clip.shape
    ch, cw = crop
    if ch > h or cw > w:
        raise ValidationError(f"crop {crop} larger than frame {h}x{w}")
    rng = np.random.default_rng(rng_seed)
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    frames = clip.frames[:, :, top:top + ch, left:left + cw]
    if flip_h:
        frames = frames.flip(-1)
    if flip_v:
        frames = frames.flip(-2)
    return clip.replace(frames=frames.contiguous())
