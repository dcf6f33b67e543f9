"""Early-exit decision between audio-driven generation and re-prediction.

At every inference step a classifier scores how consistent the generated
frame is with its re-prediction. The margin between the top two class
probabilities should grow step over step. A step is labelled as a valid exit
when its margin is already within ``mu`` of the final step's margin. The
first such step is the handover frame: frames up to it come from the
animation stage, later frames from the video predictor.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ValidationError

EPS = 1e-7


def _t(x):
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(x, dtype=torch.float64)


def _f(x) -> float:
    return float(x.detach()) if isinstance(x, torch.Tensor) else float(x)


def margin(probs) -> torch.Tensor:
    """Top-1 minus top-2 probability along the last axis."""
    p = _t(probs)
    if p.shape[-1] < 2:
        raise ValidationError("margin needs at least two candidates")
    if not torch.isfinite(p).all() or (p < 0).any():
        raise ValidationError("probabilities must be finite and non-negative")
    top = torch.topk(p, 2, dim=-1).values
    return top[..., 0] - top[..., 1]


def ce_margin_loss(delta_prev, delta_now):
    """``delta_prev - delta_now``: negative (rewarded) when the margin grows."""
    return _t(delta_prev) - _t(delta_now)


def exit_label(delta_t, delta_T, mu: float = 0.05) -> int:
    """1 when ``|delta_T - delta_t| <= mu`` (a 1e-12 slack absorbs rounding)."""
    if not mu > 0:
        raise ValidationError(f"mu threshold must be positive, got {mu}")
    return int(abs(float(delta_T) - float(delta_t)) <= mu + 1e-12)


def fb_loss(y_fb, e_k, eps: float = EPS):
    """Binary cross-entropy of the exit probability against the exit label."""
    e = _t(e_k).clamp(eps, 1 - eps)
    y = _t(y_fb).to(e.dtype)
    return -(y * torch.log(e) + (1 - y) * torch.log(1 - e))


def prediction_loss(y_onehot, probs, eps: float = EPS):
    """Cross-entropy ``-sum_k y_k log p_k`` with the log clamped at ``eps``."""
    p = _t(probs)
    y = _t(y_onehot).to(p.dtype)
    if y.shape != p.shape:
        raise ValidationError(f"label shape {tuple(y.shape)} != prob shape {tuple(p.shape)}")
    return -(y * torch.log(p.clamp_min(eps))).sum(-1)


# -- traces ----------------------------------------------------------------

@dataclass
class DecisionTrace:
    """Per-step record of one rollout.

    ``pred_losses`` holds each step's class cross-entropy; labels are derived
    from the deltas with the final step's margin as the reference.
    """

    deltas: list
    exit_probs: list
    pred_losses: list
    mu: float = 0.05
    labels: list = field(default_factory=list)

    def __post_init__(self):
        if not (len(self.deltas) == len(self.exit_probs) == len(self.pred_losses)):
            raise ValidationError("incomplete trace: per-step lists differ in length")
        if not self.deltas:
            raise ValidationError("trace has no steps")
        if any(v is None for v in (*self.deltas, *self.exit_probs, *self.pred_losses)):
            raise ValidationError("incomplete trace: missing step values")
        d_final = _f(self.deltas[-1])
        self.labels = [exit_label(_f(d), d_final, self.mu) for d in self.deltas]

    def __len__(self):
        return len(self.deltas)

    @property
    def handover(self) -> int:
        return handover_index(self.labels)

    def step_losses(self, lambda_ce: float = 3.0):
        """List of per-step dicts with fb, pred, ce and total terms."""
        out = []
        for i in range(len(self)):
            ce = ce_margin_loss(self.deltas[i - 1], self.deltas[i]) if i else _t(0.0)
            fb = fb_loss(self.labels[i], self.exit_probs[i])
            pred = _t(self.pred_losses[i])
            out.append({"fb": fb, "pred": pred, "ce": ce, "total": fb + pred + lambda_ce * ce})
        return out

    def records(self, lambda_ce: float = 3.0):
        for i, s in enumerate(self.step_losses(lambda_ce)):
            yield {"step": i + 1, "delta": _f(self.deltas[i]), "e": _f(self.exit_probs[i]),
                   "y_fb": self.labels[i], **{k: _f(v) for k, v in s.items()}}


def total_decision_loss(trace: DecisionTrace, lambda_ce: float = 3.0, normalize: bool = False):
    """Sum over steps of ``L_fb + L_pred + lambda_ce * L_ce``.

    The first step has no predecessor, so its margin term is zero. With
    ``normalize`` the sum is divided by the number of steps.
    """
    steps = trace.step_losses(lambda_ce)
    total = sum(s["total"] for s in steps)
    return total / len(steps) if normalize else total


def handover_index(labels) -> int:
    """1-based index of the first exit label, or the trace length if none."""
    for i, y in enumerate(labels):
        if y == 1:
            return i + 1
    return len(labels)


def handover(k: int, x_i: int, t_max: int | None = None) -> str:
    """Route frame ``k`` (1-based) to ``"generation"`` or ``"re-prediction"``."""
    if x_i < 1 or (t_max is not None and x_i > t_max):
        raise ValidationError(f"handover index {x_i} outside [1, {t_max}]")
    return "generation" if k <= x_i else "re-prediction"


def export_trace(trace: DecisionTrace, path, lambda_ce: float = 3.0) -> None:
    with open(path, "w") as fh:
        for rec in trace.records(lambda_ce):
            fh.write(json.dumps(rec) + "\n")


# -- learned heads -----------------------------------------------------------

DEFAULT_MSE_BINS = (1e-3, 4e-3, 1.6e-2)


def consistency_class(mse, edges=DEFAULT_MSE_BINS) -> torch.Tensor:
    """Quantize per-frame MSE into ``len(edges) + 1`` agreement classes (0 = best)."""
    return torch.bucketize(_t(mse), torch.as_tensor(edges, dtype=torch.float64).to(_t(mse).dtype))


def frame_features(generated: torch.Tensor, predicted: torch.Tensor) -> torch.Tensor:
    """Pooled per-channel statistics of a frame pair: ``[T, 4C]``."""
    d = generated - predicted
    return torch.cat([d.abs().mean((-2, -1)), (d ** 2).mean((-2, -1)).sqrt(),
                      generated.mean((-2, -1)), predicted.std((-2, -1))], -1)


class FrameClassifierHead(nn.Module):
    def __init__(self, in_dim: int, classes: int = 4, hidden: int = 32):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(in_dim, hidden), nn.ReLU(), nn.Linear(hidden, classes))

    def forward(self, feats):
        return torch.softmax(self.net(feats), -1)


class ExitHead(nn.Module):
    """Exit probability from a frame's features and its current margin."""

    def __init__(self, in_dim: int, hidden: int = 16):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(in_dim + 1, hidden), nn.ReLU(), nn.Linear(hidden, 1))

    def forward(self, feats, delta):
        return torch.sigmoid(self.net(torch.cat([feats, delta[..., None]], -1)))[..., 0]


class DecisionModel(nn.Module):
    def __init__(self, channels: int = 3, classes: int = 4, edges=DEFAULT_MSE_BINS):
        super().__init__()
        self.edges = tuple(edges)
        self.classifier = FrameClassifierHead(4 * channels, classes)
        self.exit = ExitHead(4 * channels)

    def rollout(self, generated: torch.Tensor, predicted: torch.Tensor, mu: float = 0.05):
        """Score every step of a clip pair and build its trace."""
        feats = frame_features(generated, predicted)
        probs = self.classifier(feats)
        deltas = margin(probs)
        exits = self.exit(feats, deltas)
        mse = ((generated - predicted) ** 2).flatten(1).mean(1)
        target = consistency_class(mse.detach(), self.edges)
        onehot = F.one_hot(target, probs.shape[-1]).to(probs.dtype)
        pred = prediction_loss(onehot, probs)
        return DecisionTrace(list(deltas), list(exits), list(pred), mu)

    def choose_handover(self, generated, predicted, threshold: float = 0.5) -> int:
        """Inference-time handover: first step whose exit probability passes ``threshold``."""
        with torch.no_grad():
            feats = frame_features(generated, predicted)
            deltas = margin(self.classifier(feats))
            exits = self.exit(feats, deltas)
        return handover_index([int(e > threshold) for e in exits])
