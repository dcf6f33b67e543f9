"""4-bit LSB baseline and classical LSB steganalysis with ROC reporting.

The detector set follows the StegExpose recipe: sample-pair analysis, RS
analysis, a chi-square attack and a primary-sets estimate, fused by averaging
the clipped estimates into one score in [0, 1].
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
import torch
from scipy import stats

from .errors import ValidationError

FUSION_THRESHOLD = 0.2


# -- quantization helpers ------------------------------------------------------

def to_uint8(x) -> np.ndarray:
    """[0, 1] float tensor/array -> uint8 array (same layout)."""
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    x = np.asarray(x)
    if x.dtype == np.uint8:
        return x
    if np.issubdtype(x.dtype, np.integer):
        return x.astype(np.uint8)
    return np.clip(np.round(x * 255.0), 0, 255).astype(np.uint8)


def from_uint8(x: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(x.astype(np.float32) / 255.0)


def _keystream(key: int, shape) -> np.ndarray:
    return np.random.default_rng(key).integers(0, 256, shape, dtype=np.uint8)


# -- 4-bit LSB baseline ----------------------------------------------------------

def lsb4_hide(cover, secret, key: int | None = None):
    """Replace the low nibble of ``cover`` with the high nibble of ``secret``.

    Accepts uint8 arrays, or float tensors on the 8-bit grid (returned as float
    tensors). With ``key`` the secret is XOR-whitened by a seeded keystream
    before embedding, as an encrypted payload would be.
    """
    as_tensor = isinstance(cover, torch.Tensor)
    c, s = to_uint8(cover), to_uint8(secret)
    if c.shape != s.shape:
        raise ValidationError(f"cover {c.shape} and secret {s.shape} differ in shape")
    if key is not None:
        s = s ^ _keystream(key, s.shape)
    stego = (c & 0xF0) | (s >> 4)
    return from_uint8(stego) if as_tensor else stego


def lsb4_recover(stego, key: int | None = None):
    as_tensor = isinstance(stego, torch.Tensor)
    x = to_uint8(stego)
    nibble = x & 0x0F
    if key is not None:
        nibble = nibble ^ (_keystream(key, x.shape) >> 4)
    out = (nibble << 4).astype(np.uint8)
    return from_uint8(out) if as_tensor else out


# -- detectors ---------------------------------------------------------------------

def _planes(x) -> np.ndarray:
    """Stack every 2-D plane of ``[..., H, W]`` vertically into one 2-D image."""
    x = to_uint8(x)
    if x.ndim == 2:
        return x.astype(np.int64)
    return x.reshape(-1, x.shape[-1]).astype(np.int64)


def _pairs(x):
    return x[:, :-1].ravel(), x[:, 1:].ravel()


def _solve(a, b, c, pick):
    if a == 0:
        return -c / b if b else 0.0
    disc = b * b - 4 * a * c
    if disc < 0:
        return None
    r = np.sqrt(disc)
    return pick(((-b - r) / (2 * a), (-b + r) / (2 * a)))


def sample_pairs(x) -> float:
    """Sample-pair estimate of the LSB embedding rate."""
    u, v = _pairs(_planes(x))
    ve = v % 2 == 0
    X = np.sum((ve & (u < v)) | (~ve & (u > v)))
    Y = np.sum((ve & (u > v)) | (~ve & (u < v)))
    Z = np.sum(u == v)
    W = np.sum(((u >> 1) == (v >> 1)) & (u != v))
    a, b, c = 0.5 * (W + Z), 2.0 * X - u.size, float(Y - X)
    if a == 0:
        return 0.0
    q = _solve(a, b, c, min)
    return 1.0 if q is None else float(q)


def primary_sets(x) -> float:
    """Trace-set estimate built from the m=0 and m=1 primary sets."""
    u, v = _pairs(_planes(x))
    tr = (v >> 1) - (u >> 1)
    ue, ve = u % 2 == 0, v % 2 == 0

    def A(m):
        return np.sum((tr == m) & ue & ~ve)

    def B(m):
        return np.sum((tr == m) & ~ue & ve)

    def C(m):
        return np.sum(tr == m)

    cd = float(C(0) - C(1))
    e = float(A(0) - B(0) + A(1) - B(1))
    a, b, c = cd, -(e + cd), float(A(0) - B(1))
    if a == 0 and b == 0:
        return 0.0

    def pick(roots):
        return min(roots, key=lambda r: abs(r - 0.25) if 0 <= r <= 0.5 else 10 + abs(r))

    q = _solve(a, b, c, pick)
    if q is None:
        q = -b / (2 * a)
    return float(2 * q)


def rs_analysis(x, mask=(0, 1, 1, 0)) -> float:
    """Regular/singular group analysis on horizontal groups of four pixels."""
    img = _planes(x)
    w = img.shape[1] // 4 * 4
    groups = img[:, :w].reshape(-1, 4)
    m = np.asarray(mask, bool)

    def smooth(g):
        return np.abs(np.diff(g, axis=1)).sum(1)

    def counts(g):
        f0 = smooth(g)
        pos, neg = g.copy(), g.copy()
        pos[:, m] = pos[:, m] ^ 1
        neg[:, m] = ((neg[:, m] + 1) ^ 1) - 1
        fp, fn = smooth(pos), smooth(neg)
        n = len(g)
        return ((fp > f0).sum() - (fp < f0).sum()) / n, ((fn > f0).sum() - (fn < f0).sum()) / n

    d0, dm0 = counts(groups)
    d1, dm1 = counts(groups ^ 1)
    a = 2 * (d1 + d0)
    b = dm0 - dm1 - d1 - 3 * d0
    c = d0 - dm0
    z = _solve(a, b, c, lambda r: min(r, key=abs))
    if z is None:
        return 1.0
    if z == 0.5:
        return 1.0
    return float(z / (z - 0.5))


def chi_square(x) -> float:
    """Pairs-of-values chi-square attack; returns the p-value of LSB flatness."""
    h = np.bincount(_planes(x).ravel(), minlength=256).astype(float)
    even, odd = h[0::2], h[1::2]
    expected = (even + odd) / 2
    keep = expected > 4
    dof = int(keep.sum()) - 1
    if dof <= 0:
        return 0.0
    chi = np.sum((even[keep] - expected[keep]) ** 2 / expected[keep])
    return float(stats.chi2.sf(chi, dof))


@dataclass
class DetectorReport:
    sample_pairs: float
    rs: float
    chi_square: float
    primary_sets: float
    degenerate: bool = False

    @property
    def features(self) -> np.ndarray:
        return np.array([self.sample_pairs, self.rs, self.chi_square, self.primary_sets])

    @property
    def fusion(self) -> float:
        return float(np.clip(self.features, 0.0, 1.0).mean())

    def flagged(self, threshold: float = FUSION_THRESHOLD) -> bool:
        return self.fusion > threshold


def steg_detectors(frame) -> DetectorReport:
    """Run all four detectors on an 8-bit frame (``[H, W]`` or ``[..., H, W]``).

    A constant frame carries no usable statistics; it gets zero estimates and
    ``degenerate=True``.
    """
    x = _planes(frame)
    if x.min() == x.max():
        return DetectorReport(0.0, 0.0, 0.0, 0.0, degenerate=True)
    return DetectorReport(sample_pairs(x), rs_analysis(x), chi_square(x), primary_sets(x))


def fusion_score(frame) -> float:
    return steg_detectors(frame).fusion


# -- ROC --------------------------------------------------------------------------

@dataclass
class RocCurve:
    thresholds: np.ndarray
    tpr: np.ndarray
    fpr: np.ndarray
    auc: float

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["threshold", "fpr", "tpr"])
            for t, f, p in zip(self.thresholds, self.fpr, self.tpr):
                w.writerow([f"{t:.6g}", f"{f:.6f}", f"{p:.6f}"])

    def plot(self, path, title: str = "ROC") -> None:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(4, 4))
        ax.plot(self.fpr, self.tpr, label=f"AUC = {self.auc:.3f}")
        ax.plot([0, 1], [0, 1], "k--", lw=0.8)
        ax.set_xlabel("false positive rate")
        ax.set_ylabel("true positive rate")
        ax.set_title(title)
        ax.legend(loc="lower right")
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)


def roc(scores_pos, scores_neg) -> RocCurve:
    """Sweep every distinct score as a threshold (``score >= t`` is positive)."""
    pos = np.asarray(scores_pos, dtype=float).ravel()
    neg = np.asarray(scores_neg, dtype=float).ravel()
    if pos.size == 0 or neg.size == 0:
        raise ValidationError("ROC needs non-empty positive and negative score sets")
    thresholds = np.concatenate([[np.inf], np.unique(np.concatenate([pos, neg]))[::-1]])
    tpr = np.array([(pos >= t).mean() for t in thresholds])
    fpr = np.array([(neg >= t).mean() for t in thresholds])
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2))
    return RocCurve(thresholds, tpr, fpr, auc)
