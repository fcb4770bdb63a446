"""Downstream uses of the hand score: a quality loss for generation and
score-level fusion with fake-image detectors."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .metrics import average_ranks
from .model import patchify, score_input_gradients

DEFAULT_LAMBDA = 0.1
DEFAULT_ALPHA = 0.2
CONTINUOUS_DEFECTS = ("deformation", "proportional", "fusion")


class ApplicationError(ValueError):
    pass


def quality_loss(scores) -> float:
    """Mean squared distance of hand scores from the ideal score 5."""
    q = np.asarray(scores, dtype=np.float64)
    if q.size == 0:
        raise ApplicationError("quality loss needs at least one score")
    return float(np.mean((q - 5.0) ** 2))


def total_loss(denoise_loss: float, quality: float, lam: float = DEFAULT_LAMBDA) -> float:
    if lam < 0:
        raise ApplicationError("lambda must be non-negative")
    return denoise_loss + lam * quality


# --- detection fusion --------------------------------------------------------

def fuse_detection(p_detector, s_hand, alpha: float = DEFAULT_ALPHA):
    """(1 - alpha) * p_detector + alpha * (5 - s_hand) / 4.

    Works elementwise on arrays. Low hand quality pushes the fake
    probability up, high quality pulls it down.
    """
    p = np.asarray(p_detector, dtype=np.float64)
    s = np.asarray(s_hand, dtype=np.float64)
    if not 0.0 <= alpha <= 1.0:
        raise ApplicationError(f"alpha must lie in [0, 1], got {alpha}")
    if np.any((p < 0) | (p > 1)) or not np.all(np.isfinite(p)):
        raise ApplicationError("detector probabilities must lie in [0, 1]")
    if np.any((s < 1) | (s > 5)) or not np.all(np.isfinite(s)):
        raise ApplicationError("hand scores must lie in [1, 5]")
    out = (1.0 - alpha) * p + alpha * ((5.0 - s) / 4.0)
    return float(out) if out.ndim == 0 else out


@dataclass
class DetectionRecord:
    image_id: str
    label: str  # "real" | "fake"
    p_detector: float
    s_hand: float
    alpha: float | None = None
    p_fused: float | None = None

    def __post_init__(self):
        if self.label not in ("real", "fake"):
            raise ApplicationError(f"{self.image_id}: label must be real or fake")

    def fused(self, alpha: float) -> DetectionRecord:
        return DetectionRecord(self.image_id, self.label, self.p_detector, self.s_hand,
                               alpha, fuse_detection(self.p_detector, self.s_hand, alpha))


def auc_from_scores(pos, neg) -> float:
    """Mann-Whitney AUC: P(pos > neg) + 0.5 P(pos == neg)."""
    pos = np.asarray(pos, dtype=np.float64)
    neg = np.asarray(neg, dtype=np.float64)
    if pos.size == 0 or neg.size == 0:
        raise ApplicationError("AUC needs both classes")
    ranks = average_ranks(np.concatenate([pos, neg]))
    n1 = pos.size
    return float((ranks[:n1].sum() - n1 * (n1 + 1) / 2) / (n1 * neg.size))


@dataclass
class RocReport:
    auc: float
    eer: float
    acc_at_eer: float
    threshold_at_eer: float


def roc_from_scores(labels, scores) -> RocReport:
    """ROC summary; ``labels`` are 1 for fake (positive), 0 for real.

    EER is found where the false-positive and false-negative rates cross,
    interpolating linearly between adjacent thresholds.
    """
    y = np.asarray(labels).astype(bool)
    s = np.asarray(scores, dtype=np.float64)
    if y.all() or not y.any():
        raise ApplicationError("ROC analysis needs both real and fake samples")
    pos, neg = s[y], s[~y]
    auc = auc_from_scores(pos, neg)
    thr = np.append(np.unique(s), np.inf)
    neg_sorted = np.sort(neg)
    pos_sorted = np.sort(pos)
    # predict fake when score >= threshold
    fpr = 1.0 - np.searchsorted(neg_sorted, thr, side="left") / neg.size
    fnr = np.searchsorted(pos_sorted, thr, side="left") / pos.size
    diff = fpr - fnr
    # diff starts at 1 (lowest threshold) and ends at -1 (infinite threshold)
    k = int(np.flatnonzero(diff <= 0)[0])
    if diff[k] == 0:
        eer = float(fpr[k])
        t = float(thr[k])
    else:
        lam = diff[k - 1] / (diff[k - 1] - diff[k])
        eer = float(fpr[k - 1] + lam * (fpr[k] - fpr[k - 1]))
        t = float(thr[k - 1] + lam * (thr[k] - thr[k - 1])) if np.isfinite(thr[k]) else np.inf
        # any threshold in (thr[k-1], thr[k]] classifies like thr[k]
        t = max(t, float(np.nextafter(thr[k - 1], np.inf)))
    pred = s >= t
    acc = float(np.mean(pred == y))
    return RocReport(auc, eer, acc, t)


def roc_metrics(records, use_fused: bool = True) -> RocReport:
    labels = [r.label == "fake" for r in records]
    scores = [r.p_fused if (use_fused and r.p_fused is not None) else r.p_detector for r in records]
    return roc_from_scores(labels, scores)


def stub_detector(labels, target_auc: float, seed: int, tol: float = 0.02) -> np.ndarray:
    """Fake-probabilities from label + Gaussian noise, noise scale bisected so
    the realized AUC lands within ``tol`` of ``target_auc``."""
    if not 0.5 < target_auc < 1.0:
        raise ApplicationError("target AUC must lie in (0.5, 1)")
    y = np.asarray(labels).astype(bool)
    if y.all() or not y.any():
        raise ApplicationError("stub detector needs both classes")
    eps = np.random.default_rng([seed, 7]).standard_normal(y.size)
    base = y.astype(np.float64)

    def realized(log_sigma):
        raw = base + math.exp(log_sigma) * eps
        return auc_from_scores(raw[y], raw[~y])

    lo, hi = math.log(1e-3), math.log(1e3)  # realized AUC decreases with sigma
    for _ in range(80):
        mid = (lo + hi) / 2
        if realized(mid) > target_auc:
            lo = mid
        else:
            hi = mid
    log_sigma = (lo + hi) / 2
    got = realized(log_sigma)
    if abs(got - target_auc) > tol:
        raise ApplicationError(f"target AUC {target_auc} unattainable (closest {got:.4f})")
    return expit(base + math.exp(log_sigma) * eps - 0.5)


@dataclass
class SweepRow:
    alpha: float
    report: RocReport


def fusion_sweep(records, alphas) -> list[SweepRow]:
    """ROC metrics of the fused probability for each alpha in the grid."""
    labels = np.array([r.label == "fake" for r in records])
    p = np.array([r.p_detector for r in records], dtype=np.float64)
    s = np.array([r.s_hand for r in records], dtype=np.float64)
    rows = []
    for a in alphas:
        rows.append(SweepRow(float(a), roc_from_scores(labels, fuse_detection(p, s, float(a)))))
    return rows


def write_detection_records(records, path) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps({"id": r.image_id, "label": r.label,
                                 "p_detector": r.p_detector, "s_hand": r.s_hand}) + "\n")


def read_detection_records(path) -> list[DetectionRecord]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                out.append(DetectionRecord(str(d["id"]), d["label"], float(d["p_detector"]), float(d["s_hand"])))
            except (ValueError, KeyError, TypeError) as e:
                raise ApplicationError(f"{path}:{lineno}: malformed detection record: {e}") from e
    return out


# --- quality-guided improvement ----------------------------------------------------

def improve_hand(clean, plan, params, steps: int = 50, step_size: float = 0.01,
                 free=("deformation",), smoothing: float = 1.0, nodes: int = 9,
                 fd_step: float = 1e-4):
    """Descend the quality loss with respect to continuous degradation
    magnitudes, holding the scorer fixed.

    d(score)/d(magnitude) chains the scorer's exact input gradients with a
    central difference of the (keypoints, raster) pipeline in the magnitude.
    The learned score is bumpy along a magnitude path, so the gradient is
    averaged over Gauss-Hermite offsets of width ``smoothing``, annealed
    linearly to zero; the last steps are plain gradient descent. Offsets
    that leave [0, 1] are dropped, since the clipped loss is flat there.

    Returns:
      (per-step scores including the starting point, final magnitudes)
    """
    from .forge import degraded_joints, render_degraded

    free = tuple(free)
    for name in free:
        if name not in CONTINUOUS_DEFECTS:
            raise ApplicationError(f"{name!r} is not a continuous defect; choose from {CONTINUOUS_DEFECTS}")
        if name not in plan.ops:
            raise ApplicationError(f"plan has no {name!r} operator")
    if steps < 0 or step_size < 0 or smoothing < 0:
        raise ApplicationError("steps, step size and smoothing must be non-negative")
    z, w = np.polynomial.hermite_e.hermegauss(nodes)
    w = w / w.sum()
    base_joints = clean.keypoints.joints

    def inputs(m):
        j = degraded_joints(base_joints, plan, m)
        return j, patchify(render_degraded(j, plan, clean.occluder, m))

    def score_and_grad(m):
        X, P = inputs(m)
        S, gx, gp = score_input_gradients(X[None], P[None], params)
        grad = {}
        for name in free:
            Xu, Pu = inputs(dict(m, **{name: m[name] + fd_step}))
            Xd, Pd = inputs(dict(m, **{name: m[name] - fd_step}))
            dS = float(np.sum(gx[0] * (Xu - Xd)) + np.sum(gp[0] * (Pu - Pd))) / (2 * fd_step)
            grad[name] = 2.0 * (S[0] - 5.0) * dS
        return float(S[0]), grad

    mags = {name: 1.0 for name in free}
    trajectory = []
    for step in range(steps + 1):
        S, grad = score_and_grad(mags)
        trajectory.append(S)
        if step == steps or step_size == 0:
            if step < steps:
                trajectory.extend([S] * (steps - step))
            break
        width = smoothing * (1.0 - step / steps)
        if width > 0:
            grad = {name: 0.0 for name in free}
            for zk, wk in zip(z, w):
                shifted = {n: mags[n] + width * zk for n in free}
                # the clipped magnitude is flat outside [0, 1], so those nodes add nothing
                if any(not 0.0 <= v <= 1.0 for v in shifted.values()):
                    continue
                _, g = score_and_grad(shifted)
                for name in free:
                    grad[name] += wk * g[name]
        for name in free:
            mags[name] = min(1.0, max(0.0, mags[name] - step_size * grad[name]))
    return trajectory, mags
