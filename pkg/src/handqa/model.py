"""Keypoint-prior fused hand quality scorer.

Architecture (all float64)::

    keypoints (21x3) --GCN x2--> 21 query tokens ----\
                                                      cross-attention -> + mean image token -> LayerNorm
    raster (64x64) --8x8 patches, linear + pos--> 64 key/value tokens --/        -> mean over 21 tokens -> 2 logits

The two logits stand for the answer tokens ``good`` and ``bad``; the score
is ``4 * softmax(z)[good] + 1``.

Forward functions broadcast over arbitrary leading axes of both the inputs
and the parameters, which lets the finite-difference checker evaluate many
perturbed parameter sets in one call. The backward pass is written out by
hand for the plain ``(batch, ...)`` layout.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import TOPOLOGY

PROMPT = "How is the quality of the hand in this image? Please answer with 'good' or 'bad'.<image>"
LABELS = ("good", "bad")
VARIANTS = ("gcn", "mlp", "none")
CHECKPOINT_VERSION = 1

DIM = 32
PATCH = 8
N_PATCHES = 64
PATCH_DIM = PATCH * PATCH
N_JOINTS = 21
LN_EPS = 1e-10

SHAPES = {
    "gcn_w1": (3, DIM),
    "gcn_w2": (DIM, DIM),
    "patch_w": (PATCH_DIM, DIM),
    "pos": (N_PATCHES, DIM),
    "wq": (DIM, DIM),
    "wk": (DIM, DIM),
    "wv": (DIM, DIM),
    "ln_gain": (DIM,),
    "ln_bias": (DIM,),
    "head_w": (DIM, 2),
    "head_b": (2,),
}
NAMES = tuple(SHAPES)

ADJ = TOPOLOGY.normalized_adjacency()


class ModelError(ValueError):
    pass


@dataclass
class ScorerParams:
    tensors: dict[str, np.ndarray]
    variant: str = "gcn"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ModelError(f"encoder variant must be one of {VARIANTS}")
        for name, shape in SHAPES.items():
            t = self.tensors.get(name)
            if t is None or t.shape != shape:
                raise ModelError(f"tensor {name} missing or not of shape {shape}")
            if not np.all(np.isfinite(t)):
                raise ModelError(f"tensor {name} has non-finite entries")

    def __getitem__(self, name):
        return self.tensors[name]

    def copy(self) -> ScorerParams:
        return ScorerParams({k: v.copy() for k, v in self.tensors.items()}, self.variant)

    @classmethod
    def zeros(cls, variant="gcn") -> ScorerParams:
        return cls({k: np.zeros(s) for k, s in SHAPES.items()}, variant)

    @classmethod
    def init(cls, seed: int, variant: str = "gcn") -> ScorerParams:
        """Glorot-uniform weights, zero biases, unit LayerNorm gain."""
        rng = np.random.default_rng([seed, 0])
        t = {}
        for name, shape in SHAPES.items():
            if name == "ln_gain":
                t[name] = np.ones(shape)
            elif len(shape) == 1:
                t[name] = np.zeros(shape)
            else:
                limit = math.sqrt(6.0 / (shape[0] + shape[1]))
                t[name] = rng.uniform(-limit, limit, size=shape)
        return cls(t, variant)


# --- input preparation -------------------------------------------------------

def patchify(img: np.ndarray) -> np.ndarray:
    """(..., 64, 64) image -> (..., 64 patches, 64 pixels), both row-major."""
    lead = img.shape[:-2]
    g = img.shape[-1] // PATCH
    x = img.reshape(*lead, g, PATCH, g, PATCH)
    x = np.moveaxis(x, -3, -2)
    return x.reshape(*lead, g * g, PATCH * PATCH)


def unpatchify(patches: np.ndarray) -> np.ndarray:
    lead = patches.shape[:-2]
    g = int(round(math.sqrt(patches.shape[-2])))
    x = patches.reshape(*lead, g, g, PATCH, PATCH)
    x = np.moveaxis(x, -2, -3)
    return x.reshape(*lead, g * PATCH, g * PATCH)


def prepare(records):
    """Stack HandRecords into keypoint and patch arrays plus label indices."""
    X = np.stack([r.keypoints.joints for r in records])
    rasters = np.stack([np.asarray(r.raster) for r in records])
    if rasters.shape[1:] != (64, 64):
        raise ModelError(f"rasters must be 64x64, got {rasters.shape[1:]}")
    P = patchify(rasters.astype(np.float64) / 255.0)
    y = np.array([LABELS.index(r.label) for r in records])
    return X, P, y


# --- forward ----------------------------------------------------------------

def _relu(x):
    return np.maximum(x, 0.0)


def encode_keypoints(X, params, variant="gcn", adj=ADJ):
    """Two rounds of relu(A_hat H W); ``mlp`` drops the graph mixing."""
    if variant == "mlp":
        return _relu(_relu(X @ params["gcn_w1"]) @ params["gcn_w2"])
    h1 = _relu(adj @ X @ params["gcn_w1"])
    return _relu(adj @ h1 @ params["gcn_w2"])


def encode_image(P, params):
    P = np.asarray(P)
    if P.shape[-2:] != (N_PATCHES, PATCH_DIM):
        raise ModelError(f"expected (..., 64, 64) patches, got {P.shape}")
    return P @ params["patch_w"] + params["pos"]


def attention(Q, K, V):
    """Single-head scaled dot-product attention; returns (output, weights)."""
    s = Q @ np.swapaxes(K, -1, -2) / math.sqrt(Q.shape[-1])
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    a = e / e.sum(axis=-1, keepdims=True)
    return a @ V, a


def layer_norm(R, gain, bias):
    mu = R.mean(axis=-1, keepdims=True)
    c = R - mu
    var = (c * c).mean(axis=-1, keepdims=True)
    xhat = c / np.sqrt(var + LN_EPS)
    return xhat * gain[..., None, :] + bias[..., None, :], xhat


@dataclass
class FusedFeature:
    tokens: np.ndarray
    summary: np.ndarray


def fuse(kp_tokens, img_tokens, params) -> FusedFeature:
    """Keypoint tokens query image tokens; residual is the mean image token."""
    Q = kp_tokens @ params["wq"]
    K = img_tokens @ params["wk"]
    V = img_tokens @ params["wv"]
    C, _ = attention(Q, K, V)
    R = C + img_tokens.mean(axis=-2, keepdims=True)
    Y, _ = layer_norm(R, params["ln_gain"], params["ln_bias"])
    return FusedFeature(Y, Y.mean(axis=-2))


def head(summary, params):
    return (summary[..., None, :] @ params["head_w"])[..., 0, :] + params["head_b"]


def forward(X, P, params, variant=None):
    """Logits (..., 2) ordered (z_good, z_bad)."""
    variant = variant or params.variant
    T = encode_image(P, params)
    if variant == "none":
        Y, _ = layer_norm(T, params["ln_gain"], params["ln_bias"])
        return head(Y.mean(axis=-2), params)
    H = encode_keypoints(X, params, variant)
    return head(fuse(H, T, params).summary, params)


def forward_records(records, params):
    X, P, _ = prepare(records)
    return forward(X, P, params)


def log_softmax(z):
    m = z.max(axis=-1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=-1, keepdims=True))


def cross_entropy(z, y):
    """Mean negative log-probability of the true token over the last batch axis."""
    lp = log_softmax(z)
    picked = np.take_along_axis(lp, np.broadcast_to(y[:, None], lp.shape[:-1] + (1,)), axis=-1)[..., 0]
    return -picked.mean(axis=-1)


# --- scoring ------------------------------------------------------------------

@dataclass(frozen=True)
class HandScore:
    value: float
    p_good: float
    p_bad: float


def score_values(logits) -> np.ndarray:
    """Vectorized 4 * p_good + 1 with max-subtraction."""
    z = np.asarray(logits, dtype=np.float64)
    m = z.max(axis=-1, keepdims=True)
    e = np.exp(z - m)
    return 4.0 * (e[..., 0] / e.sum(axis=-1)) + 1.0


def score(logits) -> HandScore:
    z_good, z_bad = (float(v) for v in logits)
    if not (math.isfinite(z_good) and math.isfinite(z_bad)):
        raise ModelError("logits must be finite")
    m = max(z_good, z_bad)
    eg = math.exp(z_good - m)
    eb = math.exp(z_bad - m)
    p_good = eg / (eg + eb)
    return HandScore(4.0 * p_good + 1.0, p_good, 1.0 - p_good)


def aggregate_image_score(hand_scores) -> float:
    """Image score as the mean over all hands in it."""
    scores = [float(s.value if isinstance(s, HandScore) else s) for s in hand_scores]
    if not scores:
        raise ModelError("need at least one hand score")
    return math.fsum(scores) / len(scores)


def score_records(records, params, batch_size=256) -> np.ndarray:
    out = []
    for i in range(0, len(records), batch_size):
        out.append(score_values(forward_records(records[i:i + batch_size], params)))
    return np.concatenate(out) if out else np.zeros(0)


# --- backward -----------------------------------------------------------------

def loss_and_gradients(X, P, y, params, variant=None, input_grads=False):
    """Mean cross-entropy over the batch and its exact gradient.

    Returns ``(loss, grads)``; with ``input_grads`` also the gradients with
    respect to the keypoints and patches as ``grads["X"]``, ``grads["P"]``.
    """
    variant = variant or params.variant
    X = np.asarray(X, dtype=np.float64)
    P = np.asarray(P, dtype=np.float64)
    y = np.asarray(y)
    B = X.shape[0]
    p = params.tensors
    g = {k: np.zeros(s) for k, s in SHAPES.items()}

    T = P @ p["patch_w"] + p["pos"]
    if variant == "none":
        R = T
    else:
        if variant == "mlp":
            AX = X
            M1 = AX @ p["gcn_w1"]
            H1 = _relu(M1)
            AH1 = H1
        else:
            AX = ADJ @ X
            M1 = AX @ p["gcn_w1"]
            H1 = _relu(M1)
            AH1 = ADJ @ H1
        M2 = AH1 @ p["gcn_w2"]
        H2 = _relu(M2)
        Q = H2 @ p["wq"]
        K = T @ p["wk"]
        V = T @ p["wv"]
        C, A = attention(Q, K, V)
        R = C + T.mean(axis=1, keepdims=True)
    mu = R.mean(axis=-1, keepdims=True)
    c = R - mu
    var = (c * c).mean(axis=-1, keepdims=True)
    sigma = np.sqrt(var + LN_EPS)
    xhat = c / sigma
    Y = xhat * p["ln_gain"] + p["ln_bias"]
    s = Y.mean(axis=1)
    z = head(s, params)

    lp = log_softmax(z)
    loss = float(-lp[np.arange(B), y].mean())

    dz = np.exp(lp)
    dz[np.arange(B), y] -= 1.0
    dz /= B
    g["head_w"] = s.T @ dz
    g["head_b"] = dz.sum(axis=0)
    ds = dz @ p["head_w"].T
    n_tok = Y.shape[1]
    dY = np.broadcast_to(ds[:, None, :] / n_tok, Y.shape)
    g["ln_gain"] = (dY * xhat).sum(axis=(0, 1))
    g["ln_bias"] = dY.sum(axis=(0, 1))
    dxhat = dY * p["ln_gain"]
    dR = (dxhat - dxhat.mean(axis=-1, keepdims=True)
          - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)) / sigma

    if variant == "none":
        dT = dR
    else:
        dC = dR
        dT = np.broadcast_to(dR.sum(axis=1, keepdims=True) / T.shape[1], T.shape).copy()
        dA = dC @ np.swapaxes(V, 1, 2)
        dV = np.swapaxes(A, 1, 2) @ dC
        dS = A * (dA - (dA * A).sum(axis=-1, keepdims=True)) / math.sqrt(DIM)
        dQ = dS @ K
        dK = np.swapaxes(dS, 1, 2) @ Q
        g["wq"] = np.einsum("bti,btj->ij", H2, dQ)
        g["wk"] = np.einsum("bti,btj->ij", T, dK)
        g["wv"] = np.einsum("bti,btj->ij", T, dV)
        dT += dK @ p["wk"].T + dV @ p["wv"].T
        dH2 = dQ @ p["wq"].T
        dM2 = dH2 * (M2 > 0)
        g["gcn_w2"] = np.einsum("bti,btj->ij", AH1, dM2)
        dAH1 = dM2 @ p["gcn_w2"].T
        dH1 = dAH1 if variant == "mlp" else ADJ.T @ dAH1
        dM1 = dH1 * (M1 > 0)
        g["gcn_w1"] = np.einsum("bti,btj->ij", AX, dM1)
    g["patch_w"] = np.einsum("bti,btj->ij", P, dT)
    g["pos"] = dT.sum(axis=0)
    if input_grads:
        dP = dT @ p["patch_w"].T
        if variant == "none":
            dX = np.zeros_like(X)
        else:
            dAX = dM1 @ p["gcn_w1"].T
            dX = dAX if variant == "mlp" else ADJ.T @ dAX
        g["X"] = dX
        g["P"] = dP
    return loss, g


def score_input_gradients(X, P, params):
    """Scores and d(score)/d(keypoints), d(score)/d(patches) per sample.

    With label ``bad`` the cross-entropy gradient in the logits is
    (p_good, -p_good), while dS/dz = 4 p_good p_bad (1, -1); so the input
    gradients of the score are the cross-entropy ones scaled by 4 p_bad.
    """
    X = np.asarray(X, dtype=np.float64)
    P = np.asarray(P, dtype=np.float64)
    B = X.shape[0]
    S = score_values(forward(X, P, params))
    pg = (S - 1.0) / 4.0
    gx = np.zeros_like(X)
    gp = np.zeros_like(P)
    for b in range(B):
        _, gr = loss_and_gradients(X[b:b + 1], P[b:b + 1], np.array([1]), params, input_grads=True)
        gx[b] = gr["X"][0] * 4.0 * (1.0 - pg[b])
        gp[b] = gr["P"][0] * 4.0 * (1.0 - pg[b])
    return S, gx, gp


# --- training -------------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 5
    batch_size: int = 16
    lr: float = 0.01
    momentum: float = 0.9
    seed: int = 42
    encoder_variant: str = "gcn"
    heldout_fraction: float = 0.2

    def __post_init__(self):
        if self.encoder_variant not in VARIANTS:
            raise ModelError(f"encoder_variant must be one of {VARIANTS}")
        if self.epochs < 1 or self.batch_size < 1 or self.lr < 0:
            raise ModelError("epochs and batch size must be positive, lr non-negative")


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    heldout_accuracy: float
    heldout_auc: float


@dataclass
class TrainResult:
    params: ScorerParams
    log: list[EpochLog] = field(default_factory=list)
    heldout_ids: list[str] = field(default_factory=list)


def _auc(scores_pos, scores_neg):
    from .applications import auc_from_scores

    return auc_from_scores(np.asarray(scores_pos), np.asarray(scores_neg))


def split_pairs(samples, fraction, seed):
    """Deterministic pair-level train/held-out split."""
    n = len(samples)
    n_held = int(round(n * fraction))
    order = np.random.default_rng([seed, 1]).permutation(n)
    held = set(order[:n_held].tolist())
    train = [s for i, s in enumerate(samples) if i not in held]
    heldout = [s for i, s in enumerate(samples) if i in held]
    return train, heldout


def _records(pairs):
    return [r for s in pairs for r in (s.clean, s.degraded)]


def train_records(records, config: TrainConfig, heldout=None, log_fn=None) -> TrainResult:
    """Mini-batch momentum descent on labeled HandRecords."""
    X, P, y = prepare(records)
    if len(set(y.tolist())) < 2:
        raise ModelError("training data must contain both good and bad records")
    params = ScorerParams.init(config.seed, config.encoder_variant)
    velocity = {k: np.zeros(s) for k, s in SHAPES.items()}
    result = TrainResult(params)
    if heldout:
        hX, hP, hy = prepare(heldout)
    n = len(y)
    for epoch in range(config.epochs):
        perm = np.random.default_rng([config.seed, 2 + epoch]).permutation(n)
        losses = []
        for i in range(0, n, config.batch_size):
            idx = perm[i:i + config.batch_size]
            loss, grads = loss_and_gradients(X[idx], P[idx], y[idx], params)
            losses.append(loss * len(idx))
            for k in NAMES:
                velocity[k] = config.momentum * velocity[k] + grads[k]
                params.tensors[k] -= config.lr * velocity[k]
        acc = auc = float("nan")
        if heldout:
            S = score_values(forward(hX, hP, params))
            acc = float(np.mean((S > 3.0) == (hy == 0)))
            auc = float(_auc(S[hy == 0], S[hy == 1]))
        entry = EpochLog(epoch + 1, math.fsum(losses) / n, acc, auc)
        result.log.append(entry)
        if log_fn:
            log_fn(entry)
    return result


def train(samples, config: TrainConfig, log_fn=None) -> TrainResult:
    """Train on PairedSamples, holding out a seeded fraction of pairs."""
    tr, held = split_pairs(samples, config.heldout_fraction, config.seed)
    res = train_records(_records(tr), config, _records(held) if held else None, log_fn)
    res.heldout_ids = [s.id for s in held]
    return res


# --- checkpoints ------------------------------------------------------------------

def save_checkpoint(params: ScorerParams, path, meta=None) -> None:
    record = {
        "format_version": CHECKPOINT_VERSION,
        "encoder_variant": params.variant,
        "prompt": PROMPT,
        "meta": meta or {},
        "tensors": [
            {"name": k, "shape": list(SHAPES[k]), "data": params.tensors[k].ravel().tolist()}
            for k in NAMES
        ],
    }
    Path(path).write_text(json.dumps(record) + "\n")


def load_checkpoint(path) -> ScorerParams:
    try:
        record = json.loads(Path(path).read_text())
    except (OSError, ValueError) as e:
        raise ModelError(f"cannot read checkpoint {path}: {e}") from e
    if record.get("format_version") != CHECKPOINT_VERSION:
        raise ModelError(f"unsupported checkpoint version {record.get('format_version')!r}")
    tensors = {}
    for t in record["tensors"]:
        tensors[t["name"]] = np.array(t["data"], dtype=np.float64).reshape(t["shape"])
    return ScorerParams(tensors, record["encoder_variant"])


# --- finite-difference oracle -------------------------------------------------------

def _fd_entries(X, P, y, params, name, idx, h, dtype):
    base = params.tensors[name]
    flat = base.ravel().astype(dtype)
    tensors = {k: v.astype(dtype) for k, v in params.tensors.items()}
    X = np.asarray(X).astype(dtype)
    P = np.asarray(P).astype(dtype)
    h = dtype(h)
    res = []
    for sign in (1, -1):
        pert = np.repeat(flat[None, :], len(idx), axis=0)
        pert[np.arange(len(idx)), idx] += sign * h
        stacked = dict(tensors)
        stacked[name] = pert.reshape((len(idx), 1) + base.shape)
        z = forward(X, P, _Stacked(stacked, params.variant))
        res.append(cross_entropy(z, y))
    return (res[0] - res[1]) / (2 * h)


def finite_difference_gradients(X, P, y, params, h=1e-5, chunk=128, dtype=np.float64):
    """Central differences of the batch loss for every parameter entry.

    Perturbed parameter sets are stacked on a leading axis and pushed through
    the broadcasting forward pass; no backward code is involved.
    """
    y = np.asarray(y)
    out = {}
    for name in NAMES:
        base = params.tensors[name]
        grad = np.empty(base.size)
        for start in range(0, base.size, chunk):
            idx = np.arange(start, min(start + chunk, base.size))
            grad[idx] = _fd_entries(X, P, y, params, name, idx, h, dtype)
        out[name] = grad.reshape(base.shape)
    return out


def refine_finite_differences(X, P, y, params, analytic, numeric, h=1e-5, tol=1e-5):
    """Recompute, in extended precision, the entries whose float64 central
    difference disagrees with ``analytic`` by more than ``tol`` (relative).

    Float64 rounding puts a floor of roughly 1e-11 under the difference
    quotient, which swamps gradient entries near 1e-8; the same quotient in
    80-bit arithmetic is accurate to ~1e-14.
    """
    y = np.asarray(y)
    out = {}
    refined = 0
    for name in NAMES:
        n = numeric[name].copy()
        err = relative_error(analytic[name], n)
        idx = np.flatnonzero(err.ravel() > tol)
        if len(idx):
            flat = n.ravel()
            flat[idx] = _fd_entries(X, P, y, params, name, idx, h, np.longdouble).astype(np.float64)
            n = flat.reshape(n.shape)
            refined += len(idx)
        out[name] = n
    return out, refined


class _Stacked:
    """Parameter view without shape validation, for stacked perturbations."""

    def __init__(self, tensors, variant):
        self.tensors = tensors
        self.variant = variant

    def __getitem__(self, name):
        return self.tensors[name]


def relative_error(analytic, numeric):
    """Elementwise |a - n| / max(|a|, |n|); zero where both vanish."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.abs(a), np.abs(n))
    diff = np.abs(a - n)
    return np.divide(diff, denom, out=np.zeros_like(diff), where=denom > 0)


KINK_MARGIN = 1e-4


def relu_preactivations(X, params, variant="gcn"):
    """Pre-activation arrays of both keypoint-encoder ReLU layers."""
    if variant == "none":
        return []
    adj = np.eye(N_JOINTS) if variant == "mlp" else ADJ
    m1 = adj @ X @ params["gcn_w1"]
    m2 = adj @ _relu(m1) @ params["gcn_w2"]
    return [m1, m2]


def random_problem(seed, batch=2, variant="gcn", margin=KINK_MARGIN, max_tries=1000):
    """Random skeletons, rasters, labels and parameters for gradient checks.

    Keypoints are redrawn until every ReLU pre-activation sits at least
    ``margin`` from zero: a central difference whose stencil straddles a kink
    does not estimate the derivative.
    """
    rng = np.random.default_rng([seed, 99])
    params = ScorerParams.init(seed, variant)
    params.tensors["ln_gain"] = rng.uniform(0.5, 1.5, DIM)
    params.tensors["ln_bias"] = rng.uniform(-0.5, 0.5, DIM)
    params.tensors["head_b"] = rng.uniform(-0.5, 0.5, 2)
    P = patchify(rng.uniform(0.0, 1.0, (batch, 64, 64)))
    y = rng.integers(0, 2, batch)
    for _ in range(max_tries):
        X = rng.uniform(0.0, 1.0, (batch, N_JOINTS, 3))
        if all(np.abs(m).min() >= margin for m in relu_preactivations(X, params, variant)):
            return X, P, y, params
    raise ModelError(f"no kink-free problem for seed {seed} after {max_tries} draws")


@dataclass
class GradCheckReport:
    seed: int
    max_relative_error: float
    per_tensor: dict
    refined_entries: int = 0


def gradcheck(seed, h=1e-5, batch=2, variant="gcn") -> GradCheckReport:
    """Compare analytic gradients with central differences on a random problem."""
    X, P, y, params = random_problem(seed, batch, variant)
    _, analytic = loss_and_gradients(X, P, y, params)
    numeric = finite_difference_gradients(X, P, y, params, h=h)
    numeric, refined = refine_finite_differences(X, P, y, params, analytic, numeric, h=h)
    per = {k: float(relative_error(analytic[k], numeric[k]).max()) for k in NAMES}
    return GradCheckReport(seed, max(per.values()), per, refined)
