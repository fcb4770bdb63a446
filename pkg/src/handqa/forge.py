"""Synthetic paired hand data.

Clean hands are sampled from a parametric skeleton with anatomical
flexion limits; degraded partners come from skeletal and raster-level
operators covering six defect categories at three severity tiers:

* 0.4  - heavy structural damage (1-3 operators), occasional light texture
* 0.55 - one or two structural operators, texture sometimes
* 0.7  - texture damage always, at most one mild structural operator

A structurally edited finger also leaves a local regeneration seam: the
pixels around it are blended toward a noise field with a weight that grows
with the tier strength and the operator magnitude.

Every sample draws its randomness from ``default_rng([seed, index])`` so
serial and parallel builds produce identical bytes.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .geometry import (
    ADJACENT_FINGERS,
    FINGER_CHAINS,
    FINGERS,
    BBox,
    HandSkeleton,
    expand_and_clamp_bbox,
    palm_orientation,
    passes_size_filter,
    pip_flexion_angles,
)
from .render import (
    RASTER_SIZE,
    Occluder,
    TextureParams,
    apply_texture,
    blend_seam,
    quantize,
    region_mask,
    read_pgm,
    render_hand,
    write_pgm,
)

SEVERITIES = (0.4, 0.55, 0.7)
STRUCTURAL = ("missing", "redundancy", "proportional", "deformation", "fusion")
DEFECTS = STRUCTURAL + ("texture",)
OBJECT_PROBABILITY = 0.6514
CROP_EXPANSION = 1.2

FLEXION_RANGE = (60.0, 180.0)
THUMB_FLEXION_RANGE = (80.0, 180.0)
OBJECT_FLEXION_RANGE = (150.0, 180.0)
OBJECT_BIAS = 0.75

# tier -> (structural operator counts, texture probability)
TIER_POLICY = {
    0.4: ((1, 3), 0.1),
    0.55: ((1, 2), 0.17),
    0.7: ((0, 1), 1.0),
}
DEFAULT_TIER_PROBABILITIES = (0.45, 0.35, 0.2)

# per-tier operator magnitudes
DEFORM_TARGET = {0.4: (5.0, 18.0), 0.55: (12.0, 24.0), 0.7: (22.0, 29.0)}
DEFORM_TWIST = {0.4: (40.0, 60.0), 0.55: (30.0, 45.0), 0.7: (0.0, 0.0)}
SHRINK = {0.4: (0.4, 0.5), 0.55: (0.5, 0.6), 0.7: (0.6, 0.7)}
GROW = {0.4: (1.9, 2.2), 0.55: (1.7, 1.9), 0.7: (1.5, 1.7)}
REDUNDANT_ANGLE = {0.4: (18.0, 25.0), 0.55: (14.0, 20.0), 0.7: (10.0, 14.0)}
BLUR = {0.4: (1.0, 1.4), 0.55: (1.4, 1.9), 0.7: (1.9, 2.5)}
SPECKLE = {0.4: (0.05, 0.08), 0.55: (0.08, 0.14), 0.7: (0.14, 0.2)}
BANDING = {0.4: (0.02, 0.05), 0.55: (0.05, 0.1), 0.7: (0.1, 0.15)}
# blend weight of the regeneration seam left around each structurally edited finger
SEAM_STRENGTH = {0.4: 0.8, 0.55: 0.65, 0.7: 0.5}
MISSING_JITTER = 0.012
FUSED_SEPARATION = 0.01

# hand-frame template: palm in the xy plane, fingers along +y, palm normal +z
_MCP = {
    "index": (0.09, 0.42),
    "middle": (0.02, 0.44),
    "ring": (-0.05, 0.42),
    "pinky": (-0.12, 0.37),
}
_SPLAY = {"index": 6.0, "middle": 0.0, "ring": -6.0, "pinky": -12.0}
_BONES = {
    "thumb": (0.17, 0.14, 0.11),
    "index": (0.22, 0.13, 0.10),
    "middle": (0.25, 0.15, 0.11),
    "ring": (0.23, 0.14, 0.10),
    "pinky": (0.18, 0.10, 0.09),
}
_THUMB_CMC = (0.10, 0.10)


class ForgeError(ValueError):
    pass


@dataclass(frozen=True)
class HandRecord:
    keypoints: HandSkeleton
    raster: np.ndarray
    label: str
    occluder: Occluder | None = None

    def __post_init__(self):
        r = np.asarray(self.raster)
        if r.shape != (RASTER_SIZE, RASTER_SIZE) or r.dtype != np.uint8:
            raise ForgeError(f"raster must be {RASTER_SIZE}x{RASTER_SIZE} uint8")
        if self.label not in ("good", "bad"):
            raise ForgeError(f"label must be good or bad, not {self.label!r}")


@dataclass
class DegradationPlan:
    """Everything needed to re-apply a degradation with other magnitudes."""

    severity: float
    defects: tuple[str, ...]
    ops: dict = field(default_factory=dict)
    texture: TextureParams | None = None
    seam_noise: np.ndarray | None = None


@dataclass(frozen=True)
class PairedSample:
    id: str
    clean: HandRecord
    degraded: HandRecord
    severity: float
    defects: tuple[str, ...]
    object_interaction: bool
    plan: DegradationPlan | None = field(default=None, compare=False, repr=False)


@dataclass(frozen=True)
class ForgeConfig:
    n_pairs: int = 100
    object_probability: float = OBJECT_PROBABILITY
    tier_probabilities: tuple[float, float, float] = DEFAULT_TIER_PROBABILITIES
    workers: int = 1

    def __post_init__(self):
        if self.n_pairs < 1:
            raise ForgeError("sample count must be >= 1")
        if len(self.tier_probabilities) != 3 or abs(sum(self.tier_probabilities) - 1.0) > 1e-9:
            raise ForgeError("tier probabilities must be three values summing to 1")


def rotation_matrix(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation about ``axis`` by ``angle`` radians."""
    k = np.asarray(axis, dtype=np.float64)
    k = k / np.linalg.norm(k)
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + math.sin(angle) * K + (1 - math.cos(angle)) * (K @ K)


def random_rotation(rng) -> np.ndarray:
    q = rng.standard_normal(4)
    w, x, y, z = q / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def _finger_chain(base, direction, bones, mcp_bend, pip_bend, dip_bend):
    """Joint positions after ``base`` for a planar flexion chain.

    All bends rotate about the same axis (perpendicular to the finger and the
    palm normal), so the angle at the second joint is exactly 180 - pip_bend.
    """
    axis = np.cross(direction, np.array([0.0, 0.0, 1.0]))
    pts = []
    p = np.asarray(base, dtype=np.float64)
    total = 0.0
    for length, bend in zip(bones, (mcp_bend, pip_bend, dip_bend)):
        total += bend
        d = rotation_matrix(axis, math.radians(total)) @ direction
        p = p + length * d
        pts.append(p)
    return pts


def _sample_angle(rng, rng_range, object_interaction):
    if object_interaction and rng.random() < OBJECT_BIAS:
        return rng.uniform(*OBJECT_FLEXION_RANGE)
    return rng.uniform(*rng_range)


def _template_joints(rng, object_interaction):
    joints = np.zeros((21, 3))
    jitter = lambda: rng.uniform(0.9, 1.1)  # noqa: E731
    for finger in FINGERS:
        chain = FINGER_CHAINS[finger]
        if finger == "thumb":
            cmc = np.array([_THUMB_CMC[0] * jitter(), _THUMB_CMC[1] * jitter(), 0.0])
            joints[chain[0]] = cmc
            heading = math.radians(-50.0 + rng.uniform(-10.0, 10.0))
            direction = np.array([-math.sin(heading), math.cos(heading), 0.0])
            ip = _sample_angle(rng, THUMB_FLEXION_RANGE, object_interaction)
            bones = [b * jitter() for b in _BONES["thumb"]]
            # CMC -> MCP -> IP -> TIP; the third bend sets the angle at joint 3
            pts = _finger_chain(cmc, direction, bones, rng.uniform(0.0, 20.0), rng.uniform(0.0, 40.0), 180.0 - ip)
            joints[chain[1]], joints[chain[2]], joints[chain[3]] = pts
            continue
        mx, my = _MCP[finger]
        mcp = np.array([mx * jitter(), my * jitter(), 0.0])
        joints[chain[0]] = mcp
        splay = math.radians(-_SPLAY[finger] + rng.uniform(-8.0, 8.0))
        direction = np.array([-math.sin(splay), math.cos(splay), 0.0])
        pip = _sample_angle(rng, FLEXION_RANGE, object_interaction)
        pip_bend = 180.0 - pip
        mcp_bend = rng.uniform(0.0, 30.0 if object_interaction else 60.0)
        dip_bend = pip_bend * rng.uniform(0.4, 0.8)
        bones = [b * jitter() for b in _BONES[finger]]
        pts = _finger_chain(mcp, direction, bones, mcp_bend, pip_bend, dip_bend)
        joints[chain[1]], joints[chain[2]], joints[chain[3]] = pts
    return joints


def _place_in_crop(joints, rng):
    """Project into a virtual frame, crop 1.2x around the hand box and
    normalize to the square crop (a similarity transform, so angles hold)."""
    frame = 512
    scale = rng.uniform(60.0, 220.0)
    xy = joints[:, :2]
    center = (xy.min(axis=0) + xy.max(axis=0)) / 2
    while True:
        px = (xy - center) * scale + frame / 2
        x0, y0 = np.floor(px.min(axis=0)).astype(int)
        x1, y1 = np.ceil(px.max(axis=0)).astype(int)
        box = BBox(max(0, int(x0)), max(0, int(y0)), min(frame, max(int(x1), int(x0) + 1)),
                   min(frame, max(int(y1), int(y0) + 1)), frame, frame)
        crop = expand_and_clamp_bbox(box, CROP_EXPANSION)
        if passes_size_filter(crop):
            break
        scale *= 1.25
    side = max(crop.w, crop.h)
    cx = (crop.x0 + crop.x1) / 2
    cy = (crop.y0 + crop.y1) / 2
    out = np.empty_like(joints)
    out[:, 0] = (px[:, 0] - cx) / side + 0.5
    out[:, 1] = (px[:, 1] - cy) / side + 0.5
    out[:, 2] = joints[:, 2] * scale / side
    return out


def _palm_center_px(joints):
    return joints[[0, 5, 9, 13, 17], :2].mean(axis=0) * RASTER_SIZE


def sample_clean_hand(rng, object_interaction: bool) -> HandRecord:
    """Draw one anatomically plausible hand and render it."""
    handedness = "left" if rng.random() < 0.5 else "right"
    joints = _template_joints(rng, object_interaction)
    if handedness == "left":
        joints[:, 0] = -joints[:, 0]
    joints = joints @ random_rotation(rng).T
    joints = _place_in_crop(joints, rng)
    occluder = None
    if object_interaction:
        c = _palm_center_px(joints) + rng.normal(0.0, 4.0, size=2)
        occluder = Occluder(float(c[0]), float(c[1]), float(rng.uniform(5.0, 10.0)))
    skeleton = HandSkeleton(joints, handedness)
    raster = quantize(render_hand(skeleton.joints, occluder=occluder))
    return HandRecord(skeleton, raster, "good", occluder)


# --- degradation operators -------------------------------------------------

def _angle_chain(finger):
    """(proximal, angle joint, distal joints...) for the flexion operator."""
    c = FINGER_CHAINS[finger]
    if finger == "thumb":
        return c[1], c[2], (c[3],)
    return c[0], c[1], (c[2], c[3])


def op_deformation(joints, finger, target_angle, twist_deg, magnitude):
    """Bend the finger at its PIP toward ``target_angle`` and twist the tip
    out of the finger plane; ``magnitude`` in [0, 1] interpolates both."""
    j = joints.copy()
    prox, mid, dist = _angle_chain(finger)
    u = j[prox] - j[mid]
    v = j[dist[0]] - j[mid]
    a0 = math.degrees(math.acos(np.clip(np.dot(u, v) / (np.linalg.norm(u) * np.linalg.norm(v)), -1, 1)))
    axis = np.cross(u, v)
    if np.linalg.norm(axis) < 1e-9 * np.linalg.norm(u) * np.linalg.norm(v):
        # straight finger: any axis perpendicular to the bone works
        helper = np.array([0.0, 0.0, 1.0]) if abs(u[2]) < 0.9 * np.linalg.norm(u) else np.array([1.0, 0.0, 0.0])
        axis = np.cross(u, helper)
    delta = magnitude * (target_angle - a0)
    R = rotation_matrix(axis, math.radians(delta))
    for k in dist:
        j[k] = j[mid] + R @ (j[k] - j[mid])
    if twist_deg > 0 and len(dist) > 1:
        bone = j[dist[0]] - j[mid]
        plane_n = axis / np.linalg.norm(axis)
        tw_axis = np.cross(plane_n, bone)
        R2 = rotation_matrix(tw_axis, math.radians(magnitude * twist_deg))
        for k in dist[1:]:
            j[k] = j[dist[0]] + R2 @ (j[k] - j[dist[0]])
    return j


def op_proportional(joints, finger, factor, magnitude):
    j = joints.copy()
    chain = FINGER_CHAINS[finger]
    base = j[chain[0]].copy()
    f = 1.0 + magnitude * (factor - 1.0)
    for k in chain[1:]:
        j[k] = base + f * (j[k] - base)
    return j


def op_fusion(joints, pair, positions, magnitude):
    j = joints.copy()
    ca, cb = FINGER_CHAINS[pair[0]], FINGER_CHAINS[pair[1]]
    for pos in positions:
        a, b = ca[pos], cb[pos]
        mid = (j[a] + j[b]) / 2
        half = np.linalg.norm(j[a] - mid)
        k = min(1.0, (FUSED_SEPARATION / 2) / half) if half > 0 else 1.0
        ta = mid + (j[a] - mid) * k
        tb = mid + (j[b] - mid) * k
        j[a] = j[a] + magnitude * (ta - j[a])
        j[b] = j[b] + magnitude * (tb - j[b])
    return j


def op_missing(joints, finger, jitter):
    j = joints.copy()
    chain = FINGER_CHAINS[finger]
    for k, off in zip(chain[1:], jitter):
        j[k] = j[chain[0]] + off
    return j


def redundant_chain(joints, finger, angle_deg):
    """Copy of a finger rotated in the image plane about its first joint."""
    chain = FINGER_CHAINS[finger]
    pts = joints[list(chain)].copy()
    c, s = math.cos(math.radians(angle_deg)), math.sin(math.radians(angle_deg))
    rel = pts[:, :2] - pts[0, :2]
    pts[:, 0] = pts[0, 0] + c * rel[:, 0] - s * rel[:, 1]
    pts[:, 1] = pts[0, 1] + s * rel[:, 0] + c * rel[:, 1]
    return pts


def _ball(rng, radius, n):
    v = rng.standard_normal((n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return v * radius * rng.uniform(0.0, 1.0, size=(n, 1)) ** (1 / 3)


def _max_growth(joints, finger, low=-0.45, high=1.45):
    chain = FINGER_CHAINS[finger]
    base = joints[chain[0], :2]
    limit = np.inf
    for k in chain[1:]:
        d = joints[k, :2] - base
        for axis in range(2):
            if d[axis] > 0:
                limit = min(limit, (high - base[axis]) / d[axis])
            elif d[axis] < 0:
                limit = min(limit, (low - base[axis]) / d[axis])
    return limit


def _validate_defects(severity, defects):
    if severity not in SEVERITIES:
        raise ForgeError(f"severity must be one of {SEVERITIES}, not {severity!r}")
    if not defects:
        raise ForgeError("defect set must be nonempty")
    unknown = set(defects) - set(DEFECTS)
    if unknown:
        raise ForgeError(f"unknown defect(s): {sorted(unknown)}")
    return tuple(d for d in DEFECTS if d in set(defects))


def plan_degradation(clean: HandRecord, severity: float, defects, rng) -> DegradationPlan:
    """Draw operator targets, fingers and texture noise for a degradation."""
    defects = _validate_defects(severity, defects)
    plan = DegradationPlan(severity, defects)
    free = list(FINGERS)
    if "fusion" in defects:
        pairs = [p for p in ADJACENT_FINGERS]
        pair = pairs[rng.integers(len(pairs))]
        free = [f for f in free if f not in pair]
        positions = (1, 2, 3) if severity < 0.7 else (2, 3)
        plan.ops["fusion"] = {"pair": pair, "positions": positions}
    for op in ("missing", "redundancy", "proportional", "deformation"):
        if op not in defects:
            continue
        finger = free.pop(rng.integers(len(free)))
        if op == "missing":
            plan.ops[op] = {"finger": finger, "jitter": _ball(rng, MISSING_JITTER, 3),
                            "region": clean.keypoints.joints[list(FINGER_CHAINS[finger])].copy()}
        elif op == "redundancy":
            sign = 1.0 if rng.random() < 0.5 else -1.0
            plan.ops[op] = {"finger": finger, "angle": sign * rng.uniform(*REDUNDANT_ANGLE[severity])}
        elif op == "proportional":
            grow = rng.random() < 0.5
            factor = rng.uniform(*(GROW if grow else SHRINK)[severity])
            if grow and factor > _max_growth(clean.keypoints.joints, finger):
                # would leave the frame; shrink instead
                factor = rng.uniform(*SHRINK[severity])
            plan.ops[op] = {"finger": finger, "factor": factor}
        else:
            lo, hi = DEFORM_TWIST[severity]
            plan.ops[op] = {
                "finger": finger,
                "target": rng.uniform(*DEFORM_TARGET[severity]),
                "twist": rng.uniform(lo, hi) if hi > 0 else 0.0,
            }
    if plan.ops:
        plan.seam_noise = rng.random((RASTER_SIZE, RASTER_SIZE))
    if "texture" in defects:
        shape = (RASTER_SIZE, RASTER_SIZE)
        plan.texture = TextureParams(
            blur_sigma=rng.uniform(*BLUR[severity]),
            band_amplitude=rng.uniform(*BANDING[severity]),
            band_period=rng.uniform(6.0, 16.0),
            band_phase=rng.uniform(0.0, 2 * math.pi),
            speckle_mask=rng.random(shape) < rng.uniform(*SPECKLE[severity]),
            speckle_values=rng.random(shape),
        )
    return plan


def _magnitudes(magnitudes):
    m = {"proportional": 1.0, "deformation": 1.0, "fusion": 1.0}
    m.update(magnitudes or {})
    return m


def degraded_joints(clean_joints: np.ndarray, plan: DegradationPlan, magnitudes=None) -> np.ndarray:
    m = _magnitudes(magnitudes)
    j = np.array(clean_joints, dtype=np.float64)
    ops = plan.ops
    if "proportional" in ops:
        j = op_proportional(j, ops["proportional"]["finger"], ops["proportional"]["factor"], m["proportional"])
    if "deformation" in ops:
        o = ops["deformation"]
        j = op_deformation(j, o["finger"], o["target"], o["twist"], m["deformation"])
    if "fusion" in ops:
        j = op_fusion(j, ops["fusion"]["pair"], ops["fusion"]["positions"], m["fusion"])
    if "missing" in ops:
        j = op_missing(j, ops["missing"]["finger"], ops["missing"]["jitter"])
    return j


def seam_weight(joints: np.ndarray, plan: DegradationPlan, magnitudes=None) -> np.ndarray:
    """Per-pixel seam blend weight: max over operators of tier strength x
    operator magnitude x soft mask of the edited region."""
    m = _magnitudes(magnitudes)
    w = np.zeros((RASTER_SIZE, RASTER_SIZE))
    strength = SEAM_STRENGTH[plan.severity]
    for op, o in plan.ops.items():
        if op == "missing":
            chains = [o["region"]]
        elif op == "redundancy":
            chains = [redundant_chain(joints, o["finger"], o["angle"])]
        elif op == "fusion":
            chains = [joints[list(FINGER_CHAINS[f])] for f in o["pair"]]
        else:
            chains = [joints[list(FINGER_CHAINS[o["finger"]])]]
        w = np.maximum(w, strength * m.get(op, 1.0) * region_mask(chains))
    return w


def render_degraded(joints: np.ndarray, plan: DegradationPlan, occluder: Occluder | None,
                    magnitudes=None) -> np.ndarray:
    """Float raster of a degraded skeleton (before quantization)."""
    extra = []
    if "redundancy" in plan.ops:
        o = plan.ops["redundancy"]
        extra.append(redundant_chain(joints, o["finger"], o["angle"]))
    img = render_hand(joints, extra_chains=extra, occluder=occluder)
    if plan.seam_noise is not None:
        img = blend_seam(img, seam_weight(joints, plan, magnitudes), plan.seam_noise)
    if plan.texture is not None:
        img = apply_texture(img, plan.texture)
    return img


def apply_plan(clean: HandRecord, plan: DegradationPlan, magnitudes=None) -> HandRecord:
    joints = degraded_joints(clean.keypoints.joints, plan, magnitudes)
    skeleton = clean.keypoints.with_joints(joints)
    raster = quantize(render_degraded(skeleton.joints, plan, clean.occluder, magnitudes))
    return HandRecord(skeleton, raster, "bad", clean.occluder)


def degrade(clean: HandRecord, severity: float, defects, rng) -> HandRecord:
    """Degrade a clean record with the requested operators at a severity tier."""
    if clean.label != "good":
        raise ForgeError("can only degrade a clean (good) record")
    return apply_plan(clean, plan_degradation(clean, severity, defects, rng))


# --- dataset ----------------------------------------------------------------

def sample_defects(rng, severity: float) -> tuple[str, ...]:
    counts, p_texture = TIER_POLICY[severity]
    k = int(rng.integers(counts[0], counts[1] + 1))
    texture = bool(rng.random() < p_texture)
    chosen = set(rng.choice(STRUCTURAL, size=k, replace=False).tolist()) if k else set()
    if texture:
        chosen.add("texture")
    return tuple(d for d in DEFECTS if d in chosen)


def expected_defect_frequencies(tier_probabilities=DEFAULT_TIER_PROBABILITIES) -> dict[str, float]:
    """Per-category frequency among degraded records implied by the tier policy."""
    structural = 0.0
    texture = 0.0
    for p, tier in zip(tier_probabilities, SEVERITIES):
        (lo, hi), p_tex = TIER_POLICY[tier]
        structural += p * (lo + hi) / 2
        texture += p * p_tex
    out = {d: structural / len(STRUCTURAL) for d in STRUCTURAL}
    out["texture"] = texture
    return out


def forge_pair(seed: int, index: int, config: ForgeConfig) -> PairedSample:
    rng = np.random.default_rng([seed, index])
    obj = bool(rng.random() < config.object_probability)
    clean = sample_clean_hand(rng, obj)
    severity = SEVERITIES[int(rng.choice(3, p=config.tier_probabilities))]
    defects = sample_defects(rng, severity)
    plan = plan_degradation(clean, severity, defects, rng)
    degraded = apply_plan(clean, plan)
    return PairedSample(f"p{index:06d}", clean, degraded, severity, defects, obj, plan)


def _forge_chunk(args):
    seed, indices, config = args
    return [forge_pair(seed, i, config) for i in indices]


def generate(config: ForgeConfig, seed: int) -> list[PairedSample]:
    if config.workers <= 1:
        return [forge_pair(seed, i, config) for i in range(config.n_pairs)]
    chunks = np.array_split(np.arange(config.n_pairs), config.workers * 4)
    with ProcessPoolExecutor(config.workers) as ex:
        parts = ex.map(_forge_chunk, [(seed, c.tolist(), config) for c in chunks if len(c)])
    return [s for part in parts for s in part]


@dataclass
class DatasetManifest:
    n_pairs: int
    good_count: int
    bad_count: int
    object_interaction_fraction: float
    defect_proportions: dict
    defect_targets: dict
    severity_counts: dict
    seed: int
    config: dict

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"


def make_manifest(samples, config: ForgeConfig, seed: int) -> DatasetManifest:
    n = len(samples)
    counts = {d: 0 for d in DEFECTS}
    sev = {str(s): 0 for s in SEVERITIES}
    for s in samples:
        for d in s.defects:
            counts[d] += 1
        sev[str(s.severity)] += 1
    cfg = asdict(config)
    cfg["tier_probabilities"] = list(config.tier_probabilities)
    cfg.pop("workers")
    return DatasetManifest(
        n_pairs=n,
        good_count=n,
        bad_count=n,
        object_interaction_fraction=sum(s.object_interaction for s in samples) / n,
        defect_proportions={d: c / n for d, c in counts.items()},
        defect_targets=expected_defect_frequencies(config.tier_probabilities),
        severity_counts=sev,
        seed=seed,
        config=cfg,
    )


def _record_line(sample: PairedSample, rec: HandRecord, raster_path: str) -> str:
    occ = None if rec.occluder is None else [rec.occluder.cx, rec.occluder.cy, rec.occluder.radius]
    return json.dumps({
        "id": f"{sample.id}-{rec.label}",
        "pair_id": sample.id,
        "label": rec.label,
        "keypoints": rec.keypoints.joints.tolist(),
        "handedness": rec.keypoints.handedness,
        "defects": list(sample.defects) if rec.label == "bad" else [],
        "severity": sample.severity,
        "object_interaction": sample.object_interaction,
        "occluder": occ,
        "raster": raster_path,
    })


def save_dataset(samples, manifest: DatasetManifest, out_dir) -> list[Path]:
    out = Path(out_dir)
    try:
        (out / "rasters").mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ForgeError(f"cannot write to {out}: {e}") from e
    lines = []
    written = []
    for s in samples:
        for rec in (s.clean, s.degraded):
            rel = f"rasters/{s.id}-{rec.label}.pgm"
            write_pgm(out / rel, rec.raster)
            written.append(out / rel)
            lines.append(_record_line(s, rec, rel))
    (out / "samples.jsonl").write_text("\n".join(lines) + "\n")
    (out / "manifest.json").write_text(manifest.to_json())
    return [out / "samples.jsonl", out / "manifest.json"] + written


def build_dataset(config: ForgeConfig, seed: int, out_dir=None):
    """Generate ``config.n_pairs`` pairs; persist them when ``out_dir`` is given."""
    samples = generate(config, seed)
    manifest = make_manifest(samples, config, seed)
    if out_dir is not None:
        save_dataset(samples, manifest, out_dir)
    return manifest, samples


def parse_record(line: str, base_dir, lineno: int = 0):
    """Parse one samples.jsonl line into (metadata dict, HandRecord)."""
    try:
        d = json.loads(line)
        occ = d.get("occluder")
        skeleton = HandSkeleton(np.array(d["keypoints"], dtype=np.float64), d.get("handedness", "right"))
        raster = read_pgm(Path(base_dir) / d["raster"])
        rec = HandRecord(skeleton, raster, d["label"], None if occ is None else Occluder(*occ))
    except (KeyError, TypeError, ValueError, OSError) as e:
        raise ForgeError(f"line {lineno}: malformed record: {e}") from e
    return d, rec


def load_dataset(out_dir) -> list[PairedSample]:
    """Read back a persisted dataset (plans are not persisted)."""
    base = Path(out_dir)
    pairs: dict[str, dict] = {}
    order = []
    with open(base / "samples.jsonl") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            d, rec = parse_record(line, base, lineno)
            if d["pair_id"] not in pairs:
                pairs[d["pair_id"]] = {"meta": d}
                order.append(d["pair_id"])
            pairs[d["pair_id"]][d["label"]] = rec
            if d["label"] == "bad":
                pairs[d["pair_id"]]["meta"] = d
    out = []
    for pid in order:
        p = pairs[pid]
        if "good" not in p or "bad" not in p:
            raise ForgeError(f"pair {pid} is incomplete")
        m = p["meta"]
        out.append(PairedSample(pid, p["good"], p["bad"], m["severity"], tuple(m["defects"]), m["object_interaction"]))
    return out


# --- statistics ---------------------------------------------------------------

ANGLE_BINS = np.linspace(0.0, 180.0, 13)


@dataclass
class StatisticsReport:
    n_pairs: int
    flexion_histograms: dict
    palm_histogram: list
    defect_proportions: dict
    object_interaction_fraction: float
    bin_edges: list = field(default_factory=lambda: ANGLE_BINS.tolist())

    def tables(self) -> dict[str, tuple[list[str], list[list]]]:
        """Machine-readable tables: name -> (header, rows)."""
        flex_header = ["bin_low", "bin_high"] + list(FINGERS)
        flex_rows = [
            [self.bin_edges[i], self.bin_edges[i + 1]] + [self.flexion_histograms[f][i] for f in FINGERS]
            for i in range(len(self.bin_edges) - 1)
        ]
        palm_rows = [[self.bin_edges[i], self.bin_edges[i + 1], c] for i, c in enumerate(self.palm_histogram)]
        defect_rows = [[d, self.defect_proportions[d]] for d in DEFECTS]
        return {
            "flexion_histogram": (flex_header, flex_rows),
            "palm_histogram": (["bin_low", "bin_high", "count"], palm_rows),
            "defect_proportions": (["defect", "proportion"], defect_rows),
        }

    def to_text(self) -> str:
        lines = [f"pairs: {self.n_pairs}", f"object interaction: {self.object_interaction_fraction:.6f}", ""]
        lines.append("flexion (PIP) histogram, clean hands")
        lines.append("bin        " + " ".join(f"{f:>7}" for f in FINGERS))
        for i in range(len(self.bin_edges) - 1):
            row = " ".join(f"{self.flexion_histograms[f][i]:>7d}" for f in FINGERS)
            lines.append(f"{self.bin_edges[i]:>4.0f}-{self.bin_edges[i + 1]:<4.0f} {row}")
        lines.append("")
        lines.append("palm orientation histogram")
        for i, c in enumerate(self.palm_histogram):
            lines.append(f"{self.bin_edges[i]:>4.0f}-{self.bin_edges[i + 1]:<4.0f} {c:>7d}")
        lines.append("")
        lines.append("defect proportions (multi-label, may sum above 1)")
        for d in DEFECTS:
            lines.append(f"{d:<13}{self.defect_proportions[d]:.6f}")
        return "\n".join(lines) + "\n"


def dataset_statistics(samples) -> StatisticsReport:
    """Flexion and palm-orientation histograms over the clean hands plus
    defect proportions over the degraded ones."""
    if not samples:
        raise ForgeError("statistics need a nonempty dataset")
    angles = {f: [] for f in FINGERS}
    palms = []
    counts = {d: 0 for d in DEFECTS}
    for s in samples:
        for f, a in pip_flexion_angles(s.clean.keypoints).items():
            angles[f].append(a)
        palms.append(palm_orientation(s.clean.keypoints))
        for d in s.defects:
            counts[d] += 1
    n = len(samples)
    hist = {f: np.histogram(angles[f], bins=ANGLE_BINS)[0].tolist() for f in FINGERS}
    return StatisticsReport(
        n_pairs=n,
        flexion_histograms=hist,
        palm_histogram=np.histogram(palms, bins=ANGLE_BINS)[0].tolist(),
        defect_proportions={d: counts[d] / n for d in DEFECTS},
        object_interaction_fraction=sum(s.object_interaction for s in samples) / n,
    )
