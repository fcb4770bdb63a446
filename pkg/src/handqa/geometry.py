"""21-joint hand skeleton, bone topology and the geometric measurements
used by the forge, the dataset statistics and the model input pipeline.

Joint order follows the usual landmark convention::

    0 wrist
    1-4   thumb  (CMC, MCP, IP, TIP)
    5-8   index  (MCP, PIP, DIP, TIP)
    9-12  middle
    13-16 ring
    17-20 pinky
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

NUM_JOINTS = 21
FINGERS = ("thumb", "index", "middle", "ring", "pinky")
FINGER_CHAINS = {
    "thumb": (1, 2, 3, 4),
    "index": (5, 6, 7, 8),
    "middle": (9, 10, 11, 12),
    "ring": (13, 14, 15, 16),
    "pinky": (17, 18, 19, 20),
}
# adjacent pairs used by the fusion operator
ADJACENT_FINGERS = (("index", "middle"), ("middle", "ring"), ("ring", "pinky"))

# bones shorter than this are degenerate
MIN_BONE = 1e-9
COORD_LOW, COORD_HIGH = -0.5, 1.5
MIN_CROP_SIDE = 80


class GeometryError(ValueError):
    """Raised for malformed skeletons or degenerate geometry."""


class UndefinedAngleError(GeometryError):
    def __init__(self, finger: str):
        super().__init__(f"flexion angle undefined for {finger}: zero-length bone")
        self.finger = finger


class DegenerateNormalError(GeometryError):
    pass


@dataclass(frozen=True)
class HandTopology:
    """Bone tree over the 21 joints, rooted at the wrist."""

    edges: tuple[tuple[int, int], ...]
    finger_chains: dict[str, tuple[int, ...]] = field(default_factory=lambda: dict(FINGER_CHAINS))

    def adjacency(self) -> np.ndarray:
        a = np.zeros((NUM_JOINTS, NUM_JOINTS))
        for p, c in self.edges:
            a[p, c] = a[c, p] = 1.0
        return a

    def normalized_adjacency(self) -> np.ndarray:
        """Symmetric D^-1/2 (A + I) D^-1/2 with self loops."""
        a = self.adjacency() + np.eye(NUM_JOINTS)
        d = 1.0 / np.sqrt(a.sum(axis=1))
        return a * d[:, None] * d[None, :]


def _default_edges() -> tuple[tuple[int, int], ...]:
    edges = []
    for chain in FINGER_CHAINS.values():
        prev = 0
        for j in chain:
            edges.append((prev, j))
            prev = j
    return tuple(edges)


TOPOLOGY = HandTopology(edges=_default_edges())


@dataclass(frozen=True)
class HandSkeleton:
    joints: np.ndarray
    handedness: str = "right"

    def __post_init__(self):
        j = np.array(self.joints, dtype=np.float64)
        if j.shape != (NUM_JOINTS, 3):
            raise GeometryError(f"expected joints of shape (21, 3), got {j.shape}")
        if not np.all(np.isfinite(j)):
            raise GeometryError("joint coordinates must be finite")
        xy = j[:, :2]
        if xy.min() < COORD_LOW or xy.max() > COORD_HIGH:
            raise GeometryError(f"x/y outside [{COORD_LOW}, {COORD_HIGH}]")
        if self.handedness not in ("left", "right"):
            raise GeometryError(f"handedness must be 'left' or 'right', not {self.handedness!r}")
        j.setflags(write=False)
        object.__setattr__(self, "joints", j)

    def with_joints(self, joints: np.ndarray) -> HandSkeleton:
        return HandSkeleton(joints, self.handedness)


def _angle_deg(u: np.ndarray, v: np.ndarray) -> float:
    c = float(np.dot(u, v) / (np.linalg.norm(u) * np.linalg.norm(v)))
    return math.degrees(math.acos(min(1.0, max(-1.0, c))))


def pip_flexion_angles(skeleton: HandSkeleton, topology: HandTopology = TOPOLOGY) -> dict[str, float]:
    """Angle at the PIP joint of each finger, in degrees (180 = straight).

    The thumb has no PIP; its interphalangeal joint (index 3) stands in.
    """
    j = skeleton.joints
    out = {}
    for finger in FINGERS:
        chain = topology.finger_chains[finger]
        # middle joint of the last three in the chain: PIP for fingers, IP for thumb
        if finger == "thumb":
            a, b, c = chain[1], chain[2], chain[3]
        else:
            a, b, c = chain[0], chain[1], chain[2]
        u = j[a] - j[b]
        v = j[c] - j[b]
        if np.linalg.norm(u) < MIN_BONE or np.linalg.norm(v) < MIN_BONE:
            raise UndefinedAngleError(finger)
        out[finger] = _angle_deg(u, v)
    return out


def palm_normal(skeleton: HandSkeleton) -> np.ndarray:
    j = skeleton.joints
    return np.cross(j[5] - j[0], j[17] - j[0])


def palm_orientation(skeleton: HandSkeleton) -> float:
    """Angle between the palm normal and the camera axis (0, 0, 1), degrees."""
    n = palm_normal(skeleton)
    norm = np.linalg.norm(n)
    if norm < MIN_BONE * MIN_BONE:
        raise DegenerateNormalError("wrist, index MCP and pinky MCP are collinear")
    return math.degrees(math.acos(min(1.0, max(-1.0, float(n[2] / norm)))))


@dataclass(frozen=True)
class BBox:
    x0: int
    y0: int
    x1: int
    y1: int
    width: int
    height: int

    def __post_init__(self):
        if not (0 <= self.x0 < self.x1 <= self.width and 0 <= self.y0 < self.y1 <= self.height):
            raise GeometryError(f"invalid box {self}")

    @property
    def w(self) -> int:
        return self.x1 - self.x0

    @property
    def h(self) -> int:
        return self.y1 - self.y0


def expand_and_clamp_bbox(box: BBox, factor: float = 1.2) -> BBox:
    """Scale a box about its center by ``factor`` and clamp it to the frame."""
    if factor < 1:
        raise GeometryError("expansion factor must be >= 1")
    cx = (box.x0 + box.x1) / 2
    cy = (box.y0 + box.y1) / 2
    hw = box.w * factor / 2
    hh = box.h * factor / 2
    x0 = max(0, round(cx - hw))
    y0 = max(0, round(cy - hh))
    x1 = min(box.width, round(cx + hw))
    y1 = min(box.height, round(cy + hh))
    return BBox(x0, y0, x1, y1, box.width, box.height)


def passes_size_filter(box: BBox, min_side: int = MIN_CROP_SIDE) -> bool:
    return box.w >= min_side and box.h >= min_side
