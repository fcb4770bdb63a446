"""Skeleton rasterisation, occluders, raster-level texture damage and
graymap I/O."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from . import kernels
from .geometry import TOPOLOGY

RASTER_SIZE = 64
BONE_RADIUS = 1.3
PALM_RADIUS = 1.6
JOINT_RADIUS = 1.8
# soft footprint around a regenerated finger
SEAM_RADIUS = 6.0
OCCLUDER_LEVEL = 0.5
# palm outline, drawn in addition to the bone tree
PALM_EDGES = ((5, 9), (9, 13), (13, 17))


@dataclass(frozen=True)
class Occluder:
    """Disk standing in for a held object; coordinates in raster pixels."""

    cx: float
    cy: float
    radius: float


@dataclass(frozen=True)
class TextureParams:
    blur_sigma: float
    band_amplitude: float
    band_period: float
    band_phase: float
    speckle_mask: np.ndarray
    speckle_values: np.ndarray


def skeleton_segments(joints: np.ndarray, size: int = RASTER_SIZE):
    """Segments (pixel coordinates) and radii for bones, palm and joints."""
    p = np.asarray(joints)[:, :2] * size
    segs, radii = [], []
    for a, b in TOPOLOGY.edges:
        segs.append((p[a, 0], p[a, 1], p[b, 0], p[b, 1]))
        radii.append(BONE_RADIUS)
    for a, b in PALM_EDGES:
        segs.append((p[a, 0], p[a, 1], p[b, 0], p[b, 1]))
        radii.append(PALM_RADIUS)
    for k in range(len(p)):
        segs.append((p[k, 0], p[k, 1], p[k, 0], p[k, 1]))
        radii.append(JOINT_RADIUS)
    return np.array(segs, dtype=np.float64), np.array(radii, dtype=np.float64)


def chain_segments(points: np.ndarray, size: int = RASTER_SIZE):
    """Segments for an extra open chain of normalized 2D/3D points."""
    p = np.asarray(points)[:, :2] * size
    segs = [(p[i, 0], p[i, 1], p[i + 1, 0], p[i + 1, 1]) for i in range(len(p) - 1)]
    segs += [(q[0], q[1], q[0], q[1]) for q in p[1:]]
    radii = [BONE_RADIUS] * (len(p) - 1) + [JOINT_RADIUS] * (len(p) - 1)
    return np.array(segs, dtype=np.float64), np.array(radii, dtype=np.float64)


def render_hand(joints, extra_chains=(), occluder: Occluder | None = None, size: int = RASTER_SIZE) -> np.ndarray:
    """Float raster in [0, 1]: white bones on black, optional gray occluder."""
    segs, radii = skeleton_segments(joints, size)
    for chain in extra_chains:
        s, r = chain_segments(chain, size)
        segs = np.concatenate([segs, s])
        radii = np.concatenate([radii, r])
    img = kernels.render_segments(segs, radii, size)
    if occluder is not None:
        disk = kernels.render_segments(
            np.array([[occluder.cx, occluder.cy, occluder.cx, occluder.cy]]),
            np.array([occluder.radius]),
            size,
        )
        img = img * (1.0 - disk) + OCCLUDER_LEVEL * disk
    return img


def region_mask(chains, radius: float = SEAM_RADIUS, size: int = RASTER_SIZE) -> np.ndarray:
    """Soft [0, 1] mask covering open chains of normalized points."""
    if not chains:
        return np.zeros((size, size))
    segs = []
    for chain in chains:
        p = np.asarray(chain)[:, :2] * size
        segs += [(p[i, 0], p[i, 1], p[i + 1, 0], p[i + 1, 1]) for i in range(len(p) - 1)]
        segs += [(q[0], q[1], q[0], q[1]) for q in p]
    return kernels.render_segments(np.array(segs, dtype=np.float64), np.full(len(segs), radius), size)


def blend_seam(img: np.ndarray, weight: np.ndarray, noise: np.ndarray) -> np.ndarray:
    """Pull pixels toward a noise field where ``weight`` (in [0, 1]) is set.

    Stands in for the mottled patch a generator leaves where it redrew part
    of the hand; continuous in ``weight``.
    """
    return img * (1.0 - weight) + weight * noise


def apply_texture(img: np.ndarray, tex: TextureParams) -> np.ndarray:
    out = gaussian_filter(img, tex.blur_sigma, mode="constant", cval=0.0)
    rows = np.arange(img.shape[0], dtype=np.float64)[:, None]
    out = out + tex.band_amplitude * np.sin(2 * np.pi * rows / tex.band_period + tex.band_phase)
    out = np.where(tex.speckle_mask, tex.speckle_values, out)
    return np.clip(out, 0.0, 1.0)


def quantize(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_pgm(path, raster: np.ndarray) -> None:
    raster = np.asarray(raster, dtype=np.uint8)
    h, w = raster.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + raster.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    # header: magic, width, height, maxval separated by whitespace (comments allowed)
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while data[pos:pos + 1] not in (b"\n", b""):
                pos += 1
            continue
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    pos += 1
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary graymap (magic {tokens[0]!r})")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise ValueError(f"{path}: unsupported max value {maxval}")
    body = data[pos:pos + w * h]
    if len(body) != w * h:
        raise ValueError(f"{path}: truncated raster ({len(body)} of {w * h} bytes)")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w).copy()
