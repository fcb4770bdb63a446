"""Pure numpy versions of the compiled kernels in ``_kernels.pyx``.

Operation order mirrors the compiled loops so both backends produce
bit-identical results.
"""

import numpy as np


def render_segments(segments, radii, size):
    segments = np.ascontiguousarray(segments, dtype=np.float64)
    radii = np.ascontiguousarray(radii, dtype=np.float64)
    centers = np.arange(size, dtype=np.float64) + 0.5
    py = centers[:, None, None]
    px = centers[None, :, None]
    ax = segments[:, 0]
    ay = segments[:, 1]
    dx = segments[:, 2] - ax
    dy = segments[:, 3] - ay
    l2 = dx * dx + dy * dy
    safe = np.where(l2 > 0.0, l2, 1.0)
    t = ((px - ax) * dx + (py - ay) * dy) / safe
    t = np.where(l2 > 0.0, np.clip(t, 0.0, 1.0), 0.0)
    qx = ax + t * dx
    qy = ay + t * dy
    d = np.sqrt((px - qx) * (px - qx) + (py - qy) * (py - qy))
    cov = radii + 0.5 - d
    if len(segments) == 0:
        return np.zeros((size, size))
    best = np.maximum(cov.max(axis=2), 0.0)
    return np.minimum(best, 1.0)


def kendall_counts(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    iu = np.triu_indices(len(x), k=1)
    sx = (x[:, None] - x[None, :])[iu]
    sy = (y[:, None] - y[None, :])[iu]
    tx = int(np.count_nonzero(sx == 0.0))
    ty = int(np.count_nonzero(sy == 0.0))
    prod = np.sign(sx) * np.sign(sy)
    return int(np.count_nonzero(prod > 0)), int(np.count_nonzero(prod < 0)), tx, ty
