"""MOS revision and correlation metrics (PLCC / SRCC / KRCC) at image and
generator level."""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from . import kernels


class CorrelationError(ValueError):
    pass


class RatingsError(ValueError):
    pass


def revise_mos(ratings):
    """Single-pass 2-sigma outlier rejection.

    Uses the population standard deviation of the raw ratings; a rating is
    dropped when it lies strictly more than two sigma from the mean.

    Returns:
      (revised mean, kept ratings as a list)
    """
    r = np.asarray(ratings, dtype=np.float64)
    if r.size < 2:
        raise RatingsError("need at least two ratings")
    mu = r.mean()
    sigma = r.std()
    kept = r if sigma == 0 else r[np.abs(r - mu) <= 2 * sigma]
    if kept.size == 0:
        raise RatingsError("every rating was rejected")
    return float(kept.mean()), kept.tolist()


def _check_pair(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise CorrelationError("inputs must be 1-D and of equal length")
    if x.size < 2:
        raise CorrelationError("need at least two observations")
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise CorrelationError("correlation undefined for a constant input")
    return x, y


def average_ranks(x) -> np.ndarray:
    """1-based ranks; tied values share the mean of their positions."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    ranks = np.empty(len(x))
    i = 0
    n = len(x)
    while i < n:
        j = i
        while j + 1 < n and xs[j + 1] == xs[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2 + 1
        i = j + 1
    return ranks


def plcc(x, y) -> float:
    x, y = _check_pair(x, y)
    dx = x - x.mean()
    dy = y - y.mean()
    r = float(np.dot(dx, dy) / math.sqrt(np.dot(dx, dx) * np.dot(dy, dy)))
    return max(-1.0, min(1.0, r))


def srcc(x, y) -> float:
    x, y = _check_pair(x, y)
    return plcc(average_ranks(x), average_ranks(y))


def krcc(x, y) -> float:
    """Kendall tau-b."""
    x, y = _check_pair(x, y)
    conc, disc, tx, ty = kernels.kendall_counts(np.ascontiguousarray(x), np.ascontiguousarray(y))
    n0 = len(x) * (len(x) - 1) // 2
    return (conc - disc) / math.sqrt((n0 - tx) * (n0 - ty))


@dataclass
class RatingSheet:
    image_id: str
    generator_id: str
    raw_ratings: list
    revised_mos: float = field(init=False)
    kept_count: int = field(init=False)

    def __post_init__(self):
        if not self.raw_ratings:
            raise RatingsError(f"{self.image_id}: no ratings")
        if len(self.raw_ratings) == 1:
            self.revised_mos = float(self.raw_ratings[0])
            self.kept_count = 1
        else:
            self.revised_mos, kept = revise_mos(self.raw_ratings)
            self.kept_count = len(kept)


@dataclass
class CorrelationReport:
    plcc: float
    srcc: float
    krcc: float
    level: str
    n: int


def evaluate(predictions: dict, sheets, level: str = "image") -> CorrelationReport:
    """Correlate predicted scores with revised MOS.

    At ``model`` level both quantities are first averaged within each
    generator, then the group means are correlated.
    """
    if level not in ("image", "model"):
        raise CorrelationError(f"level must be image or model, not {level!r}")
    by_id = {s.image_id: s for s in sheets}
    missing = sorted(set(predictions) - set(by_id))
    if missing:
        raise CorrelationError(f"no rating sheet for: {', '.join(missing[:5])}")
    ids = sorted(predictions)
    if level == "image":
        x = [predictions[i] for i in ids]
        y = [by_id[i].revised_mos for i in ids]
    else:
        groups = defaultdict(list)
        for i in ids:
            groups[by_id[i].generator_id].append(i)
        if len(groups) < 2:
            raise CorrelationError("model-level evaluation needs at least two generators")
        gids = sorted(groups)
        x = [math.fsum(predictions[i] for i in groups[g]) / len(groups[g]) for g in gids]
        y = [math.fsum(by_id[i].revised_mos for i in groups[g]) / len(groups[g]) for g in gids]
    return CorrelationReport(plcc(x, y), srcc(x, y), krcc(x, y), level, len(x))


def read_ratings_csv(path) -> list[RatingSheet]:
    """Rows: image id, generator id, then one column per rater (blank = missing)."""
    sheets = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        for lineno, row in enumerate(reader, 1):
            if not row or all(not c.strip() for c in row):
                continue
            if lineno == 1 and row[0].strip().lower() in ("image_id", "image", "id"):
                continue
            if len(row) < 3:
                raise RatingsError(f"{path}:{lineno}: expected image id, generator id and ratings")
            ratings = []
            for col, cell in enumerate(row[2:], 3):
                cell = cell.strip()
                if not cell:
                    continue
                try:
                    ratings.append(float(cell))
                except ValueError:
                    raise RatingsError(f"{path}:{lineno}: column {col}: not a number: {cell!r}") from None
            if not ratings:
                raise RatingsError(f"{path}:{lineno}: no ratings")
            sheets.append(RatingSheet(row[0].strip(), row[1].strip(), ratings))
    return sheets
