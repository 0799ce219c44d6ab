"""Confounder detection metrics.

* Confounder Sensitivity (CS): fraction of the confounded pixels that are
  among the top attributed pixels of an explanation, averaged over images
  whose prediction flips when the confounder is added.
* Explanation NCC: normalised cross correlation between the explanations of
  the same image with and without the confounder.
* ROC AUC and Pearson correlation for the performance and trend summaries.
"""
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import List

import numpy as np
from scipy import stats

from .errors import MetricError, ParameterError, ShapeError

log = logging.getLogger(__name__)


class RankMode(Enum):
    ABSOLUTE = 'absolute'
    SIGNED = 'signed'


@dataclass
class MetricConfig:
    topFrac: float = 0.10
    maxSamples: int = 100
    rankMode: RankMode = RankMode.ABSOLUTE
    decisionThreshold: float = 0.5

    def __post_init__(self):
        if not isinstance(self.rankMode, RankMode):
            self.rankMode = RankMode(self.rankMode)
        if not 0.0 < self.topFrac < 1.0:
            raise ParameterError('top_frac must lie in (0, 1).')
        if self.maxSamples < 1:
            raise ParameterError('max_samples must be >= 1.')
        if not 0.0 < self.decisionThreshold < 1.0:
            raise ParameterError('decision_threshold must lie in (0, 1).')


@dataclass
class FlipPair:
    index: int
    confoundedImage: np.ndarray
    cleanImage: np.ndarray
    mask: np.ndarray


@dataclass
class FlipPool:
    pairs: List[FlipPair]
    truncatedTo: int
    fallbackUsed: bool
    nFlips: int = 0

    def __len__(self):
        return len(self.pairs)


@dataclass
class MetricResult:
    value: float
    nEvaluated: int
    perImageValues: List[float] = field(default_factory=list)
    fallbackUsed: bool = False
    nExcluded: int = 0
    nDegenerate: int = 0

    @property
    def defined(self):
        return self.nEvaluated > 0


def meanResult(values, **kwargs):
    value = float(np.mean(values)) if values else float('nan')
    return MetricResult(value, len(values), list(values), **kwargs)


def buildFlipPool(model, test, cfg, counterpart=None):
    """Collect (confounded, clean) test positives whose predicted class flips.

    `counterpart(example)` returns (confounded image, mask) for positives that
    carry no confounder; without it those positives are skipped. When no pair
    flips, the first `maxSamples` candidates are returned with `fallbackUsed`.
    """
    candidates = []
    for e in test:
        if e.label != 1:
            continue
        if e.confounded:
            image, mask = e.image, e.mask
        elif counterpart is not None:
            image, mask = counterpart(e)
        else:
            continue
        candidates.append(FlipPair(e.index, image, e.cleanImage, mask))

    flips = []
    if candidates:
        confounded = model.predictProb(np.stack([c.confoundedImage for c in candidates]))
        clean = model.predictProb(np.stack([c.cleanImage for c in candidates]))
        threshold = cfg.decisionThreshold
        flipped = (np.asarray(confounded) > threshold) != (np.asarray(clean) > threshold)
        flips = [c for c, f in zip(candidates, flipped) if f]

    pairs = flips[:cfg.maxSamples]
    fallback = not pairs
    if fallback:
        pairs = candidates[:cfg.maxSamples]
        log.warning(
            'No prediction flips among %d candidates; using fallback pool of %d.',
            len(candidates), len(pairs))
    return FlipPool(pairs, len(pairs), fallback, len(flips))


def topK(topFrac, n):
    return min(n, max(1, int(math.ceil(round(topFrac * n, 9)))))


def rankScores(values, rankMode):
    values = np.asarray(values, dtype=float)
    return np.abs(values) if rankMode is RankMode.ABSOLUTE else values


def confounderSensitivity(maps, masks, cfg, fallbackUsed=False):
    """Mean over images of |top-k attributed pixels within the mask| / |mask|."""
    values = []
    excluded = 0
    for attribution, mask in zip(maps, masks):
        scores = rankScores(getattr(attribution, 'values', attribution), cfg.rankMode)
        mask = np.asarray(mask, dtype=bool)
        if scores.shape != mask.shape:
            raise ShapeError('Map shape %s differs from mask shape %s.' % (
                scores.shape, mask.shape))
        size = int(mask.sum())
        if size == 0:
            excluded += 1
            continue
        k = topK(cfg.topFrac, scores.size)
        # stable sort: ties resolved by ascending row-major index
        top = np.argsort(-scores.ravel(), kind='stable')[:k]
        values.append(float(mask.ravel()[top].sum()) / size)
    if excluded:
        log.warning('%d images with empty confounder masks excluded from CS.', excluded)
    return meanResult(values, fallbackUsed=fallbackUsed, nExcluded=excluded)


def ncc(a, b):
    """Zero-normalised cross correlation; None when either map is constant."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ShapeError('NCC needs equal shapes, got %s and %s.' % (a.shape, b.shape))
    sa, sb = a.std(), b.std()
    if sa == 0 or sb == 0:
        return None
    value = np.mean(((a - a.mean()) / sa) * ((b - b.mean()) / sb))
    return float(np.clip(value, -1.0, 1.0))


def explanationNcc(pairs, fallbackUsed=False):
    """Mean NCC over (map with confounder, map without confounder) pairs."""
    values = []
    degenerate = 0
    for confounded, clean in pairs:
        value = ncc(getattr(confounded, 'values', confounded), getattr(clean, 'values', clean))
        if value is None:
            degenerate += 1
            value = 0.0
        values.append(value)
    if degenerate:
        log.warning('%d constant explanation pairs scored NCC 0.', degenerate)
    return meanResult(values, fallbackUsed=fallbackUsed, nDegenerate=degenerate)


def rocAuc(scores, labels):
    """Exact ROC AUC via the Mann-Whitney rank statistic (ties count one half)."""
    scores = np.asarray(scores, dtype=float).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ShapeError('Scores and labels differ in length.')
    if not np.all(np.isin(labels, (0, 1))):
        raise MetricError('Labels must be 0 or 1.')
    positive = labels == 1
    nPos = int(positive.sum())
    nNeg = len(labels) - nPos
    if nPos == 0 or nNeg == 0:
        raise MetricError('ROC AUC needs both classes.')
    ranks = stats.rankdata(scores)
    return float((ranks[positive].sum() - nPos * (nPos + 1) / 2.0) / (nPos * nNeg))


def pearson(xs, ys):
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    if xs.shape != ys.shape or xs.ndim != 1:
        raise ShapeError('Pearson needs two equally long sequences.')
    if len(xs) < 2:
        raise MetricError('Pearson needs at least two points.')
    if np.std(xs) == 0 or np.std(ys) == 0:
        raise MetricError('Pearson is undefined for zero variance.')
    return float(np.clip(stats.pearsonr(xs, ys)[0], -1.0, 1.0))


def optionalPearson(xs, ys):
    """Pearson r, or NaN when undefined."""
    try:
        return pearson(xs, ys)
    except MetricError:
        return float('nan')
