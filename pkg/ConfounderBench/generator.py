#!/usr/bin/env python3
"""Module for generating confounded synthetic chest-film datasets.

Every sample is a grayscale square grid with values in [0, 1]: a dark
background, a brighter thorax ellipse, the brightest heart ellipse, faint
horizontal rib bands and additive Gaussian noise. The label is 1 when the
heart is wide relative to the thorax (a cardiomegaly analogue).

A fraction p of the positive samples of every split additionally carries one
of three confounders: a hospital tag in the lower left corner, vertical
hyperintense lines, or an oblique occlusion of the lower image part.
"""
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional, Tuple

import numpy as np

from .errors import DatasetError, ParameterError, ShapeError

log = logging.getLogger(__name__)

BACKGROUND = 0.1
THORAX = 0.35
HEART = 0.6
RIB_PERIOD = 8.0

RATIO_RANGE = (0.42, 0.58)
LABEL_THRESHOLD = 0.5

SPLITS = ('train', 'val', 'test')
SPLIT_CODES = {'train': 0, 'val': 1, 'test': 2}

SCENE_STREAM = 0
CONFOUNDER_STREAM = 1


class Confounder(Enum):
    """The three studied confounder types, valued by their CLI name."""

    TAG = 'tag'
    HYPERINTENSITY = 'lines'
    OBSTRUCTION = 'obstruction'


class Distribution:
    """Uniform distribution settings used to sample scene geometry."""
    def __init__(self, low, high):
        if high < low:
            raise ParameterError('Distribution bounds are reversed: %g > %g' % (low, high))
        self.low = low
        self.high = high

    def sample(self, rng):
        return float(rng.uniform(self.low, self.high))


@dataclass
class SceneParams:
    thoraxHalfwidth: float
    heartHalfwidth: float
    heartCenter: Tuple[float, float]
    noiseSigma: float = 0.03
    ribAmplitude: float = 0.04

    @property
    def ratio(self):
        return self.heartHalfwidth / self.thoraxHalfwidth

    @property
    def label(self):
        return int(self.ratio > LABEL_THRESHOLD)

    def validate(self):
        if self.thoraxHalfwidth <= 0 or self.heartHalfwidth <= 0:
            raise ParameterError('Half widths must be positive.')
        if self.heartHalfwidth >= self.thoraxHalfwidth:
            raise ParameterError('Heart must be narrower than the thorax.')
        if not RATIO_RANGE[0] - 1e-12 <= self.ratio <= RATIO_RANGE[1] + 1e-12:
            raise ParameterError(
                'Heart/thorax ratio %.4f outside [%.2f, %.2f].' %
                (self.ratio, RATIO_RANGE[0], RATIO_RANGE[1]))
        if self.noiseSigma < 0 or self.ribAmplitude < 0:
            raise ParameterError('Noise sigma and rib amplitude must be non-negative.')


class ScenePrior:
    """Prior over SceneParams, scaled to the image size."""
    def __init__(
            self,
            size=64,
            thoraxHalfwidth=None,
            ratio=None,
            heartRow=None,
            heartCol=None,
            noiseSigma=0.03,
            ribAmplitude=0.04):
        scale = size / 64.0
        self.size = size
        self.thoraxHalfwidth = thoraxHalfwidth or Distribution(22 * scale, 26 * scale)
        self.ratio = ratio or Distribution(*RATIO_RANGE)
        self.heartRow = heartRow or Distribution(34 * scale, 40 * scale)
        self.heartCol = heartCol or Distribution(28 * scale, 34 * scale)
        self.noiseSigma = noiseSigma
        self.ribAmplitude = ribAmplitude

    def sample(self, rng):
        thorax = self.thoraxHalfwidth.sample(rng)
        ratio = self.ratio.sample(rng)
        center = (self.heartRow.sample(rng), self.heartCol.sample(rng))
        return SceneParams(
            thoraxHalfwidth=thorax,
            heartHalfwidth=ratio * thorax,
            heartCenter=center,
            noiseSigma=self.noiseSigma,
            ribAmplitude=self.ribAmplitude)


def renderScene(params, rng, size=64):
    """Render one scene and return (image, label)."""
    params.validate()
    rows, cols = np.mgrid[0:size, 0:size].astype(float)
    centre = size / 2.0

    thoraxHalfheight = 0.4 * size
    thorax = ((rows - centre) / thoraxHalfheight) ** 2 + \
        ((cols - centre) / params.thoraxHalfwidth) ** 2 <= 1.0

    heartRow, heartCol = params.heartCenter
    heartHalfheight = 0.8 * params.heartHalfwidth
    heart = ((rows - heartRow) / heartHalfheight) ** 2 + \
        ((cols - heartCol) / params.heartHalfwidth) ** 2 <= 1.0

    image = np.full((size, size), BACKGROUND)
    ribs = params.ribAmplitude * np.sin(2.0 * np.pi * rows / RIB_PERIOD)
    image[thorax] = THORAX + ribs[thorax]
    image[heart] = HEART

    if params.noiseSigma > 0:
        image += rng.normal(0.0, params.noiseSigma, image.shape)
    np.clip(image, 0.0, 1.0, out=image)
    return image, params.label


@dataclass
class ConfounderKind:
    """A confounder type together with its geometry."""

    kind: Confounder = Confounder.TAG

    tagOffset: int = 4
    tagSize: int = 8
    tagIntensity: float = 1.0
    tagCheck: int = 2

    lineCount: int = 3
    lineWidth: int = 1
    lineBoost: float = 0.5
    lineMargin: int = 4

    # None selects integer rows in the lower third of the image.
    interceptRange: Optional[Tuple[int, int]] = None
    slopeRange: Tuple[float, float] = (-0.3, 0.3)
    occlusionIntensity: float = 0.05

    def __post_init__(self):
        if not isinstance(self.kind, Confounder):
            self.kind = Confounder(self.kind)

    @property
    def name(self):
        return self.kind.value

    def interceptBounds(self, size):
        if self.interceptRange is not None:
            return self.interceptRange
        return (int(math.ceil(2.0 * size / 3.0)), size - 8)

    def lineSlots(self, size):
        return np.arange(
            self.lineMargin,
            size - self.lineMargin - self.lineWidth + 1,
            self.lineWidth)

    def validate(self, size):
        if self.kind is Confounder.TAG:
            if self.tagSize < 1 or self.tagOffset < 0 or \
                    self.tagOffset + self.tagSize > size:
                raise ParameterError('Tag does not fit inside a %d px image.' % size)
        elif self.kind is Confounder.HYPERINTENSITY:
            if self.lineCount < 1 or self.lineWidth < 1:
                raise ParameterError('Need at least one line of width >= 1.')
            if self.lineCount > len(self.lineSlots(size)):
                raise ParameterError('Too many lines for a %d px image.' % size)
        else:
            low, high = self.interceptBounds(size)
            if not 0 <= low <= high < size:
                raise ParameterError('Obstruction intercept rows must lie inside the image.')
            if self.slopeRange[0] > self.slopeRange[1]:
                raise ParameterError('Obstruction slope range is reversed.')
            if not 0.0 <= self.occlusionIntensity <= 1.0:
                raise ParameterError('Occlusion intensity must lie in [0, 1].')


def checkImage(image):
    if image.ndim != 2 or image.shape[0] != image.shape[1]:
        raise ShapeError('Expected a square 2-d image, got shape %s.' % (image.shape,))
    if np.any(image < 0.0) or np.any(image > 1.0) or not np.all(np.isfinite(image)):
        raise ParameterError('Image values must lie in [0, 1].')


def injectConfounder(image, kind, rng):
    """Return (confounded image, footprint mask) for one confounder."""
    checkImage(image)
    size = image.shape[0]
    kind.validate(size)
    out = image.copy()
    mask = np.zeros(image.shape, dtype=bool)

    if kind.kind is Confounder.TAG:
        top = size - kind.tagOffset - kind.tagSize
        left = kind.tagOffset
        block = (slice(top, top + kind.tagSize), slice(left, left + kind.tagSize))
        i, j = np.mgrid[0:kind.tagSize, 0:kind.tagSize]
        checks = ((i // kind.tagCheck + j // kind.tagCheck) % 2) == 0
        mask[block] = True
        out[block] = np.where(checks, kind.tagIntensity, 0.6 * kind.tagIntensity)

    elif kind.kind is Confounder.HYPERINTENSITY:
        slots = kind.lineSlots(size)
        starts = np.sort(rng.choice(slots, size=kind.lineCount, replace=False))
        for start in starts:
            mask[:, start:start + kind.lineWidth] = True
        out[mask] = np.clip(out[mask] + kind.lineBoost, 0.0, 1.0)

    else:
        low, high = kind.interceptBounds(size)
        intercept = int(rng.integers(low, high + 1))
        slope = float(rng.uniform(*kind.slopeRange))
        rows, cols = np.mgrid[0:size, 0:size].astype(float)
        line = intercept + slope * (cols - (size - 1) / 2.0)
        mask = rows >= line
        out[mask] = kind.occlusionIntensity

    if not mask.any():
        raise ParameterError('Confounder footprint is empty.')
    return out, mask


@dataclass
class Example:
    cleanImage: np.ndarray
    image: np.ndarray
    label: int
    mask: Optional[np.ndarray] = None
    split: str = 'test'
    index: int = 0

    @property
    def confounded(self):
        return self.mask is not None


@dataclass
class DatasetSpec:
    nTrain: int = 1200
    nVal: int = 150
    nTest: int = 150
    imageSize: int = 64
    p: int = 0
    confounder: ConfounderKind = field(default_factory=ConfounderKind)
    seed: int = 0
    prior: Optional[ScenePrior] = None

    def __post_init__(self):
        if min(self.nTrain, self.nVal, self.nTest) < 1:
            raise ParameterError('Split sizes must be positive.')
        if self.imageSize < 10:
            raise ParameterError('Image size must be at least 10 px.')
        if int(self.p) != self.p or not 0 <= self.p <= 100:
            raise ParameterError('Contamination p must be an integer in [0, 100].')
        if self.seed < 0:
            raise ParameterError('Seed must be non-negative.')
        if isinstance(self.confounder, (str, Confounder)):
            self.confounder = ConfounderKind(Confounder(self.confounder))
        self.confounder.validate(self.imageSize)
        if self.prior is None:
            self.prior = ScenePrior(self.imageSize)

    def splitSize(self, split):
        return {'train': self.nTrain, 'val': self.nVal, 'test': self.nTest}[split]


def exampleStream(seed, split, index, purpose):
    """Random stream of one example, independent of generation order."""
    return np.random.default_rng([seed, SPLIT_CODES[split], index, purpose])


def contaminationCount(p, positives):
    # half-up rounding of p% of the positives
    return int(math.floor(p * positives / 100.0 + 0.5))


def confoundedCounterpart(example, spec):
    """Return (confounded image, mask) for an example, injecting on demand.

    Unconfounded examples receive the confounder drawn from the same stream
    the generator would have used for them.
    """
    if example.confounded:
        return example.image, example.mask
    rng = exampleStream(spec.seed, example.split, example.index, CONFOUNDER_STREAM)
    return injectConfounder(example.cleanImage, spec.confounder, rng)


@dataclass
class SplitDataset:
    train: List[Example]
    val: List[Example]
    test: List[Example]
    cleanTest: List[Example]
    spec: Optional[DatasetSpec] = None

    def split(self, name):
        return {'train': self.train, 'val': self.val, 'test': self.test,
                'clean_test': self.cleanTest}[name]

    def counterpart(self, example):
        if self.spec is None:
            if example.confounded:
                return example.image, example.mask
            raise DatasetError('Dataset has no spec; cannot inject confounders on demand.')
        return confoundedCounterpart(example, self.spec)

    def meanImage(self):
        return np.mean([e.image for e in self.train], axis=0)


def cleanCounterparts(examples):
    return [Example(
        cleanImage=e.cleanImage,
        image=e.cleanImage,
        label=e.label,
        mask=None,
        split=e.split,
        index=e.index) for e in examples]


class Generator:
    """Builds a SplitDataset from a DatasetSpec."""
    def __init__(self, spec):
        self.spec = spec
        splits = {name: self.generateSplit(name) for name in SPLITS}
        self.dataset = SplitDataset(
            train=splits['train'],
            val=splits['val'],
            test=splits['test'],
            cleanTest=cleanCounterparts(splits['test']),
            spec=spec)

    def generateSplit(self, split):
        spec = self.spec
        examples = []
        for index in range(spec.splitSize(split)):
            rng = exampleStream(spec.seed, split, index, SCENE_STREAM)
            params = spec.prior.sample(rng)
            image, label = renderScene(params, rng, spec.imageSize)
            examples.append(Example(
                cleanImage=image, image=image, label=label, split=split, index=index))

        positives = [e.index for e in examples if e.label == 1]
        if spec.p > 0 and not positives:
            raise DatasetError('Split %s has no positive examples at p=%d.' % (split, spec.p))

        count = contaminationCount(spec.p, len(positives))
        chosen = []
        if count > 0:
            rng = np.random.default_rng([spec.seed, SPLIT_CODES[split]])
            chosen = sorted(rng.choice(positives, size=count, replace=False).tolist())
        for index in chosen:
            example = examples[index]
            example.image, example.mask = confoundedCounterpart(example, spec)

        log.info(
            '%s split: %d examples, %d positives, %d confounded (%s, p=%d)',
            split, len(examples), len(positives), len(chosen), spec.confounder.name, spec.p)
        return examples


def buildDataset(spec):
    return Generator(spec).dataset
