"""Attribution maps for the positive-class output of a classifier.

Gradient methods (plain gradient, guided backpropagation, Grad-CAM) explain
the logit. Perturbation methods (LIME, SHAP partition) explain the predicted
probability by switching superpixels between the image and a baseline.
"""
import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np
from sklearn.linear_model import Ridge

from .dataLoader import writePgm
from .errors import ExplainError, FormatError, NumericalError, ParameterError, ShapeError

log = logging.getLogger(__name__)

MAP_MAGIC = 'ConfounderBench-map'
MAX_CONDITION = 1e12


class Explainer(Enum):
    GRADIENT = 'gradient'
    GUIDED = 'guided'
    GRADCAM = 'gradcam'
    LIME = 'lime'
    SHAP = 'shap'


class Target(Enum):
    LOGIT = 'logit'
    PROBABILITY = 'probability'


@dataclass
class AttributionMap:
    values: np.ndarray
    method: Explainer
    target: Target = Target.LOGIT
    segmentValues: Optional[np.ndarray] = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if not np.all(np.isfinite(self.values)):
            raise ExplainError('%s produced non-finite attributions.' % self.method.value)

    @property
    def shape(self):
        return self.values.shape

    def save(self, path):
        rows, cols = self.values.shape
        with open(path, 'wb') as f:
            f.write(('%s %s %d %d\n' % (MAP_MAGIC, self.method.value, rows, cols)).encode('ascii'))
            f.write(self.values.astype('<f8').tobytes())

    @classmethod
    def load(cls, path):
        with open(path, 'rb') as f:
            data = f.read()
        end = data.find(b'\n')
        tokens = data[:end].decode('ascii', errors='replace').split() if end >= 0 else []
        if len(tokens) != 4 or tokens[0] != MAP_MAGIC:
            raise FormatError('%s is not an attribution map' % path)
        try:
            method = Explainer(tokens[1])
            rows, cols = int(tokens[2]), int(tokens[3])
            values = np.frombuffer(data, '<f8', rows * cols, end + 1).reshape(rows, cols)
        except ValueError as e:
            raise FormatError('%s: %s' % (path, e))
        target = Target.PROBABILITY if method in (Explainer.LIME, Explainer.SHAP) \
            else Target.LOGIT
        return cls(values.copy(), method, target)

    def render(self, path):
        writePgm(path, displayRange(self.values))


def displayRange(values):
    """Min-max normalise to [0, 1]; constant inputs map to mid-gray."""
    values = np.asarray(values, dtype=float)
    low, high = values.min(), values.max()
    if high == low:
        return np.full(values.shape, 128.0 / 255.0)
    return (values - low) / (high - low)


def explainGradient(model, image):
    return AttributionMap(model.inputGradient(image), Explainer.GRADIENT)


def explainGuided(model, image):
    return AttributionMap(model.guidedInputGradient(image), Explainer.GUIDED)


def bilinearWeights(inSize, outSize):
    """Row-interpolation matrix of bilinear resizing with half-pixel centres."""
    src = (np.arange(outSize) + 0.5) * (inSize / outSize) - 0.5
    src = np.maximum(src, 0.0)
    lower = np.minimum(np.floor(src).astype(int), inSize - 1)
    upper = np.minimum(lower + 1, inSize - 1)
    frac = src - lower
    weights = np.zeros((outSize, inSize))
    rows = np.arange(outSize)
    np.add.at(weights, (rows, lower), 1.0 - frac)
    np.add.at(weights, (rows, upper), frac)
    return weights


def upsampleBilinear(values, shape):
    rows = bilinearWeights(values.shape[0], shape[0])
    cols = bilinearWeights(values.shape[1], shape[1])
    return rows @ values @ cols.T


def gradcamMap(features, gradients, shape):
    alphas = gradients.mean(axis=(1, 2))
    raw = np.maximum(np.tensordot(alphas, features, axes=1), 0.0)
    return np.maximum(upsampleBilinear(raw, shape), 0.0)


def explainGradcam(model, image):
    features, gradients = model.gradcamIngredients(image)
    return AttributionMap(gradcamMap(features, gradients, np.shape(image)), Explainer.GRADCAM)


@dataclass
class SegmentGrid:
    ids: np.ndarray
    grid: int

    @property
    def count(self):
        return self.grid * self.grid

    @property
    def pixelCounts(self):
        return np.bincount(self.ids.ravel(), minlength=self.count)


def segmentGrid(image, g=8):
    rows, cols = np.shape(image)
    if g < 1 or rows % g or cols % g:
        raise ParameterError('Grid %d does not divide a %dx%d image.' % (g, rows, cols))
    r, c = np.mgrid[0:rows, 0:cols]
    return SegmentGrid((r // (rows // g)) * g + c // (cols // g), g)


def resolveBaseline(baseline, image):
    if baseline is None:
        return np.zeros(np.shape(image))
    baseline = np.asarray(baseline, dtype=float)
    if baseline.shape != np.shape(image):
        raise ShapeError('Baseline shape %s differs from image shape %s.' % (
            baseline.shape, np.shape(image)))
    return baseline


def perturb(image, segs, bits, baseline):
    """Keep segments whose bit is set, replace the rest with the baseline."""
    bits = np.asarray(bits, dtype=bool)
    if bits.shape != (segs.count,):
        raise ParameterError('Expected %d segment bits, got %s.' % (segs.count, bits.shape))
    return np.where(bits[segs.ids], image, baseline)


def perturbBatch(image, segs, masks, baseline):
    return np.where(masks[:, segs.ids], image[None], baseline[None])


def valueFunction(model, target):
    return model.predictProb if target is Target.PROBABILITY else model.logits


def evaluateCoalitions(model, image, segs, baseline, masks, target, batchSize=256):
    f = valueFunction(model, target)
    out = np.empty(len(masks))
    for start in range(0, len(masks), batchSize):
        chunk = masks[start:start + batchSize]
        out[start:start + len(chunk)] = f(perturbBatch(image, segs, chunk, baseline))
    return out


@dataclass
class LimeConfig:
    nSamples: int = 500
    kernelWidth: float = 0.25
    ridge: float = 1e-3
    onProbability: float = 0.5
    seed: int = 0
    baseline: Optional[np.ndarray] = None
    target: Target = Target.PROBABILITY

    def __post_init__(self):
        if self.ridge <= 0:
            raise ParameterError('LIME ridge must be > 0.')
        if self.kernelWidth <= 0:
            raise ParameterError('LIME kernel width must be > 0.')
        if not 0.0 < self.onProbability < 1.0:
            raise ParameterError('LIME on-probability must lie in (0, 1).')


def fitSurrogate(z, y, weights, ridge):
    """Weighted ridge regression with an unpenalised intercept.

    Solves (Z'WZ + ridge I) beta = Z'Wy on weight-centred data and returns
    (coefficients, intercept).
    """
    z = np.asarray(z, dtype=float)
    weights = np.asarray(weights, dtype=float)
    centred = z - weights @ z / weights.sum()
    gram = centred.T @ (weights[:, None] * centred) + ridge * np.eye(z.shape[1])
    condition = np.linalg.cond(gram)
    if not np.isfinite(condition) or condition > MAX_CONDITION:
        raise NumericalError('LIME surrogate system is singular', condition)
    surrogate = Ridge(alpha=ridge, fit_intercept=True, solver='cholesky')
    surrogate.fit(z, y, sample_weight=weights)
    return surrogate.coef_, float(surrogate.intercept_)


def explainLime(model, image, segs, cfg):
    if cfg.nSamples < segs.count:
        raise ParameterError('LIME needs at least %d samples.' % segs.count)
    baseline = resolveBaseline(cfg.baseline, image)
    rng = np.random.default_rng(cfg.seed)
    z = rng.random((cfg.nSamples, segs.count)) < cfg.onProbability
    z[0] = True

    y = evaluateCoalitions(model, image, segs, baseline, z, cfg.target)
    distance = 1.0 - z.mean(axis=1)
    weights = np.exp(-distance ** 2 / cfg.kernelWidth ** 2)
    coefficients, _ = fitSurrogate(z, y, weights, cfg.ridge)
    return AttributionMap(coefficients[segs.ids], Explainer.LIME, cfg.target, coefficients)


@dataclass
class ShapConfig:
    baseline: Optional[np.ndarray] = None
    target: Target = Target.PROBABILITY
    batchSize: int = 256
    # children whose interaction is within this bound share one context
    tolerance: float = 0.0

    def __post_init__(self):
        if self.batchSize < 1:
            raise ParameterError('SHAP batch size must be >= 1.')


def splitNode(node):
    half = int(math.ceil(len(node) / 2.0))
    return node[:half], node[half:]


def owenValues(evaluate, count, tolerance=-1.0):
    """Owen values over the balanced binary partition of `count` segments.

    `evaluate(masks)` returns the game value for each boolean coalition row;
    all coalitions of one tree level go through a single call. Every node is
    visited once per context, where a context fixes each ancestor's sibling
    as present or absent, and a leaf's value is the weighted mean of its
    marginal contributions over its contexts.

    When the two children of a node interact by no more than `tolerance`,
    each child is expanded in one context with double weight and its
    two-player Shapley share of the gain. A negative tolerance expands every
    context. Completeness holds either way.
    """
    full = np.ones(count, dtype=bool)
    empty = np.zeros(count, dtype=bool)
    low, high = evaluate(np.stack([empty, full]))
    entries = [(tuple(range(count)), empty, low, high, 1.0)]
    sums = np.zeros(count)
    weights = np.zeros(count)

    while entries:
        internal = []
        for node, context, low, high, weight in entries:
            if not node:
                raise ExplainError('Partition tree contains an empty node.')
            if len(node) == 1:
                sums[node[0]] += weight * (high - low)
                weights[node[0]] += weight
            else:
                internal.append((node, context, low, high, weight))
        if not internal:
            break

        masks = []
        for node, context, _, _, _ in internal:
            left, right = splitNode(node)
            withLeft = context.copy()
            withLeft[list(left)] = True
            withRight = context.copy()
            withRight[list(right)] = True
            masks.extend([withLeft, withRight])
        values = evaluate(np.stack(masks))

        entries = []
        for i, (node, context, low, high, weight) in enumerate(internal):
            left, right = splitNode(node)
            withLeft, withRight = masks[2 * i], masks[2 * i + 1]
            valueLeft, valueRight = values[2 * i], values[2 * i + 1]
            # identical for both children
            interaction = abs(valueLeft + valueRight - low - high)
            if interaction <= tolerance:
                # two-player Shapley split of the node's gain
                shareLeft = (valueLeft - low + high - valueRight) / 2.0
                shareRight = high - low - shareLeft
                entries.append((left, context, low, low + shareLeft, 2 * weight))
                entries.append((right, context, low, low + shareRight, 2 * weight))
            else:
                entries.append((left, context, low, valueLeft, weight))
                entries.append((left, withRight, valueRight, high, weight))
                entries.append((right, context, low, valueRight, weight))
                entries.append((right, withLeft, valueLeft, high, weight))

    return sums / weights


def explainShapPartition(model, image, segs, cfg):
    baseline = resolveBaseline(cfg.baseline, image)

    def evaluate(masks):
        return evaluateCoalitions(
            model, image, segs, baseline, masks, cfg.target, cfg.batchSize)

    values = owenValues(evaluate, segs.count, cfg.tolerance)
    log.debug('SHAP partition over %d segments, total attribution %.4g',
              segs.count, values.sum())
    return AttributionMap(values[segs.ids], Explainer.SHAP, cfg.target, values)


def exactShapley(model, image, segs, baseline=None, target=Target.PROBABILITY, maxSegments=12):
    """Brute-force Shapley values of the segment game (testing oracle)."""
    count = segs.count
    if count > maxSegments:
        raise ExplainError('Exact Shapley is limited to %d segments, got %d.' % (
            maxSegments, count))
    baseline = resolveBaseline(baseline, image)
    codes = np.arange(2 ** count)
    masks = ((codes[:, None] >> np.arange(count)) & 1).astype(bool)
    values = evaluateCoalitions(model, image, segs, baseline, masks, target)
    sizes = masks.sum(axis=1)
    weights = np.array([
        math.factorial(s) * math.factorial(count - s - 1) / math.factorial(count)
        if s < count else 0.0 for s in range(count + 1)])

    phi = np.zeros(count)
    for i in range(count):
        without = codes[~masks[:, i]]
        phi[i] = np.sum(weights[sizes[without]] * (values[without | (1 << i)] - values[without]))
    return phi


def explain(method, model, image, segs=None, limeConfig=None, shapConfig=None):
    """Dispatch to one explanation method."""
    method = Explainer(method)
    if method is Explainer.GRADIENT:
        return explainGradient(model, image)
    if method is Explainer.GUIDED:
        return explainGuided(model, image)
    if method is Explainer.GRADCAM:
        return explainGradcam(model, image)
    segs = segs if segs is not None else segmentGrid(image)
    if method is Explainer.LIME:
        return explainLime(model, image, segs, limeConfig or LimeConfig())
    return explainShapPartition(model, image, segs, shapConfig or ShapConfig())
