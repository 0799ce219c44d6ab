"""Minimal differentiable classifiers with hand-derived backward passes.

Two architectures produce a single logit for a square grayscale image:

* ``Architecture.LINEAR``: one weight per pixel plus a bias.
* ``Architecture.TINY_CNN``: conv(3x3) -> ReLU -> maxpool(2x2) -> conv(3x3)
  -> ReLU -> maxpool(2x2) -> fully connected -> logit, all convolutions valid
  (no padding).

Tensors are float64 numpy arrays laid out as (batch, channels, rows, cols).
"""
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .errors import (
    DatasetError, FormatError, ParameterError, ShapeError, TrainingError,
    UnsupportedArchitectureError)
from .metrics import rocAuc

log = logging.getLogger(__name__)

Tensor = np.ndarray

CHECKPOINT_MAGIC = 'ConfounderBench-checkpoint'
CHECKPOINT_VERSION = 1


class Architecture(Enum):
    LINEAR = 'linear'
    TINY_CNN = 'tinycnn'


@dataclass
class ModelSpec:
    kind: Architecture = Architecture.TINY_CNN
    imageSize: int = 64
    conv1Filters: int = 8
    conv2Filters: int = 16
    kernelSize: int = 3

    def __post_init__(self):
        if not isinstance(self.kind, Architecture):
            self.kind = Architecture(self.kind)
        if self.kind is Architecture.TINY_CNN:
            if min(self.conv1Filters, self.conv2Filters, self.kernelSize) < 1:
                raise ParameterError('Filter counts and kernel size must be positive.')
            if min(self.featureShape()[1:]) < 1:
                raise ParameterError(
                    'Image size %d is too small for the tiny CNN.' % self.imageSize)

    def featureShape(self):
        """Shape of the last feature map (after the second pooling)."""
        side = (self.imageSize - self.kernelSize + 1) // 2
        side = (side - self.kernelSize + 1) // 2
        return (self.conv2Filters, side, side)


@dataclass
class TrainConfig:
    epochs: int = 15
    batchSize: int = 32
    learningRate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ParameterError('epochs must be >= 1')
        if self.batchSize < 1:
            raise ParameterError('batch size must be >= 1')
        if self.learningRate <= 0:
            raise ParameterError('learning rate must be > 0')


@dataclass
class ForwardTrace:
    """Per-layer caches and outputs of one forward pass."""

    caches: List[object]
    activations: List[Optional[Tensor]]
    start: int = 0

    def output(self, layer):
        return self.activations[layer]


class Layer:
    name = None

    def parameterShapes(self):
        return {}

    def forward(self, params, x):
        raise NotImplementedError

    def backward(self, params, cache, dy, guided=False, withParams=True):
        raise NotImplementedError


class Conv2d(Layer):
    def __init__(self, name, inChannels, filters, kernelSize=3):
        self.name = name
        self.inChannels = inChannels
        self.filters = filters
        self.kernelSize = kernelSize

    def parameterShapes(self):
        k = self.kernelSize
        return {
            self.name + '.weight': (self.filters, self.inChannels, k, k),
            self.name + '.bias': (self.filters,)}

    def columns(self, x):
        """im2col: (n, rows, cols, c * k * k) patches of x."""
        k = self.kernelSize
        windows = sliding_window_view(x, (k, k), axis=(2, 3))
        n, c, rows, cols = windows.shape[:4]
        return windows.transpose(0, 2, 3, 1, 4, 5).reshape(n, rows, cols, c * k * k)

    def forward(self, params, x):
        w = params[self.name + '.weight']
        b = params[self.name + '.bias']
        patches = self.columns(x)
        y = patches @ w.reshape(self.filters, -1).T + b
        return np.ascontiguousarray(y.transpose(0, 3, 1, 2)), (patches, x.shape)

    def backward(self, params, cache, dy, guided=False, withParams=True):
        patches, shape = cache
        w = params[self.name + '.weight']
        k = self.kernelSize
        n, _, rows, cols = dy.shape
        dyRows = dy.transpose(0, 2, 3, 1).reshape(-1, self.filters)

        dpatches = (dyRows @ w.reshape(self.filters, -1)).reshape(
            n, rows, cols, self.inChannels, k, k)
        dx = np.zeros(shape)
        for i in range(k):
            for j in range(k):
                dx[:, :, i:i + rows, j:j + cols] += dpatches[..., i, j].transpose(0, 3, 1, 2)

        grads = {}
        if withParams:
            grads[self.name + '.weight'] = \
                (dyRows.T @ patches.reshape(len(dyRows), -1)).reshape(w.shape)
            grads[self.name + '.bias'] = dy.sum(axis=(0, 2, 3))
        return dx, grads


class Relu(Layer):
    def forward(self, params, x):
        return np.maximum(x, 0.0), x

    def backward(self, params, cache, dy, guided=False, withParams=True):
        dx = dy * (cache > 0)
        if guided:
            dx = dx * (dy > 0)
        return dx, {}


class MaxPool2d(Layer):
    """2x2 max pooling with stride 2; odd trailing rows/cols are dropped."""

    def forward(self, params, x):
        n, c, h, w = x.shape
        rows, cols = h // 2, w // 2
        blocks = x[:, :, :2 * rows, :2 * cols] \
            .reshape(n, c, rows, 2, cols, 2) \
            .transpose(0, 1, 2, 4, 3, 5) \
            .reshape(n, c, rows, cols, 4)
        # argmax keeps the first row-major index on ties
        arg = blocks.argmax(axis=-1)
        y = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
        return y, (x.shape, arg)

    def backward(self, params, cache, dy, guided=False, withParams=True):
        shape, arg = cache
        n, c, rows, cols = dy.shape
        routed = np.zeros((n, c, rows, cols, 4))
        np.put_along_axis(routed, arg[..., None], dy[..., None], axis=-1)
        routed = routed.reshape(n, c, rows, cols, 2, 2) \
            .transpose(0, 1, 2, 4, 3, 5) \
            .reshape(n, c, 2 * rows, 2 * cols)
        dx = np.zeros(shape)
        dx[:, :, :2 * rows, :2 * cols] = routed
        return dx, {}


class Flatten(Layer):
    def forward(self, params, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, params, cache, dy, guided=False, withParams=True):
        return dy.reshape(cache), {}


class Dense(Layer):
    def __init__(self, name, inFeatures, outFeatures=1):
        self.name = name
        self.inFeatures = inFeatures
        self.outFeatures = outFeatures

    def parameterShapes(self):
        return {
            self.name + '.weight': (self.outFeatures, self.inFeatures),
            self.name + '.bias': (self.outFeatures,)}

    def forward(self, params, x):
        w = params[self.name + '.weight']
        b = params[self.name + '.bias']
        return x @ w.T + b, x

    def backward(self, params, cache, dy, guided=False, withParams=True):
        w = params[self.name + '.weight']
        grads = {}
        if withParams:
            grads[self.name + '.weight'] = dy.T @ cache
            grads[self.name + '.bias'] = dy.sum(axis=0)
        return dy @ w, grads


class Network:
    """A chain of layers ending in a single logit."""

    def __init__(self, layers, featureLayer=None):
        self.layers = layers
        self.featureLayer = featureLayer

    def parameterShapes(self):
        shapes = {}
        for layer in self.layers:
            shapes.update(layer.parameterShapes())
        return shapes

    def forward(self, params, x, start=0):
        caches = [None] * len(self.layers)
        activations = [None] * len(self.layers)
        for i in range(start, len(self.layers)):
            x, caches[i] = self.layers[i].forward(params, x)
            activations[i] = x
        return x[:, 0], ForwardTrace(caches, activations, start)

    def backward(self, params, trace, upstream, guided=False, stop=0, withParams=True):
        """Backpropagate d(logit) through layers [stop, end).

        Returns the gradient with respect to the input of layer `stop` and the
        parameter gradients of the traversed layers.
        """
        dy = np.asarray(upstream, dtype=float).reshape(-1, 1)
        grads = {}
        for i in reversed(range(max(stop, trace.start), len(self.layers))):
            dy, g = self.layers[i].backward(params, trace.caches[i], dy, guided, withParams)
            grads.update(g)
        return dy, grads


def buildNetwork(spec):
    if spec.kind is Architecture.LINEAR:
        return Network([Flatten(), Dense('linear', spec.imageSize ** 2)])
    features = spec.featureShape()
    return Network([
        Conv2d('conv1', 1, spec.conv1Filters, spec.kernelSize),
        Relu(),
        MaxPool2d(),
        Conv2d('conv2', spec.conv1Filters, spec.conv2Filters, spec.kernelSize),
        Relu(),
        MaxPool2d(),
        Flatten(),
        Dense('fc', int(np.prod(features)))],
        featureLayer=6)


def initialParameters(spec, rng):
    """He-normal convolutions, scaled-normal head, zero biases; zeros for linear."""
    shapes = buildNetwork(spec).parameterShapes()
    params = {}
    for name in sorted(shapes):
        shape = shapes[name]
        if name.endswith('.bias') or spec.kind is Architecture.LINEAR:
            params[name] = np.zeros(shape)
        elif name.startswith('conv'):
            fanIn = int(np.prod(shape[1:]))
            params[name] = rng.normal(0.0, np.sqrt(2.0 / fanIn), shape)
        else:
            params[name] = rng.normal(0.0, np.sqrt(1.0 / shape[1]), shape)
    return params


class TrainedClassifier:
    """Immutable trained binary classifier producing one logit per image."""

    def __init__(self, spec, parameters, valAuc=float('nan')):
        self.spec = spec
        self.network = buildNetwork(spec)
        self.valAuc = valAuc
        self.history = []

        shapes = self.network.parameterShapes()
        if set(shapes) != set(parameters):
            raise ParameterError(
                'Parameters %s do not match architecture %s.' %
                (sorted(parameters), spec.kind.value))
        self.parameters = {}
        for name in sorted(shapes):
            value = np.array(parameters[name], dtype=float).reshape(shapes[name])
            if not np.all(np.isfinite(value)):
                raise ParameterError('Parameter %s is not finite.' % name)
            value.setflags(write=False)
            self.parameters[name] = value

    def prepare(self, images):
        x = np.asarray(images, dtype=float)
        single = x.ndim == 2
        if single:
            x = x[None]
        size = self.spec.imageSize
        if x.ndim != 3 or x.shape[1:] != (size, size):
            raise ShapeError(
                'Expected %dx%d images, got shape %s.' % (size, size, np.shape(images)))
        return x[:, None, :, :], single

    def forward(self, image):
        """Return (logit, trace); logits are an array for a batch of images."""
        x, single = self.prepare(image)
        logits, trace = self.network.forward(self.parameters, x)
        return (float(logits[0]) if single else logits), trace

    def logits(self, images, batchSize=128):
        x, single = self.prepare(images)
        out = np.empty(x.shape[0])
        for start in range(0, x.shape[0], batchSize):
            out[start:start + batchSize], _ = \
                self.network.forward(self.parameters, x[start:start + batchSize])
        return float(out[0]) if single else out

    def predictProb(self, images):
        return expit(self.logits(images))

    def predictClass(self, images, threshold=0.5):
        return (np.asarray(self.predictProb(images)) > threshold).astype(int)

    def backpropToInput(self, image, guided):
        x, single = self.prepare(image)
        _, trace = self.network.forward(self.parameters, x)
        dx, _ = self.network.backward(
            self.parameters, trace, np.ones(x.shape[0]), guided=guided, withParams=False)
        dx = dx[:, 0]
        return dx[0] if single else dx

    def inputGradient(self, image):
        """d(logit)/d(pixel) by exact backpropagation."""
        return self.backpropToInput(image, guided=False)

    def guidedInputGradient(self, image):
        """Guided backpropagation: ReLUs also block negative upstream gradients."""
        return self.backpropToInput(image, guided=True)

    def gradcamIngredients(self, image):
        """Return (last feature maps, d(logit)/d(feature maps)) for one image."""
        if self.network.featureLayer is None:
            raise UnsupportedArchitectureError(
                'Grad-CAM needs convolutional feature maps; %s has none.' % self.spec.kind.value)
        x, _ = self.prepare(image)
        layer = self.network.featureLayer
        _, trace = self.network.forward(self.parameters, x)
        features = trace.output(layer - 1)
        grads, _ = self.network.backward(
            self.parameters, trace, np.ones(1), stop=layer, withParams=False)
        return features[0], grads[0]

    def headLogit(self, features):
        """Logit computed from last-layer feature maps (batch or single)."""
        f = np.asarray(features, dtype=float)
        single = f.ndim == 3
        if single:
            f = f[None]
        logits, _ = self.network.forward(self.parameters, f, start=self.network.featureLayer)
        return float(logits[0]) if single else logits

    def save(self, path):
        header = '%s kind=%s version=%d image_size=%d conv1=%d conv2=%d kernel=%d val_auc=%r\n' % (
            CHECKPOINT_MAGIC, self.spec.kind.value, CHECKPOINT_VERSION, self.spec.imageSize,
            self.spec.conv1Filters, self.spec.conv2Filters, self.spec.kernelSize,
            float(self.valAuc))
        with open(path, 'wb') as f:
            f.write(header.encode('ascii'))
            for name in sorted(self.parameters):
                value = self.parameters[name]
                encoded = name.encode('ascii')
                f.write(np.array([len(encoded)], dtype='<u2').tobytes())
                f.write(encoded)
                f.write(np.array([value.ndim], dtype='<u1').tobytes())
                f.write(np.array(value.shape, dtype='<u4').tobytes())
                f.write(value.astype('<f8').tobytes())

    @classmethod
    def load(cls, path):
        with open(path, 'rb') as f:
            data = f.read()
        end = data.find(b'\n')
        if end < 0:
            raise FormatError('%s: missing checkpoint header' % path)
        tokens = data[:end].decode('ascii', errors='replace').split()
        if not tokens or tokens[0] != CHECKPOINT_MAGIC:
            raise FormatError('%s is not a checkpoint' % path)
        try:
            fields = dict(t.split('=', 1) for t in tokens[1:])
            if int(fields['version']) != CHECKPOINT_VERSION:
                raise FormatError('%s: unsupported version %s' % (path, fields['version']))
            spec = ModelSpec(
                kind=Architecture(fields['kind']),
                imageSize=int(fields['image_size']),
                conv1Filters=int(fields['conv1']),
                conv2Filters=int(fields['conv2']),
                kernelSize=int(fields['kernel']))
            valAuc = float(fields['val_auc'])
        except (KeyError, ValueError) as e:
            raise FormatError('%s: bad checkpoint header (%s)' % (path, e))

        params = {}
        offset = end + 1
        try:
            while offset < len(data):
                length = int(np.frombuffer(data, '<u2', 1, offset)[0])
                offset += 2
                name = data[offset:offset + length].decode('ascii')
                offset += length
                ndim = int(np.frombuffer(data, '<u1', 1, offset)[0])
                offset += 1
                shape = tuple(int(s) for s in np.frombuffer(data, '<u4', ndim, offset))
                offset += 4 * ndim
                count = int(np.prod(shape))
                params[name] = np.frombuffer(data, '<f8', count, offset).reshape(shape).copy()
                offset += 8 * count
        except ValueError as e:
            raise FormatError('%s: truncated checkpoint (%s)' % (path, e))
        return cls(spec, params, valAuc)


class Adam:
    def __init__(self, params, cfg):
        self.cfg = cfg
        self.t = 0
        self.m = {name: np.zeros_like(v) for name, v in params.items()}
        self.v = {name: np.zeros_like(v) for name, v in params.items()}

    def step(self, params, grads):
        cfg = self.cfg
        self.t += 1
        correction1 = 1.0 - cfg.beta1 ** self.t
        correction2 = 1.0 - cfg.beta2 ** self.t
        for name in sorted(params):
            g = grads[name]
            self.m[name] = cfg.beta1 * self.m[name] + (1.0 - cfg.beta1) * g
            self.v[name] = cfg.beta2 * self.v[name] + (1.0 - cfg.beta2) * g * g
            mHat = self.m[name] / correction1
            vHat = self.v[name] / correction2
            params[name] -= cfg.learningRate * mHat / (np.sqrt(vHat) + cfg.epsilon)


def binaryCrossEntropy(logits, labels):
    return float(np.mean(np.logaddexp(0.0, logits) - labels * logits))


def stackSplit(examples):
    images = np.stack([e.image for e in examples])[:, None, :, :]
    labels = np.array([e.label for e in examples], dtype=float)
    return images, labels


def train(spec, ds, cfg):
    """Minibatch Adam on binary cross-entropy, keeping the best validation epoch."""
    if not ds.train or not ds.val:
        raise DatasetError('Training needs non-empty train and val splits.')
    images, labels = stackSplit(ds.train)
    valImages, valLabels = stackSplit(ds.val)
    if images.shape[2:] != (spec.imageSize, spec.imageSize):
        raise ShapeError('Dataset images are %s, model expects %d px.' % (
            images.shape[2:], spec.imageSize))
    if len(set(valLabels)) < 2:
        raise DatasetError('Validation split needs both classes for model selection.')

    rng = np.random.default_rng(cfg.seed)
    network = buildNetwork(spec)
    params = initialParameters(spec, rng)
    adam = Adam(params, cfg)
    history = []
    best, bestAuc = None, -np.inf

    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(labels))
        total = 0.0
        for start in range(0, len(order), cfg.batchSize):
            batch = order[start:start + cfg.batchSize]
            logits, trace = network.forward(params, images[batch])
            loss = binaryCrossEntropy(logits, labels[batch])
            if not np.isfinite(loss):
                raise TrainingError('non-finite loss', epoch)
            upstream = (expit(logits) - labels[batch]) / len(batch)
            _, grads = network.backward(params, trace, upstream)
            adam.step(params, grads)
            total += loss * len(batch)
        history.append(total / len(labels))

        valLogits = np.concatenate([
            network.forward(params, valImages[s:s + 128])[0]
            for s in range(0, len(valLabels), 128)])
        if not np.all(np.isfinite(valLogits)):
            raise TrainingError('non-finite validation logits', epoch)
        valAuc = rocAuc(valLogits, valLabels)
        log.info('epoch %d/%d: loss %.4f, val AUC %.4f', epoch, cfg.epochs, history[-1], valAuc)
        if valAuc > bestAuc:
            bestAuc = valAuc
            best = {name: value.copy() for name, value in params.items()}

    model = TrainedClassifier(spec, best, bestAuc)
    model.history = history
    return model
