#!/usr/bin/env python3
"""The explanation method tests."""
import os
import tempfile
import unittest

import numpy as np

from ConfounderBench.dataLoader import readPgmBytes
from ConfounderBench.errors import (
    ExplainError, FormatError, NumericalError, ParameterError, UnsupportedArchitectureError)
from ConfounderBench.explain import (
    AttributionMap, Explainer, LimeConfig, ShapConfig, Target, bilinearWeights, exactShapley,
    explain, explainGradcam, explainGradient, explainGuided, explainLime, explainShapPartition,
    fitSurrogate, gradcamMap, owenValues, perturb, segmentGrid, upsampleBilinear)
from ConfounderBench.nnLite import TrainedClassifier
from .data import linearModel, randomCnn, randomImage


class TestGradientMaps(unittest.TestCase):

    def test_linearGradient(self):
        w = np.random.default_rng(0).normal(size=(8, 8))
        attribution = explainGradient(linearModel(w), randomImage(8))
        np.testing.assert_allclose(attribution.values, w)
        self.assertEqual(attribution.method, Explainer.GRADIENT)
        self.assertEqual(attribution.target, Target.LOGIT)

    def test_zeroModel(self):
        attribution = explainGradient(linearModel(np.zeros((8, 8)), 2.0), randomImage(8))
        np.testing.assert_array_equal(attribution.values, 0.0)

    def test_guidedOnLinear(self):
        w = np.random.default_rng(1).normal(size=(8, 8))
        x = randomImage(8)
        np.testing.assert_allclose(
            explainGuided(linearModel(w), x).values, explainGradient(linearModel(w), x).values)

    def test_guidedOnCnn(self):
        model = randomCnn(16, seed=2)
        attribution = explainGuided(model, randomImage(16))
        self.assertEqual(attribution.shape, (16, 16))
        self.assertTrue(np.all(np.isfinite(attribution.values)))


class TestGradcam(unittest.TestCase):

    def test_bilinearCorner(self):
        expected = np.outer([1.0, 0.75, 0.25, 0.0], [1.0, 0.75, 0.25, 0.0])
        np.testing.assert_allclose(
            upsampleBilinear(np.array([[1.0, 0.0], [0.0, 0.0]]), (4, 4)), expected)

    def test_bilinearRowsSumToOne(self):
        for inSize, outSize in ((14, 64), (6, 32), (3, 3), (5, 2)):
            np.testing.assert_allclose(bilinearWeights(inSize, outSize).sum(axis=1), 1.0)

    def test_identityResize(self):
        a = np.random.default_rng(0).random((5, 5))
        np.testing.assert_allclose(upsampleBilinear(a, (5, 5)), a)

    def test_zeroGradients(self):
        features = np.random.default_rng(0).random((3, 4, 4))
        np.testing.assert_array_equal(gradcamMap(features, np.zeros((3, 4, 4)), (8, 8)), 0.0)

    def test_oneHotWeights(self):
        rng = np.random.default_rng(1)
        features = rng.random((3, 4, 4))
        gradients = np.zeros((3, 4, 4))
        gradients[0] = 1.0
        np.testing.assert_allclose(
            gradcamMap(features, gradients, (8, 8)), upsampleBilinear(features[0], (8, 8)))

    def test_nonNegative(self):
        model = randomCnn(64, seed=3)
        for seed in range(3):
            attribution = explainGradcam(model, randomImage(64, seed))
            self.assertEqual(attribution.shape, (64, 64))
            self.assertGreaterEqual(attribution.values.min(), 0.0)

    def test_linearUnsupported(self):
        self.assertRaises(
            UnsupportedArchitectureError, explainGradcam, linearModel(np.zeros((8, 8))),
            np.zeros((8, 8)))


class TestSegments(unittest.TestCase):

    def test_defaultGrid(self):
        segs = segmentGrid(np.zeros((64, 64)), 8)
        self.assertEqual(segs.count, 64)
        np.testing.assert_array_equal(segs.pixelCounts, 64)
        self.assertEqual(segs.ids[0, 0], 0)
        self.assertEqual(segs.ids[63, 63], 63)
        self.assertEqual(segs.ids[8, 0], 8)

    def test_singleSegment(self):
        segs = segmentGrid(np.zeros((64, 64)), 1)
        self.assertEqual(segs.count, 1)
        np.testing.assert_array_equal(segs.ids, 0)

    def test_notDividing(self):
        self.assertRaises(ParameterError, segmentGrid, np.zeros((64, 64)), 7)

    def test_perturb(self):
        image = randomImage(64)
        baseline = np.full((64, 64), -1.0)
        segs = segmentGrid(image, 8)
        np.testing.assert_array_equal(perturb(image, segs, np.ones(64), baseline), image)
        np.testing.assert_array_equal(perturb(image, segs, np.zeros(64), baseline), baseline)
        bits = np.ones(64)
        bits[10] = 0
        out = perturb(image, segs, bits, baseline)
        self.assertEqual(np.sum(out != image), 64)
        np.testing.assert_array_equal(out[segs.ids == 10], -1.0)

    def test_perturbIdempotent(self):
        image = randomImage(16)
        baseline = randomImage(16, seed=1)
        segs = segmentGrid(image, 4)
        bits = np.random.default_rng(0).random(16) < 0.5
        once = perturb(image, segs, bits, baseline)
        np.testing.assert_array_equal(perturb(once, segs, bits, baseline), once)

    def test_perturbBitCount(self):
        segs = segmentGrid(np.zeros((16, 16)), 4)
        self.assertRaises(
            ParameterError, perturb, np.zeros((16, 16)), segs, np.ones(5), np.zeros((16, 16)))


class TestLime(unittest.TestCase):

    def test_exhaustiveTwoSegments(self):
        z = np.array([[0, 0], [0, 1], [1, 0], [1, 1]], dtype=float)
        y = 1.0 + 2.0 * z[:, 0] + 3.0 * z[:, 1]
        ridge = 1e-3
        coefficients, intercept = fitSurrogate(z, y, np.ones(4), ridge)
        np.testing.assert_allclose(
            coefficients, [2.0 / (1.0 + ridge), 3.0 / (1.0 + ridge)], rtol=1e-10)

    def test_sampleOrderIrrelevant(self):
        rng = np.random.default_rng(0)
        z = (rng.random((60, 5)) < 0.5).astype(float)
        y = rng.random(60)
        w = rng.random(60) + 0.1
        order = rng.permutation(60)
        np.testing.assert_allclose(
            fitSurrogate(z, y, w, 1e-3)[0], fitSurrogate(z[order], y[order], w[order], 1e-3)[0],
            atol=1e-12)

    def test_singularSystem(self):
        z = np.array([[0, 0], [1, 1], [0, 0], [1, 1]], dtype=float)
        with self.assertRaises(NumericalError) as ctx:
            fitSurrogate(z, np.arange(4.0), np.ones(4), 1e-14)
        self.assertGreater(ctx.exception.condition, 1e12)

    def test_constantModel(self):
        model = linearModel(np.zeros((16, 16)), 0.3)
        image = randomImage(16)
        attribution = explainLime(
            model, image, segmentGrid(image, 4), LimeConfig(nSamples=100, seed=1))
        np.testing.assert_allclose(attribution.values, 0.0, atol=1e-8)

    def test_relevantSegmentRanksFirst(self):
        weight = np.zeros((16, 16))
        weight[4:8, 4:8] = 0.25
        model = linearModel(weight, -2.0)
        image = np.zeros((16, 16))
        image[4:8, 4:8] = 1.0
        segs = segmentGrid(image, 4)
        attribution = explainLime(model, image, segs, LimeConfig(nSamples=200, seed=2))
        coefficients = attribution.segmentValues
        ranked = np.sort(coefficients)
        self.assertEqual(int(np.argmax(coefficients)), 5)
        self.assertGreater(ranked[-1] - ranked[-2], 0.3)
        self.assertEqual(attribution.target, Target.PROBABILITY)

    def test_deterministic(self):
        model = randomCnn(16, seed=1)
        image = randomImage(16)
        segs = segmentGrid(image, 4)
        cfg = LimeConfig(nSamples=50, seed=3)
        np.testing.assert_array_equal(
            explainLime(model, image, segs, cfg).values,
            explainLime(model, image, segs, cfg).values)

    def test_invalidConfig(self):
        self.assertRaises(ParameterError, LimeConfig, ridge=0.0)
        image = randomImage(16)
        self.assertRaises(
            ParameterError, explainLime, randomCnn(16), image, segmentGrid(image, 4),
            LimeConfig(nSamples=10))


class TestShap(unittest.TestCase):

    def additiveSetup(self, size, g, seed=0):
        rng = np.random.default_rng(seed)
        weight = rng.normal(size=(size, size))
        image = rng.random((size, size))
        return linearModel(weight, 0.5), image, segmentGrid(image, g), weight

    def test_linearSegmentSums(self):
        model, image, segs, weight = self.additiveSetup(16, 4)
        attribution = explainShapPartition(
            model, image, segs, ShapConfig(target=Target.LOGIT))
        expected = np.bincount(segs.ids.ravel(), (weight * image).ravel(), segs.count)
        np.testing.assert_allclose(attribution.segmentValues, expected, atol=1e-10)
        np.testing.assert_allclose(attribution.values, expected[segs.ids], atol=1e-10)

    def test_matchesExactShapleyForAdditiveModels(self):
        for size, g in ((12, 2), (12, 3)):
            model, image, segs, _ = self.additiveSetup(size, g, seed=g)
            partition = explainShapPartition(
                model, image, segs, ShapConfig(target=Target.LOGIT)).segmentValues
            exact = exactShapley(model, image, segs, target=Target.LOGIT)
            np.testing.assert_allclose(partition, exact, atol=1e-6)

    def test_constantModel(self):
        model = linearModel(np.zeros((16, 16)), -1.0)
        image = randomImage(16)
        attribution = explainShapPartition(model, image, segmentGrid(image, 4), ShapConfig())
        np.testing.assert_allclose(attribution.values, 0.0, atol=1e-15)

    def test_completeness(self):
        model = randomCnn(16, seed=4)
        rng = np.random.default_rng(5)
        for _ in range(50):
            image = rng.random((16, 16))
            baseline = rng.random((16, 16)) * 0.2
            segs = segmentGrid(image, 4)
            values = explainShapPartition(
                model, image, segs, ShapConfig(baseline=baseline)).segmentValues
            total = model.predictProb(image) - model.predictProb(baseline)
            self.assertAlmostEqual(values.sum(), total, delta=1e-8)

    def test_twoPlayersMatchShapley(self):
        def game(masks):
            a, b = masks[:, 0].astype(float), masks[:, 1].astype(float)
            return 1.0 + 2.0 * a + 0.5 * b + 3.0 * a * b

        np.testing.assert_allclose(owenValues(game, 2), [2.0 + 1.5, 0.5 + 1.5])

    def test_oddSegmentCount(self):
        def game(masks):
            return masks.astype(float) @ np.array([1.0, 2.0, 4.0])

        np.testing.assert_allclose(owenValues(game, 3), [1.0, 2.0, 4.0])

    def countingGame(self, game):
        rows = []

        def evaluate(masks):
            rows.append(len(masks))
            return game(masks)
        return evaluate, rows

    def test_additiveGameSharesContexts(self):
        weights = np.arange(1.0, 9.0)

        def game(masks):
            return masks.astype(float) @ weights

        everyContext, allRows = self.countingGame(game)
        oneContext, sharedRows = self.countingGame(game)
        np.testing.assert_allclose(owenValues(everyContext, 8), weights)
        np.testing.assert_allclose(owenValues(oneContext, 8, tolerance=0.0), weights)
        self.assertEqual(sum(allRows), 44)
        self.assertEqual(sum(sharedRows), 16)

    def test_toleranceKeepsCompleteness(self):
        rng = np.random.default_rng(8)
        linear = rng.normal(size=8)
        pairs = rng.normal(size=(8, 8))

        def game(masks):
            m = masks.astype(float)
            return m @ linear + np.einsum('ni,ij,nj->n', m, pairs, m) + np.tanh(m.sum(1))

        total = game(np.ones((1, 8), dtype=bool))[0] - game(np.zeros((1, 8), dtype=bool))[0]
        for tolerance in (-1.0, 0.0, 0.5, np.inf):
            self.assertAlmostEqual(owenValues(game, 8, tolerance).sum(), total, delta=1e-10)

    def test_twoPlayersSharedContext(self):
        def game(masks):
            a, b = masks[:, 0].astype(float), masks[:, 1].astype(float)
            return 1.0 + 2.0 * a + 0.5 * b + 3.0 * a * b

        np.testing.assert_allclose(owenValues(game, 2, np.inf), [2.0 + 1.5, 0.5 + 1.5])

    def test_batchSize(self):
        self.assertRaises(ParameterError, ShapConfig, batchSize=0)
        model = randomCnn(16, seed=9)
        image = randomImage(16, seed=2)
        segs = segmentGrid(image, 4)
        one = explainShapPartition(model, image, segs, ShapConfig(batchSize=1))
        many = explainShapPartition(model, image, segs, ShapConfig(batchSize=256))
        np.testing.assert_allclose(one.segmentValues, many.segmentValues, atol=1e-12)


class TestExactShapley(unittest.TestCase):

    def test_singleSegment(self):
        model = randomCnn(16, seed=6)
        image = randomImage(16)
        values = exactShapley(model, image, segmentGrid(image, 1))
        self.assertAlmostEqual(
            values[0], model.predictProb(image) - model.predictProb(np.zeros((16, 16))))

    def test_symmetricGame(self):
        model = linearModel(np.ones((16, 16)) * 0.01, -1.0)
        image = np.ones((16, 16))
        values = exactShapley(model, image, segmentGrid(image, 2))
        np.testing.assert_allclose(values, values[0], atol=1e-12)

    def test_completeness(self):
        model = randomCnn(16, seed=7)
        image = randomImage(16, seed=3)
        values = exactShapley(model, image, segmentGrid(image, 2))
        total = model.predictProb(image) - model.predictProb(np.zeros((16, 16)))
        self.assertAlmostEqual(values.sum(), total, delta=1e-9)

    def test_sizeLimit(self):
        image = randomImage(16)
        self.assertRaises(ExplainError, exactShapley, randomCnn(16), image, segmentGrid(image, 4))


class TestAttributionMap(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()

    def tearDown(self):
        self.tmp.cleanup()

    def test_saveLoad(self):
        path = os.path.join(self.tmp.name, 'x.map')
        original = AttributionMap(np.random.default_rng(0).normal(size=(6, 4)), Explainer.SHAP)
        original.save(path)
        loaded = AttributionMap.load(path)
        np.testing.assert_array_equal(loaded.values, original.values)
        self.assertEqual(loaded.method, Explainer.SHAP)
        with open(path, 'rb') as f:
            self.assertEqual(f.readline(), b'ConfounderBench-map shap 6 4\n')

    def test_loadGarbage(self):
        path = os.path.join(self.tmp.name, 'x.map')
        with open(path, 'wb') as f:
            f.write(b'nothing here')
        self.assertRaises(FormatError, AttributionMap.load, path)

    def test_constantRendersMidGray(self):
        path = os.path.join(self.tmp.name, 'x.pgm')
        AttributionMap(np.full((8, 8), 3.0), Explainer.LIME).render(path)
        np.testing.assert_array_equal(readPgmBytes(path), 128)

    def test_renderRange(self):
        path = os.path.join(self.tmp.name, 'x.pgm')
        AttributionMap(np.array([[-2.0, 0.0], [1.0, 2.0]]), Explainer.GRADIENT).render(path)
        np.testing.assert_array_equal(readPgmBytes(path), [[0, 128], [191, 255]])

    def test_nonFinite(self):
        self.assertRaises(ExplainError, AttributionMap, np.array([[np.nan]]), Explainer.GRADIENT)


class TestDispatch(unittest.TestCase):

    def test_allMethods(self):
        model = randomCnn(16, seed=8)
        image = randomImage(16)
        segs = segmentGrid(image, 4)
        for method in Explainer:
            attribution = explain(
                method.value, model, image, segs, LimeConfig(nSamples=40), ShapConfig())
            self.assertEqual(attribution.method, method)
            self.assertEqual(attribution.shape, (16, 16))
            self.assertTrue(np.all(np.isfinite(attribution.values)))

    def test_defaultSegments(self):
        model = randomCnn(64, seed=9)
        attribution = explain(
            Explainer.LIME, model, randomImage(64), limeConfig=LimeConfig(nSamples=80))
        self.assertEqual(len(attribution.segmentValues), 64)

    def test_loadedModelExplainsIdentically(self):
        model = randomCnn(16, seed=10)
        image = randomImage(16)
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, 'model.ckpt')
            model.save(path)
            loaded = TrainedClassifier.load(path)
        np.testing.assert_array_equal(
            explainGuided(model, image).values, explainGuided(loaded, image).values)
