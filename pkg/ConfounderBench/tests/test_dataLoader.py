#!/usr/bin/env python3
import os
import tempfile
import unittest

import numpy as np

from ConfounderBench import DataLoader
from ConfounderBench.dataLoader import (
    MANIFEST, SPEC_FILE, quantize, readKeyValues, readMaskPgm, readPgm, readPgmBytes, writeMaskPgm,
    writePgm)
from ConfounderBench.errors import ConfigError, FormatError
from .data import smallDataset


class TestPgm(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.path = os.path.join(self.tmp.name, 'image.pgm')

    def tearDown(self):
        self.tmp.cleanup()

    def test_quantize(self):
        np.testing.assert_array_equal(quantize([0.0, 0.5, 1.0, 1.5, -0.2]), [0, 128, 255, 255, 0])

    def test_halfIntensity(self):
        writePgm(self.path, np.full((4, 4), 0.5))
        self.assertEqual(readPgmBytes(self.path)[0, 0], 128)
        np.testing.assert_allclose(readPgm(self.path), 128 / 255.0)

    def test_binaryHeader(self):
        writePgm(self.path, np.zeros((3, 5)))
        with open(self.path, 'rb') as f:
            self.assertEqual(f.read(2), b'P5')
        self.assertEqual(readPgm(self.path).shape, (3, 5))

    def test_mask(self):
        mask = np.zeros((6, 6), dtype=bool)
        mask[2:4, 1:5] = True
        writeMaskPgm(self.path, mask)
        self.assertEqual(set(np.unique(readPgmBytes(self.path))), {0, 255})
        np.testing.assert_array_equal(readMaskPgm(self.path), mask)

    def test_notAnImage(self):
        with open(self.path, 'w') as f:
            f.write('hello')
        self.assertRaises(FormatError, readPgm, self.path)


class TestKeyValues(unittest.TestCase):

    def test_parse(self):
        with tempfile.NamedTemporaryFile('w', suffix='.cfg', delete=False) as f:
            f.write('# comment\n\nseed = 3  # trailing\nname=tag\n')
        try:
            self.assertEqual(readKeyValues(f.name), [(3, 'seed', '3'), (4, 'name', 'tag')])
        finally:
            os.remove(f.name)

    def test_malformedLine(self):
        with tempfile.NamedTemporaryFile('w', suffix='.cfg', delete=False) as f:
            f.write('seed = 1\nnonsense\n')
        try:
            with self.assertRaises(ConfigError) as ctx:
                readKeyValues(f.name)
            self.assertEqual(ctx.exception.lineNumber, 2)
        finally:
            os.remove(f.name)

    def test_notUtf8(self):
        with tempfile.NamedTemporaryFile('wb', suffix='.cfg', delete=False) as f:
            f.write(b'seed = 1\nname = \xff\xfe\n')
        try:
            self.assertRaises(ConfigError, readKeyValues, f.name)
        finally:
            os.remove(f.name)


class TestDataLoader(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        cls.dataset = smallDataset(p=50, size=32, nTrain=12, nVal=10, nTest=10)

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = self.tmp.name

    def tearDown(self):
        self.tmp.cleanup()

    def test_roundTrip(self):
        loader = DataLoader()
        loader.save(self.dataset, self.dir)
        loaded = loader.load(self.dir)

        for split in ('train', 'val', 'test'):
            original = self.dataset.split(split)
            restored = loaded.split(split)
            self.assertEqual(len(original), len(restored))
            for a, b in zip(original, restored):
                self.assertEqual(a.label, b.label)
                self.assertEqual(a.confounded, b.confounded)
                self.assertEqual(a.index, b.index)
                self.assertLessEqual(np.abs(a.image - b.image).max(), 1.0 / 255.0)
                self.assertLessEqual(np.abs(a.cleanImage - b.cleanImage).max(), 1.0 / 255.0)
                if a.confounded:
                    np.testing.assert_array_equal(a.mask, b.mask)
        self.assertEqual(len(loaded.cleanTest), len(loaded.test))
        self.assertEqual(loaded.spec.seed, self.dataset.spec.seed)
        self.assertEqual(loaded.spec.p, 50)
        self.assertEqual(loaded.spec.confounder.kind, self.dataset.spec.confounder.kind)

    def test_manifestRows(self):
        DataLoader().save(self.dataset, self.dir)
        with open(os.path.join(self.dir, MANIFEST)) as f:
            lines = f.read().splitlines()
        self.assertEqual(lines[0], 'filename,split,label,confounded,mask')
        self.assertEqual(len(lines) - 1, 12 + 10 + 10)

    def test_emptyDirectory(self):
        self.assertRaises(FormatError, DataLoader().load, self.dir)

    def test_badHeader(self):
        with open(os.path.join(self.dir, MANIFEST), 'w') as f:
            f.write('name,split\nx.pgm,train\n')
        self.assertRaises(FormatError, DataLoader().load, self.dir)

    def test_badRowIsNamed(self):
        DataLoader().save(self.dataset, self.dir)
        path = os.path.join(self.dir, MANIFEST)
        with open(path) as f:
            lines = f.read().splitlines()
        fields = lines[2].split(',')
        fields[2] = '7'
        lines[2] = ','.join(fields)
        with open(path, 'w') as f:
            f.write('\n'.join(lines) + '\n')

        with self.assertRaises(FormatError) as ctx:
            DataLoader().load(self.dir)
        self.assertEqual(ctx.exception.row, 2)

    def test_missingImage(self):
        DataLoader().save(self.dataset, self.dir)
        os.remove(os.path.join(self.dir, 'val_00000.pgm'))
        with self.assertRaises(FormatError) as ctx:
            DataLoader().load(self.dir)
        self.assertEqual(ctx.exception.row, 13)

    def rewriteManifest(self, edit):
        path = os.path.join(self.dir, MANIFEST)
        with open(path) as f:
            lines = f.read().splitlines()
        with open(path, 'w') as f:
            f.write('\n'.join(edit(lines)) + '\n')

    def test_shuffledManifest(self):
        loader = DataLoader()
        loader.save(self.dataset, self.dir)
        self.rewriteManifest(lambda lines: lines[:1] + lines[:0:-1])
        loaded = loader.load(self.dir)

        for split in ('train', 'val', 'test'):
            original = self.dataset.split(split)
            restored = loaded.split(split)
            self.assertEqual([e.index for e in restored], [e.index for e in original])
            for a, b in zip(original, restored):
                self.assertEqual(a.label, b.label)
                self.assertLessEqual(np.abs(a.image - b.image).max(), 1.0 / 255.0)
        for e, clean in zip(loaded.test, loaded.cleanTest):
            self.assertEqual(e.index, clean.index)
            np.testing.assert_array_equal(e.cleanImage, clean.image)

    def test_unexpectedFileName(self):
        DataLoader().save(self.dataset, self.dir)
        os.rename(os.path.join(self.dir, 'train_00000.pgm'), os.path.join(self.dir, 'first.pgm'))
        self.rewriteManifest(
            lambda lines: [lines[0], lines[1].replace('train_00000.pgm', 'first.pgm')] + lines[2:])
        with self.assertRaises(FormatError) as ctx:
            DataLoader().load(self.dir)
        self.assertEqual(ctx.exception.row, 1)

    def test_unknownConfounderInSpec(self):
        DataLoader().save(self.dataset, self.dir)
        path = os.path.join(self.dir, SPEC_FILE)
        with open(path) as f:
            text = f.read()
        with open(path, 'w') as f:
            f.write(text.replace('confounder = tag', 'confounder = stamp'))
        with self.assertRaises(ConfigError) as ctx:
            DataLoader().load(self.dir)
        self.assertEqual(ctx.exception.lineNumber, 6)
