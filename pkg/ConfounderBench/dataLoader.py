"""Reading and writing datasets, PGM images and key = value files."""
import logging
import os
import re

import numpy as np
import pandas as pd
from PIL import Image, UnidentifiedImageError

from .errors import ConfigError, FormatError, ParameterError
from .generator import (
    SPLITS, Confounder, DatasetSpec, Example, SplitDataset, cleanCounterparts)

log = logging.getLogger(__name__)

MANIFEST = 'manifest.csv'
MANIFEST_COLUMNS = ['filename', 'split', 'label', 'confounded', 'mask']
SPEC_FILE = 'dataset.cfg'
STORED_NAME = re.compile(r'^(train|val|test)_(\d+)\.pgm$')


def quantize(values):
    """Map intensities in [0, 1] to bytes, rounding half up."""
    values = np.clip(np.asarray(values, dtype=float), 0.0, 1.0)
    return np.floor(values * 255.0 + 0.5).astype(np.uint8)


def writePgm(path, values):
    """Write a 2-d array of intensities in [0, 1] as binary PGM (P5, maxval 255)."""
    Image.fromarray(quantize(values)).save(path, format='PPM')


def writeMaskPgm(path, mask):
    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8)).save(path, format='PPM')


def readPgmBytes(path):
    try:
        with Image.open(path) as img:
            if img.format != 'PPM' or img.mode != 'L':
                raise FormatError('%s is not an 8-bit grayscale PGM.' % path)
            return np.array(img, dtype=np.uint8)
    except (UnidentifiedImageError, ValueError) as e:
        raise FormatError('%s: %s' % (path, e))


def readPgm(path):
    return readPgmBytes(path).astype(float) / 255.0


def readMaskPgm(path):
    return readPgmBytes(path) > 127


def readKeyValues(path):
    """Parse a `key = value` file into (lineNumber, key, value) triples."""
    entries = []
    try:
        with open(path, encoding='utf-8') as f:
            for lineNumber, line in enumerate(f, start=1):
                entries.append(parseKeyValue(line, lineNumber))
    except UnicodeDecodeError:
        raise ConfigError('%s is not UTF-8 text' % path)
    return [e for e in entries if e is not None]


def parseKeyValue(line, lineNumber):
    line = line.split('#', 1)[0].strip()
    if not line:
        return None
    if '=' not in line:
        raise ConfigError('expected "key = value", got "%s"' % line, lineNumber)
    key, value = (s.strip() for s in line.split('=', 1))
    if not key:
        raise ConfigError('missing key', lineNumber)
    return lineNumber, key, value


def writeSpec(path, spec):
    with open(path, 'w') as f:
        f.write('n_train = %d\n' % spec.nTrain)
        f.write('n_val = %d\n' % spec.nVal)
        f.write('n_test = %d\n' % spec.nTest)
        f.write('image_size = %d\n' % spec.imageSize)
        f.write('p = %d\n' % spec.p)
        f.write('confounder = %s\n' % spec.confounder.name)
        f.write('seed = %d\n' % spec.seed)


def readSpec(path):
    fields = {
        'n_train': 'nTrain', 'n_val': 'nVal', 'n_test': 'nTest',
        'image_size': 'imageSize', 'p': 'p', 'seed': 'seed'}
    kwargs = {}
    for lineNumber, key, value in readKeyValues(path):
        try:
            if key == 'confounder':
                kwargs['confounder'] = Confounder(value)
            elif key in fields:
                kwargs[fields[key]] = int(value)
            else:
                raise ConfigError('unknown key "%s"' % key, lineNumber)
        except ValueError as e:
            raise ConfigError(str(e), lineNumber)
    try:
        return DatasetSpec(**kwargs)
    except ParameterError as e:
        raise ConfigError('%s: %s' % (path, e))


class DataLoader():

    def save(self, dataset, directory):
        os.makedirs(directory, exist_ok=True)
        rows = []
        for split in SPLITS:
            for e in dataset.split(split):
                stem = '%s_%05d' % (split, e.index)
                filename = stem + '.pgm'
                maskName = ''
                writePgm(os.path.join(directory, filename), e.image)
                if e.confounded:
                    maskName = stem + '_mask.pgm'
                    writeMaskPgm(os.path.join(directory, maskName), e.mask)
                    writePgm(os.path.join(directory, stem + '_clean.pgm'), e.cleanImage)
                rows.append([filename, split, e.label, int(e.confounded), maskName])

        pd.DataFrame(rows, columns=MANIFEST_COLUMNS).to_csv(
            os.path.join(directory, MANIFEST), index=False, lineterminator='\n')
        if dataset.spec is not None:
            writeSpec(os.path.join(directory, SPEC_FILE), dataset.spec)
        log.info('Saved %d examples to %s', len(rows), directory)

    def load(self, directory):
        path = os.path.join(directory, MANIFEST)
        if not os.path.isfile(path):
            raise FormatError('missing manifest %s' % path)
        try:
            manifest = pd.read_csv(path, dtype=str, keep_default_na=False)
        except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
            raise FormatError('corrupt manifest %s: %s' % (path, e))
        if list(manifest.columns) != MANIFEST_COLUMNS:
            raise FormatError('manifest header must be %s' % ','.join(MANIFEST_COLUMNS))

        splits = {name: [] for name in SPLITS}
        for row, record in enumerate(manifest.itertuples(index=False), start=1):
            split = self.checkSplit(record.split, row)
            index = self.fileIndex(record, row)
            splits[split].append(self.loadExample(directory, record, row, index))
        for split in SPLITS:
            splits[split].sort(key=lambda e: e.index)
            indices = [e.index for e in splits[split]]
            if len(set(indices)) != len(indices):
                raise FormatError('duplicate %s index in %s' % (split, path))

        spec = None
        specPath = os.path.join(directory, SPEC_FILE)
        if os.path.isfile(specPath):
            spec = readSpec(specPath)
        log.info('Loaded %d examples from %s', len(manifest), directory)
        return SplitDataset(
            train=splits['train'],
            val=splits['val'],
            test=splits['test'],
            cleanTest=cleanCounterparts(splits['test']),
            spec=spec)

    def checkSplit(self, split, row):
        if split not in SPLITS:
            raise FormatError('unknown split "%s"' % split, row)
        return split

    def fileIndex(self, record, row):
        match = STORED_NAME.match(record.filename)
        if match is None or match.group(1) != record.split:
            raise FormatError(
                'file name "%s" is not %s_<index>.pgm' % (record.filename, record.split), row)
        return int(match.group(2))

    def loadExample(self, directory, record, row, index):
        if record.label not in ('0', '1'):
            raise FormatError('label must be 0 or 1, got "%s"' % record.label, row)
        if record.confounded not in ('0', '1'):
            raise FormatError('confounded must be 0 or 1, got "%s"' % record.confounded, row)
        confounded = record.confounded == '1'
        if confounded != bool(record.mask):
            raise FormatError('mask file must be given exactly for confounded rows', row)

        try:
            image = readPgm(os.path.join(directory, record.filename))
            mask = None
            clean = image
            if confounded:
                mask = readMaskPgm(os.path.join(directory, record.mask))
                stem = os.path.splitext(record.filename)[0]
                clean = readPgm(os.path.join(directory, stem + '_clean.pgm'))
        except (OSError, FormatError) as e:
            raise FormatError(str(e), row)

        return Example(
            cleanImage=clean,
            image=image,
            label=int(record.label),
            mask=mask,
            split=record.split,
            index=index)
