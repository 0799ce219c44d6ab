"""Sweep orchestration: configuration, cells, reports and heatmaps.

A cell is one (confounder, p, seed) triple. It builds a dataset, trains a
classifier, measures AUC on the confounded and on the clean test split, and
scores every configured explainer on the flip-filtered pool.
"""
import hashlib
import logging
import os
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from .dataLoader import readKeyValues, writePgm
from .errors import BenchError, CellError, ConfigError, FormatError, ParameterError, SweepError
from .explain import Explainer, LimeConfig, ShapConfig, displayRange, explain, segmentGrid
from .generator import Confounder, DatasetSpec, buildDataset
from .metrics import (
    MetricConfig, RankMode, buildFlipPool, confounderSensitivity, explanationNcc, rocAuc)
from .nnLite import Architecture, ModelSpec, TrainConfig, train
from .statistics import Statistics

log = logging.getLogger(__name__)

CSV_COLUMNS = [
    'confounder', 'p', 'seed', 'explainer', 'auc_conf', 'auc_clean',
    'cs', 'cs_pool', 'cs_fallback', 'ncc', 'ncc_pool', 'ncc_fallback']
HEATMAP_KINDS = ('clean', 'confounded', 'map_clean', 'map_confounded')
TRUE_WORDS = ('true', 'yes', 'on', '1')
FALSE_WORDS = ('false', 'no', 'off', '0')


def deriveSeed(seed, confounder, p, tag):
    """Seed of one cell component: first 8 bytes of SHA-256 over the cell identity."""
    confounder = Confounder(confounder).value
    digest = hashlib.sha256(('%d:%s:%d:%s' % (seed, confounder, p, tag)).encode('ascii')).digest()
    return int.from_bytes(digest[:8], 'big')


@dataclass
class SweepConfig:
    confounders: List[Confounder] = field(default_factory=lambda: list(Confounder))
    pGrid: List[int] = field(default_factory=lambda: [0, 20, 50, 80, 100])
    seeds: List[int] = field(default_factory=lambda: [0, 1, 2])
    nTrain: int = 1200
    nVal: int = 150
    nTest: int = 150
    imageSize: int = 64
    model: Architecture = Architecture.TINY_CNN
    explainers: List[Explainer] = field(default_factory=lambda: list(Explainer))
    metric: MetricConfig = field(default_factory=MetricConfig)
    epochs: int = 15
    batchSize: int = 32
    learningRate: float = 1e-3
    segments: int = 8
    limeSamples: int = 500
    limeKernelWidth: float = 0.25
    limeRidge: float = 1e-3
    outputDir: str = 'results'
    heatmaps: bool = True
    nJobs: int = -1

    def __post_init__(self):
        self.confounders = [Confounder(c) for c in self.confounders]
        self.explainers = [Explainer(e) for e in self.explainers]
        self.model = Architecture(self.model)
        if not self.confounders:
            raise ParameterError('At least one confounder is required.')
        if not self.explainers:
            raise ParameterError('At least one explainer is required.')
        if not self.seeds or not self.pGrid:
            raise ParameterError('Seeds and p grid must not be empty.')
        if any(p < 0 or p > 100 for p in self.pGrid):
            raise ParameterError('p_grid values must lie in [0, 100].')
        if any(s < 0 for s in self.seeds):
            raise ParameterError('Seeds must be non-negative.')
        if self.segments < 1 or self.imageSize % self.segments:
            raise ParameterError('segments must divide image_size.')
        if self.model is Architecture.LINEAR and Explainer.GRADCAM in self.explainers:
            raise ParameterError('Grad-CAM needs model = tinycnn.')
        if self.nJobs == 0:
            raise ParameterError('n_jobs must not be 0.')

    def cells(self):
        return [(c, p, s) for c in self.confounders for p in self.pGrid for s in self.seeds]

    def datasetSpec(self, confounder, p, seed):
        return DatasetSpec(
            nTrain=self.nTrain, nVal=self.nVal, nTest=self.nTest, imageSize=self.imageSize,
            p=p, confounder=confounder, seed=deriveSeed(seed, confounder, p, 'dataset'))

    def modelSpec(self):
        return ModelSpec(kind=self.model, imageSize=self.imageSize)

    def trainConfig(self, confounder, p, seed):
        return TrainConfig(
            epochs=self.epochs, batchSize=self.batchSize, learningRate=self.learningRate,
            seed=deriveSeed(seed, confounder, p, 'model'))

    def limeConfig(self, confounder, p, seed, baseline):
        return LimeConfig(
            nSamples=self.limeSamples, kernelWidth=self.limeKernelWidth, ridge=self.limeRidge,
            seed=deriveSeed(seed, confounder, p, 'lime'), baseline=baseline)

    def shapConfig(self, baseline):
        return ShapConfig(baseline=baseline)


def parseList(value, item):
    return [item(v.strip()) for v in value.split(',') if v.strip()]


def parseBool(value):
    if value.lower() in TRUE_WORDS:
        return True
    if value.lower() in FALSE_WORDS:
        return False
    raise ValueError('expected a boolean, got "%s"' % value)


def parsePercent(value):
    p = int(value)
    if not 0 <= p <= 100:
        raise ValueError('p must lie in [0, 100], got %d' % p)
    return p


CONFIG_KEYS = {
    'confounders': ('confounders', lambda v: parseList(v, Confounder)),
    'p_grid': ('pGrid', lambda v: parseList(v, parsePercent)),
    'seeds': ('seeds', lambda v: parseList(v, int)),
    'n_train': ('nTrain', int),
    'n_val': ('nVal', int),
    'n_test': ('nTest', int),
    'image_size': ('imageSize', int),
    'model': ('model', Architecture),
    'explainers': ('explainers', lambda v: parseList(v, Explainer)),
    'top_frac': ('topFrac', float),
    'max_samples': ('maxSamples', int),
    'rank_mode': ('rankMode', RankMode),
    'decision_threshold': ('decisionThreshold', float),
    'epochs': ('epochs', int),
    'batch_size': ('batchSize', int),
    'learning_rate': ('learningRate', float),
    'segments': ('segments', int),
    'lime_samples': ('limeSamples', int),
    'lime_kernel_width': ('limeKernelWidth', float),
    'lime_ridge': ('limeRidge', float),
    'output_dir': ('outputDir', str),
    'heatmaps': ('heatmaps', parseBool),
    'n_jobs': ('nJobs', int),
}
METRIC_FIELDS = ('topFrac', 'maxSamples', 'rankMode', 'decisionThreshold')


def parseConfig(path):
    """Read a `key = value` sweep configuration; absent keys keep their defaults."""
    values = {}
    for lineNumber, key, value in readKeyValues(path):
        if key not in CONFIG_KEYS:
            raise ConfigError('unknown key "%s"' % key, lineNumber)
        name, parse = CONFIG_KEYS[key]
        if name in values:
            raise ConfigError('duplicate key "%s"' % key, lineNumber)
        try:
            values[name] = parse(value)
        except ValueError as e:
            raise ConfigError('bad value for %s: %s' % (key, e), lineNumber)

    metric = {name: values.pop(name) for name in METRIC_FIELDS if name in values}
    try:
        return SweepConfig(metric=MetricConfig(**metric), **values)
    except ParameterError as e:
        raise ConfigError(str(e))


@dataclass
class ReportRow:
    confounder: str
    p: int
    seed: int
    explainer: str
    aucConf: float = float('nan')
    aucClean: float = float('nan')
    cs: float = float('nan')
    csPool: int = 0
    csFallback: bool = False
    ncc: float = float('nan')
    nccPool: int = 0
    nccFallback: bool = False
    nFlips: int = 0
    failed: bool = False

    def record(self):
        return {
            'confounder': self.confounder, 'p': self.p, 'seed': self.seed,
            'explainer': self.explainer, 'auc_conf': self.aucConf, 'auc_clean': self.aucClean,
            'cs': self.cs, 'cs_pool': self.csPool, 'cs_fallback': int(self.csFallback),
            'ncc': self.ncc, 'ncc_pool': self.nccPool, 'ncc_fallback': int(self.nccFallback)}


@dataclass
class HeatmapPanel:
    cleanImage: np.ndarray
    confoundedImage: np.ndarray
    mapClean: np.ndarray
    mapConfounded: np.ndarray

    def images(self):
        return dict(zip(HEATMAP_KINDS, (
            self.cleanImage, self.confoundedImage, self.mapClean, self.mapConfounded)))


@dataclass
class CellOutput:
    rows: List[ReportRow]
    panels: Dict[str, HeatmapPanel] = field(default_factory=dict)


def stackImages(examples):
    return np.stack([e.image for e in examples]), np.array([e.label for e in examples])


def explainAll(explainer, model, images, segs, limeConfig, shapConfig, nJobs):
    """Explain every image; results keep the input order."""
    return Parallel(n_jobs=nJobs)(
        delayed(explain)(explainer, model, image, segs, limeConfig, shapConfig)
        for image in images)


def evaluateCell(confounder, p, seed, dataset, model, cfg):
    """Score a trained model and every configured explainer on one dataset."""
    images, labels = stackImages(dataset.test)
    aucConf = rocAuc(model.logits(images), labels)
    cleanImages, cleanLabels = stackImages(dataset.cleanTest)
    aucClean = rocAuc(model.logits(cleanImages), cleanLabels)
    log.info('cell (%s, p=%d, seed=%d): AUC confounded %.4f, clean %.4f',
             confounder.value, p, seed, aucConf, aucClean)

    pool = buildFlipPool(model, dataset.test, cfg.metric, dataset.counterpart)
    log.debug('flip pool: %d pairs of %d flips, fallback %s',
              len(pool), pool.nFlips, pool.fallbackUsed)
    baseline = dataset.meanImage()
    segs = segmentGrid(baseline, cfg.segments)
    limeConfig = cfg.limeConfig(confounder, p, seed, baseline)
    shapConfig = cfg.shapConfig(baseline)

    pairImages = [pair.confoundedImage for pair in pool.pairs] + \
        [pair.cleanImage for pair in pool.pairs]
    output = CellOutput([])
    for explainer in cfg.explainers:
        start = time.perf_counter()
        maps = explainAll(explainer, model, pairImages, segs, limeConfig, shapConfig, cfg.nJobs)
        mapsConfounded, mapsClean = maps[:len(pool)], maps[len(pool):]
        log.debug('%s: %d maps in %.1fs', explainer.value, 2 * len(pool),
                  time.perf_counter() - start)

        cs = confounderSensitivity(
            mapsConfounded, [pair.mask for pair in pool.pairs], cfg.metric, pool.fallbackUsed)
        ncc = explanationNcc(zip(mapsConfounded, mapsClean), pool.fallbackUsed)
        output.rows.append(ReportRow(
            confounder=confounder.value, p=p, seed=seed, explainer=explainer.value,
            aucConf=aucConf, aucClean=aucClean,
            cs=cs.value, csPool=cs.nEvaluated, csFallback=cs.fallbackUsed,
            ncc=ncc.value, nccPool=ncc.nEvaluated, nccFallback=ncc.fallbackUsed,
            nFlips=pool.nFlips))
        if pool.pairs:
            first = pool.pairs[0]
            output.panels[explainer.value] = HeatmapPanel(
                first.cleanImage, first.confoundedImage,
                mapsClean[0].values, mapsConfounded[0].values)
    return output


def runCell(confounder, p, seed, cfg, dataset=None, model=None):
    """Run one cell end to end; a prebuilt dataset or model skips that stage."""
    confounder = Confounder(confounder)
    try:
        if dataset is None:
            dataset = buildDataset(cfg.datasetSpec(confounder, p, seed))
        if model is None:
            model = train(cfg.modelSpec(), dataset, cfg.trainConfig(confounder, p, seed))
        return evaluateCell(confounder, p, seed, dataset, model, cfg)
    except BenchError as e:
        raise CellError((confounder.value, p, seed), e) from e


def failedCell(confounder, p, seed, cfg):
    return CellOutput([
        ReportRow(confounder.value, p, seed, e.value, failed=True) for e in cfg.explainers])


def guardedCell(confounder, p, seed, cfg):
    try:
        return runCell(confounder, p, seed, cfg)
    except CellError as e:
        log.warning('%s', e)
        return failedCell(confounder, p, seed, cfg)


@dataclass
class EvalReport:
    rows: List[ReportRow]
    panels: Dict[tuple, Dict[str, HeatmapPanel]] = field(default_factory=dict)

    def frame(self):
        return pd.DataFrame([r.record() for r in self.rows], columns=CSV_COLUMNS)

    @property
    def failedCells(self):
        return sorted({(r.confounder, r.p, r.seed) for r in self.rows if r.failed})

    def correlations(self):
        s = Statistics(self.frame())
        s.calculate()
        return s.correlations


def runSweep(cfg, cells=None):
    """Execute every cell (in parallel with `nJobs`) and collect the report."""
    cells = cells if cells is not None else cfg.cells()
    log.info('Sweep over %d cells with %d jobs', len(cells), cfg.nJobs)
    outputs = Parallel(n_jobs=cfg.nJobs)(
        delayed(guardedCell)(c, p, s, cfg) for c, p, s in cells)

    rows, panels = [], {}
    for (c, p, s), output in zip(cells, outputs):
        rows.extend(output.rows)
        if output.panels:
            panels[(c.value, p, s)] = output.panels
    if rows and all(r.failed for r in rows):
        raise SweepError('All %d cells failed.' % len(cells))

    confounderOrder = {c.value: i for i, c in enumerate(cfg.confounders)}
    explainerOrder = {e.value: i for i, e in enumerate(cfg.explainers)}
    rows.sort(key=lambda r: (
        confounderOrder.get(r.confounder, len(confounderOrder)), r.p, r.seed,
        explainerOrder.get(r.explainer, len(explainerOrder))))
    return EvalReport(rows, panels)


def emitCsv(report, path):
    """Write the report rows; floats to 6 significant digits, missing values empty."""
    frame = report.frame() if isinstance(report, EvalReport) else report
    frame.to_csv(path, index=False, float_format='%.6g', na_rep='', lineterminator='\n')


def readCsv(path):
    try:
        frame = pd.read_csv(path)
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise FormatError('corrupt results %s: %s' % (path, e))
    if list(frame.columns) != CSV_COLUMNS:
        raise FormatError('results header must be %s' % ','.join(CSV_COLUMNS))
    return frame


def heatmapName(cell, explainer, which):
    confounder, p, seed = cell
    return '%s_p%d_s%d_%s_%s.pgm' % (confounder, p, seed, explainer, which)


def renderHeatmaps(panels, directory):
    """Write min-max normalised PGMs of each cell's first pool pair; returns the paths."""
    os.makedirs(directory, exist_ok=True)
    written = []
    for cell in sorted(panels):
        for explainer, panel in sorted(panels[cell].items()):
            for which, image in panel.images().items():
                path = os.path.join(directory, heatmapName(cell, explainer, which))
                writePgm(path, displayRange(image))
                written.append(path)
    log.info('Wrote %d heatmaps to %s', len(written), directory)
    return written


def restrictCells(cfg, confounder: Optional[str] = None, p: Optional[int] = None,
                  seed: Optional[int] = None):
    """Grid cells of `cfg`, optionally narrowed to one confounder, p or seed."""
    confounders = [Confounder(confounder)] if confounder is not None else cfg.confounders
    pGrid = [p] if p is not None else cfg.pGrid
    seeds = [seed] if seed is not None else cfg.seeds
    return [(c, q, s) for c in confounders for q in pGrid for s in seeds]
