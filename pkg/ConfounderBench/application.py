"""ConfounderBench.

Tests whether visual explanation methods reveal a classifier's reliance on a
confounder. Datasets of synthetic chest-like images get a tag, hyperintense
lines or an oblique obstruction injected into p percent of the positives; a
small classifier is trained on them and its explanations are scored by
Confounder Sensitivity and explanation NCC.

Usage:
    ConfounderBench gen [--config=<path>] [--out=<dir>] [--seed=<n>] [--confounder=<kind>] [--p=<int>] [--verbose]
    ConfounderBench train [--config=<path>] [--data=<dir>] [--out=<dir>] [--seed=<n>] [--confounder=<kind>] [--p=<int>] [--verbose]
    ConfounderBench explain --model=<file> --image=<pgm> --method=<name> [--baseline=<pgm>] [--config=<path>] [--out=<dir>] [--seed=<n>] [--verbose]
    ConfounderBench eval --data=<dir> --model=<file> [--config=<path>] [--out=<dir>] [--seed=<n>] [--verbose]
    ConfounderBench sweep [--config=<path>] [--out=<dir>] [--seed=<n>] [--confounder=<kind>] [--p=<int>] [--verbose]
    ConfounderBench report --results=<csv> [--out=<dir>] [--verbose]
    ConfounderBench -h | --help
    ConfounderBench -v | --version

Examples:
    ConfounderBench gen --confounder tag --p 100 --out data
    ConfounderBench train --data data --out model
    ConfounderBench explain --model model/model.ckpt --image data/test_00003.pgm --method shap --out maps
    ConfounderBench eval --data data --model model/model.ckpt --out eval
    ConfounderBench sweep --config sweep.cfg --out results
    ConfounderBench report --results results/results.csv --out report

Options:
    --config=<path>  Sweep configuration (key = value lines).
    --out=<dir>  Output directory [default: results].
    --seed=<n>  Restrict to one seed (default: first configured seed, all for sweep).
    --confounder=<kind>  tag, lines or obstruction.
    --p=<int>  Percentage of confounded positives.
    --data=<dir>  Dataset directory written by gen.
    --model=<file>  Checkpoint written by train.
    --image=<pgm>  Image to explain.
    --method=<name>  gradient, guided, gradcam, lime or shap.
    --baseline=<pgm>  Masking reference for lime and shap [default: zeros].
    --results=<csv>  Results written by sweep or eval.
    --verbose  Debug logging.
    -h --help  Show this screen.
    -v --version  Show version.
"""
import logging
import os.path

from docopt import docopt

import ConfounderBench
from .dataLoader import DataLoader, readPgm
from .errors import FormatError, ParameterError
from .explain import Explainer, LimeConfig, ShapConfig, explain, segmentGrid
from .generator import Confounder, buildDataset
from .harness import (
    EvalReport, SweepConfig, emitCsv, parseConfig, readCsv, renderHeatmaps, restrictCells,
    runCell, runSweep)
from .nnLite import ModelSpec, TrainedClassifier, train
from .reportGenerator import ReportGenerator
from .statistics import Metric, Statistics

log = logging.getLogger(__name__)

LOG_FORMAT = '%(asctime)s %(levelname)s %(name)s: %(message)s'
COMMANDS = ('gen', 'train', 'explain', 'eval', 'sweep', 'report')


def toInt(name, value):
    if value is None:
        return None
    try:
        return int(value)
    except ValueError:
        raise ParameterError('%s must be an integer, got "%s".' % (name, value))


def checkFile(path):
    if path is not None and not os.path.isfile(path):
        raise FileNotFoundError(path)


def checkDirectory(path):
    if path is not None and not os.path.isdir(path):
        raise FileNotFoundError(path)


class Application():

    def __init__(self, argv=None):
        arguments = docopt(__doc__, argv, version=ConfounderBench.__version__)
        self.command = next(c for c in COMMANDS if arguments[c])
        self.verbose = arguments['--verbose']
        logging.basicConfig(
            level=logging.DEBUG if self.verbose else logging.INFO, format=LOG_FORMAT)

        self.configFile = arguments['--config']
        self.outputFolder = arguments['--out']
        self.seed = arguments['--seed']
        self.confounder = arguments['--confounder']
        self.p = arguments['--p']
        self.dataFolder = arguments['--data']
        self.modelFile = arguments['--model']
        self.imageFile = arguments['--image']
        self.method = arguments['--method']
        self.baselineFile = arguments['--baseline']
        self.resultsFile = arguments['--results']

    def check(self):
        for path in (self.configFile, self.modelFile, self.imageFile, self.resultsFile):
            checkFile(path)
        if self.baselineFile != 'zeros':
            checkFile(self.baselineFile)
        checkDirectory(self.dataFolder)

        self.seed = toInt('--seed', self.seed)
        self.p = toInt('--p', self.p)
        if self.p is not None and not 0 <= self.p <= 100:
            raise ParameterError('--p must lie in [0, 100].')
        if self.seed is not None and self.seed < 0:
            raise ParameterError('--seed must be non-negative.')
        try:
            if self.confounder is not None:
                self.confounder = Confounder(self.confounder)
            if self.method is not None:
                self.method = Explainer(self.method)
        except ValueError as e:
            raise ParameterError(str(e))

        self.config = parseConfig(self.configFile) if self.configFile else SweepConfig()

    def cell(self):
        """The single cell addressed by the flags, defaulting to the first configured one."""
        config = self.config
        return (
            self.confounder or config.confounders[0],
            self.p if self.p is not None else config.pGrid[0],
            self.seed if self.seed is not None else config.seeds[0])

    def run(self):
        log.info('Running %s', self.command)
        getattr(self, 'run' + self.command.capitalize())()

    def runGen(self):
        confounder, p, seed = self.cell()
        dataset = buildDataset(self.config.datasetSpec(confounder, p, seed))
        DataLoader().save(dataset, self.outputFolder)
        print("Dataset written to: " + self.outputFolder)

    def runTrain(self):
        confounder, p, seed = self.cell()
        if self.dataFolder:
            dataset = DataLoader().load(self.dataFolder)
        else:
            dataset = buildDataset(self.config.datasetSpec(confounder, p, seed))
        size = dataset.train[0].image.shape[0]
        spec = ModelSpec(kind=self.config.model, imageSize=size)
        model = train(spec, dataset, self.config.trainConfig(confounder, p, seed))

        os.makedirs(self.outputFolder, exist_ok=True)
        path = os.path.join(self.outputFolder, 'model.ckpt')
        model.save(path)
        print("Model written to: %s (validation AUC %.4f)" % (path, model.valAuc))

    def runExplain(self):
        model = TrainedClassifier.load(self.modelFile)
        image = readPgm(self.imageFile)
        baseline = None if self.baselineFile == 'zeros' else readPgm(self.baselineFile)
        segs = segmentGrid(image, self.config.segments)
        limeConfig = LimeConfig(
            nSamples=self.config.limeSamples, kernelWidth=self.config.limeKernelWidth,
            ridge=self.config.limeRidge, seed=self.seed or 0, baseline=baseline)
        attribution = explain(
            self.method, model, image, segs, limeConfig, ShapConfig(baseline=baseline))

        os.makedirs(self.outputFolder, exist_ok=True)
        stem = os.path.splitext(os.path.basename(self.imageFile))[0]
        name = os.path.join(self.outputFolder, '%s_%s' % (stem, self.method.value))
        attribution.save(name + '.map')
        attribution.render(name + '.pgm')
        print("Attribution written to: " + name + '.map')

    def runEval(self):
        dataset = DataLoader().load(self.dataFolder)
        if dataset.spec is None:
            raise FormatError('%s has no dataset.cfg; cannot evaluate.' % self.dataFolder)
        model = TrainedClassifier.load(self.modelFile)
        seed = self.seed if self.seed is not None else self.config.seeds[0]
        output = runCell(
            dataset.spec.confounder.kind, dataset.spec.p, seed, self.config, dataset, model)

        os.makedirs(self.outputFolder, exist_ok=True)
        path = os.path.join(self.outputFolder, 'results.csv')
        emitCsv(EvalReport(output.rows), path)
        print("Results written to: " + path)

    def runSweep(self):
        self.config.outputDir = self.outputFolder
        cells = restrictCells(self.config, self.confounder, self.p, self.seed)
        report = runSweep(self.config, cells)

        os.makedirs(self.outputFolder, exist_ok=True)
        emitCsv(report, os.path.join(self.outputFolder, 'results.csv'))
        s = Statistics(report.frame())
        s.calculate()
        with open(os.path.join(self.outputFolder, 'summary.txt'), 'w') as f:
            f.write(s.summary(tableFormat='simple') + '\n')
            if report.failedCells:
                f.write('\nFailed cells: %s\n' % ', '.join(
                    '(%s, p=%d, seed=%d)' % cell for cell in report.failedCells))
        if self.config.heatmaps:
            renderHeatmaps(report.panels, os.path.join(self.outputFolder, 'heatmaps'))
        print("Results written to: " + self.outputFolder)

    def runReport(self):
        s = Statistics(readCsv(self.resultsFile))
        s.calculate()
        print(s.summary())

        rg = ReportGenerator(self.outputFolder)
        rg.addTitle(s.title)
        rg.addDoc(s)
        rg.addTable(s.trendSummary(tableFormat="html"))
        for metric in Metric:
            rg.addPlot(s.createTrendPlot(metric), metric.name.replace('_', ' '))
        rg.addTitle('Correlation with p')
        rg.addCustomDoc('Correlations.html')
        for confounder in s.confounders:
            rg.addHeading(confounder)
            rg.addTable(s.correlationTable(confounder, tableFormat="html"))
        rg.generateReport()

        print("Report written to: " + self.outputFolder)
