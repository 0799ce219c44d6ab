"""Top-level module for ConfounderBench.

This module
- builds synthetic datasets with injected confounders
- trains small classifiers and explains their predictions
- scores the explanations by Confounder Sensitivity and explanation NCC
"""
from .errors import BenchError
from .generator import Confounder, ConfounderKind, DatasetSpec, Generator, buildDataset
from .dataLoader import DataLoader
from .nnLite import Architecture, ModelSpec, TrainConfig, TrainedClassifier, train
from .explain import Explainer, AttributionMap, explain, segmentGrid
from .metrics import (
    MetricConfig, buildFlipPool, confounderSensitivity, explanationNcc, rocAuc, pearson)
from .harness import SweepConfig, parseConfig, runCell, runSweep, emitCsv
from .statistics import Statistics, Metric
from .__main__ import main

__all__ = ['BenchError',
           'Confounder',
           'ConfounderKind',
           'DatasetSpec',
           'Generator',
           'buildDataset',
           'DataLoader',
           'Architecture',
           'ModelSpec',
           'TrainConfig',
           'TrainedClassifier',
           'train',
           'Explainer',
           'AttributionMap',
           'explain',
           'segmentGrid',
           'MetricConfig',
           'buildFlipPool',
           'confounderSensitivity',
           'explanationNcc',
           'rocAuc',
           'pearson',
           'SweepConfig',
           'parseConfig',
           'runCell',
           'runSweep',
           'emitCsv',
           'Statistics',
           'Metric',
           'main', ]

__version__ = "0.1.0"
__version_info__ = tuple(
    int(i) for i in __version__.split(".") if i.isdigit()
)
