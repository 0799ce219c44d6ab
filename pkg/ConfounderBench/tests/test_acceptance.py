#!/usr/bin/env python3
"""End-to-end trend checks over the default grid; run with `pytest -m slow`."""
import unittest

import pytest

from ConfounderBench.harness import SweepConfig, runSweep
from ConfounderBench.statistics import Metric, Statistics


@pytest.mark.slow
class TestDefaultSweep(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        cfg = SweepConfig(explainers=['shap'], heatmaps=False, nJobs=-1)
        cls.frame = runSweep(cfg).frame()
        cls.statistics = Statistics(cls.frame)
        cls.statistics.calculate()
        cls.means = cls.frame.groupby(['confounder', 'p']).mean(numeric_only=True)

    def test_aucRisesWithP(self):
        for confounder in ('tag', 'lines', 'obstruction'):
            auc = self.means.loc[confounder]['auc_conf']
            for low, high in zip(auc.to_numpy()[:-1], auc.to_numpy()[1:]):
                self.assertGreaterEqual(high, low - 0.03, confounder)
            self.assertGreaterEqual(auc.loc[100], 0.98, confounder)

    def test_relianceOffDistribution(self):
        for confounder in ('tag', 'lines', 'obstruction'):
            row = self.means.loc[(confounder, 100)]
            self.assertLessEqual(row['auc_clean'], row['auc_conf'] - 0.05, confounder)

    def test_cleanNeverBeatsConfounded(self):
        rows = self.frame[self.frame['p'] >= 50]
        self.assertTrue((rows['auc_clean'] <= rows['auc_conf'] + 0.02).all())

    def test_shapTrendSigns(self):
        corr = self.statistics.correlations[('tag', 'shap')]
        self.assertGreater(corr[Metric.CS], 0.3)
        self.assertLess(corr[Metric.NCC], -0.3)

    def test_tagEasierThanLines(self):
        high = self.means[self.means.index.get_level_values('p') >= 50]
        tag = high.loc['tag']['cs'].mean()
        lines = high.loc['lines']['cs'].mean()
        self.assertGreater(tag, lines)
