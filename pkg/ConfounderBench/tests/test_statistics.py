#!/usr/bin/env python3
import math
import unittest

import pandas as pd

from ConfounderBench.harness import CSV_COLUMNS
from ConfounderBench.statistics import Metric, Statistics, formatValue

P_GRID = (0, 20, 50, 80, 100)


def trendFrame(seeds=(0, 1)):
    """Gradient CS rises with p and its NCC falls; LIME stays flat."""
    rows = []
    for p in P_GRID:
        for seed in seeds:
            noise = 0.01 * seed
            rows.append(['tag', p, seed, 'gradient', 0.9, 0.9 - p / 1000.0,
                         p / 100.0 + noise, 10, 0, 1.0 - p / 100.0 + noise, 10, 0])
            rows.append(['tag', p, seed, 'lime', 0.9, 0.9 - p / 1000.0,
                         0.3, 10, 0, 0.7, 10, 0])
    return pd.DataFrame(rows, columns=CSV_COLUMNS)


class TestStatistics(unittest.TestCase):

    def test_correlations(self):
        s = Statistics(trendFrame())
        s.calculate()
        gradient = s.correlations[('tag', 'gradient')]
        self.assertAlmostEqual(gradient[Metric.CS], 1.0)
        self.assertAlmostEqual(gradient[Metric.NCC], -1.0)
        lime = s.correlations[('tag', 'lime')]
        self.assertTrue(math.isnan(lime[Metric.CS]))

    def test_trends(self):
        s = Statistics(trendFrame())
        s.calculate()
        self.assertEqual(len(s.trends), 2 * len(P_GRID))
        self.assertAlmostEqual(s.trends.loc[('tag', 'gradient', 50), 'cs'], 0.505)

    def test_fallbackRowsExcluded(self):
        frame = trendFrame()
        # a fallback pool at p = 100 with a misleading value
        frame.loc[(frame['p'] == 100) & (frame['explainer'] == 'gradient'), 'cs'] = 0.0
        frame.loc[(frame['p'] == 100) & (frame['explainer'] == 'gradient'), 'cs_fallback'] = 1
        s = Statistics(frame)
        s.calculate()
        self.assertAlmostEqual(s.correlations[('tag', 'gradient')][Metric.CS], 1.0)

    def test_onlyFallbackRows(self):
        frame = trendFrame()
        frame['ncc_fallback'] = 1
        s = Statistics(frame)
        s.calculate()
        self.assertAlmostEqual(s.correlations[('tag', 'gradient')][Metric.NCC], -1.0)

    def test_failedRowsIgnored(self):
        frame = trendFrame()
        frame.loc[frame['seed'] == 1, ['cs', 'ncc']] = float('nan')
        s = Statistics(frame)
        s.calculate()
        self.assertAlmostEqual(s.correlations[('tag', 'gradient')][Metric.CS], 1.0)

    def test_summary(self):
        s = Statistics(trendFrame())
        self.assertRaises(Exception, s.summary)
        s.calculate()
        summary = s.summary(tableFormat='simple')
        self.assertIn('gradient', summary)
        self.assertIn('-1.000', summary)
        self.assertIn('n/a', summary)
        self.assertIn('corr(CS, p)', s.correlationTable('tag'))
        self.assertIn('Confounder Sensitivity', s.trendSummary())

    def test_trendPlot(self):
        s = Statistics(trendFrame())
        s.calculate()
        self.assertEqual(len(s.createTrendPlot(Metric.CS).data), 2)
        self.assertEqual(len(s.createTrendPlot(Metric.AUC_CLEAN).data), 1)
        trace = s.createTrendData(Metric.CS)[0]
        self.assertEqual(list(trace.x), list(P_GRID))

    def test_formatValue(self):
        self.assertEqual(formatValue(float('nan')), 'n/a')
        self.assertEqual(formatValue(0.12345), '0.123')
        self.assertEqual(formatValue(0.5, '.1f'), '0.5')
