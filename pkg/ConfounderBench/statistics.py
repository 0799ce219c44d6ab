from enum import Enum

import numpy as np
import pandas as pd
import plotly.graph_objects as go
from tabulate import tabulate

from .metrics import optionalPearson


class Metric(Enum):
    """Columns of the sweep results summarised over seeds."""

    AUC_CONF = 'auc_conf'
    AUC_CLEAN = 'auc_clean'
    CS = 'cs'
    NCC = 'ncc'


MetricNames = {
    Metric.AUC_CONF: 'AUC (confounded test)',
    Metric.AUC_CLEAN: 'AUC (clean test)',
    Metric.CS: 'Confounder Sensitivity',
    Metric.NCC: 'Explanation NCC'}

FallbackColumns = {
    Metric.CS: 'cs_fallback',
    Metric.NCC: 'ncc_fallback'}

# AUCs describe the classifier, not the explainer
CellMetrics = (Metric.AUC_CONF, Metric.AUC_CLEAN)


class Statistics(object):

    title = "Trend Statistics"

    def __init__(self, frame):
        self.frame = frame
        self.confounders = list(pd.unique(frame['confounder']))
        self.explainers = list(pd.unique(frame['explainer']))

    def __str__(self):
        if not hasattr(self, 'result'):
            return 'Rows: %d' % len(self.frame)
        return self.summary()

    def checkCalculated(self):
        if not hasattr(self, 'result'):
            raise Exception(
                'Statistics.calculate() should be run before calling summary()')

    def summary(self, tableFormat="fancy_grid", precision='.3f'):
        """Correlation of seed-averaged CS and NCC with p per confounder and explainer."""
        self.checkCalculated()
        headers = ['Confounder', 'Explainer', 'corr(CS, p)', 'corr(NCC, p)']
        table = []
        for (confounder, explainer), corr in sorted(self.correlations.items()):
            table.append([
                confounder, explainer,
                formatValue(corr[Metric.CS], precision),
                formatValue(corr[Metric.NCC], precision)])
        return tabulate(table, headers=headers, tablefmt=tableFormat)

    def correlationTable(self, confounder, tableFormat="fancy_grid", precision='.3f'):
        """Rows corr(CS, p) and corr(NCC, p), one column per explainer."""
        self.checkCalculated()
        table = []
        for metric in (Metric.CS, Metric.NCC):
            row = ['corr(%s, p)' % metric.name]
            for explainer in self.explainers:
                corr = self.correlations.get((confounder, explainer))
                row.append(formatValue(corr[metric] if corr else float('nan'), precision))
            table.append(row)
        return tabulate(table, headers=['Metric'] + self.explainers, tablefmt=tableFormat)

    def trendSummary(self, tableFormat="fancy_grid", precision='.3f'):
        """Seed-averaged metrics for every confounder, explainer and p."""
        self.checkCalculated()
        headers = ['Confounder', 'Explainer', 'p'] + [MetricNames[m] for m in Metric]
        table = []
        for key, row in self.trends.iterrows():
            table.append(list(key) + [formatValue(row[m.value], precision) for m in Metric])
        return tabulate(table, headers=headers, tablefmt=tableFormat)

    def calculateTrends(self):
        columns = [m.value for m in Metric]
        return self.frame.groupby(['confounder', 'explainer', 'p'])[columns].mean()

    def calculateCorrelation(self, rows, metric):
        fallback = FallbackColumns[metric]
        pooled = rows[rows[fallback] == 0]
        if pooled[metric.value].notna().sum() == 0:
            pooled = rows
        means = pooled.groupby('p')[metric.value].mean().dropna()
        return optionalPearson(means.index.to_numpy(dtype=float), means.to_numpy())

    def calculateCorrelations(self):
        correlations = {}
        for (confounder, explainer), rows in self.frame.groupby(['confounder', 'explainer']):
            correlations[(confounder, explainer)] = {
                metric: self.calculateCorrelation(rows, metric)
                for metric in (Metric.CS, Metric.NCC)}
        return correlations

    def calculate(self):
        self.trends = self.calculateTrends()
        self.correlations = self.calculateCorrelations()
        self.result = {
            metric: self.trends[metric.value] for metric in Metric}

    def createTrendData(self, metric):
        self.checkCalculated()
        data = []
        values = self.result[metric]
        for confounder in self.confounders:
            explainers = self.explainers[:1] if metric in CellMetrics else self.explainers
            for explainer in explainers:
                try:
                    series = values.loc[(confounder, explainer)]
                except KeyError:
                    continue
                name = confounder if metric in CellMetrics else '%s / %s' % (confounder, explainer)
                data.append(go.Scatter(
                    x=series.index.to_numpy(),
                    y=series.to_numpy(),
                    mode='lines+markers',
                    name=name))
        return data

    def createTrendPlot(self, metric):
        fig = go.Figure(data=self.createTrendData(metric))
        fig.update_layout(
            xaxis_title='Confounded positives p (%)',
            yaxis_title=MetricNames[metric])
        return fig


def formatValue(value, precision='.3f'):
    if value is None or np.isnan(value):
        return 'n/a'
    return format(value, precision)
