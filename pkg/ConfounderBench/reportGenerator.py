import os
from importlib import resources

import plotly

RESOURCE_PACKAGE = 'ConfounderBench.resources'


class ReportGenerator():
    report = '''
<html>
    <head>
        <meta charset="utf-8">
        <style>
            body{ margin:0 100px; background:whitesmoke; font-family:sans-serif; }
            table{ border-collapse:collapse; margin:1em 0; }
            td, th{ border:1px solid #ccc; padding:4px 8px; }
        </style>
    </head>
    <body>
        <div>'''

    def __init__(self, outputFolder):
        os.makedirs(outputFolder, exist_ok=True)
        self.outputFolder = outputFolder

    def addTitle(self, title):
        self.report += '\n<h1>' + title + '</h1>'

    def addHeading(self, heading):
        self.report += '\n<h2>' + heading + '</h2>'

    def getObjectDoc(self, obj):
        return self.readResource(type(obj).__name__ + '.html')

    def addDoc(self, obj):
        self.report += '\n' + self.getObjectDoc(obj)

    def addCustomDoc(self, filename):
        self.report += '\n' + self.readResource(filename)

    def addTable(self, table):
        self.report += '\n' + table

    def addPlot(self, plot, name):
        self.addHeading(name)
        plotUrl = name.replace(' ', '_') + '.html'
        plotly.offline.plot(
            plot,
            filename=os.path.join(self.outputFolder, plotUrl),
            auto_open=False)
        self.report += '''
        <iframe width="1000" height="550" frameborder="0" seamless="seamless" scrolling="no" \
src="''' + plotUrl + '''"></iframe>'''

    def generateReport(self):
        self.report += '''
        </div>
    </body>
</html>'''
        self.write('index.html', self.report)
        return os.path.join(self.outputFolder, 'index.html')

    def write(self, filename, data):
        with open(os.path.join(self.outputFolder, filename), 'w') as f:
            f.write(data)

    def readResource(self, filename):
        return resources.files(RESOURCE_PACKAGE).joinpath(filename).read_text(encoding='utf-8')
