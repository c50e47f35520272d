'''
========================================================================
        ╦  ╔═╗  ╔═╗┌─┐┌─┐┬ ┬┌─┐  ╔═╗┌─┐┬ ┬
        ║   ═╣  ║  ├─┤│  ├─┤├┤   ╚═╗├─┘└┬┘
        ╩═╝╚═╝  ╚═╝┴ ┴└─┘┴ ┴└─┘  ╚═╝┴   ┴
========================================================================
# Author: L3 Cache Spy Developers
# Permissions and Citation: Refer to the README file.
'''

# Import necessary libraries for the plot-data tables.
import logging
import pandas as pd
from ConfigsSettings import LoadConfigs, ConfigurationError

# Use module logger so messages go through Python's logging system.
logger = logging.getLogger(__name__)

configs = LoadConfigs()  # Load the configuration (configs.yaml over the defaults).
VERBOSE = configs.get("verbose", False)  # Get the verbose setting from the configuration.


class ReportHelper(object):
  r'''
  A helper class for plot-data tables.
  Builds pandas frames for memorygrams, the timer histogram and evaluation reports.
  '''

  def __init__(self, trialsPerSite=None, runConfigs=None):
    r'''
    Initialize the ReportHelper.

    Parameters:
      trialsPerSite (int): Trials per site exported as memorygram plot data.
      runConfigs (dict): Configuration the default is read from (report.memorygramTrials).
    '''
    runConfigs = runConfigs if (runConfigs is not None) else configs  # Fall back to the module configuration.
    self.trialsPerSite = int(trialsPerSite if (trialsPerSite is not None) else runConfigs["report"]["memorygramTrials"])
    if (self.trialsPerSite < 0):
      raise ConfigurationError(f"memorygramTrials cannot be negative: {self.trialsPerSite}")

  def MemorygramFrame(self, memorygrams):
    """Long table (site, trial, index, timeS, ticks) of the first trials of every site."""
    rows = []
    for memorygram in memorygrams:
      if (memorygram.trial >= self.trialsPerSite):
        continue  # Only the first trials are plotted.
      period = 1.0 / memorygram.samplingRateHz if (memorygram.samplingRateHz > 0) else 0.0
      for index, ticks in enumerate(memorygram.samples):
        rows.append((memorygram.siteId, memorygram.trial, index, index * period, ticks))
    return pd.DataFrame(rows, columns=["site", "trial", "index", "timeS", "ticks"])

  def TimerHistogramFrame(self, characterization):
    histogram = characterization["histogram"]
    edges = histogram["edges"]  # One more edge than bins.
    return pd.DataFrame({
      "binLow"   : edges[:-1],
      "binHigh"  : edges[1:],
      "hitCount" : histogram["hitCounts"],
      "missCount": histogram["missCounts"],
    })

  def PerClassFrame(self, report):
    """One row per class: label, precision, recall, f1, support."""
    rows = [
      (int(label), values["precision"], values["recall"], values["f1"], values["support"])
      for label, values in report["perClass"].items()
    ]
    rows.sort(key=lambda row: row[0])  # JSON keys are strings; order numerically.
    return pd.DataFrame(rows, columns=["label", "precision", "recall", "f1", "support"])

  def ConfusionFrame(self, report):
    """Long-format confusion matrix: trueLabel, predictedLabel, count."""
    labels = report["labels"]
    rows = [
      (labels[i], labels[j], count)
      for i, row in enumerate(report["confusion"])
      for j, count in enumerate(row)
    ]
    return pd.DataFrame(rows, columns=["trueLabel", "predictedLabel", "count"])

  def SummaryFrame(self, namedReports):
    """One row per (name, report dict) pair."""
    rows = []
    for name, report in namedReports:
      sensitive = report.get("sensitiveMacro") or {}  # Only open-world reports have it.
      rows.append({
        "report"          : name,
        "mode"            : report["mode"],
        "classifier"      : report["classifier"]["kind"],
        "accuracy"        : report["accuracy"],
        "macroPrecision"  : report["macro"]["precision"],
        "macroRecall"     : report["macro"]["recall"],
        "macroF1"         : report["macro"]["f1"],
        "sensitiveMacroF1": sensitive.get("f1"),
      })
    columns = ["report", "mode", "classifier", "accuracy", "macroPrecision", "macroRecall", "macroF1",
               "sensitiveMacroF1"]
    return pd.DataFrame(rows, columns=columns)


if (__name__ == "__main__"):
  # Example usage of the ReportHelper class on a two-class report.
  report = {"labels": [0, 1], "confusion": [[8, 2], [4, 6]]}
  print(ReportHelper().ConfusionFrame(report))
