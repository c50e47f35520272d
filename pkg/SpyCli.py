'''
========================================================================
        ╦  ╔═╗  ╔═╗┌─┐┌─┐┬ ┬┌─┐  ╔═╗┌─┐┬ ┬
        ║   ═╣  ║  ├─┤│  ├─┤├┤   ╚═╗├─┘└┬┘
        ╩═╝╚═╝  ╚═╝┴ ┴└─┘┴ ┴└─┘  ╚═╝┴   ┴
========================================================================
# Author: L3 Cache Spy Developers
# Permissions and Citation: Refer to the README file.
'''

# Import necessary libraries for the command line.
import os, sys, math, argparse, logging
from logging.handlers import RotatingFileHandler
from datetime import datetime
from ConfigsSettings import (
  LoadConfigs, MergeConfigs, ApplyOverride, ConfigurationError, DataError, CalibrationError,
)
from GpuExecHelper import GpuExecHelper
from VictimGenHelper import CheckParamRanges, StreamRng
from ChannelSimHelper import AttackConfig, ChannelSimHelper
from FingerprintHelper import NON_SENSITIVE, ClassifierSpec, FingerprintHelper
from StorageHelper import StorageHelper, MEMORYGRAMS_DIR, OPEN_DIR, FEATURES_DIR, REPORTS_DIR, MANIFEST_NAME
from ReportHelper import ReportHelper

# Use module logger so messages go through Python's logging system.
logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_CALIBRATION = 4

# Attack keys written by `calibrate` and read back through --calibration.
CALIBRATED_KEYS = ("dispatchOverheadS", "cycleTimeS", "ticksPerCycle")

# Run-environment keys left out of the manifest so it does not depend on where or how fast a run went.
ENVIRONMENT_KEYS = ("outputPath", "logPath", "logMaxBytes", "logBackupCount", "jobs", "verbose")


def ConfigureLogging(runConfigs):
  """Rotating file log under logPath plus a console handler, without duplicating handlers."""
  verbose = runConfigs.get("verbose", False)
  # Create the log directory if it does not exist.
  logDir = runConfigs.get("logPath", "Logs")
  os.makedirs(logDir, exist_ok=True)
  # One log file per day.
  timestamp = datetime.now().strftime("%Y_%m_%d")
  logFilePath = os.path.join(logDir, f"SpyCli_Log_{timestamp}.log")

  # Configure the root logger.
  rootLogLevel = logging.DEBUG if verbose else logging.INFO
  rootLogger = logging.getLogger()
  rootLogger.setLevel(rootLogLevel)
  logFormatter = logging.Formatter("%(asctime)s [%(levelname)s] %(name)s: %(message)s")

  # Add the rotating file handler once per file.
  fileHandlerExists = any(
    getattr(h, "baseFilename", None) == os.path.abspath(logFilePath)
    for h in rootLogger.handlers
  )
  if (not fileHandlerExists):
    fileHandler = RotatingFileHandler(
      logFilePath,
      maxBytes=int(runConfigs.get("logMaxBytes", 5 * 1024 * 1024)),
      backupCount=int(runConfigs.get("logBackupCount", 5)),
      encoding="utf-8",
    )
    fileHandler.setLevel(rootLogLevel)
    fileHandler.setFormatter(logFormatter)
    rootLogger.addHandler(fileHandler)

  # Add a console handler once.
  if (not any(type(h) is logging.StreamHandler for h in rootLogger.handlers)):
    streamHandler = logging.StreamHandler()
    streamHandler.setLevel(rootLogLevel)
    streamHandler.setFormatter(logFormatter)
    rootLogger.addHandler(streamHandler)


def BuildRunConfigs(configPath=None, calibrationPath=None, overrides=(), jobs=None, outputPath=None, verbose=False):
  r'''
  Assemble the run configuration.

  Precedence, lowest first: preset defaults, config file, calibration file, --set overrides.
  '''
  runConfigs = LoadConfigs(configPath)
  if (calibrationPath):
    try:
      calibration = StorageHelper(runConfigs=runConfigs).ReadJson(calibrationPath)
    except DataError as e:
      # An unreadable calibration file is a configuration problem.
      raise ConfigurationError(str(e))
    constants = calibration.get("attack", calibration)  # Accept the full file or the bare constants.
    runConfigs = MergeConfigs(runConfigs, {"attack": {k: constants[k] for k in CALIBRATED_KEYS if (k in constants)}})
  for assignment in overrides or ():
    ApplyOverride(runConfigs, assignment)
  if (jobs is not None):
    runConfigs["jobs"] = int(jobs)
  if (outputPath is not None):
    runConfigs["outputPath"] = outputPath
  if (verbose):
    runConfigs["verbose"] = True
  return runConfigs


def ValidateRunConfig(runConfigs):
  r'''
  Cross-field validation before any run.

  Returns:
    AttackConfig: The resolved attack configuration.
  '''
  try:
    attackConfig = AttackConfig.FromConfigs(runConfigs)
    GpuExecHelper(attackConfig.gpu).ValidateLayout(attackConfig.layout)
    corpus = runConfigs["corpus"]
    pipeline = runConfigs["pipeline"]
    ClassifierSpec.FromConfigs(runConfigs)
    CheckParamRanges(corpus.get("paramRanges"), runConfigs)
    sites, trials = int(corpus["sites"]), int(corpus["trials"])
    openSites = int(corpus.get("openSites", 0))
    openSiteIdBase = int(corpus.get("openSiteIdBase", 100000))
    segments = int(pipeline["segmentsPerHalf"])
    folds = int(pipeline["folds"])
    viewportScale = float(corpus.get("viewportScale", 1.0))
  except (KeyError, TypeError) as e:
    raise ConfigurationError(f"Incomplete or malformed configuration: {e}")

  if (sites < 1 or trials < 1):
    raise ConfigurationError(f"corpus.sites and corpus.trials must be at least 1: {sites}, {trials}")
  if (openSites < 0):
    raise ConfigurationError("corpus.openSites must be non-negative.")
  if (openSites > 0 and openSiteIdBase < sites):
    # Background ids would reuse closed-world site ids.
    raise ConfigurationError(
      f"corpus.openSiteIdBase ({openSiteIdBase}) must be at least corpus.sites ({sites}) when openSites > 0."
    )
  if (not (0 < viewportScale <= 1)):
    raise ConfigurationError(f"corpus.viewportScale must be in (0, 1]: {viewportScale}")
  if (segments < 1):
    raise ConfigurationError(f"pipeline.segmentsPerHalf must be at least 1: {segments}")
  if (folds < 2):
    raise ConfigurationError(f"pipeline.folds must be at least 2: {folds}")
  if (int(runConfigs.get("jobs", 1)) < 1):
    raise ConfigurationError("jobs must be at least 1.")

  # Every trace must fill the feature windows.
  expectedSamples = math.floor(attackConfig.durationS * ChannelSimHelper(attackConfig, runConfigs).EffectiveSamplingRate())
  if (expectedSamples < 2 * segments):
    raise ConfigurationError(
      f"About {expectedSamples} samples per trace cannot fill {2 * segments} feature segments."
    )
  return attackConfig


def CmdCollect(runConfigs):
  r'''
  Collect memorygrams for every closed-world site (and open-world site, if any).

  Writes one JSONL file per site plus manifest.json under outputPath.

  Returns:
    dict: The manifest.
  '''
  attackConfig = ValidateRunConfig(runConfigs)
  corpus = runConfigs["corpus"]
  storage = StorageHelper(runConfigs=runConfigs)
  outputDir = storage.EnsureDir(storage.outputDir)
  corpusSeed = int(corpus["corpusSeed"])
  paramRanges = CheckParamRanges(corpus.get("paramRanges"), runConfigs)
  viewportScale = float(corpus.get("viewportScale", 1.0))
  trials = int(corpus["trials"])

  # Closed-world sites get every trial; background sites get one each.
  closedIds = list(range(int(corpus["sites"])))
  openIds = [int(corpus.get("openSiteIdBase", 100000)) + i for i in range(int(corpus.get("openSites", 0)))]
  siteTrials = [(siteId, trials) for siteId in closedIds] + [(siteId, 1) for siteId in openIds]

  logger.info(f"Collecting {len(closedIds)} x {trials} closed-world and {len(openIds)} open-world traces.")
  channel = ChannelSimHelper(attackConfig, runConfigs, corpusSeed, paramRanges)
  results = channel.CollectSites(siteTrials, viewportScale, maxJobs=int(runConfigs.get("jobs", 1)))

  files = {"closed": [], "open": []}
  openSet = set(openIds)
  for (siteId, _), memorygrams in zip(siteTrials, results):
    openWorld = (siteId in openSet)
    path = storage.MemorygramPath(siteId, openWorld)
    storage.WriteMemorygrams(path, memorygrams)
    files["open" if openWorld else "closed"].append(os.path.relpath(path, outputDir).replace(os.sep, "/"))

  manifest = {
    "configHash"  : attackConfig.ConfigHash(),
    "attackConfig": attackConfig.ToDict(),
    "seeds"       : {"corpusSeed": corpusSeed, "trialSeeds": list(range(trials))},
    "counts"      : {
      "sites"      : len(closedIds),
      "trials"     : trials,
      "memorygrams": len(closedIds) * trials,
      "openSites"  : len(openIds),
    },
    "files"       : files,
    "runConfigs"  : {k: v for k, v in runConfigs.items() if (k not in ENVIRONMENT_KEYS)},
  }
  storage.WriteJson(storage.RunPath(MANIFEST_NAME), manifest)
  logger.info(f"Wrote {manifest['counts']['memorygrams']} memorygrams to {outputDir}.")
  return manifest


def CmdFeatures(runConfigs, inputs=None, segments=None, csvPath=None, nonSensitive=False):
  r'''
  Extract one feature row per memorygram and write the CSV.

  Traces too short for the segments are reported and skipped; a DataError is raised when every
  trace is skipped or there is no input.

  Returns:
    dict: rows written, rows skipped and the CSV path.
  '''
  storage = StorageHelper(runConfigs=runConfigs)
  fingerprint = FingerprintHelper(segmentsPerHalf=segments, runConfigs=runConfigs)
  if (not inputs):
    inputs = [storage.RunPath(OPEN_DIR if nonSensitive else MEMORYGRAMS_DIR)]
  if (csvPath is None):
    csvPath = storage.RunPath(FEATURES_DIR, "open.csv" if nonSensitive else "closed.csv")

  memorygrams = storage.ReadAllMemorygrams(inputs)
  if (not memorygrams):
    raise DataError(f"No memorygrams found in {inputs}.")

  dataset, skipped = fingerprint.ExtractDataset(memorygrams)
  if (nonSensitive):
    dataset = dataset.WithLabel(NON_SENSITIVE)  # Background rows share one label.
  storage.WriteFeaturesCsv(csvPath, dataset)
  logger.info(f"Wrote {len(dataset)} feature rows to {csvPath} ({skipped} skipped).")
  return {"rows": len(dataset), "skipped": skipped, "csv": csvPath}


def CmdEvaluate(runConfigs, featurePaths=None, mode="closed", openPath=None, testPath=None, reportPath=None):
  r'''
  Evaluate a classifier and write the report JSON plus per-class and confusion CSVs.

  Parameters:
    runConfigs (dict): Run configuration (pipeline block).
    featurePaths (list): Training / closed-world feature CSVs; several are concatenated.
    mode (str): closed, open or transfer.
    openPath (str): Open-world CSV, required for mode open.
    testPath (str): Test CSV, required for mode transfer.
    reportPath (str): Report JSON path.

  Returns:
    EvalReport: The written report.
  '''
  storage = StorageHelper(runConfigs=runConfigs)
  fingerprint = FingerprintHelper(runConfigs=runConfigs)
  featurePaths = featurePaths or [storage.RunPath(FEATURES_DIR, "closed.csv")]
  dataset = None
  for path in featurePaths:
    part = storage.ReadFeaturesCsv(path)
    dataset = part if (dataset is None) else dataset.Concat(part)

  if (mode == "closed"):
    report = fingerprint.CrossValidate(dataset)
  elif (mode == "open"):
    if (not openPath):
      raise ConfigurationError("Open-world evaluation needs an open-world feature CSV.")
    openSet = storage.ReadFeaturesCsv(openPath).WithLabel(NON_SENSITIVE)
    report = fingerprint.EvaluateOpenWorld(dataset, openSet)
  elif (mode == "transfer"):
    if (not testPath):
      raise ConfigurationError("Transfer evaluation needs a test feature CSV.")
    report = fingerprint.EvaluateTransfer(dataset, storage.ReadFeaturesCsv(testPath))
  else:
    raise ConfigurationError(f"Unknown evaluation mode: {mode}")

  kind = fingerprint.spec.kind
  if (reportPath is None):
    reportPath = storage.RunPath(REPORTS_DIR, f"{mode}_{kind}.json")
  reportDict = report.ToDict()
  storage.WriteJson(reportPath, reportDict)
  # Plot tables sit next to the report.
  reports = ReportHelper(runConfigs=runConfigs)
  stem = os.path.splitext(reportPath)[0]
  storage.WriteFrame(f"{stem}_perclass.csv", reports.PerClassFrame(reportDict))
  storage.WriteFrame(f"{stem}_confusion.csv", reports.ConfusionFrame(reportDict))
  logger.info(f"{mode} {kind}: macro F1 {report.macro['f1']:.4f}, accuracy {report.accuracy:.4f} -> {reportPath}")
  return report


def CmdCalibrate(runConfigs, outPath=None):
  """Solve the rate anchors for the configured geometry and write the calibration JSON."""
  attackConfig = AttackConfig.FromConfigs(runConfigs)
  targets = runConfigs["calibration"]
  result = ChannelSimHelper(attackConfig, runConfigs).Calibrate(targets)

  calibration = {
    "attack"      : {key: result[key] for key in CALIBRATED_KEYS},
    "verification": {key: value for key, value in result.items() if (key not in CALIBRATED_KEYS)},
    "targets"     : dict(targets),
    "geometry"    : attackConfig.geometry.ToDict(),
    "gpu"         : attackConfig.gpu.ToDict(),
  }
  storage = StorageHelper(runConfigs=runConfigs)
  if (outPath is None):
    outPath = storage.RunPath("calibration.json")
  storage.WriteJson(outPath, calibration)
  logger.info(
    f"Calibration: {result['basicRateHz']:.2f} Hz basic, {result['parallelRateHz']:.2f} Hz parallel, "
    f"probe mean {result['probeTicksMean']:.0f} ticks -> {outPath}"
  )
  return calibration


def CmdReport(runConfigs, memorygramsDir=None, reportsDir=None, plotsDir=None):
  r'''
  Emit plot-data CSVs: memorygrams, the timer histogram and a summary of evaluation reports.

  Returns:
    dict: Paths of the written files keyed by kind.
  '''
  storage = StorageHelper(runConfigs=runConfigs)
  reports = ReportHelper(runConfigs=runConfigs)
  memorygramsDir = memorygramsDir or storage.RunPath(MEMORYGRAMS_DIR)
  reportsDir = reportsDir or storage.RunPath(REPORTS_DIR)
  plotsDir = storage.EnsureDir(plotsDir or storage.RunPath("plots"))
  written = {}

  if (os.path.isdir(memorygramsDir)):
    frame = reports.MemorygramFrame(storage.ReadAllMemorygrams([memorygramsDir]))
    written["memorygrams"] = os.path.join(plotsDir, "memorygrams.csv")
    storage.WriteFrame(written["memorygrams"], frame)
  else:
    logger.info(f"No memorygram directory at {memorygramsDir}; skipping memorygram plot data.")

  attackConfig = AttackConfig.FromConfigs(runConfigs)
  timerSamples = int(runConfigs["calibration"]["timerSamples"])
  characterization = GpuExecHelper(attackConfig.gpu).CharacterizeTimer(
    attackConfig.timer,
    attackConfig.geometry,
    timerSamples,
    StreamRng(runConfigs["corpus"]["corpusSeed"], "report", "timer"),
  )
  written["timerHistogram"] = os.path.join(plotsDir, "timer_histogram.csv")
  storage.WriteFrame(written["timerHistogram"], reports.TimerHistogramFrame(characterization))
  written["timerSummary"] = os.path.join(plotsDir, "timer_summary.json")
  storage.WriteJson(written["timerSummary"], {
    "threshold": characterization["threshold"],
    "errorRate": characterization["errorRate"],
    "samples"  : timerSamples,
  })

  if (os.path.isdir(reportsDir)):
    names = sorted(name for name in os.listdir(reportsDir) if name.endswith(".json"))
    namedReports = [(name[:-5], storage.ReadJson(os.path.join(reportsDir, name))) for name in names]
    written["summary"] = os.path.join(plotsDir, "summary.csv")
    storage.WriteFrame(written["summary"], reports.SummaryFrame(namedReports))
  else:
    logger.info(f"No report directory at {reportsDir}; skipping the summary table.")
  return written


def BuildParser():
  common = argparse.ArgumentParser(add_help=False)
  common.add_argument("--config", help="YAML or JSON configuration file.")
  common.add_argument("--set", dest="overrides", action="append", default=[], metavar="PATH=VALUE",
                      help="Override one configuration value, e.g. corpus.sites=20 (repeatable).")
  common.add_argument("--calibration", help="Calibration JSON written by the calibrate command.")
  common.add_argument("--jobs", type=int, help="Worker processes.")
  common.add_argument("--output", help="Output directory (overrides outputPath).")
  common.add_argument("--verbose", action="store_true", help="Verbose logging.")

  parser = argparse.ArgumentParser(
    prog="SpyCli.py",
    description="GPU L3 cache occupancy channel simulator and fingerprinting pipeline.",
  )
  subparsers = parser.add_subparsers(dest="command", required=True)

  subparsers.add_parser("collect", parents=[common], help="Collect memorygrams for the configured corpus.")

  features = subparsers.add_parser("features", parents=[common], help="Extract feature CSVs from memorygrams.")
  features.add_argument("--input", nargs="+", help="Memorygram JSONL files or directories.")
  features.add_argument("--segments", type=int, help="Segments per half (4 or 8).")
  features.add_argument("--csv", help="Output feature CSV.")
  features.add_argument("--non-sensitive", action="store_true", help="Label every row as open-world background.")

  evaluate = subparsers.add_parser("evaluate", parents=[common], help="Cross-validate or transfer-test a classifier.")
  evaluate.add_argument("--features", nargs="+", help="Feature CSV(s); several are concatenated.")
  evaluate.add_argument("--mode", choices=("closed", "open", "transfer"), default="closed")
  evaluate.add_argument("--open", help="Open-world feature CSV (mode open).")
  evaluate.add_argument("--test", help="Test feature CSV (mode transfer).")
  evaluate.add_argument("--classifier", choices=("KNN", "RF"), help="Classifier kind.")
  evaluate.add_argument("--report", help="Output report JSON.")

  calibrate = subparsers.add_parser("calibrate", parents=[common], help="Solve the sampling-rate calibration.")
  calibrate.add_argument("--out", help="Output calibration JSON.")

  report = subparsers.add_parser("report", parents=[common], help="Emit plot-data CSVs.")
  report.add_argument("--memorygrams", help="Memorygram directory.")
  report.add_argument("--reports", help="Directory of report JSONs.")
  report.add_argument("--plots", help="Output directory for plot data.")
  return parser


def _LogFailure(prefix, error, verbose):
  if (verbose):
    logger.exception(f"{prefix}: {error}")
  else:
    logger.error(f"{prefix}: {error}")


def main(argv=None):
  """Run one subcommand and return its exit code (argparse usage errors exit with 2)."""
  parser = BuildParser()
  args = parser.parse_args(argv)
  if (args.command == "evaluate"):
    if (args.mode == "open" and not args.open):
      parser.error("--mode open requires --open <csv>")
    if (args.mode == "transfer" and not args.test):
      parser.error("--mode transfer requires --test <csv>")

  try:
    overrides = list(args.overrides)
    if (getattr(args, "classifier", None)):
      overrides.append(f"pipeline.classifier.kind={args.classifier}")
    runConfigs = BuildRunConfigs(args.config, args.calibration, overrides, args.jobs, args.output, args.verbose)
    ConfigureLogging(runConfigs)

    if (args.command == "collect"):
      CmdCollect(runConfigs)
    elif (args.command == "features"):
      CmdFeatures(runConfigs, args.input, args.segments, args.csv, args.non_sensitive)
    elif (args.command == "evaluate"):
      CmdEvaluate(runConfigs, args.features, args.mode, args.open, args.test, args.report)
    elif (args.command == "calibrate"):
      CmdCalibrate(runConfigs, args.out)
    elif (args.command == "report"):
      CmdReport(runConfigs, args.memorygrams, args.reports, args.plots)
    return EXIT_OK
  except CalibrationError as e:
    _LogFailure("Calibration failed", e, args.verbose)
    return EXIT_CALIBRATION
  except DataError as e:
    _LogFailure("Data error", e, args.verbose)
    return EXIT_DATA
  except ConfigurationError as e:
    _LogFailure("Configuration error", e, args.verbose)
    return EXIT_CONFIG


if (__name__ == "__main__"):
  sys.exit(main())
