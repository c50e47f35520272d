'''
========================================================================
        ╦  ╔═╗  ╔═╗┌─┐┌─┐┬ ┬┌─┐  ╔═╗┌─┐┬ ┬
        ║   ═╣  ║  ├─┤│  ├─┤├┤   ╚═╗├─┘└┬┘
        ╩═╝╚═╝  ╚═╝┴ ┴└─┘┴ ┴└─┘  ╚═╝┴   ┴
========================================================================
# Author: L3 Cache Spy Developers
# Permissions and Citation: Refer to the README file.
'''

# Import necessary libraries for the on-disk formats.
import os, json, glob, logging
import pandas as pd
from ConfigsSettings import LoadConfigs, ConfigurationError, DataError
from ChannelSimHelper import Memorygram
from FingerprintHelper import Dataset, FeatureVector

# Use module logger so messages go through Python's logging system.
logger = logging.getLogger(__name__)

configs = LoadConfigs()  # Load the configuration (configs.yaml over the defaults).
VERBOSE = configs.get("verbose", False)  # Get the verbose setting from the configuration.

MEMORYGRAMS_DIR = "memorygrams"
OPEN_DIR = "open"
FEATURES_DIR = "features"
REPORTS_DIR = "reports"
MANIFEST_NAME = "manifest.json"


class StorageHelper(object):
  r'''
  A helper class for the run directory.
  Memorygrams are JSONL (one trace per line), features are CSV and reports are JSON.
  '''

  def __init__(self, outputDir=None, runConfigs=None):
    r'''
    Initialize the StorageHelper.

    Parameters:
      outputDir (str): Run directory; defaults to outputPath.
      runConfigs (dict): Configuration the default directory is read from.
    '''
    runConfigs = runConfigs if (runConfigs is not None) else configs  # Fall back to the module configuration.
    self.outputDir = outputDir if (outputDir is not None) else runConfigs["outputPath"]

  def RunPath(self, *parts):
    """Path inside the run directory."""
    return os.path.join(self.outputDir, *parts)

  def EnsureDir(self, path):
    """Create a directory; unwritable locations are configuration errors."""
    try:
      os.makedirs(path, exist_ok=True)
    except OSError as e:
      raise ConfigurationError(f"Cannot create output directory {path}: {e}")
    return path

  def MemorygramPath(self, siteId, openWorld=False):
    folder = OPEN_DIR if openWorld else MEMORYGRAMS_DIR  # Background sites live apart.
    return self.RunPath(folder, f"site_{siteId}.jsonl")

  def WriteMemorygrams(self, path, memorygrams):
    """One JSON object per line, newline-terminated."""
    self.EnsureDir(os.path.dirname(path) or ".")
    try:
      with open(path, "w", encoding="utf-8", newline="\n") as f:
        for memorygram in memorygrams:
          f.write(memorygram.ToJsonLine() + "\n")
    except OSError as e:
      raise ConfigurationError(f"Cannot write {path}: {e}")
    if (VERBOSE):
      logger.debug(f"Wrote {len(memorygrams)} memorygrams to {path}.")

  def ReadMemorygrams(self, path):
    try:
      with open(path, "r", encoding="utf-8") as f:
        lines = [line for line in f.read().splitlines() if line.strip()]  # Blank lines are ignored.
    except OSError as e:
      raise DataError(f"Cannot read {path}: {e}")
    memorygrams = []
    for number, line in enumerate(lines, start=1):
      try:
        memorygrams.append(Memorygram.FromRecord(json.loads(line)))
      except (ValueError, KeyError, TypeError) as e:
        raise DataError(f"{path}:{number}: malformed memorygram record ({e}).")
    return memorygrams

  def ListMemorygramFiles(self, inputs):
    """Expand files and directories into a sorted list of JSONL files."""
    files = []
    for item in inputs:
      if (os.path.isdir(item)):
        files.extend(sorted(glob.glob(os.path.join(item, "*.jsonl"))))
      elif (os.path.isfile(item)):
        files.append(item)
      else:
        raise DataError(f"Input not found: {item}")
    return files

  def ReadAllMemorygrams(self, inputs):
    """Every memorygram under the given files and directories, in file order."""
    memorygrams = []
    for path in self.ListMemorygramFiles(inputs):
      memorygrams.extend(self.ReadMemorygrams(path))
    return memorygrams

  def WriteJson(self, path, data):
    self.EnsureDir(os.path.dirname(path) or ".")
    try:
      with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(json.dumps(data, indent=2, sort_keys=True) + "\n")
    except OSError as e:
      raise ConfigurationError(f"Cannot write {path}: {e}")

  def ReadJson(self, path):
    try:
      with open(path, "r", encoding="utf-8") as f:
        return json.load(f)
    except OSError as e:
      raise DataError(f"Cannot read {path}: {e}")
    except json.JSONDecodeError as e:
      raise DataError(f"{path} is not valid JSON: {e}")

  def WriteFeaturesCsv(self, path, dataset):
    r'''
    Write a feature matrix as CSV with the header `label, f0 .. f{d-1}`.

    Parameters:
      path (str): Output file.
      dataset (Dataset): Vectors to write, one row each.
    '''
    if (len(dataset) == 0):
      raise DataError("No feature vectors to write.")
    X = dataset.X
    frame = pd.DataFrame(X, columns=[f"f{i}" for i in range(X.shape[1])])
    frame.insert(0, "label", dataset.y)  # Label first.
    self.WriteFrame(path, frame)

  def ReadFeaturesCsv(self, path):
    """Read a feature CSV back into a Dataset; values round-trip exactly."""
    try:
      frame = pd.read_csv(path, float_precision="round_trip")
    except (OSError, pd.errors.EmptyDataError, pd.errors.ParserError) as e:
      raise DataError(f"Cannot read features from {path}: {e}")
    if ((len(frame.columns) < 2) or (frame.columns[0] != "label")):
      raise DataError(f"{path} must start with a `label` column followed by f0..f(d-1).")
    expected = [f"f{i}" for i in range(len(frame.columns) - 1)]
    if (list(frame.columns[1:]) != expected):
      raise DataError(f"{path} feature columns must be named f0..f{len(expected) - 1}.")
    if (frame.empty):
      raise DataError(f"{path} holds no feature rows.")
    stem = os.path.splitext(os.path.basename(path))[0]  # Source ids are file:row.
    vectors = [
      FeatureVector(tuple(float(v) for v in row[1:]), int(row[0]), f"{stem}:{index}")
      for index, row in enumerate(frame.itertuples(index=False, name=None))
    ]
    return Dataset(vectors)

  def WriteFrame(self, path, frame):
    self.EnsureDir(os.path.dirname(path) or ".")
    try:
      frame.to_csv(path, index=False, lineterminator="\n")
    except OSError as e:
      raise ConfigurationError(f"Cannot write {path}: {e}")


if (__name__ == "__main__"):
  # Example usage of the StorageHelper class.
  storage = StorageHelper()
  print(storage.MemorygramPath(0))  # Where site 0 of the closed world is stored.
  print(storage.MemorygramPath(100000, openWorld=True))  # Where the first background site is stored.
