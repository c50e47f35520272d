'''
========================================================================
        ╦  ╔═╗  ╔═╗┌─┐┌─┐┬ ┬┌─┐  ╔═╗┌─┐┬ ┬
        ║   ═╣  ║  ├─┤│  ├─┤├┤   ╚═╗├─┘└┬┘
        ╩═╝╚═╝  ╚═╝┴ ┴└─┘┴ ┴└─┘  ╚═╝┴   ┴
========================================================================
# Author: L3 Cache Spy Developers
# Permissions and Citation: Refer to the README file.
'''

import os, sys, json, hashlib, pytest, yaml
import pandas as pd

# Ensure Windows paths work.
ROOT = os.path.abspath(os.path.join(os.path.dirname(__file__), ".."))
if (ROOT not in sys.path):
  sys.path.insert(0, ROOT)
os.chdir(ROOT)

from ConfigsSettings import DEFAULT_CONFIGS
from FingerprintHelper import NON_SENSITIVE, Dataset, FingerprintHelper
from StorageHelper import StorageHelper
from SpyCli import main, BuildRunConfigs, CALIBRATED_KEYS, EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_CALIBRATION
from SimTestHelper import SMALL_INDEX_BITS, SMALL_FOOTPRINT_LINES, SmallGeometry, ChannelFor

# Explicit paths are used throughout, so the default run directory is never touched.
storage = StorageHelper()


@pytest.fixture(scope="module")
def configPath(tmp_path_factory):
  """Small-cache run configuration: 2 sites x 3 trials of 1 s, calibrated for the small geometry."""
  root = tmp_path_factory.mktemp("cli")
  calibration = ChannelFor(SmallGeometry()).Calibrate(DEFAULT_CONFIGS["calibration"])
  runConfigs = {
    "logPath"    : str(root / "Logs"),
    "cache"      : {"preset": "default", **SMALL_INDEX_BITS},
    "attack"     : {key: calibration[key] for key in CALIBRATED_KEYS},
    "corpus"     : {"sites": 2, "trials": 3, "durationS": 1.0, "paramRanges": {"footprintLines": SMALL_FOOTPRINT_LINES}},
    "pipeline"   : {"folds": 3, "classifier": {"trees": 10, "k": 1}},
    "calibration": {"timerSamples": 500},
  }
  path = root / "configs.yaml"
  with open(path, "w") as f:
    yaml.safe_dump(runConfigs, f)
  return str(path)


@pytest.fixture(scope="module")
def collected(configPath, tmp_path_factory):
  """Output directory of one collect run."""
  output = str(tmp_path_factory.mktemp("collected"))
  assert main(["collect", "--config", configPath, "--output", output]) == EXIT_OK
  return output


def FileHashes(root, skip=("Logs",)):
  hashes = {}
  for folder, dirs, files in os.walk(root):
    dirs[:] = [d for d in dirs if (d not in skip)]
    for name in files:
      path = os.path.join(folder, name)
      with open(path, "rb") as f:
        hashes[os.path.relpath(path, root)] = hashlib.sha256(f.read()).hexdigest()
  return hashes


def CollectedHashes(root):
  """Hashes of the collect outputs only (manifest and memorygrams)."""
  return {
    name: digest for name, digest in FileHashes(root).items()
    if (name == "manifest.json" or name.startswith("memorygrams"))
  }


def ReadLines(path):
  with open(path, "r", encoding="utf-8") as f:
    return f.read().splitlines()


def Test_CollectWritesSitesAndManifest(collected):
  """2 sites x 3 trials give two JSONL files of three records each and a matching manifest."""
  manifest = storage.ReadJson(os.path.join(collected, "manifest.json"))
  assert manifest["counts"]["memorygrams"] == 6
  assert manifest["files"]["closed"] == ["memorygrams/site_0.jsonl", "memorygrams/site_1.jsonl"]
  records = []
  for siteId in (0, 1):
    for line in ReadLines(os.path.join(collected, "memorygrams", f"site_{siteId}.jsonl")):
      records.append(json.loads(line))
  assert len(records) == 6
  assert [(r["site"], r["trial"]) for r in records] == [(s, t) for s in (0, 1) for t in range(3)]
  assert {r["config_hash"] for r in records} == {manifest["configHash"]}
  assert all(len(r["samples"]) >= 8 for r in records)


def Test_CollectDeterministic(configPath, collected, tmp_path):
  """A rerun, even with two worker processes, writes byte-identical files."""
  output = str(tmp_path / "again")
  assert main(["collect", "--config", configPath, "--output", output, "--jobs", "2"]) == EXIT_OK
  assert CollectedHashes(output) == CollectedHashes(collected)


def Test_FeaturesColumns(configPath, collected, tmp_path):
  """Four segments per half give 61 CSV columns (label + 60); eight give 109."""
  assert main(["features", "--config", configPath, "--output", collected]) == EXIT_OK
  frame = pd.read_csv(os.path.join(collected, "features", "closed.csv"))
  assert frame.shape == (6, 61)
  assert list(frame.columns[:3]) == ["label", "f0", "f1"]
  assert sorted(set(frame["label"])) == [0, 1]

  wide = str(tmp_path / "wide.csv")
  assert main(["features", "--config", configPath, "--output", collected, "--segments", "8", "--csv", wide]) == EXIT_OK
  assert pd.read_csv(wide).shape == (6, 109)


def Test_FeaturesRoundTrip(configPath, collected):
  """Feature values read back from the CSV equal the extracted values exactly."""
  assert main(["features", "--config", configPath, "--output", collected]) == EXIT_OK
  dataset = storage.ReadFeaturesCsv(os.path.join(collected, "features", "closed.csv"))
  memorygrams = storage.ReadAllMemorygrams([os.path.join(collected, "memorygrams")])
  extracted, skipped = FingerprintHelper(segmentsPerHalf=4).ExtractDataset(memorygrams)
  assert skipped == 0
  assert (dataset.X == extracted.X).all()
  assert dataset.y.tolist() == extracted.y.tolist()


def Test_FeaturesEmptyInput(configPath, tmp_path):
  """No memorygrams to read is a data error (exit 3)."""
  empty = tmp_path / "empty"
  empty.mkdir()
  assert main(["features", "--config", configPath, "--output", str(tmp_path), "--input", str(empty)]) == EXIT_DATA


def Test_FeaturesAllTooShort(configPath, collected, tmp_path):
  """If every trace is too short for the segments, features exits with 3."""
  csv = str(tmp_path / "short.csv")
  assert main(["features", "--config", configPath, "--output", collected, "--segments", "40", "--csv", csv]) == EXIT_DATA
  assert not os.path.exists(csv)


def Test_EvaluateClosed(configPath, collected):
  """Closed-world evaluation writes the report JSON plus per-class and confusion CSVs."""
  assert main(["features", "--config", configPath, "--output", collected]) == EXIT_OK
  for kind in ("RF", "KNN"):
    assert main(["evaluate", "--config", configPath, "--output", collected, "--classifier", kind]) == EXIT_OK
    report = storage.ReadJson(os.path.join(collected, "reports", f"closed_{kind}.json"))
    assert report["mode"] == "closed" and report["classifier"]["kind"] == kind
    assert sum(map(sum, report["confusion"])) == 6
    assert os.path.exists(os.path.join(collected, "reports", f"closed_{kind}_perclass.csv"))
    assert os.path.exists(os.path.join(collected, "reports", f"closed_{kind}_confusion.csv"))


def Test_EvaluateSeparableCsv(configPath, tmp_path):
  """A separable feature CSV scores macro F1 = 1 and a rerun writes the same report."""
  rows = []
  for label in range(3):
    for i in range(6):
      rows.append([label * 100.0 + i * 0.1 + j for j in range(4)])
  dataset = Dataset.FromArrays(rows, [label for label in range(3) for _ in range(6)])
  csv = str(tmp_path / "toy.csv")
  storage.WriteFeaturesCsv(csv, dataset)

  reports = []
  for name in ("first.json", "second.json"):
    path = str(tmp_path / name)
    assert main(["evaluate", "--config", configPath, "--output", str(tmp_path), "--features", csv, "--report", path]) == EXIT_OK
    with open(path, "rb") as f:
      reports.append(f.read())
  assert reports[0] == reports[1]
  assert json.loads(reports[0])["macro"]["f1"] == 1.0


def Test_EvaluateOpenNeedsCsv(configPath, collected):
  """--mode open without --open is a usage error (exit 2)."""
  with pytest.raises(SystemExit) as error:
    main(["evaluate", "--config", configPath, "--output", collected, "--mode", "open"])
  assert error.value.code == 2


def Test_EvaluateInsufficientSupport(configPath, tmp_path):
  """A class with fewer vectors than folds is a data error (exit 3)."""
  csv = str(tmp_path / "thin.csv")
  storage.WriteFeaturesCsv(csv, Dataset.FromArrays([[0.0], [1.0], [2.0], [3.0], [4.0]], [0, 0, 0, 1, 1]))
  assert main(["evaluate", "--config", configPath, "--output", str(tmp_path), "--features", csv]) == EXIT_DATA


def Test_EvaluateMissingCsv(configPath, tmp_path):
  """A missing feature file is a data error (exit 3)."""
  missing = str(tmp_path / "missing.csv")
  assert main(["evaluate", "--config", configPath, "--output", str(tmp_path), "--features", missing]) == EXIT_DATA


def Test_OpenWorldPipeline(configPath, tmp_path):
  """Open-world sites land in open/, are labelled non-sensitive and add a background class."""
  output = str(tmp_path / "open")
  common = ["--config", configPath, "--output", output, "--set", "corpus.openSites=3"]
  assert main(["collect"] + common) == EXIT_OK
  assert len(os.listdir(os.path.join(output, "open"))) == 3
  assert main(["features"] + common) == EXIT_OK
  assert main(["features", "--non-sensitive"] + common) == EXIT_OK
  openCsv = os.path.join(output, "features", "open.csv")
  assert set(pd.read_csv(openCsv)["label"]) == {NON_SENSITIVE}
  assert main(["evaluate", "--mode", "open", "--open", openCsv] + common) == EXIT_OK
  report = storage.ReadJson(os.path.join(output, "reports", "open_RF.json"))
  assert report["labels"] == [NON_SENSITIVE, 0, 1]
  assert report["sensitiveMacro"] is not None


def Test_TransferPipeline(configPath, tmp_path):
  """Features collected at a smaller viewport can be scored against full-size training data."""
  full, small = str(tmp_path / "full"), str(tmp_path / "small")
  assert main(["collect", "--config", configPath, "--output", full]) == EXIT_OK
  assert main(["collect", "--config", configPath, "--output", small, "--set", "corpus.viewportScale=0.5"]) == EXIT_OK
  for output in (full, small):
    assert main(["features", "--config", configPath, "--output", output]) == EXIT_OK
  testCsv = os.path.join(small, "features", "closed.csv")
  assert main(["evaluate", "--config", configPath, "--output", full, "--mode", "transfer", "--test", testCsv]) == EXIT_OK
  report = storage.ReadJson(os.path.join(full, "reports", "transfer_RF.json"))
  assert report["mode"] == "transfer"
  assert sum(map(sum, report["confusion"])) == 6


def Test_Calibrate(tmp_path):
  """calibrate writes the solved constants; the default geometry meets both anchors."""
  out = str(tmp_path / "calibration.json")
  assert main(["calibrate", "--output", str(tmp_path), "--out", out, "--set", f"logPath={tmp_path / 'Logs'}"]) == EXIT_OK
  calibration = storage.ReadJson(out)
  assert set(calibration) == {"attack", "verification", "targets", "geometry", "gpu"}
  assert calibration["verification"]["basicRateHz"] == pytest.approx(50.0, rel=0.02)
  assert calibration["verification"]["parallelRateHz"] == pytest.approx(170.0, rel=0.05)
  assert 80000 <= calibration["verification"]["probeTicksMean"] <= 120000


def Test_CalibrateInfeasible(tmp_path):
  """Anchors needing super-linear speed-up exit with 4."""
  args = ["calibrate", "--output", str(tmp_path), "--set", "calibration.parallelRateHz=5000",
          "--set", f"logPath={tmp_path / 'Logs'}"]
  assert main(args) == EXIT_CALIBRATION


def Test_CalibrationFilePrecedence(configPath, tmp_path):
  """Calibration constants override the config file and --set overrides the calibration."""
  path = str(tmp_path / "calibration.json")
  storage.WriteJson(path, {"attack": {"dispatchOverheadS": 0.004, "cycleTimeS": 1e-7, "ticksPerCycle": 0.5}})
  runConfigs = BuildRunConfigs(configPath, path)
  assert runConfigs["attack"]["dispatchOverheadS"] == 0.004
  assert runConfigs["corpus"]["sites"] == 2
  runConfigs = BuildRunConfigs(configPath, path, ["attack.dispatchOverheadS=0.006", "corpus.sites=5"])
  assert runConfigs["attack"]["dispatchOverheadS"] == 0.006
  assert runConfigs["attack"]["ticksPerCycle"] == 0.5
  assert runConfigs["corpus"]["sites"] == 5


@pytest.mark.parametrize("override", ["cache.ways=0", "corpus.durationS=0.1", "attack.preset=turbo", "pipeline.folds=1"])
def Test_InvalidConfig(configPath, tmp_path, override):
  """Invalid or inconsistent configuration exits with 2 before any run."""
  assert main(["collect", "--config", configPath, "--output", str(tmp_path), "--set", override]) == EXIT_CONFIG
  assert not os.path.exists(os.path.join(str(tmp_path), "manifest.json"))


def Test_Report(configPath, tmp_path):
  """report writes memorygram, timer-histogram and summary plot data."""
  output = str(tmp_path / "run")
  common = ["--config", configPath, "--output", output]
  for command in ("collect", "features", "evaluate", "report"):
    assert main([command] + common) == EXIT_OK
  plots = os.path.join(output, "plots")
  memorygrams = pd.read_csv(os.path.join(plots, "memorygrams.csv"))
  assert list(memorygrams.columns) == ["site", "trial", "index", "timeS", "ticks"]
  assert set(memorygrams["site"]) == {0, 1}
  histogram = pd.read_csv(os.path.join(plots, "timer_histogram.csv"))
  assert histogram["hitCount"].sum() == histogram["missCount"].sum() == 500
  summary = pd.read_csv(os.path.join(plots, "summary.csv"))
  assert list(summary["report"]) == ["closed_RF"]


def Test_PipelineDeterministic(configPath, tmp_path):
  """Every stage rerun with the same configuration writes byte-identical files."""
  hashes = []
  for name in ("first", "second"):
    output = str(tmp_path / name)
    common = ["--config", configPath, "--output", output]
    for command in ("collect", "features", "evaluate", "report"):
      assert main([command] + common) == EXIT_OK
    hashes.append(FileHashes(output))
  assert hashes[0] == hashes[1]
  assert "manifest.json" in hashes[0]
  assert os.path.join("plots", "summary.csv") in hashes[0]


def Test_OpenSiteIdsMustFollowClosedSites(configPath, tmp_path):
  """Open-world ids below the closed-world site count exit with 2; ids starting at the count are accepted."""
  overlap = ["--set", "corpus.openSites=3", "--set", "corpus.openSiteIdBase=1"]
  output = str(tmp_path / "overlap")
  assert main(["collect", "--config", configPath, "--output", output] + overlap) == EXIT_CONFIG
  assert not os.path.exists(os.path.join(output, "manifest.json"))

  adjacent = ["--set", "corpus.openSites=3", "--set", "corpus.openSiteIdBase=2"]
  output = str(tmp_path / "adjacent")
  assert main(["collect", "--config", configPath, "--output", output] + adjacent) == EXIT_OK
  assert sorted(os.listdir(os.path.join(output, "open"))) == ["site_2.jsonl", "site_3.jsonl", "site_4.jsonl"]
