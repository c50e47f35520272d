'''
========================================================================
        ╦  ╔═╗  ╔═╗┌─┐┌─┐┬ ┬┌─┐  ╔═╗┌─┐┬ ┬
        ║   ═╣  ║  ├─┤│  ├─┤├┤   ╚═╗├─┘└┬┘
        ╩═╝╚═╝  ╚═╝┴ ┴└─┘┴ ┴└─┘  ╚═╝┴   ┴
========================================================================
# Author: L3 Cache Spy Developers
# Permissions and Citation: Refer to the README file.
'''

# Import necessary libraries for configuration loading.
import os, copy, yaml

# Path of the configuration file that sits next to this module.
CONFIGS_PATH = os.path.join(os.path.dirname(os.path.abspath(__file__)), "configs.yaml")


class ConfigurationError(ValueError):
  """Raised for invalid or inconsistent configuration values (CLI exit code 2)."""


class DataError(ValueError):
  """Raised for malformed or insufficient input data (CLI exit code 3)."""


class CalibrationError(ValueError):
  """Raised when the calibration anchors cannot be satisfied (CLI exit code 4)."""


DEFAULT_CONFIGS = {
  "verbose"       : False,  # Enable verbose logging.
  "outputPath"    : "./Runs",  # Default directory for collected traces, features and reports.
  "logPath"       : "Logs",  # Directory for the rotating log files.
  "logMaxBytes"   : 5 * 1024 * 1024,  # Maximum size of a single log file.
  "logBackupCount": 5,  # Number of rotated log files to keep.
  "jobs"          : 1,  # Worker processes used by collect and cross-validation.
  "gpu"           : {
    "preset": "gen9",  # One of the entries in gpuPresets.
  },
  "gpuPresets"    : {
    # Gen9 and Gen9.5 have 3 subslices, Gen11 has 8; all have 8 EUs per subslice.
    "gen9"  : {
      "numSubslices"          : 3,
      "eusPerSubslice"        : 8,
      "threadsPerWavefront"   : 32,
      "maxThreadsPerWorkgroup": 256,
      "slmBytesPerSubslice"   : 65536,
      "timerJitterRel"        : 0.02,  # Counting-thread timer noise.
    },
    "gen9.5": {
      "numSubslices"          : 3,
      "eusPerSubslice"        : 8,
      "threadsPerWavefront"   : 32,
      "maxThreadsPerWorkgroup": 256,
      "slmBytesPerSubslice"   : 65536,
      "timerJitterRel"        : 0.02,
    },
    # Separate SLM pathway gives a quieter timer.
    "gen11" : {
      "numSubslices"          : 8,
      "eusPerSubslice"        : 8,
      "threadsPerWavefront"   : 32,
      "maxThreadsPerWorkgroup": 256,
      "slmBytesPerSubslice"   : 65536,
      "timerJitterRel"        : 0.01,
    },
  },
  "cache"         : {
    "preset": "default",  # One of the entries in cachePresets; keys below override it.
  },
  "cachePresets"  : {
    # 1024 composite sets x 8 ways x 64 B = 512 KB.
    "default"      : {
      "lineSizeBytes"    : 64,
      "setBits"          : 5,
      "subBankBits"      : 3,
      "bankBits"         : 2,
      "ways"             : 8,
      "replacementPolicy": "LRU",  # LRU, RANDOM or TREE_PLRU.
      "hitLatencyCycles" : 30,
      "missLatencyCycles": 300,
      "missParallelism"  : 1,  # Spy misses the shared L3 serves at once across threads; 1 serializes them.
      "partition"        : None,  # e.g. {"SPY": [0, 4], "VICTIM": [4, 8]}.
    },
    # Same index bits with 64 ways; 4 MB.
    "wide": {
      "lineSizeBytes"    : 64,
      "setBits"          : 5,
      "subBankBits"      : 3,
      "bankBits"         : 2,
      "ways"             : 64,
      "replacementPolicy": "LRU",
      "hitLatencyCycles" : 30,
      "missLatencyCycles": 300,
      "missParallelism"  : 1,
      "partition"        : None,
    },
  },
  "attack"        : {
    "preset"              : "basic",  # One of the entries in attackPresets; keys below override it.
    "probeOrder"          : "REVERSE_RECENCY",  # PRIME_ORDER, REVERSE_RECENCY or RANDOM_PERMUTATION.
    "probeSeed"           : 0,  # Seed for RANDOM_PERMUTATION chains.
    "bufferBytes"         : None,  # None means the spy-visible cache capacity.
    "bufferBase"          : 0,  # Byte address of the probe buffer.
    "aggregation"         : "max",  # Per-sample aggregation over parallel threads: max or mean.
    # Calibrated for the default geometry (see `SpyCli.py calibrate`).
    "dispatchOverheadS"   : 0.00526854219949,  # Shader launch cost per sample.
    "cycleTimeS"          : 5.9942455243e-08,  # Seconds per simulated latency cycle.
    "ticksPerCycle"       : 0.406901041667,  # Counter increments per simulated cycle.
    "jitterRel"           : None,  # None means the GPU preset value.
    "resolutionTicks"     : 1,  # Timer coarsening defense; 1 disables it.
    "noiseTicks"          : 0.0,  # Additive timer noise defense; 0 disables it.
  },
  "attackPresets" : {
    # One attacker thread on one subslice.
    "basic"   : {
      "numWorkgroups"                  : 1,
      "countingThreadsPerWorkgroup"    : 64,
      "attackerWavefrontsPerWorkgroup" : 1,
      "activeThreadsPerAttackerWavefront": 1,
    },
    # 8 active threads in the attacker wavefront.
    "thread"  : {
      "numWorkgroups"                  : 1,
      "countingThreadsPerWorkgroup"    : 64,
      "attackerWavefrontsPerWorkgroup" : 1,
      "activeThreadsPerAttackerWavefront": 8,
    },
    # One workgroup per subslice (None resolves to numSubslices), 8 active threads each.
    "parallel": {
      "numWorkgroups"                  : None,
      "countingThreadsPerWorkgroup"    : 64,
      "attackerWavefrontsPerWorkgroup" : 1,
      "activeThreadsPerAttackerWavefront": 8,
    },
  },
  "corpus"        : {
    "sites"          : 100,  # Closed-world site count.
    "trials"         : 100,  # Visits per site.
    "corpusSeed"     : 0,  # Seed for site profiles and trials.
    "durationS"      : 5.0,  # Trace length in seconds.
    "viewportScale"  : 1.0,  # Browser window size relative to full screen.
    "openSites"      : 0,  # Extra non-sensitive sites (one trial each).
    "openSiteIdBase" : 100000,  # First site id of the open-world set.
    # Synthetic generator ranges, [low, high] inclusive.
    "paramRanges"    : {
      "footprintLines" : [16, 4096],
      "burstRateHz"    : [5.0, 60.0],
      "loadEndS"       : [0.3, 1.5],
      "settleLengthS"  : [0.5, 2.0],
      "loadIntensity"  : [0.6, 1.0],
      "settleIntensity": [0.2, 0.6],
      "idleIntensity"  : [0.0, 0.15],
      "repaintPeriodS" : [0.2, 1.0],
      "trialJitter"    : [0.05, 0.15],
      "phaseJitterS"   : [0.02, 0.08],
      "regionFactor"   : [2, 4],
    },
  },
  "pipeline"      : {
    "segmentsPerHalf": 4,  # 4 gives 60 features, 8 gives 108.
    "classifier"     : {
      "kind"    : "RF",  # KNN or RF.
      "k"       : 5,  # KNN neighbours.
      "trees"   : 100,  # RF trees.
      "minLeaf" : 1,  # RF minimum samples per leaf.
      "seed"    : 0,  # RF bootstrap and feature-sampling seed.
    },
    "folds"          : 10,  # Stratified cross-validation folds.
    "seed"           : 0,  # Fold-assignment seed.
  },
  "calibration"   : {
    "basicRateHz"          : 50.0,  # Sampling rate with one attacker thread.
    "parallelRateHz"       : 170.0,  # Sampling rate with the parallel layout.
    "parallelActiveThreads": 24,  # 3 subslices x 8 active threads.
    "targetProbeTicks"     : 100000.0,  # All-hit full-buffer probe ticks.
    "timerSamples"         : 10000,  # Samples per class for the timer histogram.
  },
  "report"        : {
    "memorygramTrials": 5,  # Trials per site exported as memorygram plot data.
  },
}


def MergeConfigs(base, overrides):
  """Recursively merge `overrides` into a copy of `base`."""
  # Never mutate the caller's defaults.
  merged = copy.deepcopy(base)
  for key, value in (overrides or {}).items():
    if (isinstance(value, dict) and isinstance(merged.get(key), dict)):
      # Nested blocks merge key by key.
      merged[key] = MergeConfigs(merged[key], value)
    else:
      # Scalars and lists replace the default outright.
      merged[key] = copy.deepcopy(value)
  return merged


def LoadConfigs(path=None):
  """
  Load a YAML (or JSON) configuration file on top of DEFAULT_CONFIGS.
  Without a path, the configs.yaml next to this module is used when it exists.
  """
  if (path is None):
    path = CONFIGS_PATH
    if (not os.path.exists(path)):
      # No configs.yaml shipped: the built-in defaults are the configuration.
      return copy.deepcopy(DEFAULT_CONFIGS)
  try:
    with open(path, "r") as configFile:
      # Load the configuration from the YAML file (JSON is valid YAML).
      loaded = yaml.safe_load(configFile) or {}
  except (OSError, yaml.YAMLError) as e:
    raise ConfigurationError(f"Cannot read configuration file {path}: {e}")
  if (not isinstance(loaded, dict)):
    raise ConfigurationError(f"Configuration file {path} must contain a mapping.")
  return MergeConfigs(DEFAULT_CONFIGS, loaded)


def ApplyOverride(configs, assignment):
  """Apply one `a.b.c=value` override; the value is parsed as YAML."""
  if ("=" not in assignment):
    raise ConfigurationError(f"Override must look like path=value: {assignment}")
  # Split once so values may contain "=".
  path, rawValue = assignment.split("=", 1)
  keys = [k for k in path.strip().split(".") if k]
  if (not keys):
    raise ConfigurationError(f"Empty override path: {assignment}")
  node = configs
  for key in keys[:-1]:
    # Missing or scalar intermediate nodes become blocks.
    if (not isinstance(node.get(key), dict)):
      node[key] = {}
    node = node[key]
  # YAML parsing turns "3" into 3, "null" into None and "[1, 2]" into a list.
  node[keys[-1]] = yaml.safe_load(rawValue)
  return configs


def ResolvePreset(configs, section, presetsKey):
  """Return the preset named in configs[section]["preset"] with the section keys laid over it."""
  sectionConfigs = dict(configs.get(section, {}))
  presetName = sectionConfigs.pop("preset", None)
  presets = configs.get(presetsKey, {})
  if (presetName is None):
    # No preset: the section must be complete on its own.
    return sectionConfigs
  if (presetName not in presets):
    raise ConfigurationError(f"Unknown {section} preset: {presetName}. Available: {list(presets.keys())}")
  return MergeConfigs(presets[presetName], sectionConfigs)


if (__name__ == "__main__"):
  with open(CONFIGS_PATH, "w") as configFile:
    # Save the default configuration to a YAML file.
    yaml.dump(DEFAULT_CONFIGS, configFile, default_flow_style=False, sort_keys=True)
