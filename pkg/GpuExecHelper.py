'''
========================================================================
        ╦  ╔═╗  ╔═╗┌─┐┌─┐┬ ┬┌─┐  ╔═╗┌─┐┬ ┬
        ║   ═╣  ║  ├─┤│  ├─┤├┤   ╚═╗├─┘└┬┘
        ╩═╝╚═╝  ╚═╝┴ ┴└─┘┴ ┴└─┘  ╚═╝┴   ┴
========================================================================
# Author: L3 Cache Spy Developers
# Permissions and Citation: Refer to the README file.
'''

# Import necessary libraries for the execution model.
import logging
import numpy as np
from dataclasses import dataclass
from ConfigsSettings import LoadConfigs, ConfigurationError

# Use module logger so messages go through Python's logging system.
logger = logging.getLogger(__name__)

configs = LoadConfigs()  # Load the configuration (configs.yaml over the defaults).
VERBOSE = configs.get("verbose", False)  # Get the verbose setting from the configuration.

# Timer jitter is a normal truncated at this many standard deviations.
JITTER_TRUNCATION_SIGMAS = 3.0


@dataclass(frozen=True)
class GpuConfig:
  numSubslices: int = 3
  eusPerSubslice: int = 8
  threadsPerWavefront: int = 32
  maxThreadsPerWorkgroup: int = 256
  slmBytesPerSubslice: int = 65536
  timerJitterRel: float = 0.02  # Default counting-timer noise for this generation.

  def __post_init__(self):
    for name in ("numSubslices", "eusPerSubslice", "threadsPerWavefront", "maxThreadsPerWorkgroup",
                 "slmBytesPerSubslice"):
      if (getattr(self, name) < 1):
        raise ConfigurationError(f"GPU field {name} must be at least 1.")
    if (self.maxThreadsPerWorkgroup % self.threadsPerWavefront != 0):
      raise ConfigurationError("maxThreadsPerWorkgroup must be a multiple of threadsPerWavefront.")
    if (self.timerJitterRel < 0):
      raise ConfigurationError("timerJitterRel must be non-negative.")

  def ToDict(self):
    return {name: getattr(self, name) for name in self.__dataclass_fields__}

  @classmethod
  def FromPreset(cls, presetName, runConfigs=None):
    """Build one of the named generations: gen9, gen9.5 or gen11."""
    runConfigs = runConfigs if (runConfigs is not None) else configs
    presets = runConfigs.get("gpuPresets", {})
    if (presetName not in presets):
      raise ConfigurationError(f"Unknown GPU preset: {presetName}. Available: {list(presets.keys())}")
    return cls(**presets[presetName])

  @classmethod
  def FromConfigs(cls, runConfigs=None):
    runConfigs = runConfigs if (runConfigs is not None) else configs
    gpuBlock = dict(runConfigs.get("gpu", {}))
    presetName = gpuBlock.pop("preset", "gen9")
    base = cls.FromPreset(presetName, runConfigs).ToDict()
    base.update(gpuBlock)
    return cls(**base)


@dataclass(frozen=True)
class SpyLayout:
  numWorkgroups: int = 1
  countingThreadsPerWorkgroup: int = 64
  attackerWavefrontsPerWorkgroup: int = 1
  activeThreadsPerAttackerWavefront: int = 1

  def ToDict(self):
    return {name: getattr(self, name) for name in self.__dataclass_fields__}


@dataclass(frozen=True)
class ValidatedLayout:
  layout: SpyLayout
  threadsPerWorkgroup: int
  activeThreadsPerWorkgroup: int
  totalActiveThreads: int
  workgroupToSubslice: tuple
  activePerSubslice: tuple
  threadSubslices: tuple  # Subslice of every active attacker thread, in probe-partition order.
  contention: bool


@dataclass(frozen=True)
class TimerModel:
  ticksPerCycle: float
  jitterRel: float = 0.02
  resolutionTicks: int = 1  # Coarsening defense: ticks are floored to a multiple of this.
  noiseTicks: float = 0.0  # Noise defense: additive zero-mean Gaussian, in ticks.

  def __post_init__(self):
    if (self.ticksPerCycle <= 0):
      raise ConfigurationError(f"ticksPerCycle must be positive: {self.ticksPerCycle}")
    if (self.jitterRel < 0):
      raise ConfigurationError(f"jitterRel must be non-negative: {self.jitterRel}")
    if (self.resolutionTicks < 1):
      raise ConfigurationError(f"resolutionTicks must be at least 1: {self.resolutionTicks}")
    if (self.noiseTicks < 0):
      raise ConfigurationError(f"noiseTicks must be non-negative: {self.noiseTicks}")

  def ToDict(self):
    return {name: getattr(self, name) for name in self.__dataclass_fields__}


@dataclass(frozen=True)
class ContentionModel:
  latencyMultiplier: float
  jitterScale: float


def TruncatedNormal(rng, sigma):
  """Zero-mean normal draw truncated at +/- JITTER_TRUNCATION_SIGMAS sigma."""
  if (sigma <= 0):
    return 0.0  # No jitter configured.
  while (True):
    # Redraw until the sample falls inside the truncation window.
    z = rng.standard_normal()
    if (abs(z) <= JITTER_TRUNCATION_SIGMAS):
      return z * sigma


class GpuExecHelper(object):
  def __init__(self, gpu=None, runConfigs=None):
    """Initialize the GpuExecHelper with a GPU generation, or the one in the configuration."""
    # Resolve the GPU from the `gpu` block when none is given.
    self.gpu = gpu if (gpu is not None) else GpuConfig.FromConfigs(runConfigs)

  def GetGpu(self):
    """Return the GPU generation used by this helper."""
    # Return the GPU configuration.
    return self.gpu

  def AssignWorkgroups(self, numWorkgroups):
    """Round-robin placement: workgroup i runs on subslice i mod numSubslices."""
    if (numWorkgroups < 1):
      # A kernel launch needs at least one workgroup.
      raise ConfigurationError(f"At least one workgroup is required: {numWorkgroups}")
    # Map every workgroup to its subslice.
    return {wg: wg % self.gpu.numSubslices for wg in range(numWorkgroups)}

  def ValidateLayout(self, layout):
    r'''
    Validate a spy layout against the GPU limits and place it.

    Parameters:
      layout (SpyLayout): Workgroup/wavefront/thread configuration.

    Returns:
      ValidatedLayout: Thread totals, placement and the contention flag.
    '''
    gpu = self.gpu
    tpw = gpu.threadsPerWavefront  # Threads per wavefront.
    if (layout.numWorkgroups < 1):
      raise ConfigurationError("At least one workgroup is required.")
    if (layout.countingThreadsPerWorkgroup < tpw or layout.countingThreadsPerWorkgroup % tpw != 0):
      # Counting threads fill whole wavefronts.
      raise ConfigurationError(
        f"Counting threads ({layout.countingThreadsPerWorkgroup}) must be a non-zero multiple of the "
        f"wavefront size ({tpw})."
      )
    if (layout.activeThreadsPerAttackerWavefront > tpw):
      raise ConfigurationError(f"At most {tpw} active threads fit in one wavefront.")
    activePerWorkgroup = layout.attackerWavefrontsPerWorkgroup * layout.activeThreadsPerAttackerWavefront
    if (activePerWorkgroup < 1):
      raise ConfigurationError("The layout has no active attacker threads.")

    # Attacker wavefronts occupy full wavefront slots even when few threads are active.
    threadsPerWorkgroup = layout.countingThreadsPerWorkgroup + layout.attackerWavefrontsPerWorkgroup * tpw
    if (threadsPerWorkgroup > gpu.maxThreadsPerWorkgroup):
      raise ConfigurationError(
        f"Workgroup needs {threadsPerWorkgroup} threads, above the {gpu.maxThreadsPerWorkgroup}-thread limit."
      )

    placement = self.AssignWorkgroups(layout.numWorkgroups)  # Subslice of every workgroup.
    activePerSubslice = [0] * gpu.numSubslices  # Active attacker threads per subslice.
    threadSubslices = []  # Subslice of every active thread.
    for wg in range(layout.numWorkgroups):
      activePerSubslice[placement[wg]] += activePerWorkgroup
      threadSubslices.extend([placement[wg]] * activePerWorkgroup)
    # More active threads than EUs on one subslice means they fight over the send units.
    contention = any(active > gpu.eusPerSubslice for active in activePerSubslice)
    if (contention and VERBOSE):
      logger.info(f"Layout oversubscribes the send units: active threads per subslice {activePerSubslice}.")

    return ValidatedLayout(
      layout=layout,
      threadsPerWorkgroup=threadsPerWorkgroup,
      activeThreadsPerWorkgroup=activePerWorkgroup,
      totalActiveThreads=activePerWorkgroup * layout.numWorkgroups,
      workgroupToSubslice=tuple(placement[wg] for wg in range(layout.numWorkgroups)),
      activePerSubslice=tuple(activePerSubslice),
      threadSubslices=tuple(threadSubslices),
      contention=contention,
    )

  def ContentionFactor(self, activeThreadsInSubslice):
    """Latency multiplier and jitter scale: max(1, active / EUs) for both."""
    if (activeThreadsInSubslice < 1):
      raise ValueError(f"At least one active thread is required: {activeThreadsInSubslice}")
    # Threads beyond the EU count queue behind each other.
    multiplier = max(1.0, activeThreadsInSubslice / self.gpu.eusPerSubslice)
    return ContentionModel(latencyMultiplier=multiplier, jitterScale=multiplier)

  def TimerTicks(self, durationCycles, timer, rng, jitterScale=1.0):
    r'''
    Convert a duration in GPU cycles to counting-thread ticks.

    Parameters:
      durationCycles (float): Duration to time, >= 0.
      timer (TimerModel): Tick conversion and noise parameters.
      rng (numpy.random.Generator): Noise stream.
      jitterScale (float): Contention-dependent jitter multiplier.

    Returns:
      int: Non-negative tick count.
    '''
    if (durationCycles < 0):
      raise ValueError(f"Duration must be non-negative: {durationCycles}")
    if (durationCycles == 0):
      return 0  # Nothing to time.
    g = TruncatedNormal(rng, timer.jitterRel * jitterScale)  # Relative jitter.
    ticks = durationCycles * timer.ticksPerCycle * (1.0 + g)
    if (timer.noiseTicks > 0):
      ticks += rng.normal(0.0, timer.noiseTicks)  # Noise defense.
    ticks = max(0, int(round(ticks)))  # The counter never goes negative.
    if (timer.resolutionTicks > 1):
      ticks = (ticks // timer.resolutionTicks) * timer.resolutionTicks  # Coarsening defense.
    return ticks

  def CharacterizeTimer(self, timer, geometry, samples, rng, bins=64):
    r'''
    Histogram single-access hit and miss timings through the counting timer.

    Parameters:
      timer (TimerModel): Timer under test.
      geometry (CacheGeometry): Supplies the hit and miss latencies.
      samples (int): Draws per class.
      rng (numpy.random.Generator): Noise stream.
      bins (int): Number of shared histogram bins.

    Returns:
      dict: Tick arrays, midpoint threshold, misclassification rate and histogram.
    '''
    if (samples < 1):
      raise ValueError("At least one sample per class is required.")
    # Time one hit and one miss `samples` times each.
    hitTicks = np.array([self.TimerTicks(geometry.hitLatencyCycles, timer, rng) for _ in range(samples)])
    missTicks = np.array([self.TimerTicks(geometry.missLatencyCycles, timer, rng) for _ in range(samples)])
    threshold = (hitTicks.mean() + missTicks.mean()) / 2.0  # Midpoint between the class means.
    errors = int(np.sum(hitTicks >= threshold) + np.sum(missTicks < threshold))
    errorRate = errors / (2.0 * samples)

    # Shared bin edges so both histograms line up.
    low = min(hitTicks.min(), missTicks.min())
    high = max(hitTicks.max(), missTicks.max())
    edges = np.linspace(low, high + 1, bins + 1)
    hitCounts, _ = np.histogram(hitTicks, bins=edges)
    missCounts, _ = np.histogram(missTicks, bins=edges)

    if (VERBOSE):
      logger.info(f"Timer characterization: threshold {threshold:.2f} ticks, error rate {errorRate:.4%}.")
    return {
      "hitTicks" : hitTicks,  # Raw hit timings.
      "missTicks": missTicks,  # Raw miss timings.
      "threshold": float(threshold),  # Hit/miss decision threshold.
      "errorRate": float(errorRate),  # Fraction misclassified by the threshold.
      "histogram": {
        "edges"     : edges.tolist(),
        "hitCounts" : hitCounts.tolist(),
        "missCounts": missCounts.tolist(),
      },
    }


if (__name__ == "__main__"):
  # Example usage of the GpuExecHelper class.
  execObj = GpuExecHelper(GpuConfig.FromPreset("gen9"))  # Initialize the helper for Gen9.
  print(execObj.ValidateLayout(SpyLayout(numWorkgroups=1)))  # The basic layout.
  print(execObj.ValidateLayout(SpyLayout(numWorkgroups=3, activeThreadsPerAttackerWavefront=8)))  # The parallel layout.
  print(execObj.ContentionFactor(16))  # Two threads per EU.
  rng = np.random.default_rng(0)  # Noise stream.
  print(execObj.TimerTicks(300, TimerModel(ticksPerCycle=1.0, jitterRel=0.0), rng))  # 300 ticks.
