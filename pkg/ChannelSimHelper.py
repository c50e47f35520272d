'''
========================================================================
        ╦  ╔═╗  ╔═╗┌─┐┌─┐┬ ┬┌─┐  ╔═╗┌─┐┬ ┬
        ║   ═╣  ║  ├─┤│  ├─┤├┤   ╚═╗├─┘└┬┘
        ╩═╝╚═╝  ╚═╝┴ ┴└─┘┴ ┴└─┘  ╚═╝┴   ┴
========================================================================
# Author: L3 Cache Spy Developers
# Permissions and Citation: Refer to the README file.
'''

# Import necessary libraries for the channel simulator.
import json, hashlib, logging
import numpy as np
from dataclasses import dataclass
from typing import Optional
from ConfigsSettings import LoadConfigs, ResolvePreset, ConfigurationError, CalibrationError
from CacheModelHelper import CacheGeometry, CacheModelHelper, SPY, VICTIM
from GpuExecHelper import GpuConfig, SpyLayout, TimerModel, GpuExecHelper
from VictimGenHelper import VictimGenHelper, DeriveSeed, StreamRng
from JobHelpers import JobRunner

# Use module logger so messages go through Python's logging system.
logger = logging.getLogger(__name__)

configs = LoadConfigs()  # Load the configuration (configs.yaml over the defaults).
VERBOSE = configs.get("verbose", False)  # Get the verbose setting from the configuration.

PROBE_ORDERS = ("PRIME_ORDER", "REVERSE_RECENCY", "RANDOM_PERMUTATION")
AGGREGATIONS = ("max", "mean")
class ProbeChain(object):
  r'''
  Pointer-chase order over the probe buffer.

  `lines` is the chain order (a permutation of the buffer's line indices) used to prime.
  REVERSE_RECENCY probes walk the chain against the direction of the previous walk, so under LRU
  every probe misses exactly on the lines the victim evicted and leaves the buffer fully resident.
  '''

  def __init__(self, bufferBase, bufferBytes, lineSizeBytes, order, seed, lines):
    self.bufferBase = bufferBase
    self.bufferBytes = bufferBytes
    self.lineSizeBytes = lineSizeBytes
    self.order = order
    self.seed = seed
    self.lines = tuple(lines)
    self.addresses = [bufferBase + line * lineSizeBytes for line in self.lines]
    self.forwardNext = True
    self._threadCache = {}

  def __len__(self):
    return len(self.lines)

  def NextTraversal(self):
    """Chain positions in the order of the next walk, advancing the direction state."""
    n = len(self.lines)
    forward = True
    if (self.order == "REVERSE_RECENCY"):
      forward = self.forwardNext
      self.forwardNext = not self.forwardNext
    return range(n) if forward else range(n - 1, -1, -1)

  def ThreadOfPosition(self, threads):
    """Owner thread of each chain position; threads take positions round-robin."""
    if (threads not in self._threadCache):
      self._threadCache[threads] = [position % threads for position in range(len(self.lines))]
    return self._threadCache[threads]

  def Partitions(self, threads):
    """Line indices probed by each thread."""
    owners = self.ThreadOfPosition(threads)
    partitions = [[] for _ in range(threads)]
    for position, owner in enumerate(owners):
      partitions[owner].append(self.lines[position])
    return partitions


@dataclass(frozen=True)
class AttackConfig:
  layout: SpyLayout
  gpu: GpuConfig
  geometry: CacheGeometry
  timer: TimerModel
  probeOrder: str = "REVERSE_RECENCY"
  probeSeed: int = 0
  bufferBytes: Optional[int] = None  # None means the spy-visible capacity.
  bufferBase: int = 0
  dispatchOverheadS: float = 0.00526854219949
  cycleTimeS: float = 5.9942455243e-08
  durationS: float = 5.0
  aggregation: str = "max"

  def __post_init__(self):
    if (self.probeOrder not in PROBE_ORDERS):
      raise ConfigurationError(f"Unknown probe order: {self.probeOrder}. Expected one of {PROBE_ORDERS}.")
    if (self.aggregation not in AGGREGATIONS):
      raise ConfigurationError(f"Unknown aggregation: {self.aggregation}. Expected one of {AGGREGATIONS}.")
    if (self.durationS <= 0):
      raise ConfigurationError(f"durationS must be positive: {self.durationS}")
    if (self.dispatchOverheadS < 0 or self.cycleTimeS <= 0):
      raise ConfigurationError("dispatchOverheadS must be >= 0 and cycleTimeS > 0.")
    if (self.dispatchOverheadS == 0 and self.geometry.hitLatencyCycles == 0):
      raise ConfigurationError("A zero dispatch overhead needs a non-zero hit latency.")
    if (self.bufferBase < 0 or self.bufferBase % self.geometry.lineSizeBytes != 0):
      raise ConfigurationError("bufferBase must be a non-negative multiple of the line size.")

  @property
  def resolvedBufferBytes(self):
    if (self.bufferBytes is not None):
      return self.bufferBytes
    return self.geometry.DomainCapacityBytes(SPY)

  def ToDict(self):
    return {
      "layout"           : self.layout.ToDict(),
      "gpu"              : self.gpu.ToDict(),
      "geometry"         : self.geometry.ToDict(),
      "timer"            : self.timer.ToDict(),
      "probeOrder"       : self.probeOrder,
      "probeSeed"        : self.probeSeed,
      "bufferBytes"      : self.resolvedBufferBytes,
      "bufferBase"       : self.bufferBase,
      "dispatchOverheadS": self.dispatchOverheadS,
      "cycleTimeS"       : self.cycleTimeS,
      "durationS"        : self.durationS,
      "aggregation"      : self.aggregation,
    }

  def ConfigHash(self):
    """SHA-256 hex of the canonical JSON (sorted keys, no whitespace)."""
    canonical = json.dumps(self.ToDict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

  @classmethod
  def FromConfigs(cls, runConfigs=None):
    """Resolve the gpu, cache and attack blocks (presets plus overrides) into an AttackConfig."""
    runConfigs = runConfigs if (runConfigs is not None) else configs
    gpu = GpuConfig.FromConfigs(runConfigs)
    geometry = CacheGeometry.FromConfigs(runConfigs)
    attack = ResolvePreset(runConfigs, "attack", "attackPresets")
    numWorkgroups = attack.get("numWorkgroups")
    layout = SpyLayout(
      numWorkgroups=int(numWorkgroups if (numWorkgroups is not None) else gpu.numSubslices),
      countingThreadsPerWorkgroup=int(attack.get("countingThreadsPerWorkgroup", 64)),
      attackerWavefrontsPerWorkgroup=int(attack.get("attackerWavefrontsPerWorkgroup", 1)),
      activeThreadsPerAttackerWavefront=int(attack.get("activeThreadsPerAttackerWavefront", 1)),
    )
    jitterRel = attack.get("jitterRel")
    timer = TimerModel(
      ticksPerCycle=float(attack["ticksPerCycle"]),
      jitterRel=float(jitterRel if (jitterRel is not None) else gpu.timerJitterRel),
      resolutionTicks=int(attack.get("resolutionTicks", 1)),
      noiseTicks=float(attack.get("noiseTicks", 0.0)),
    )
    bufferBytes = attack.get("bufferBytes")
    return cls(
      layout=layout,
      gpu=gpu,
      geometry=geometry,
      timer=timer,
      probeOrder=attack.get("probeOrder", "REVERSE_RECENCY"),
      probeSeed=int(attack.get("probeSeed", 0)),
      bufferBytes=(int(bufferBytes) if (bufferBytes is not None) else None),
      bufferBase=int(attack.get("bufferBase", 0)),
      dispatchOverheadS=float(attack["dispatchOverheadS"]),
      cycleTimeS=float(attack["cycleTimeS"]),
      durationS=float(runConfigs["corpus"]["durationS"]),
      aggregation=attack.get("aggregation", "max"),
    )


@dataclass(frozen=True)
class Memorygram:
  siteId: int
  trial: int
  samplingRateHz: float
  samples: tuple
  configHash: str

  def ToRecord(self):
    """JSONL record; the key order is fixed."""
    return {
      "site"       : self.siteId,
      "trial"      : self.trial,
      "rate_hz"    : self.samplingRateHz,
      "config_hash": self.configHash,
      "samples"    : list(self.samples),
    }

  def ToJsonLine(self):
    return json.dumps(self.ToRecord(), separators=(",", ":"))

  @classmethod
  def FromRecord(cls, record):
    return cls(
      siteId=int(record["site"]),
      trial=int(record["trial"]),
      samplingRateHz=float(record["rate_hz"]),
      samples=tuple(int(v) for v in record["samples"]),
      configHash=str(record["config_hash"]),
    )


def _CollectSiteJob(job):
  # Module-level so the process pool can pickle it.
  config, corpusSeed, paramRanges, siteId, trials, viewportScale, firstTrial = job
  channel = ChannelSimHelper(config, corpusSeed=corpusSeed, paramRanges=paramRanges)
  return channel.CollectSite(siteId, trials, viewportScale, firstTrial)


class ChannelSimHelper(object):
  r'''
  A helper class for the occupancy channel.
  Runs the prime, victim and probe loop of one attack configuration over the victim sites and
  calibrates the timing constants of the modeled GPU.
  '''

  def __init__(self, config=None, runConfigs=None, corpusSeed=None, paramRanges=None):
    r'''
    Initialize the ChannelSimHelper for one attack configuration.

    Parameters:
      config (AttackConfig): Attack to simulate; resolved from the configuration when None.
      runConfigs (dict): Run configuration used for the defaults.
      corpusSeed (int): Corpus of the victim sites; defaults to corpus.corpusSeed.
      paramRanges (dict): Victim generator ranges; defaults to corpus.paramRanges.
    '''
    # Resolve the attack from the gpu, cache and attack blocks when none is given.
    self.config = config if (config is not None) else AttackConfig.FromConfigs(runConfigs)
    self.cacheHelper = CacheModelHelper(self.config.geometry)  # Cache model of the attack.
    self.execHelper = GpuExecHelper(self.config.gpu)  # Layout, contention and timer model.
    # Victim generator with addresses aligned to the modeled line size.
    self.victimHelper = VictimGenHelper(
      corpusSeed=corpusSeed,
      paramRanges=paramRanges,
      lineSizeBytes=self.config.geometry.lineSizeBytes,
      runConfigs=runConfigs,
    )

  def BuildProbeChain(self, bufferBytes=None, order=None, seed=None, bufferBase=None):
    r'''
    Build the pointer-chase chain over a buffer.

    Parameters:
      bufferBytes (int): Buffer size, a positive multiple of the line size; default the attack's buffer.
      order (str): PRIME_ORDER, REVERSE_RECENCY or RANDOM_PERMUTATION; default the attack's order.
      seed (int): Shuffle seed for RANDOM_PERMUTATION; default the attack's seed.
      bufferBase (int): Byte address of the buffer; default the attack's base.

    Returns:
      ProbeChain: Every line of the buffer exactly once.
    '''
    config = self.config
    bufferBytes = bufferBytes if (bufferBytes is not None) else config.resolvedBufferBytes
    order = order if (order is not None) else config.probeOrder
    seed = seed if (seed is not None) else config.probeSeed
    bufferBase = bufferBase if (bufferBase is not None) else config.bufferBase
    lineSize = config.geometry.lineSizeBytes
    if (bufferBytes <= 0 or bufferBytes % lineSize != 0):
      raise ConfigurationError(f"Buffer size {bufferBytes} is not a positive multiple of the {lineSize}-byte line.")
    if (order not in PROBE_ORDERS):
      raise ConfigurationError(f"Unknown probe order: {order}. Expected one of {PROBE_ORDERS}.")
    numLines = bufferBytes // lineSize
    if (order == "RANDOM_PERMUTATION"):
      # numpy's permutation is a Fisher-Yates shuffle.
      lines = StreamRng(seed, "chain").permutation(numLines).tolist()
    else:
      lines = list(range(numLines))
    return ProbeChain(bufferBase, bufferBytes, lineSize, order, seed, lines)

  def Prime(self, state, chain):
    """Touch every buffer line in chain order; the next REVERSE_RECENCY probe walks backwards."""
    access = state.Access  # Bind once for the hot loop.
    for addr in chain.addresses:
      access(addr, SPY)
    chain.forwardNext = False  # The prime counts as a forward walk.

  def ProbeCycles(self, state, chain, threads=1):
    r'''
    Walk the chain once and accumulate latency cycles per owning thread.

    With several threads the spy's misses in this walk share the L3: no thread that missed can
    finish before totalMisses x missLatencyCycles / missParallelism cycles. Threads that only hit
    and single-thread walks pay their own latencies only.

    Returns:
      tuple: (per-thread cycle counts, number of misses in this walk)
    '''
    owners = chain.ThreadOfPosition(threads)  # Owner thread of every chain position.
    addresses = chain.addresses
    access = state.Access
    cycles = [0] * threads  # Latency cycles per thread.
    threadMisses = [0] * threads  # Misses per thread.
    for position in chain.NextTraversal():
      owner = owners[position]
      result = access(addresses[position], SPY)
      cycles[owner] += result.latencyCycles
      if (not result.hit):
        threadMisses[owner] += 1
    misses = sum(threadMisses)
    if (threads > 1 and misses > 0):
      # Shared miss drain of the whole walk.
      geometry = state.geometry
      drain = misses * geometry.missLatencyCycles / geometry.missParallelism
      cycles = [max(c, drain) if (m > 0) else c for c, m in zip(cycles, threadMisses)]
    return cycles, misses

  def ProbeOnce(self, state, chain, timer, contention, rng):
    r'''
    One single-thread probe of the whole chain.

    Parameters:
      state (CacheState): Cache to probe.
      chain (ProbeChain): Buffer chain.
      timer (TimerModel): Counting timer.
      contention (ContentionModel): Latency multiplier and jitter scale.
      rng (numpy.random.Generator): Timer noise stream.

    Returns:
      int: Measured ticks.
    '''
    cycles, _ = self.ProbeCycles(state, chain, 1)
    # Time the scaled walk with the contention-dependent jitter.
    return self.execHelper.TimerTicks(cycles[0] * contention.latencyMultiplier, timer, rng, contention.jitterScale)

  def RunAttack(self, profile, trialSeed, siteId=None, corpusSeed=None):
    r'''
    Simulate one visit and record its memorygram.

    Every sample is one shader dispatch: the dispatch overhead elapses (victim events in the window
    are applied), then each active thread probes its partition of the chain. The sample is the
    max (or mean) of the per-thread ticks and the next sample starts when the slowest thread ends.

    Parameters:
      profile (SiteProfile): Victim site, or None for a victim-free run.
      trialSeed (int): Trial key.
      siteId (int): Site id recorded for victim-free runs; defaults to the profile's id.
      corpusSeed (int): Corpus seed for victim-free runs; defaults to the profile's seed.

    Returns:
      Memorygram: Samples in counter ticks.
    '''
    config = self.config
    validated = self.execHelper.ValidateLayout(config.layout)  # Fails before any sample.
    if (siteId is None):
      siteId = profile.siteId if (profile is not None) else -1
    if (corpusSeed is None):
      corpusSeed = profile.corpusSeed if (profile is not None) else 0

    threads = validated.totalActiveThreads
    # Contention of every subslice that runs attacker threads.
    subsliceContention = {
      subslice: self.execHelper.ContentionFactor(active)
      for subslice, active in enumerate(validated.activePerSubslice) if (active > 0)
    }
    multipliers = [subsliceContention[s].latencyMultiplier for s in validated.threadSubslices]
    jitterScales = [subsliceContention[s].jitterScale for s in validated.threadSubslices]

    # Per-trial cache, chain, victim trace and timer stream.
    state = self.cacheHelper.NewState(seed=DeriveSeed("cache", corpusSeed, siteId, trialSeed))
    chain = self.BuildProbeChain()
    if (len(chain) < threads):
      raise ConfigurationError(f"{threads} attacker threads cannot split a {len(chain)}-line buffer.")
    trace = self.victimHelper.GenerateTrace(profile, config.durationS, trialSeed) if (profile is not None) else []
    timerRng = StreamRng("timer", corpusSeed, siteId, trialSeed)

    self.Prime(state, chain)
    samples = []
    eventIndex = 0
    timeS = 0.0
    while (timeS < config.durationS):
      windowEnd = timeS + config.dispatchOverheadS
      # Apply the victim events that happened before this dispatch started probing.
      while (eventIndex < len(trace) and trace[eventIndex].timeS < windowEnd):
        state.Access(trace[eventIndex].addr, VICTIM)
        eventIndex += 1

      cycles, _ = self.ProbeCycles(state, chain, threads)
      scaled = [cycles[i] * multipliers[i] for i in range(threads)]
      ticks = [
        self.execHelper.TimerTicks(scaled[i], config.timer, timerRng, jitterScales[i])
        for i in range(threads)
      ]
      if (config.aggregation == "max"):
        samples.append(max(ticks))
      else:
        samples.append(int(round(sum(ticks) / threads)))
      timeS = windowEnd + max(scaled) * config.cycleTimeS  # The slowest thread ends the dispatch.

    rate = len(samples) / config.durationS
    if (VERBOSE):
      logger.info(f"Site {siteId} trial {trialSeed}: {len(samples)} samples at {rate:.1f} Hz.")
    return Memorygram(
      siteId=int(siteId),
      trial=int(trialSeed),
      samplingRateHz=rate,
      samples=tuple(int(v) for v in samples),
      configHash=config.ConfigHash(),
    )

  def CollectSite(self, siteId, trials, viewportScale=1.0, firstTrial=0):
    """Memorygrams of `trials` visits to one site, trial seeds firstTrial, firstTrial + 1, ..."""
    profile = self.victimHelper.MakeProfile(siteId, viewportScale)  # Same profile for every visit.
    return [self.RunAttack(profile, trial) for trial in range(firstTrial, firstTrial + trials)]

  def CollectSites(self, siteTrials, viewportScale=1.0, firstTrial=0, maxJobs=1, showProgress=True):
    r'''
    Collect several sites, one job per site.

    Parameters:
      siteTrials (list): (siteId, trials) pairs.
      viewportScale (float): Browser window size for every site.
      firstTrial (int): First trial seed of every site.
      maxJobs (int): Worker processes.
      showProgress (bool): Show a progress bar.

    Returns:
      list: One list of memorygrams per pair, in input order.
    '''
    victim = self.victimHelper
    # Each job rebuilds the helper in its worker from picklable parts.
    jobs = [
      (self.config, victim.corpusSeed, victim.paramRanges, siteId, trials, viewportScale, firstTrial)
      for siteId, trials in siteTrials
    ]
    runner = JobRunner(_CollectSiteJob, maxJobs=maxJobs, description="Sites", showProgress=showProgress)
    return runner.Run(jobs)

  def EffectiveSamplingRate(self):
    """1 / (dispatch overhead + all-hit probe time of one thread's partition)."""
    config = self.config
    validated = self.execHelper.ValidateLayout(config.layout)
    numLines = config.resolvedBufferBytes / config.geometry.lineSizeBytes
    partitionLines = numLines / validated.totalActiveThreads  # Lines per thread.
    # The most contended subslice sets the pace.
    multiplier = max(
      self.execHelper.ContentionFactor(active).latencyMultiplier
      for active in validated.activePerSubslice if (active > 0)
    )
    probeTimeS = partitionLines * config.geometry.hitLatencyCycles * multiplier * config.cycleTimeS
    return 1.0 / (config.dispatchOverheadS + probeTimeS)

  def Calibrate(self, targets, probeRepeats=20, seed=0):
    r'''
    Solve the dispatch overhead, cycle time and tick scale from the two rate anchors.

    With T the all-hit full-buffer probe time of one thread and D the dispatch overhead:
      D + T = 1 / basicRateHz,  D + T / n = 1 / parallelRateHz  (n = parallelActiveThreads).
    ticksPerCycle puts the all-hit full-buffer probe at targetProbeTicks. The attack's geometry, GPU
    and buffer are used; its layout and timer constants are not.

    Parameters:
      targets (dict): basicRateHz, parallelRateHz, parallelActiveThreads, targetProbeTicks.
      probeRepeats (int): Simulated probes used to verify the tick band.
      seed (int): Timer noise seed for the verification.

    Returns:
      dict: Calibrated constants plus the rates and tick mean they reproduce.
    '''
    geometry, gpu = self.config.geometry, self.config.gpu
    basicRate = float(targets["basicRateHz"])
    parallelRate = float(targets["parallelRateHz"])
    parallelThreads = int(targets["parallelActiveThreads"])
    targetTicks = float(targets["targetProbeTicks"])
    if (basicRate <= 0 or parallelRate <= 0 or targetTicks <= 0):
      raise CalibrationError("Anchor rates and the tick target must be positive.")
    if (parallelThreads <= 1 or parallelRate <= basicRate):
      raise CalibrationError("The parallel anchor must use more threads and a higher rate than the basic one.")
    if (parallelThreads > gpu.numSubslices * gpu.eusPerSubslice):
      raise CalibrationError(
        f"{parallelThreads} threads exceed the contention-free budget of {gpu.numSubslices * gpu.eusPerSubslice}."
      )

    bufferBytes = self.config.resolvedBufferBytes
    numLines = bufferBytes // geometry.lineSizeBytes
    hitCycles = numLines * geometry.hitLatencyCycles  # All-hit full-buffer probe.
    if (hitCycles <= 0):
      raise CalibrationError("An all-hit probe takes zero cycles; the hit latency must be positive.")

    # Two anchors, two unknowns.
    probeTimeS = (1.0 / basicRate - 1.0 / parallelRate) * parallelThreads / (parallelThreads - 1)
    dispatchOverheadS = 1.0 / basicRate - probeTimeS
    if (dispatchOverheadS < 0):
      raise CalibrationError(
        f"{parallelRate} Hz at {parallelThreads} threads needs better than linear speed-up over {basicRate} Hz."
      )
    cycleTimeS = probeTimeS / hitCycles
    ticksPerCycle = targetTicks / hitCycles

    # Verify the tick band with a primed, victim-free full-buffer probe.
    timer = TimerModel(ticksPerCycle=ticksPerCycle, jitterRel=gpu.timerJitterRel)
    state = self.cacheHelper.NewState(seed=seed)
    chain = self.BuildProbeChain(bufferBytes, "REVERSE_RECENCY", 0, 0)
    self.Prime(state, chain)
    rng = StreamRng(seed, "calibration")
    contention = self.execHelper.ContentionFactor(1)
    probeTicks = [self.ProbeOnce(state, chain, timer, contention, rng) for _ in range(probeRepeats)]

    achievedBasic = 1.0 / (dispatchOverheadS + probeTimeS)
    achievedParallel = 1.0 / (dispatchOverheadS + probeTimeS / parallelThreads)
    result = {
      "dispatchOverheadS": dispatchOverheadS,
      "cycleTimeS"       : cycleTimeS,
      "ticksPerCycle"    : ticksPerCycle,
      "hitLatencyCycles" : geometry.hitLatencyCycles,
      "missLatencyCycles": geometry.missLatencyCycles,
      "bufferBytes"      : bufferBytes,
      "basicRateHz"      : achievedBasic,
      "parallelRateHz"   : achievedParallel,
      "probeTicksMean"   : float(np.mean(probeTicks)),
      "probeTicksStd"    : float(np.std(probeTicks)),
    }
    if (VERBOSE):
      logger.info(
        f"Calibration: overhead {dispatchOverheadS * 1e3:.3f} ms, cycle {cycleTimeS:.3e} s, "
        f"{ticksPerCycle:.4f} ticks/cycle, probe mean {result['probeTicksMean']:.0f} ticks."
      )
    return result


if (__name__ == "__main__"):
  # Example usage of the ChannelSimHelper class.
  channelObj = ChannelSimHelper()  # Initialize the helper from the configuration.
  print(f"Effective rate: {channelObj.EffectiveSamplingRate():.2f} Hz")  # All-hit sampling rate.
  memorygram = channelObj.CollectSite(0, 1)[0]  # One visit to site 0.
  print(f"{len(memorygram.samples)} samples at {memorygram.samplingRateHz:.1f} Hz: {memorygram.samples[:10]}")
