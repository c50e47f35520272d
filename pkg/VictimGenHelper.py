'''
========================================================================
        ╦  ╔═╗  ╔═╗┌─┐┌─┐┬ ┬┌─┐  ╔═╗┌─┐┬ ┬
        ║   ═╣  ║  ├─┤│  ├─┤├┤   ╚═╗├─┘└┬┘
        ╩═╝╚═╝  ╚═╝┴ ┴└─┘┴ ┴└─┘  ╚═╝┴   ┴
========================================================================
# Author: L3 Cache Spy Developers
# Permissions and Citation: Refer to the README file.
'''

# Import necessary libraries for the victim generator.
import math, json, hashlib, logging
import numpy as np
from dataclasses import dataclass, replace, asdict
from typing import NamedTuple
from ConfigsSettings import LoadConfigs, ConfigurationError

# Use module logger so messages go through Python's logging system.
logger = logging.getLogger(__name__)

configs = LoadConfigs()  # Load the configuration (configs.yaml over the defaults).
VERBOSE = configs.get("verbose", False)  # Get the verbose setting from the configuration.

# Victim buffers live far above any probe buffer so their tags never collide.
VICTIM_REGION_BASE = 1 << 36

# Keys every param_ranges mapping must provide (defaults fill the gaps).
PARAM_RANGE_KEYS = (
  "footprintLines", "burstRateHz", "loadEndS", "settleLengthS", "loadIntensity", "settleIntensity",
  "idleIntensity", "repaintPeriodS", "trialJitter", "phaseJitterS", "regionFactor",
)


def DeriveSeed(*parts):
  r'''
  Derive a 64-bit stream seed from any key parts.

  The seed is the first 8 bytes (big-endian) of SHA-256 over ":".join(str(part)).
  This mixer is part of the on-disk reproducibility contract; do not change it.
  '''
  key = ":".join(str(part) for part in parts).encode("utf-8")
  return int.from_bytes(hashlib.sha256(key).digest()[:8], "big")


def StreamRng(*parts):
  """numpy Generator seeded by DeriveSeed(*parts)."""
  return np.random.default_rng(DeriveSeed(*parts))


class RenderEvent(NamedTuple):
  timeS: float
  addr: int


@dataclass(frozen=True)
class SiteProfile:
  siteId: int
  corpusSeed: int
  footprintLines: int  # Distinct lines per burst before viewport scaling.
  burstRateHz: float
  envelope: tuple  # ((phaseStartS, intensity), ...), first phase starts at 0.
  addressBase: int
  viewportScale: float = 1.0
  repaintPeriodS: float = 0.5  # Periodic repaint bursts during the last phase.
  trialJitter: float = 0.1  # Per-burst footprint jitter, uniform in [1 - j, 1 + j].
  phaseJitterS: float = 0.05  # Per-trial shift of the phase boundaries.
  regionLines: int = 0  # Lines the site draws bursts from; 0 means 2 x footprint.

  def __post_init__(self):
    if (self.footprintLines < 1):
      raise ConfigurationError(f"footprintLines must be at least 1: {self.footprintLines}")
    if (self.burstRateHz <= 0):
      raise ConfigurationError(f"burstRateHz must be positive: {self.burstRateHz}")
    if (not (0 < self.viewportScale <= 1)):
      raise ConfigurationError(f"viewportScale must be in (0, 1]: {self.viewportScale}")
    if ((not self.envelope) or (self.envelope[0][0] != 0)):
      raise ConfigurationError("The envelope must start at time 0.")
    starts = [phase[0] for phase in self.envelope]
    if (any(b < a for a, b in zip(starts, starts[1:]))):
      raise ConfigurationError("Envelope phases must be ordered by start time.")
    if (any(not (0 <= phase[1] <= 1) for phase in self.envelope)):
      raise ConfigurationError("Envelope intensities must be in [0, 1].")
    if (not (0 <= self.trialJitter < 1)):
      raise ConfigurationError(f"trialJitter must be in [0, 1): {self.trialJitter}")
    if (self.addressBase < 0):
      raise ConfigurationError("addressBase must be non-negative.")

  @property
  def sourceLines(self):
    return self.regionLines if (self.regionLines > 0) else 2 * self.footprintLines

  @property
  def expectedBurstLines(self):
    return self.footprintLines * self.viewportScale

  def ToDict(self):
    data = asdict(self)
    data["envelope"] = [list(phase) for phase in self.envelope]
    return data

  def ToJson(self):
    return json.dumps(self.ToDict(), sort_keys=True, separators=(",", ":"))

  @classmethod
  def FromDict(cls, data):
    data = dict(data)
    data["envelope"] = tuple((float(start), float(intensity)) for start, intensity in data["envelope"])
    return cls(**data)


def DefaultParamRanges(runConfigs=None):
  """Generator ranges from the `corpus` block."""
  runConfigs = runConfigs if (runConfigs is not None) else configs
  return dict(runConfigs["corpus"]["paramRanges"])


def CheckParamRanges(paramRanges, runConfigs=None):
  """Fill missing ranges from the configuration and reject empty or malformed ones."""
  ranges = DefaultParamRanges(runConfigs)  # Start from the configured ranges.
  ranges.update(paramRanges or {})  # Caller ranges win.
  for key in PARAM_RANGE_KEYS:
    value = ranges.get(key)
    if ((value is None) or (len(value) != 2) or (value[1] < value[0])):
      raise ConfigurationError(f"Parameter range {key} is empty or malformed: {value}")
  return ranges


def _BurstTimes(profile, durationS, rng):
  # Per-trial phase boundaries, kept ordered and inside the trace.
  starts = [0.0]
  for start, _ in profile.envelope[1:]:
    shifted = start + rng.normal(0.0, profile.phaseJitterS) if (profile.phaseJitterS > 0) else start
    starts.append(min(max(starts[-1], shifted), durationS))
  ends = starts[1:] + [durationS]

  times = []
  for (start, end), (_, intensity) in zip(zip(starts, ends), profile.envelope):
    length = end - start
    if (length <= 0):
      continue
    count = rng.poisson(profile.burstRateHz * intensity * length)
    times.extend(rng.uniform(start, end, size=count).tolist())

  # Repaints in the final phase.
  lastStart = starts[-1]
  if (profile.repaintPeriodS > 0):
    repaint = lastStart + profile.repaintPeriodS
    while (repaint < durationS):
      times.append(repaint)
      repaint += profile.repaintPeriodS
  times.sort()
  return times


class VictimGenHelper(object):
  def __init__(self, corpusSeed=None, paramRanges=None, lineSizeBytes=64, runConfigs=None):
    """Initialize the VictimGenHelper for one corpus."""
    runConfigs = runConfigs if (runConfigs is not None) else configs
    # Default corpus seed from the configuration.
    self.corpusSeed = int(corpusSeed if (corpusSeed is not None) else runConfigs["corpus"].get("corpusSeed", 0))
    # Validate the generator ranges once; every profile reuses them.
    self.paramRanges = CheckParamRanges(paramRanges, runConfigs)
    self.lineSizeBytes = int(lineSizeBytes)  # Alignment of the generated addresses.

  def MakeProfile(self, siteId, viewportScale=1.0):
    r'''
    Draw a site profile from the stream keyed by (corpusSeed, siteId).

    Parameters:
      siteId (int): Site identifier.
      viewportScale (float): Browser window size relative to full screen, in (0, 1].

    Returns:
      SiteProfile: Same inputs always give the same profile.
    '''
    ranges = self.paramRanges
    rng = StreamRng(self.corpusSeed, siteId, "profile")  # Per-site stream.

    # The draw order below is part of the reproducibility contract.
    footprintLines = int(rng.integers(ranges["footprintLines"][0], ranges["footprintLines"][1] + 1))
    burstRateHz = float(rng.uniform(*ranges["burstRateHz"]))
    loadEndS = float(rng.uniform(*ranges["loadEndS"]))
    settleLengthS = float(rng.uniform(*ranges["settleLengthS"]))
    loadIntensity = float(rng.uniform(*ranges["loadIntensity"]))
    settleIntensity = float(rng.uniform(*ranges["settleIntensity"]))
    idleIntensity = float(rng.uniform(*ranges["idleIntensity"]))
    repaintPeriodS = float(rng.uniform(*ranges["repaintPeriodS"]))
    trialJitter = float(rng.uniform(*ranges["trialJitter"]))
    phaseJitterS = float(rng.uniform(*ranges["phaseJitterS"]))
    regionFactor = int(rng.integers(ranges["regionFactor"][0], ranges["regionFactor"][1] + 1))
    addressBase = VICTIM_REGION_BASE + int(rng.integers(0, 1 << 16)) * 64

    envelope = (
      (0.0, loadIntensity),  # Page load.
      (loadEndS, settleIntensity),  # Settle.
      (loadEndS + settleLengthS, idleIntensity),  # Idle with periodic repaints.
    )
    if (VERBOSE):
      logger.debug(f"Site {siteId}: footprint {footprintLines} lines at {burstRateHz:.1f} Hz.")
    profile = SiteProfile(
      siteId=int(siteId),
      corpusSeed=self.corpusSeed,
      footprintLines=footprintLines,
      burstRateHz=burstRateHz,
      envelope=envelope,
      addressBase=addressBase,
      viewportScale=1.0,
      repaintPeriodS=repaintPeriodS,
      trialJitter=trialJitter,
      phaseJitterS=phaseJitterS,
      regionLines=max(1, regionFactor) * footprintLines,
    )
    if (viewportScale != 1.0):
      # Shrink the footprint to the visible window.
      profile = self.ScaleProfile(profile, viewportScale)
    return profile

  def ScaleProfile(self, profile, viewportScale):
    """Replace the viewport scale; the scale is absolute, not compounded."""
    if (not (0 < viewportScale <= 1)):
      raise ConfigurationError(f"viewportScale must be in (0, 1]: {viewportScale}")
    # The profile is frozen, so build a copy with the new scale.
    return replace(profile, viewportScale=float(viewportScale))

  def GenerateTrace(self, profile, durationS, trialSeed):
    r'''
    Generate the rendering trace of one visit.

    Parameters:
      profile (SiteProfile): Site to render.
      durationS (float): Trace length in seconds, > 0.
      trialSeed (int): Trial key; the stream is keyed by (corpusSeed, siteId, trialSeed).

    Returns:
      list[RenderEvent]: Events sorted by time, all in [0, durationS).
    '''
    if (durationS <= 0):
      raise ConfigurationError(f"durationS must be positive: {durationS}")
    # The profile carries its own corpus seed.
    rng = StreamRng(profile.corpusSeed, profile.siteId, trialSeed, "trace")
    burstTimes = _BurstTimes(profile, durationS, rng)  # When the page repaints.

    sourceLines = profile.sourceLines  # Lines the bursts are drawn from.
    events = []
    for timeS in burstTimes:
      if (not (0 <= timeS < durationS)):
        continue  # Outside the trace window.
      # Jittered, viewport-scaled burst size.
      u = rng.uniform(1.0 - profile.trialJitter, 1.0 + profile.trialJitter)
      count = max(1, math.ceil(profile.footprintLines * profile.viewportScale * u))
      count = min(count, sourceLines)
      lines = rng.choice(sourceLines, size=count, replace=False)  # Distinct lines per burst.
      events.extend(RenderEvent(timeS, profile.addressBase + int(line) * self.lineSizeBytes) for line in lines)
    return events

  @staticmethod
  def GroupBursts(trace):
    """Group consecutive events sharing a timestamp: [(timeS, [addr, ...]), ...]."""
    bursts = []
    for event in trace:
      if (bursts and bursts[-1][0] == event.timeS):
        bursts[-1][1].append(event.addr)  # Same burst.
      else:
        bursts.append((event.timeS, [event.addr]))  # New burst.
    return bursts

  @staticmethod
  def TraceToDict(profile, trialSeed, durationS, trace):
    """JSON-ready form of one trace."""
    return {
      "site"     : profile.siteId,
      "trial"    : trialSeed,
      "durationS": durationS,
      "events"   : [[event.timeS, event.addr] for event in trace],
    }


if (__name__ == "__main__"):
  # Example usage of the VictimGenHelper class.
  victimObj = VictimGenHelper(corpusSeed=0)  # Initialize the helper for corpus 0.
  profile = victimObj.MakeProfile(0)  # Draw the first site.
  print(profile.ToJson())  # Display the profile.
  trace = victimObj.GenerateTrace(profile, 5.0, 0)  # Render one 5 s visit.
  bursts = victimObj.GroupBursts(trace)  # Group the events into bursts.
  print(f"{len(bursts)} bursts, {len(trace)} events, mean {np.mean([len(b[1]) for b in bursts]):.1f} lines per burst.")
