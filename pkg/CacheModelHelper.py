'''
========================================================================
        ╦  ╔═╗  ╔═╗┌─┐┌─┐┬ ┬┌─┐  ╔═╗┌─┐┬ ┬
        ║   ═╣  ║  ├─┤│  ├─┤├┤   ╚═╗├─┘└┬┘
        ╩═╝╚═╝  ╚═╝┴ ┴└─┘┴ ┴└─┘  ╚═╝┴   ┴
========================================================================
# Author: L3 Cache Spy Developers
# Permissions and Citation: Refer to the README file.
'''

# Import necessary libraries for the cache model.
import random, logging
from dataclasses import dataclass
from typing import Optional
from ConfigsSettings import LoadConfigs, ResolvePreset, ConfigurationError

# Use module logger so messages go through Python's logging system.
logger = logging.getLogger(__name__)

configs = LoadConfigs()  # Load the configuration (configs.yaml over the defaults).
VERBOSE = configs.get("verbose", False)  # Get the verbose setting from the configuration.

# Access domains.
SPY = "SPY"
VICTIM = "VICTIM"
DOMAINS = (SPY, VICTIM)

REPLACEMENT_POLICIES = ("LRU", "RANDOM", "TREE_PLRU")


def IsPowerOfTwo(value):
  """Return True for 1, 2, 4, 8, ..."""
  return (isinstance(value, int) and (value >= 1) and ((value & (value - 1)) == 0))


@dataclass(frozen=True)
class WayPartition:
  """Contiguous way range [start, end) per access domain."""
  domainToWayRange: dict

  def Validate(self, ways):
    """Check that ranges are non-empty, disjoint and inside [0, ways)."""
    ranges = []  # Collected (start, end, domain) triples.
    for domain, wayRange in self.domainToWayRange.items():
      if (domain not in DOMAINS):
        # Only the spy and the victim can own ways.
        raise ConfigurationError(f"Unknown partition domain: {domain}. Expected one of {DOMAINS}.")
      start, end = wayRange  # Unpack the way range.
      if (start < 0 or end > ways or start >= end):
        raise ConfigurationError(f"Partition range for {domain} must be non-empty inside [0, {ways}): {wayRange}")
      ranges.append((start, end, domain))
    ranges.sort()  # Sort by start way so neighbours can be compared.
    for (s1, e1, d1), (s2, e2, d2) in zip(ranges, ranges[1:]):
      if (s2 < e1):
        # The next range starts inside the previous one.
        raise ConfigurationError(f"Partition ranges of {d1} and {d2} overlap.")

  def Width(self, domain):
    start, end = self.domainToWayRange[domain]
    return end - start

  def ToDict(self):
    return {domain: [int(r[0]), int(r[1])] for domain, r in sorted(self.domainToWayRange.items())}

  @classmethod
  def FromDict(cls, data):
    if (data is None):
      return None  # No partition: the cache is shared.
    if (isinstance(data, WayPartition)):
      return data  # Already built.
    return cls({str(domain): (int(r[0]), int(r[1])) for domain, r in data.items()})


@dataclass(frozen=True)
class CacheGeometry:
  r'''
  Geometry of the modeled L3.

  Index bits above the line offset are, from least significant: set bits, sub-bank bits, bank bits.
  There is no index hashing, so the composite set is just those bits read as one integer.
  `missParallelism` is how many spy misses the shared L3 overlaps when several spy threads walk
  their eviction sets at once; a single thread always pays every miss in full.
  '''
  lineSizeBytes: int = 64
  setBits: int = 5
  subBankBits: int = 3
  bankBits: int = 2
  ways: int = 8
  replacementPolicy: str = "LRU"
  hitLatencyCycles: int = 30
  missLatencyCycles: int = 300
  missParallelism: int = 1
  partition: Optional[WayPartition] = None

  def __post_init__(self):
    if (not IsPowerOfTwo(self.lineSizeBytes)):
      # Offset bits must split the address cleanly.
      raise ConfigurationError(f"lineSizeBytes must be a power of two: {self.lineSizeBytes}")
    for name in ("setBits", "subBankBits", "bankBits"):
      if (getattr(self, name) < 0):
        raise ConfigurationError(f"{name} must be non-negative.")
    if (self.ways < 1):
      raise ConfigurationError(f"ways must be at least 1: {self.ways}")
    if (self.replacementPolicy not in REPLACEMENT_POLICIES):
      raise ConfigurationError(
        f"Unknown replacement policy: {self.replacementPolicy}. Expected one of {REPLACEMENT_POLICIES}."
      )
    if (self.hitLatencyCycles < 0 or self.missLatencyCycles <= self.hitLatencyCycles):
      # A miss that is not slower than a hit leaks nothing.
      raise ConfigurationError("missLatencyCycles must exceed hitLatencyCycles (both non-negative).")
    if (not isinstance(self.missParallelism, int) or self.missParallelism < 1):
      raise ConfigurationError(f"missParallelism must be an integer of at least 1: {self.missParallelism}")
    if (self.partition is not None):
      self.partition.Validate(self.ways)  # Check the way ranges against the associativity.
    if (self.replacementPolicy == "TREE_PLRU"):
      for width in self.GroupWidths().values():
        if (not IsPowerOfTwo(width)):
          # The PLRU tree needs a full binary tree per way group.
          raise ConfigurationError(f"TREE_PLRU needs power-of-two way groups, got {width}.")

  @property
  def offsetBits(self):
    return self.lineSizeBytes.bit_length() - 1

  @property
  def indexBits(self):
    return self.setBits + self.subBankBits + self.bankBits

  @property
  def compositeSets(self):
    return 1 << self.indexBits

  @property
  def totalLines(self):
    return self.compositeSets * self.ways

  @property
  def capacityBytes(self):
    return self.compositeSets * self.ways * self.lineSizeBytes

  def GroupWidths(self):
    """Way-group widths keyed by domain, or by None when the cache is shared."""
    if (self.partition is None):
      return {None: self.ways}
    return {domain: self.partition.Width(domain) for domain in self.partition.domainToWayRange}

  def DomainCapacityBytes(self, domain):
    """Bytes a domain can keep resident."""
    if (self.partition is None):
      return self.capacityBytes  # Shared cache: the whole capacity.
    if (domain not in self.partition.domainToWayRange):
      raise ConfigurationError(f"Domain {domain} has no ways in the configured partition.")
    return self.compositeSets * self.partition.Width(domain) * self.lineSizeBytes

  def ToDict(self):
    return {
      "lineSizeBytes"    : self.lineSizeBytes,
      "setBits"          : self.setBits,
      "subBankBits"      : self.subBankBits,
      "bankBits"         : self.bankBits,
      "ways"             : self.ways,
      "replacementPolicy": self.replacementPolicy,
      "hitLatencyCycles" : self.hitLatencyCycles,
      "missLatencyCycles": self.missLatencyCycles,
      "missParallelism"  : self.missParallelism,
      "partition"        : (self.partition.ToDict() if self.partition else None),
    }

  @classmethod
  def FromDict(cls, data):
    data = dict(data)  # Copy so the caller's mapping is untouched.
    data.pop("preset", None)  # The preset name is not a geometry field.
    unknown = set(data) - set(cls.__dataclass_fields__)
    if (unknown):
      raise ConfigurationError(f"Unknown cache geometry fields: {sorted(unknown)}")
    data["partition"] = WayPartition.FromDict(data.get("partition"))
    return cls(**data)

  @classmethod
  def FromConfigs(cls, runConfigs=None):
    """Build the geometry from the `cache` block (preset plus overrides)."""
    runConfigs = runConfigs if (runConfigs is not None) else configs
    return cls.FromDict(ResolvePreset(runConfigs, "cache", "cachePresets"))


@dataclass(frozen=True)
class SetIndex:
  bank: int
  subBank: int
  set: int
  composite: int


@dataclass(frozen=True)
class AccessResult:
  hit: bool
  latencyCycles: int


class CacheState(object):
  r'''
  Mutable residency state of the L3.

  Each composite set keeps one recency-ordered tag list (LRU first) per way group. Without a
  partition there is a single group shared by both domains; with a partition every domain owns the
  group matching its way range and can neither hit on nor evict the other domain's lines.
  Not safe for concurrent mutation.
  '''

  def __init__(self, geometry, seed=0):
    self.geometry = geometry  # Cache geometry.
    self.seed = seed  # Seed of the RANDOM replacement streams.
    self.Reset()  # Start from an empty cache.

  def Reset(self):
    """Empty every set, zero the counters and rewind the replacement RNG."""
    geometry = self.geometry
    self.widths = geometry.GroupWidths()  # Ways per group.
    if (geometry.partition is None):
      # Both domains share the single group.
      self.groupOf = {domain: None for domain in DOMAINS}
    else:
      # Every domain owns the group of its way range.
      self.groupOf = {domain: domain for domain in geometry.partition.domainToWayRange}
    self.sets = {group: [[] for _ in range(geometry.compositeSets)] for group in self.widths}
    if (geometry.replacementPolicy == "TREE_PLRU"):
      # Way slots and tree bits per set.
      self.slots = {
        group: [[None] * width for _ in range(geometry.compositeSets)]
        for group, width in self.widths.items()
      }
      self.plruBits = {
        group: [[0] * (width - 1) for _ in range(geometry.compositeSets)]
        for group, width in self.widths.items()
      }
    # One stream per way group, so one domain's misses never shift another domain's evictions.
    self.rngs = {group: random.Random(f"{self.seed}:{group}") for group in self.widths}
    self.hits = {domain: 0 for domain in DOMAINS}  # Hit counters.
    self.misses = {domain: 0 for domain in DOMAINS}  # Miss counters.

    # Hot-path constants.
    self.offsetBits = geometry.offsetBits
    self.indexBits = geometry.indexBits
    self.setMask = geometry.compositeSets - 1
    self.policy = geometry.replacementPolicy
    self.hitResult = AccessResult(True, geometry.hitLatencyCycles)
    self.missResult = AccessResult(False, geometry.missLatencyCycles)
    if (VERBOSE):
      logger.debug(f"Cache reset: {geometry.compositeSets} sets, way groups {self.widths}, policy {self.policy}.")
    return self

  def _GroupFor(self, domain):
    try:
      return self.groupOf[domain]
    except KeyError:
      raise ConfigurationError(f"Domain {domain} is not present in the way partition.")

  def Access(self, addr, domain):
    r'''
    Access one byte address on behalf of a domain.

    Parameters:
      addr (int): Byte address.
      domain (str): SPY or VICTIM.

    Returns:
      AccessResult: Hit flag and latency in cycles.
    '''
    group = self._GroupFor(domain)  # Way group the domain may use.
    line = addr >> self.offsetBits  # Drop the line offset.
    setIdx = line & self.setMask  # Composite set index.
    tag = line >> self.indexBits  # Everything above the index.
    residents = self.sets[group][setIdx]

    if (tag in residents):
      # Hit: move the tag to the most recent position.
      residents.remove(tag)
      residents.append(tag)
      if (self.policy == "TREE_PLRU"):
        slots = self.slots[group][setIdx]
        self._TouchPlru(self.plruBits[group][setIdx], slots.index(tag), len(slots))
      self.hits[domain] += 1
      return self.hitResult

    width = self.widths[group]
    if (self.policy == "LRU"):
      if (len(residents) >= width):
        residents.pop(0)  # Evict the least recently used line.
    elif (self.policy == "RANDOM"):
      if (len(residents) >= width):
        residents.pop(self.rngs[group].randrange(len(residents)))  # Evict a seeded random line.
    else:
      slots = self.slots[group][setIdx]
      bits = self.plruBits[group][setIdx]
      if (len(residents) >= width):
        slot = self._PlruVictim(bits, width)  # Follow the tree to the victim slot.
        residents.remove(slots[slot])
      else:
        slot = slots.index(None)  # Fill the first free slot.
      slots[slot] = tag
      self._TouchPlru(bits, slot, width)
    residents.append(tag)
    self.misses[domain] += 1
    return self.missResult

  @staticmethod
  def _PlruVictim(bits, width):
    # Heap-ordered tree; a 0 bit points the victim search left.
    node = 0
    while (node < width - 1):
      node = 2 * node + 1 + bits[node]
    return node - (width - 1)

  @staticmethod
  def _TouchPlru(bits, slot, width):
    node = slot + width - 1
    while (node > 0):
      parent = (node - 1) // 2
      bits[parent] = 1 if (node == 2 * parent + 1) else 0  # Point away from the touched leaf.
      node = parent

  def ResidentLines(self, compositeSet, domain=None):
    r'''
    Snapshot of the tags resident in a composite set, LRU first.

    Under a partition a domain selects its own group; without one, every group is concatenated in
    way-range order.
    '''
    if (not (0 <= compositeSet < self.geometry.compositeSets)):
      raise ValueError(f"Composite set {compositeSet} outside [0, {self.geometry.compositeSets}).")
    if (domain is not None):
      return list(self.sets[self._GroupFor(domain)][compositeSet])
    if (self.geometry.partition is None):
      return list(self.sets[None][compositeSet])
    ordered = sorted(self.geometry.partition.domainToWayRange.items(), key=lambda item: item[1][0])
    lines = []
    for group, _ in ordered:
      lines.extend(self.sets[group][compositeSet])
    return lines

  def Occupancy(self, compositeSet):
    """Number of resident lines in a composite set across all groups."""
    return sum(len(self.sets[group][compositeSet]) for group in self.sets)

  def Counters(self, domain):
    """Hit/miss counters of a domain."""
    return {
      "hits"    : self.hits[domain],
      "misses"  : self.misses[domain],
      "accesses": self.hits[domain] + self.misses[domain],
    }

  def LineAddress(self, compositeSet, tag):
    """Byte address of the line with this tag in this composite set."""
    return ((tag << self.indexBits) | compositeSet) << self.offsetBits


class CacheModelHelper(object):
  def __init__(self, geometry=None, runConfigs=None):
    """Initialize the CacheModelHelper with a geometry, or the one in the configuration."""
    # Resolve the geometry from the cache preset when none is given.
    self.geometry = geometry if (geometry is not None) else CacheGeometry.FromConfigs(runConfigs)
    if (VERBOSE):
      # Log the resolved geometry.
      logger.debug(f"Cache geometry: {self.Summary()}")

  def GetGeometry(self):
    """Return the cache geometry."""
    # Return the geometry used by this helper.
    return self.geometry

  def DecomposeAddress(self, addr):
    r'''
    Split a byte address into bank, sub-bank and set.

    Parameters:
      addr (int): Non-negative byte address.

    Returns:
      SetIndex: Bank, sub-bank, set and composite set index. Bits above the index are the tag.
    '''
    if (addr < 0):
      # Addresses are unsigned.
      raise ValueError(f"Address must be non-negative: {addr}")
    geometry = self.geometry
    line = addr >> geometry.offsetBits  # Drop the line offset.
    setValue = line & ((1 << geometry.setBits) - 1)  # Lowest index bits.
    subBank = (line >> geometry.setBits) & ((1 << geometry.subBankBits) - 1)  # Middle index bits.
    bank = (line >> (geometry.setBits + geometry.subBankBits)) & ((1 << geometry.bankBits) - 1)  # Top index bits.
    # Reassemble the three fields into one composite set number.
    composite = (
      (bank << (geometry.subBankBits + geometry.setBits)) |
      (subBank << geometry.setBits) |
      setValue
    )
    return SetIndex(bank=bank, subBank=subBank, set=setValue, composite=composite)

  def NewState(self, seed=0):
    """Return an empty cache with this geometry."""
    # The seed drives RANDOM replacement only.
    return CacheState(self.geometry, seed=seed)

  def Summary(self):
    """Return a one-line description of the geometry."""
    geometry = self.geometry
    return (
      f"{geometry.compositeSets} composite sets x {geometry.ways} ways x {geometry.lineSizeBytes} B "
      f"({geometry.capacityBytes} bytes, {geometry.replacementPolicy})"
    )


if (__name__ == "__main__"):
  # Example usage of the CacheModelHelper class.
  cacheObj = CacheModelHelper()  # Initialize the helper from the configuration.
  print("Geometry:", cacheObj.Summary())  # Display the geometry.
  print("0x4000 ->", cacheObj.DecomposeAddress(0x4000))  # Display one address split.
  state = cacheObj.NewState()  # Build an empty cache.
  print(state.Access(0x40, SPY), state.Access(0x40, SPY))  # A miss, then a hit.
