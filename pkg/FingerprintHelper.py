'''
========================================================================
        ╦  ╔═╗  ╔═╗┌─┐┌─┐┬ ┬┌─┐  ╔═╗┌─┐┬ ┬
        ║   ═╣  ║  ├─┤│  ├─┤├┤   ╚═╗├─┘└┬┘
        ╩═╝╚═╝  ╚═╝┴ ┴└─┘┴ ┴└─┘  ╚═╝┴   ┴
========================================================================
# Author: L3 Cache Spy Developers
# Permissions and Citation: Refer to the README file.
'''

# Import necessary libraries for features, classifiers and cross-validation.
import json, math, logging
import numpy as np
from scipy import stats
from dataclasses import dataclass, field
from typing import Optional
from ConfigsSettings import LoadConfigs, ConfigurationError, DataError
from VictimGenHelper import StreamRng
from JobHelpers import JobRunner

# Use module logger so messages go through Python's logging system.
logger = logging.getLogger(__name__)

configs = LoadConfigs()  # Load the configuration (configs.yaml over the defaults).
VERBOSE = configs.get("verbose", False)  # Get the verbose setting from the configuration.

# Label shared by every open-world (background) trace.
NON_SENSITIVE = -1

STAT_NAMES = ("min", "max", "mean", "std", "skew", "kurtosis")
CLASSIFIER_KINDS = ("KNN", "RF")

# Queries per distance block in KNN prediction.
KNN_QUERY_BLOCK = 256


@dataclass(frozen=True)
class FeatureVector:
  values: tuple
  label: int
  sourceId: str = ""

  def __post_init__(self):
    if (not all(math.isfinite(v) for v in self.values)):
      raise DataError(f"Feature vector {self.sourceId} has non-finite values.")


class Dataset(object):
  r'''
  Labelled feature vectors of equal length.

  Standardization statistics are not stored here; each trained KNN model keeps the statistics of
  its own training fold.
  '''

  def __init__(self, vectors):
    self.vectors = list(vectors)
    lengths = {len(v.values) for v in self.vectors}
    if (len(lengths) > 1):
      raise DataError(f"Feature vectors have different lengths: {sorted(lengths)}")

  def __len__(self):
    return len(self.vectors)

  @property
  def X(self):
    if (not self.vectors):
      return np.zeros((0, 0))
    return np.array([v.values for v in self.vectors], dtype=float)

  @property
  def y(self):
    return np.array([v.label for v in self.vectors], dtype=int)

  @property
  def labels(self):
    return sorted({v.label for v in self.vectors})

  @property
  def sourceIds(self):
    return [v.sourceId for v in self.vectors]

  def Concat(self, other):
    return Dataset(self.vectors + other.vectors)

  def Subset(self, indices):
    return Dataset([self.vectors[i] for i in indices])

  def WithLabel(self, label):
    """Copy of the dataset with every vector relabelled."""
    return Dataset([FeatureVector(v.values, int(label), v.sourceId) for v in self.vectors])

  @classmethod
  def FromArrays(cls, X, y, sourceIds=None):
    X = np.asarray(X, dtype=float)
    sourceIds = sourceIds if (sourceIds is not None) else [str(i) for i in range(len(y))]
    return cls([
      FeatureVector(tuple(float(v) for v in row), int(label), str(sourceId))
      for row, label, sourceId in zip(X, y, sourceIds)
    ])


@dataclass(frozen=True)
class ClassifierSpec:
  kind: str = "RF"
  k: int = 5
  trees: int = 100
  minLeaf: int = 1
  seed: int = 0
  maxFeatures: str = "sqrt"  # "sqrt" or an integer count.

  def __post_init__(self):
    if (self.kind not in CLASSIFIER_KINDS):
      raise ConfigurationError(f"Unknown classifier kind: {self.kind}. Expected one of {CLASSIFIER_KINDS}.")
    if (self.k < 1):
      raise ConfigurationError(f"k must be at least 1: {self.k}")
    if (self.trees < 1):
      raise ConfigurationError(f"trees must be at least 1: {self.trees}")
    if (self.minLeaf < 1):
      raise ConfigurationError(f"minLeaf must be at least 1: {self.minLeaf}")

  def FeaturesPerNode(self, numFeatures):
    if (self.maxFeatures == "sqrt"):
      return max(1, int(math.sqrt(numFeatures)))
    return max(1, min(numFeatures, int(self.maxFeatures)))

  def ToDict(self):
    return {
      "kind"       : self.kind,
      "k"          : self.k,
      "trees"      : self.trees,
      "minLeaf"    : self.minLeaf,
      "seed"       : self.seed,
      "maxFeatures": self.maxFeatures,
    }

  @classmethod
  def FromConfigs(cls, runConfigs=None):
    runConfigs = runConfigs if (runConfigs is not None) else configs
    block = dict(runConfigs["pipeline"]["classifier"])
    return cls(
      kind=str(block.get("kind", "RF")).upper(),
      k=int(block.get("k", 5)),
      trees=int(block.get("trees", 100)),
      minLeaf=int(block.get("minLeaf", 1)),
      seed=int(block.get("seed", 0)),
      maxFeatures=block.get("maxFeatures", "sqrt"),
    )


@dataclass
class EvalReport:
  mode: str
  classifier: dict
  labels: list
  confusion: list  # Rows are true labels, columns predicted labels, both in `labels` order.
  perClass: dict
  macro: dict
  accuracy: float
  sensitiveMacro: Optional[dict] = None
  foldAssignments: Optional[list] = None
  config: dict = field(default_factory=dict)

  def ToDict(self):
    return {
      "mode"           : self.mode,
      "classifier"     : self.classifier,
      "labels"         : self.labels,
      "confusion"      : self.confusion,
      "perClass"       : self.perClass,
      "macro"          : self.macro,
      "accuracy"       : self.accuracy,
      "sensitiveMacro" : self.sensitiveMacro,
      "foldAssignments": self.foldAssignments,
      "config"         : self.config,
    }

  def ToJson(self):
    return json.dumps(self.ToDict(), indent=2, sort_keys=True)


def WindowStats(samples):
  r'''
  Population statistics of one window.

  Skew is m3 / m2^1.5 and kurtosis is the excess m4 / m2^2 - 3, both with n-denominator moments.
  A zero-variance window has skew 0 and kurtosis 0.

  Returns:
    tuple: (min, max, mean, std, skew, kurtosis)
  '''
  x = np.asarray(samples, dtype=float)
  if (x.size == 0):
    raise DataError("Cannot compute statistics of an empty window.")
  mean = float(x.mean())
  std = float(x.std())
  if (std == 0.0):
    return (float(x.min()), float(x.max()), mean, 0.0, 0.0, 0.0)
  skew = float(stats.skew(x, bias=True))
  kurtosis = float(stats.kurtosis(x, fisher=True, bias=True))
  # scipy returns nan for variances below its precision floor.
  skew = skew if math.isfinite(skew) else 0.0
  kurtosis = kurtosis if math.isfinite(kurtosis) else 0.0
  return (float(x.min()), float(x.max()), mean, std, skew, kurtosis)


def FeatureLength(segmentsPerHalf):
  return len(STAT_NAMES) * (2 + 2 * segmentsPerHalf)


def FeatureNames(segmentsPerHalf):
  """CSV column names f0..f{d-1}."""
  return [f"f{i}" for i in range(FeatureLength(segmentsPerHalf))]


def SplitSegments(window, segments):
  """Equal segments; the remainder joins the last one."""
  size = len(window) // segments
  parts = [window[i * size:(i + 1) * size] for i in range(segments - 1)]
  parts.append(window[(segments - 1) * size:])
  return parts


def _Plurality(labels):
  """Most frequent label; ties go to the lowest label."""
  unique, counts = np.unique(labels, return_counts=True)
  return int(unique[np.argmax(counts)])


@dataclass
class KnnModel:
  k: int
  mean: np.ndarray
  std: np.ndarray
  keep: np.ndarray  # Features with non-zero training std.
  X: np.ndarray
  y: np.ndarray
  constantLabel: Optional[int] = None  # Set when no feature varies.


def TrainKnn(train, spec):
  """Store the standardized training set; zero-std features are dropped."""
  if (len(train) == 0):
    raise DataError("Cannot train on an empty dataset.")
  if (spec.k > len(train)):
    raise DataError(f"k = {spec.k} exceeds the {len(train)} training vectors.")
  X, y = train.X, train.y
  mean = X.mean(axis=0)
  std = X.std(axis=0)
  keep = std > 0
  constantLabel = None if keep.any() else _Plurality(y)
  Xs = (X[:, keep] - mean[keep]) / std[keep]
  return KnnModel(k=spec.k, mean=mean, std=std, keep=keep, X=Xs, y=y, constantLabel=constantLabel)


def _KnnVote(neighbourLabels):
  unique, counts = np.unique(neighbourLabels, return_counts=True)
  tied = unique[counts == counts.max()]
  if (len(tied) == 1):
    return int(tied[0])
  if (neighbourLabels[0] in tied):
    return int(neighbourLabels[0])
  return int(tied.min())


def PredictKnn(model, vectors):
  r'''
  Majority label among the k nearest training vectors (Euclidean, standardized space).

  Vote ties go to the nearest neighbour's label when it is tied, otherwise to the lowest label.
  A 1-D input returns one label; a 2-D input returns an array.
  '''
  Q = np.asarray(vectors, dtype=float)
  single = (Q.ndim == 1)
  Q = np.atleast_2d(Q)
  if (model.constantLabel is not None):
    predictions = np.full(len(Q), model.constantLabel, dtype=int)
    return int(predictions[0]) if single else predictions

  Qs = (Q[:, model.keep] - model.mean[model.keep]) / model.std[model.keep]
  predictions = np.empty(len(Qs), dtype=int)
  for start in range(0, len(Qs), KNN_QUERY_BLOCK):
    block = Qs[start:start + KNN_QUERY_BLOCK]
    distances = ((block[:, None, :] - model.X[None, :, :]) ** 2).sum(axis=-1)
    nearest = np.argsort(distances, axis=1, kind="stable")[:, :model.k]
    for row, indices in enumerate(nearest):
      predictions[start + row] = _KnnVote(model.y[indices])
  return int(predictions[0]) if single else predictions


@dataclass
class DecisionTree:
  feature: np.ndarray  # -1 marks a leaf.
  threshold: np.ndarray
  left: np.ndarray
  right: np.ndarray
  leafClass: np.ndarray  # Class index, valid at leaves.


@dataclass
class RfModel:
  classes: np.ndarray  # Sorted labels; class index i is classes[i].
  trees: list


def _BestSplit(Xn, yn, numClasses, minLeaf):
  r'''
  Best Gini split over the columns of Xn.

  Every column is sorted once; cumulative one-hot counts give the class counts left of every cut.

  Returns:
    tuple: (column, threshold) or None when no cut separates distinct values.
  '''
  n = len(yn)
  order = np.argsort(Xn, axis=0, kind="stable")
  sortedX = np.take_along_axis(Xn, order, axis=0)
  onehot = np.eye(numClasses, dtype=np.int32)[yn]
  leftCounts = np.cumsum(onehot[order], axis=0)[:-1]  # (n-1, m, C)
  totals = onehot.sum(axis=0)
  rightCounts = totals[None, None, :] - leftCounts

  nLeft = np.arange(1, n, dtype=float)[:, None]
  nRight = n - nLeft
  giniLeft = 1.0 - (leftCounts.astype(float) ** 2).sum(axis=-1) / nLeft ** 2
  giniRight = 1.0 - (rightCounts.astype(float) ** 2).sum(axis=-1) / nRight ** 2
  weighted = (nLeft * giniLeft + nRight * giniRight) / n

  valid = (sortedX[:-1] < sortedX[1:]) & (nLeft >= minLeaf) & (nRight >= minLeaf)
  if (not valid.any()):
    return None
  weighted = np.where(valid, weighted, np.inf)
  cut, column = np.unravel_index(np.argmin(weighted), weighted.shape)
  lower, upper = sortedX[cut, column], sortedX[cut + 1, column]
  threshold = lower + (upper - lower) / 2.0
  if (threshold >= upper):
    threshold = lower
  return int(column), float(threshold)


def _GrowTree(X, yIdx, numClasses, featuresPerNode, minLeaf, rng):
  # Iterative depth-first growth; nodes are appended as they are created.
  feature, threshold, left, right, leafClass = [], [], [], [], []

  def NewNode():
    feature.append(-1)
    threshold.append(0.0)
    left.append(-1)
    right.append(-1)
    leafClass.append(0)
    return len(feature) - 1

  numFeatures = X.shape[1]
  stack = [(NewNode(), np.arange(len(yIdx)))]
  while (stack):
    node, indices = stack.pop()
    counts = np.bincount(yIdx[indices], minlength=numClasses)
    leafClass[node] = int(np.argmax(counts))
    if (np.count_nonzero(counts) <= 1 or len(indices) < 2 * minLeaf):
      continue

    # Try sqrt(d) random features; fall back to further chunks if none of them splits.
    split = None
    permutation = rng.permutation(numFeatures)
    for start in range(0, numFeatures, featuresPerNode):
      candidates = permutation[start:start + featuresPerNode]
      best = _BestSplit(X[np.ix_(indices, candidates)], yIdx[indices], numClasses, minLeaf)
      if (best is not None):
        split = (int(candidates[best[0]]), best[1])
        break
    if (split is None):
      continue

    f, t = split
    goLeft = X[indices, f] <= t
    leftNode, rightNode = NewNode(), NewNode()
    feature[node], threshold[node] = f, t
    left[node], right[node] = leftNode, rightNode
    stack.append((rightNode, indices[~goLeft]))
    stack.append((leftNode, indices[goLeft]))

  return DecisionTree(
    feature=np.array(feature, dtype=int),
    threshold=np.array(threshold, dtype=float),
    left=np.array(left, dtype=int),
    right=np.array(right, dtype=int),
    leafClass=np.array(leafClass, dtype=int),
  )


def TrainRf(train, spec, streamKey=()):
  r'''
  Random forest of CART trees with Gini splits.

  Tree i draws its bootstrap sample and feature subsets from the stream keyed by
  (seed, *streamKey, "tree", i), so the same seed always gives the same forest.

  Parameters:
    train (Dataset): Training vectors.
    spec (ClassifierSpec): trees, minLeaf, maxFeatures and seed.
    streamKey (tuple): Extra key parts (the fold index during cross-validation).

  Returns:
    RfModel: Trees plus the sorted class labels.
  '''
  if (len(train) == 0):
    raise DataError("Cannot train on an empty dataset.")
  X, y = train.X, train.y
  classes = np.array(sorted(set(y.tolist())), dtype=int)
  yIdx = np.searchsorted(classes, y)
  featuresPerNode = spec.FeaturesPerNode(X.shape[1])

  trees = []
  for i in range(spec.trees):
    rng = StreamRng(spec.seed, *streamKey, "tree", i)
    sample = rng.integers(0, len(y), size=len(y))
    trees.append(_GrowTree(X[sample], yIdx[sample], len(classes), featuresPerNode, spec.minLeaf, rng))
  return RfModel(classes=classes, trees=trees)


def _TreeApply(tree, X):
  nodes = np.zeros(len(X), dtype=int)
  active = tree.feature[nodes] >= 0
  while (active.any()):
    current = nodes[active]
    goLeft = X[active, tree.feature[current]] <= tree.threshold[current]
    nodes[active] = np.where(goLeft, tree.left[current], tree.right[current])
    active = tree.feature[nodes] >= 0
  return tree.leafClass[nodes]


def PredictRf(model, vectors):
  """Plurality vote over the trees; ties go to the lowest label."""
  X = np.asarray(vectors, dtype=float)
  single = (X.ndim == 1)
  X = np.atleast_2d(X)
  votes = np.zeros((len(X), len(model.classes)), dtype=int)
  rows = np.arange(len(X))
  for tree in model.trees:
    np.add.at(votes, (rows, _TreeApply(tree, X)), 1)
  predictions = model.classes[np.argmax(votes, axis=1)]
  return int(predictions[0]) if single else predictions

def ComputeMetrics(confusion):
  r'''
  Per-class and macro precision, recall and F1 of a confusion matrix.

  Rows are true classes and columns predicted classes; every 0/0 ratio is 0.

  Returns:
    dict: precision, recall, f1 and support lists plus a `macro` dict of unweighted means.
  '''
  matrix = np.asarray(confusion)
  if (matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]):
    raise DataError(f"The confusion matrix must be square: shape {matrix.shape}")
  if ((matrix < 0).any()):
    raise DataError("The confusion matrix has negative entries.")
  matrix = matrix.astype(float)
  tp = np.diag(matrix)
  predicted = matrix.sum(axis=0)
  support = matrix.sum(axis=1)
  precision = np.divide(tp, predicted, out=np.zeros_like(tp), where=(predicted > 0))
  recall = np.divide(tp, support, out=np.zeros_like(tp), where=(support > 0))
  denominator = precision + recall
  f1 = np.divide(2 * precision * recall, denominator, out=np.zeros_like(tp), where=(denominator > 0))
  size = len(tp)
  return {
    "precision": precision.tolist(),
    "recall"   : recall.tolist(),
    "f1"       : f1.tolist(),
    "support"  : [int(s) for s in support],
    "macro"    : {
      "precision": float(precision.mean()) if size else 0.0,
      "recall"   : float(recall.mean()) if size else 0.0,
      "f1"       : float(f1.mean()) if size else 0.0,
    },
  }


def ConfusionMatrix(trueLabels, predictedLabels, labels):
  index = {label: i for i, label in enumerate(labels)}
  matrix = np.zeros((len(labels), len(labels)), dtype=int)
  for t, p in zip(trueLabels, predictedLabels):
    matrix[index[int(t)], index[int(p)]] += 1
  return matrix


def StratifiedFolds(y, folds, seed=0):
  r'''
  Seeded stratified fold assignment.

  Each class is shuffled and dealt round-robin, starting where the previous class stopped, so
  per-class fold sizes differ by at most one and so do the total fold sizes.
  '''
  y = np.asarray(y)
  rng = StreamRng(seed, "folds")
  assignment = np.empty(len(y), dtype=int)
  offset = 0
  for label in sorted(set(y.tolist())):
    members = rng.permutation(np.flatnonzero(y == label))
    assignment[members] = (offset + np.arange(len(members))) % folds
    offset += len(members)
  return assignment


def _BuildReport(mode, spec, labels, confusion, extraConfig, foldAssignments=None):
  metrics = ComputeMetrics(confusion)
  perClass = {
    str(label): {
      "precision": metrics["precision"][i],
      "recall"   : metrics["recall"][i],
      "f1"       : metrics["f1"][i],
      "support"  : metrics["support"][i],
    }
    for i, label in enumerate(labels)
  }
  total = int(np.sum(confusion))
  accuracy = float(np.trace(confusion) / total) if total else 0.0
  sensitive = [i for i, label in enumerate(labels) if (label != NON_SENSITIVE)]
  sensitiveMacro = None
  if (len(sensitive) != len(labels)):
    sensitiveMacro = {
      name: (float(np.mean([metrics[name][i] for i in sensitive])) if sensitive else 0.0)
      for name in ("precision", "recall", "f1")
    }
  return EvalReport(
    mode=mode,
    classifier=spec.ToDict(),
    labels=[int(label) for label in labels],
    confusion=np.asarray(confusion).astype(int).tolist(),
    perClass=perClass,
    macro=metrics["macro"],
    accuracy=accuracy,
    sensitiveMacro=sensitiveMacro,
    foldAssignments=(None if foldAssignments is None else [int(f) for f in foldAssignments]),
    config=extraConfig,
  )




def _RunFold(job):
  # One fold: train on the other folds and label the held-out rows.
  X, y, trainMask, spec, fold = job
  helper = FingerprintHelper(spec=spec)  # Pipeline defaults; only the classifier matters here.
  train = Dataset.FromArrays(X[trainMask], y[trainMask])  # Rows outside the fold.
  model = helper.Train(train, streamKey=(fold,))  # The fold index keys the forest's streams.
  return helper.Predict(model, X[~trainMask])


class FingerprintHelper(object):
  r'''
  Turns memorygrams into feature vectors and scores classifiers on them.

  Covers feature extraction, training and prediction (KNN or random forest), stratified
  cross-validation, the open-world evaluation and the cross-configuration transfer test.
  '''

  def __init__(self, spec=None, segmentsPerHalf=None, folds=None, seed=None, jobs=None, runConfigs=None):
    r'''
    Initialize the FingerprintHelper.

    Parameters:
      spec (ClassifierSpec): Classifier; defaults to pipeline.classifier.
      segmentsPerHalf (int): Segments per half (4 gives 60 features, 8 gives 108).
      folds (int): Cross-validation folds.
      seed (int): Fold-assignment seed.
      jobs (int): Worker processes for the folds.
      runConfigs (dict): Configuration the missing values are read from.
    '''
    runConfigs = runConfigs if (runConfigs is not None) else configs  # Fall back to the module configuration.
    pipeline = runConfigs["pipeline"]  # Feature and evaluation settings.
    self.spec = spec if (spec is not None) else ClassifierSpec.FromConfigs(runConfigs)
    self.segmentsPerHalf = int(segmentsPerHalf if (segmentsPerHalf is not None) else pipeline["segmentsPerHalf"])
    self.folds = int(folds if (folds is not None) else pipeline["folds"])
    self.seed = int(seed if (seed is not None) else pipeline["seed"])
    self.jobs = int(jobs if (jobs is not None) else runConfigs.get("jobs", 1))
    if (self.segmentsPerHalf < 1):
      raise ConfigurationError(f"segmentsPerHalf must be at least 1: {self.segmentsPerHalf}")

  def ExtractFeatures(self, memorygram):
    r'''
    Windowed statistics of a memorygram.

    Windows are the first half, the second half, then the segments of each half; the first half
    holds n // 2 samples.

    Parameters:
      memorygram (Memorygram): Trace to describe.

    Returns:
      FeatureVector: Labelled with the memorygram's site id.
    '''
    samples = np.asarray(memorygram.samples, dtype=float)
    segments = self.segmentsPerHalf
    if (len(samples) < 2 * segments):
      raise DataError(
        f"Trace {memorygram.siteId}:{memorygram.trial} has {len(samples)} samples; "
        f"at least {2 * segments} are needed."
      )
    half = len(samples) // 2  # Odd lengths give the extra sample to the second half.
    first, second = samples[:half], samples[half:]
    windows = [first, second] + SplitSegments(first, segments) + SplitSegments(second, segments)

    values = []
    for window in windows:
      values.extend(WindowStats(window))  # Six statistics per window.
    return FeatureVector(tuple(values), int(memorygram.siteId), f"{memorygram.siteId}:{memorygram.trial}")

  def ExtractDataset(self, memorygrams):
    r'''
    Feature vectors of many memorygrams; traces too short for the segments are skipped.

    Returns:
      tuple: (Dataset, number of skipped traces).
    '''
    vectors, skipped = [], 0
    for memorygram in memorygrams:
      try:
        vectors.append(self.ExtractFeatures(memorygram))
      except DataError as e:
        logger.warning(f"Skipping trace: {e}")
        skipped += 1
    if (not vectors):
      raise DataError(f"All {skipped} traces were too short for {self.segmentsPerHalf} segments per half.")
    return Dataset(vectors), skipped

  def Train(self, train, streamKey=()):
    if (self.spec.kind == "KNN"):
      return TrainKnn(train, self.spec)
    return TrainRf(train, self.spec, streamKey)

  def Predict(self, model, vectors):
    if (isinstance(model, KnnModel)):
      return PredictKnn(model, vectors)
    return PredictRf(model, vectors)

  def CrossValidate(self, dataset, mode="closed"):
    r'''
    Stratified k-fold cross-validation.

    Parameters:
      dataset (Dataset): Labelled vectors; every class needs at least `folds` members.
      mode (str): Recorded in the report.

    Returns:
      EvalReport: Aggregate confusion matrix and macro metrics.
    '''
    folds, spec = self.folds, self.spec
    if (folds < 2):
      raise ConfigurationError(f"At least 2 folds are required: {folds}")
    if (len(dataset) == 0):
      raise DataError("Cannot cross-validate an empty dataset.")
    X, y = dataset.X, dataset.y
    labels = dataset.labels
    support = {label: int(np.sum(y == label)) for label in labels}  # Members per class.
    short = {label: count for label, count in support.items() if (count < folds)}
    if (short):
      raise DataError(f"Classes with fewer than {folds} members: {short}")

    assignment = StratifiedFolds(y, folds, self.seed)
    foldJobs = [(X, y, assignment != fold, spec, fold) for fold in range(folds)]
    runner = JobRunner(_RunFold, maxJobs=self.jobs, description="Folds", showProgress=VERBOSE)
    foldPredictions = runner.Run(foldJobs)  # In fold order.

    predictions = np.empty(len(y), dtype=int)
    for fold, foldPrediction in enumerate(foldPredictions):
      predictions[assignment == fold] = foldPrediction

    confusion = ConfusionMatrix(y, predictions, labels)
    report = _BuildReport(mode, spec, labels, confusion, {"folds": folds, "seed": self.seed}, assignment)
    if (VERBOSE):
      logger.info(f"{mode} {spec.kind}: macro F1 {report.macro['f1']:.4f}, accuracy {report.accuracy:.4f}.")
    return report

  def EvaluateOpenWorld(self, closed, openSet):
    r'''
    Cross-validation over the closed sites plus one NON_SENSITIVE background class.

    The report adds the macro metrics over the sensitive classes only. An empty open set gives the
    closed-world report.
    '''
    if (len(openSet) == 0):
      return self.CrossValidate(closed)
    if (any(label != NON_SENSITIVE for label in openSet.labels)):
      raise DataError(f"Open-world vectors must be labelled {NON_SENSITIVE}.")
    if (NON_SENSITIVE in closed.labels):
      raise DataError(f"Closed-world vectors cannot use the label {NON_SENSITIVE}.")
    return self.CrossValidate(closed.Concat(openSet), mode="open")

  def EvaluateTransfer(self, train, test):
    """Train on one dataset and test on another (e.g. a different viewport scale)."""
    if (len(train) == 0 or len(test) == 0):
      raise DataError("Transfer evaluation needs non-empty train and test sets.")
    if (train.X.shape[1] != test.X.shape[1]):
      raise DataError("Train and test feature vectors differ in length.")
    model = self.Train(train, streamKey=("transfer",))
    predictions = np.atleast_1d(self.Predict(model, test.X))
    labels = sorted(set(train.labels) | set(test.labels))  # Test-only labels count as misses.
    confusion = ConfusionMatrix(test.y, predictions, labels)
    return _BuildReport("transfer", self.spec, labels, confusion, {"train": len(train), "test": len(test)})


if (__name__ == "__main__"):
  # Example usage of the FingerprintHelper class on a toy two-class dataset.
  rng = np.random.default_rng(0)
  X = np.vstack([rng.normal(0, 1, (30, 6)), rng.normal(4, 1, (30, 6))])
  y = np.array([0] * 30 + [1] * 30)
  dataset = Dataset.FromArrays(X, y)
  print(FingerprintHelper(spec=ClassifierSpec(kind="RF", trees=20), folds=5).CrossValidate(dataset).macro)
  print(FingerprintHelper(spec=ClassifierSpec(kind="KNN", k=3), folds=5).CrossValidate(dataset).macro)
