'''
========================================================================
        ╦  ╔═╗  ╔═╗┌─┐┌─┐┬ ┬┌─┐  ╔═╗┌─┐┬ ┬
        ║   ═╣  ║  ├─┤│  ├─┤├┤   ╚═╗├─┘└┬┘
        ╩═╝╚═╝  ╚═╝┴ ┴└─┘┴ ┴└─┘  ╚═╝┴   ┴
========================================================================
# Author: L3 Cache Spy Developers
# Permissions and Citation: Refer to the README file.
'''

import os, sys, math, pytest
import numpy as np

# Ensure Windows paths work.
ROOT = os.path.abspath(os.path.join(os.path.dirname(__file__), ".."))
if (ROOT not in sys.path):
  sys.path.insert(0, ROOT)
os.chdir(ROOT)

from ConfigsSettings import ConfigurationError, DataError, DEFAULT_CONFIGS
from ChannelSimHelper import Memorygram
from FingerprintHelper import (
  NON_SENSITIVE, FeatureVector, Dataset, ClassifierSpec, WindowStats, FeatureLength, FeatureNames,
  SplitSegments, TrainKnn, PredictKnn, TrainRf, PredictRf, ComputeMetrics, StratifiedFolds,
  FingerprintHelper,
)


def MakeMemorygram(samples, siteId=4, trial=1):
  return Memorygram(siteId=siteId, trial=trial, samplingRateHz=50.0, samples=tuple(samples), configHash="test")


def Blobs(classes=3, perClass=20, dims=6, spread=0.3, seed=0, offset=0.0):
  """Well separated Gaussian blobs, one per class."""
  rng = np.random.default_rng(seed)
  X = np.vstack([rng.normal(10.0 * c + offset, spread, (perClass, dims)) for c in range(classes)])
  y = np.repeat(np.arange(classes), perClass)
  return Dataset.FromArrays(X, y)


def ReferenceMoments(values):
  # Direct two-pass population moments.
  n = len(values)
  mean = math.fsum(values) / n
  m2 = math.fsum((v - mean) ** 2 for v in values) / n
  m3 = math.fsum((v - mean) ** 3 for v in values) / n
  m4 = math.fsum((v - mean) ** 4 for v in values) / n
  return mean, math.sqrt(m2), m3 / m2 ** 1.5, m4 / m2 ** 2 - 3.0


def Test_WindowStatsExample():
  """[1, 2, 3, 4] is symmetric and flatter than a normal."""
  stats = WindowStats([1, 2, 3, 4])
  assert stats[:3] == (1.0, 4.0, 2.5)
  assert stats[3] == pytest.approx(math.sqrt(1.25))
  assert stats[4] == pytest.approx(0.0, abs=1e-12)
  assert stats[5] == pytest.approx(2.5625 / 1.5625 - 3.0)


def Test_WindowStatsConstant():
  """Zero-variance windows report skew 0 and kurtosis 0."""
  assert WindowStats([5, 5, 5]) == (5.0, 5.0, 5.0, 0.0, 0.0, 0.0)
  assert WindowStats([7]) == (7.0, 7.0, 7.0, 0.0, 0.0, 0.0)
  with pytest.raises(DataError):
    WindowStats([])


def Test_WindowStatsSkewSign():
  """A long right tail gives positive skew."""
  assert WindowStats([1, 1, 1, 1, 10])[4] > 0
  assert WindowStats([10, 10, 10, 10, 1])[4] < 0


def Test_MomentsMatchReference():
  """Mean, std, skew and kurtosis agree with a two-pass reference to 1e-12 on 1000 vectors."""
  rng = np.random.default_rng(0)
  lengths = rng.integers(2, 2000, size=999).tolist() + [10000]
  for length in lengths:
    values = rng.exponential(1000.0, size=length)
    _, _, mean, std, skew, kurtosis = WindowStats(values)
    expected = ReferenceMoments(values.tolist())
    for got, want in zip((mean, std, skew, kurtosis), expected):
      assert math.isclose(got, want, rel_tol=1e-12, abs_tol=1e-12)


def Test_SplitSegments():
  """Segments are equal and the remainder joins the last one."""
  parts = SplitSegments(list(range(11)), 4)
  assert [len(part) for part in parts] == [2, 2, 2, 5]
  assert sum(parts, []) == list(range(11))


@pytest.mark.parametrize("samples,segments,length", [(250, 4, 60), (510, 8, 108), (8, 4, 60)])
def Test_FeatureLength(samples, segments, length):
  """Six statistics over 2 + 2 x segments windows."""
  vector = FingerprintHelper(segmentsPerHalf=segments).ExtractFeatures(MakeMemorygram(range(samples)))
  assert len(vector.values) == FeatureLength(segments) == length
  assert len(FeatureNames(segments)) == length


def Test_FeaturesTooShort():
  """Seven samples cannot fill eight segments."""
  with pytest.raises(DataError):
    FingerprintHelper(segmentsPerHalf=4).ExtractFeatures(MakeMemorygram(range(7)))
  with pytest.raises(ConfigurationError):
    FingerprintHelper(segmentsPerHalf=0)


def Test_HelperFromConfigs():
  """Without arguments the helper reads the `pipeline` block."""
  helper = FingerprintHelper(runConfigs=DEFAULT_CONFIGS)
  assert (helper.segmentsPerHalf, helper.folds, helper.seed, helper.jobs) == (4, 10, 0, 1)
  assert helper.spec == ClassifierSpec.FromConfigs(DEFAULT_CONFIGS)


def Test_ExtractDatasetSkipsShortTraces():
  """Short traces are counted and skipped; if nothing is left the result is a data error."""
  helper = FingerprintHelper(segmentsPerHalf=4)
  memorygrams = [MakeMemorygram(range(40), siteId=1), MakeMemorygram(range(5), siteId=2), MakeMemorygram(range(40), siteId=3)]
  dataset, skipped = helper.ExtractDataset(memorygrams)
  assert skipped == 1
  assert dataset.y.tolist() == [1, 3]
  with pytest.raises(DataError):
    helper.ExtractDataset([MakeMemorygram(range(5))])


def Test_FeatureWindowOrder():
  """The first half's statistics come first, then the second half, then the segments."""
  vector = FingerprintHelper(segmentsPerHalf=4).ExtractFeatures(MakeMemorygram([1] * 10 + [2] * 11, siteId=8, trial=3))
  assert vector.label == 8 and vector.sourceId == "8:3"
  assert vector.values[2] == 1.0  # First-half mean.
  assert vector.values[8] == 2.0  # Second-half mean.
  segmentMeans = [vector.values[6 * w + 2] for w in range(2, 10)]
  assert segmentMeans == [1.0] * 4 + [2.0] * 4


def Test_FeatureVectorRejectsNonFinite():
  """NaN and infinity are data errors."""
  with pytest.raises(DataError):
    FeatureVector((1.0, float("nan")), 0)
  with pytest.raises(DataError):
    Dataset([FeatureVector((1.0,), 0), FeatureVector((1.0, 2.0), 1)])


def Test_KnnSelfPrediction():
  """With k = 1 every training vector predicts its own label."""
  dataset = Blobs(classes=4, perClass=5, spread=3.0)
  model = TrainKnn(dataset, ClassifierSpec(kind="KNN", k=1))
  assert PredictKnn(model, dataset.X).tolist() == dataset.y.tolist()
  assert PredictKnn(model, dataset.X[0]) == int(dataset.y[0])


def Test_KnnTieGoesToNearest():
  """A two-way vote tie goes to the nearest neighbour's label, not the lowest one."""
  dataset = Dataset.FromArrays([[0.0], [1.0], [3.0], [10.0]], [7, 5, 7, 5])
  model = TrainKnn(dataset, ClassifierSpec(kind="KNN", k=2))
  assert PredictKnn(model, [0.4]) == 7


def Test_KnnTieWithoutNearestGoesToLowest():
  """When the nearest label is not among the tied ones, the lowest tied label wins."""
  dataset = Dataset.FromArrays([[0.0], [1.0], [2.0], [3.0], [4.0]], [9, 6, 6, 4, 4])
  model = TrainKnn(dataset, ClassifierSpec(kind="KNN", k=5))
  assert PredictKnn(model, [-0.1]) == 4


def Test_KnnStandardizationInvariance():
  """Scaling or shifting a feature column does not change KNN predictions."""
  rng = np.random.default_rng(1)
  X = rng.normal(size=(60, 5))
  y = rng.integers(0, 3, size=60)
  queries = rng.normal(size=(30, 5))
  scale = np.array([1000.0, 0.5, 1.0, 3.0, 7.0])
  shift = np.array([5.0, -2.0, 1000.0, 0.0, 0.25])
  spec = ClassifierSpec(kind="KNN", k=3)
  plain = PredictKnn(TrainKnn(Dataset.FromArrays(X, y), spec), queries)
  moved = PredictKnn(TrainKnn(Dataset.FromArrays(X * scale + shift, y), spec), queries * scale + shift)
  assert plain.tolist() == moved.tolist()


def Test_KnnConstantFeatures():
  """If no feature varies, every prediction is the plurality training label."""
  dataset = Dataset.FromArrays(np.ones((7, 3)), [2, 2, 2, 1, 1, 0, 0])
  model = TrainKnn(dataset, ClassifierSpec(kind="KNN", k=3))
  assert PredictKnn(model, np.zeros((4, 3))).tolist() == [2, 2, 2, 2]


def Test_KnnNeedsEnoughVectors():
  """k above the training-set size is a data error."""
  with pytest.raises(DataError):
    TrainKnn(Blobs(classes=1, perClass=3), ClassifierSpec(kind="KNN", k=5))


def Test_TrainDispatchesOnKind():
  """Train and Predict follow the classifier kind of the helper."""
  dataset = Blobs(classes=2, perClass=6)
  for kind in ("KNN", "RF"):
    helper = FingerprintHelper(spec=ClassifierSpec(kind=kind, k=1, trees=5))
    model = helper.Train(dataset)
    assert helper.Predict(model, dataset.X).tolist() == dataset.y.tolist()


def Test_RfDeterministic():
  """The same seed grows the same forest."""
  dataset = Blobs(classes=3, perClass=15, spread=4.0)
  spec = ClassifierSpec(kind="RF", trees=15, seed=3)
  first, second = TrainRf(dataset, spec), TrainRf(dataset, spec)
  for a, b in zip(first.trees, second.trees):
    assert np.array_equal(a.feature, b.feature) and np.array_equal(a.threshold, b.threshold)
  queries = np.random.default_rng(2).normal(10.0, 8.0, (40, 6))
  assert PredictRf(first, queries).tolist() == PredictRf(second, queries).tolist()


def Test_RfFitsSeparableData():
  """A forest classifies its own separable training set perfectly."""
  dataset = Blobs(classes=4, perClass=10)
  model = TrainRf(dataset, ClassifierSpec(kind="RF", trees=20))
  assert PredictRf(model, dataset.X).tolist() == dataset.y.tolist()


def Test_RfSingleClass():
  """A single training class is always predicted."""
  dataset = Dataset.FromArrays(np.random.default_rng(0).normal(size=(10, 4)), [3] * 10)
  model = TrainRf(dataset, ClassifierSpec(kind="RF", trees=5))
  assert PredictRf(model, np.zeros(4)) == 3


def Test_ClassifierSpecValidation():
  """Unknown kinds and non-positive parameters are configuration errors."""
  for fields in ({"kind": "SVM"}, {"k": 0}, {"trees": 0}, {"minLeaf": 0}):
    with pytest.raises(ConfigurationError):
      ClassifierSpec(**fields)
  assert ClassifierSpec.FromConfigs(DEFAULT_CONFIGS).kind == "RF"
  assert ClassifierSpec().FeaturesPerNode(60) == 7


def Test_MetricsExample():
  """[[8, 2], [4, 6]] gives the textbook precision, recall and F1."""
  metrics = ComputeMetrics([[8, 2], [4, 6]])
  assert metrics["precision"][0] == pytest.approx(8 / 12)
  assert metrics["recall"][0] == pytest.approx(0.8)
  assert metrics["f1"][0] == pytest.approx(8 / 11)
  assert metrics["f1"][1] == pytest.approx(2 / 3)
  assert metrics["macro"]["f1"] == pytest.approx((8 / 11 + 2 / 3) / 2)
  assert metrics["support"] == [10, 10]


def Test_MetricsPerfectAndEmpty():
  """The identity matrix scores 1; a class never seen nor predicted scores 0."""
  assert ComputeMetrics(np.eye(3) * 5)["macro"] == {"precision": 1.0, "recall": 1.0, "f1": 1.0}
  metrics = ComputeMetrics([[5, 0], [0, 0]])
  assert metrics["recall"][1] == 0.0 and metrics["precision"][1] == 0.0 and metrics["f1"][1] == 0.0


def Test_MetricsConstantClassifier():
  """Predicting class 0 for N balanced classes gives F1 (2/N) / (1 + 1/N) on class 0."""
  n = 4
  confusion = np.zeros((n, n), dtype=int)
  confusion[:, 0] = 10
  metrics = ComputeMetrics(confusion)
  assert metrics["f1"][0] == pytest.approx((2 / n) / (1 + 1 / n))
  assert metrics["macro"]["f1"] == pytest.approx((2 / n) / (1 + 1 / n) / n)


def Test_MetricsRejectNonSquare():
  """A non-square confusion matrix is a data error."""
  with pytest.raises(DataError):
    ComputeMetrics([[1, 2, 3], [4, 5, 6]])


def Test_StratifiedFoldsBalanced():
  """Per-class and total fold sizes differ by at most one."""
  y = np.array([0] * 23 + [1] * 17 + [2] * 10)
  assignment = StratifiedFolds(y, 5, seed=1)
  for label in (0, 1, 2):
    sizes = np.bincount(assignment[y == label], minlength=5)
    assert sizes.max() - sizes.min() <= 1
  totals = np.bincount(assignment, minlength=5)
  assert totals.max() - totals.min() <= 1
  assert np.array_equal(assignment, StratifiedFolds(y, 5, seed=1))


@pytest.mark.parametrize("kind", ["KNN", "RF"])
def Test_CrossValidateSeparable(kind):
  """Separable classes score macro F1 = 1 under cross-validation."""
  helper = FingerprintHelper(spec=ClassifierSpec(kind=kind, k=3, trees=10), folds=5)
  report = helper.CrossValidate(Blobs(classes=4, perClass=10))
  assert report.macro["f1"] == 1.0
  assert report.accuracy == 1.0
  assert len(report.foldAssignments) == 40


def Test_CrossValidateDeterministic():
  """The same seeds give the same report."""
  dataset = Blobs(classes=3, perClass=10, spread=6.0)
  spec = ClassifierSpec(kind="RF", trees=10, seed=2)
  helper = FingerprintHelper(spec=spec, folds=5, seed=4)
  assert helper.CrossValidate(dataset).ToJson() == helper.CrossValidate(dataset).ToJson()


def Test_CrossValidateShuffledLabels():
  """Random labels on noise features score near chance."""
  rng = np.random.default_rng(5)
  X = rng.normal(size=(500, 6))
  y = rng.permutation(np.repeat(np.arange(5), 100))
  helper = FingerprintHelper(spec=ClassifierSpec(kind="KNN", k=5), folds=10)
  report = helper.CrossValidate(Dataset.FromArrays(X, y))
  sigma = math.sqrt(0.2 * 0.8 / 500)
  assert abs(report.accuracy - 0.2) <= 3 * sigma


def Test_CrossValidateNeedsSupport():
  """Classes with fewer members than folds are data errors."""
  dataset = Dataset.FromArrays(np.arange(13).reshape(-1, 1), [0] * 10 + [1] * 3)
  with pytest.raises(DataError):
    FingerprintHelper(spec=ClassifierSpec(kind="KNN", k=1), folds=5).CrossValidate(dataset)


def Test_OpenWorldEmptyOpenSet():
  """An empty open set reproduces the closed-world report."""
  closed = Blobs(classes=3, perClass=10, spread=5.0)
  helper = FingerprintHelper(spec=ClassifierSpec(kind="KNN", k=3), folds=5)
  openWorld = helper.EvaluateOpenWorld(closed, Dataset([]))
  closedWorld = helper.CrossValidate(closed)
  assert openWorld.macro == closedWorld.macro
  assert openWorld.confusion == closedWorld.confusion


@pytest.mark.parametrize("kind", ["KNN", "RF"])
def Test_OpenWorldIdenticalVectors(kind):
  """When every vector is identical, every prediction is the plurality (background) class."""
  closed = Dataset.FromArrays(np.zeros((30, 4)), np.repeat([0, 1, 2], 10))
  openSet = Dataset.FromArrays(np.zeros((40, 4)), [NON_SENSITIVE] * 40)
  helper = FingerprintHelper(spec=ClassifierSpec(kind=kind, k=3, trees=10), folds=5)
  report = helper.EvaluateOpenWorld(closed, openSet)
  assert report.labels == [NON_SENSITIVE, 0, 1, 2]
  confusion = np.array(report.confusion)
  assert confusion[:, 0].sum() == 70
  assert report.sensitiveMacro["f1"] == 0.0


def Test_OpenWorldSeparable():
  """Separable sensitive sites plus a separable background report sensitive macro F1 = 1."""
  closed = Blobs(classes=3, perClass=10)
  background = Dataset.FromArrays(np.random.default_rng(9).normal(-20.0, 0.3, (30, 6)), [NON_SENSITIVE] * 30)
  report = FingerprintHelper(spec=ClassifierSpec(kind="RF", trees=10), folds=5).EvaluateOpenWorld(closed, background)
  assert report.mode == "open"
  assert report.sensitiveMacro["f1"] == 1.0
  assert report.perClass[str(NON_SENSITIVE)]["support"] == 30


def Test_OpenWorldLabels():
  """Open vectors must carry the background label and closed ones must not."""
  closed = Blobs(classes=2, perClass=10)
  helper = FingerprintHelper(spec=ClassifierSpec(kind="KNN", k=1), folds=5)
  with pytest.raises(DataError):
    helper.EvaluateOpenWorld(closed, Blobs(classes=1, perClass=10))
  with pytest.raises(DataError):
    helper.EvaluateOpenWorld(closed.WithLabel(NON_SENSITIVE), closed.WithLabel(NON_SENSITIVE))


def Test_TransferEvaluation():
  """Training on one set and testing on a nearby one keeps perfect separable accuracy."""
  train = Blobs(classes=3, perClass=10, seed=0)
  test = Blobs(classes=3, perClass=5, seed=1, offset=0.5)
  helper = FingerprintHelper(spec=ClassifierSpec(kind="RF", trees=10))
  report = helper.EvaluateTransfer(train, test)
  assert report.mode == "transfer"
  assert report.accuracy == 1.0
  with pytest.raises(DataError):
    helper.EvaluateTransfer(train, Blobs(classes=3, perClass=5, dims=4))
