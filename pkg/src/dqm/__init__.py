"""Edge-computing data quarantine: intrusion classifiers, quarantine/reputation pipeline, simulator."""

from .classify import (
    ConfusionMatrix,
    LDAClassifier,
    LinearSVMGD,
    LogisticRegressionGD,
    MLPClassifierBP,
    accuracy,
    evaluate,
)
from .dataset import NSLKDDEncoder, build_schema, encode, load_nslkdd, partition_streams
from .quarantine import QuarantineConfig, QuarantineStore, scrub, spam_score
from .sim import SimConfig, SimReport, collect_metrics, run, sweep

__version__ = "0.1.0"
