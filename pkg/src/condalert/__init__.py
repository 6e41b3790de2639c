"""Conditional outlier detection for patient-management alerting.

The pipeline segments temporal patient records into daily patient-state
instances, learns one calibrated linear model per action, and scores the
observed actions with a two-step persistence alert score.
"""

__version__ = "0.1.0"

from .records import (
    CohortDataset,
    Demographics,
    PatientRecord,
    RawEvent,
    filter_rare_channels,
    parse_events,
    split_by_date,
)
from .learner import (
    CalibratedModel,
    LinearModel,
    PlattCalibration,
    TrainConfig,
    auc,
    cross_validated_auc,
    fit_platt,
    predict_probability,
    train_linear_svm,
)
from .alerts import AlertCandidate, AlertPipelineConfig, ModelRegistry  # noqa: E402

__all__ = [
    "AlertCandidate",
    "AlertPipelineConfig",
    "CalibratedModel",
    "CohortDataset",
    "Demographics",
    "LinearModel",
    "ModelRegistry",
    "PatientRecord",
    "PlattCalibration",
    "RawEvent",
    "TrainConfig",
    "auc",
    "cross_validated_auc",
    "filter_rare_channels",
    "fit_platt",
    "parse_events",
    "predict_probability",
    "split_by_date",
    "train_linear_svm",
]
