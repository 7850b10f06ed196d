from .metrics import Bins, CalibrationCurve, auc, calibration_curve, default_bins, wilson_interval
from .model import RiskModel, fit_risk_model, predict_cohort, predict_risk

__all__ = [
    "Bins",
    "CalibrationCurve",
    "RiskModel",
    "auc",
    "calibration_curve",
    "default_bins",
    "fit_risk_model",
    "predict_cohort",
    "predict_risk",
    "wilson_interval",
]
