"""Utility-maximizing detention rules under fairness constraints.

Fits calibrated risk scores, computes optimal single- and multi-threshold
rules at a fixed detention budget, measures what each fairness constraint
costs in public safety, and audits scores for calibration.
"""

__version__ = "0.1.0"
