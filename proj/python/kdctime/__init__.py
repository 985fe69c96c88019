"""Calibrated knowledge distillation for time-series classification."""

from ._core import *  # noqa: F401,F403
from ._core import __doc__  # noqa: F401

METHODS = ("itime", "lstime:0.5", "kdtime:0.5:8", "kdct", "kdcr")
