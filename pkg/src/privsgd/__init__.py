"""Distributed private SGD: locally sanitized gradients, an asynchronous parameter server,
and the centralized/decentralized baselines they are measured against."""

from .model import ParamMatrix, Sample
from .optim import LearningRateSchedule
from .privacy import PrivacySpec, RngStream

__all__ = ["ParamMatrix", "Sample", "LearningRateSchedule", "PrivacySpec", "RngStream"]
