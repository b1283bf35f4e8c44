"""Adversarial-robustness toolkit for AI-generated-image detectors at desk scale."""

__version__ = "0.1.0"
