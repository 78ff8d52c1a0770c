"""Capsule-network gaze estimation on 36x60 single-eye patches."""

__version__ = "0.1.0"
