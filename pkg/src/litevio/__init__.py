"""Compact visual-inertial odometry with online BatchNorm test-time adaptation."""

__version__ = "0.1.0"
