"""Trajectory-replay simulation of RSU-assisted GPS spoofing detection and correction."""

__version__ = "0.1.0"
