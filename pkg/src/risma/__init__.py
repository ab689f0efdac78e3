"""Robust beamforming toolkit for a movable-antenna, RIS-assisted RSMA downlink."""

__version__ = "0.1.0"
