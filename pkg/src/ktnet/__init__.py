"""Unpaired point-cloud completion by teacher-student knowledge transfer."""

__version__ = "0.1.0"
