"""Desk-scale testbed for proactive (template-encrypted) object detection."""

__version__ = "0.1.0"
