"""Single-vertex adversarial attacks on spatiotemporal graph forecasters."""

__version__ = "0.1.0"
