"""Run Docker container images in user space, without privileges."""

__version__ = "1.0.0"
