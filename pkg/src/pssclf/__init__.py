"""Projection-to-state stability tools for CLF controllers with learned residuals."""

__version__ = "0.1.0"
