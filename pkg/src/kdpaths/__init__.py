"""Multi-path knowledge distillation: losses, weighting strategies, training harness."""

__version__ = "0.1.0"
