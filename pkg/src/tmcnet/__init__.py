"""Text-guided multi-stage cross-perception segmentation on a numpy autodiff engine."""

__version__ = "0.1.0"
