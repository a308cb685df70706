"""Two-stage transfer learning for lung segmentation on a from-scratch autodiff engine."""

__version__ = "0.1.0"
