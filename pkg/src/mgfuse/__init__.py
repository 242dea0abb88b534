"""Modality-guided 2D-3D fusion for unsupervised domain adaptation,
exercised end to end on synthetic paired scenes."""

__version__ = "0.1.0"
