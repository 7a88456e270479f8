"""Whole-slide tumor-cell-ratio counter.

Detects cell nuclei on H&E tissue images with a from-scratch
fully-convolutional network, classifies each as tumor/normal by fusing
cell-level and tumor-area scores across magnifications, and aggregates an
exact count ratio over arbitrarily large slides via a deterministic
parallel tile pipeline.
"""

__version__ = "0.1.0"
