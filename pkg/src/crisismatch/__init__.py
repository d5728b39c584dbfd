"""Semi-supervised few-shot text classification toolkit.

Pseudo-labeling, augmentation consistency, entropy minimization, and
hidden-state interpolation on a small from-scratch classifier, with a
reproducible training and evaluation harness.
"""

__version__ = "0.1.0"
