"""Pairwise visual explanations for metric-embedding convolutional
models: matched intermediate features filtered by relevance, pixel-space
backprojection, and quantitative plausibility metrics."""

__version__ = "0.1.0"
