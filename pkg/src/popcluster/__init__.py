"""Discovery-oriented clustering of trial-by-feature matrices: PCA, Gaussian
mixtures with BIC model-order selection, stability, and interpretation."""

__version__ = "0.1.0"
