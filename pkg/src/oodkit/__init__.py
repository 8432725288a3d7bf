"""Out-of-distribution detection toolkit: synthetic-outlier fine-tuning for
a minimal trainable transformer, score-based post-processing and OOD metrics."""

__version__ = "0.1.0"
