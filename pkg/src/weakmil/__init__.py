"""Weakly supervised whole-slide classification.

Synthetic slide corpus, Otsu tissue segmentation and patch QC, MoCo-v2
contrastive patch features, gated-attention MIL slide classifier, k-fold
evaluation and per-class attention heatmaps.
"""

__version__ = "0.1.0"
