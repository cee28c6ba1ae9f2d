"""Prior-guided source-free self-training for 2D keypoint heatmap models, at desk scale."""

__version__ = "0.1.0"
