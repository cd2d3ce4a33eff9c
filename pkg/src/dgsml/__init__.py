"""Semi-supervised domain generalization by episodic meta-learning over class centroids."""

__version__ = "0.1.0"
