"""knnadapt: unsupervised domain adaptation for kNN-augmented translation at desk scale."""

__version__ = "0.1.0"
