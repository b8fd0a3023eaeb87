"""Semi-supervised contractive autoencoder for UE anomaly detection, with Shapley explanations."""

__version__ = "0.1.0"
