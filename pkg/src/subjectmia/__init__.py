"""Subject membership inference against federated learning on synthetic federations."""

__version__ = "0.1.0"
