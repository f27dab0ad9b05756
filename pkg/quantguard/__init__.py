"""QuantGuard: bit-width minimization for ReLU classifiers with verified Top-1 equivalence."""

__version__ = "0.1.0"
