"""Field-based locking-rule inference and outlier race detection over KIR."""

__version__ = "0.1.0"
