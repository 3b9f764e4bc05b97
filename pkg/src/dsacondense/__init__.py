"""Dataset condensation by gradient matching with Siamese differentiable augmentation."""

__version__ = "0.1.0"
