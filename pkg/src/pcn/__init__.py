"""Deep predictive coding networks (PCN) for image classification, in numpy."""

__version__ = "0.1.0"
