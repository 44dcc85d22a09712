"""Context-aware CycleGAN feature synthesis for rare intensity classes, on a small numpy autodiff engine."""

__version__ = "0.1.0"
