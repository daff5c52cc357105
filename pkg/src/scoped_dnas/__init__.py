"""Scoped differentiable architecture search over a ResNet-50 supernet."""

__version__ = "0.1.0"
