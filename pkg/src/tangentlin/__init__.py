"""Tangent kernels, Hessian norms and width scaling of neural networks."""

__version__ = "0.1.0"
