"""Variational Bayesian inference for (deep) Gaussian process and neural
network models, built on a small reverse-mode autodiff engine over numpy."""

__version__ = "0.1.0"
