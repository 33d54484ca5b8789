"""Multitask vocal-burst modelling: log-mel front end, numpy autodiff models, permutation tests."""

__version__ = "0.1.0"
