"""
Extrapolation-aware inference: bounds, intervals and scores outside the covariate support.
"""
__version__ = "0.1.0"
__author__ = "Xtrapolation developers"
