"""
Core modules: forests, local polynomials, bounds, tuning, inference and simulation.
"""
