"""
Utility modules for file handling, configuration and numerical helpers.
"""
