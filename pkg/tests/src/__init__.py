"""
This module contains utility functions that can be used in the tests.
"""