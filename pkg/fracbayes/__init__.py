"""
Fractional-posterior Bayesian model selection toolkit
"""

__version__ = "1.0.0"
