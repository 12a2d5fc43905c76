"""Model-based sufficient dimension reduction with continuous and binary predictors."""
__version__ = "0.1.0"
