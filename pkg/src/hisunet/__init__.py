"""Multi-task SIC/SIV forecasting with hierarchical information sharing."""

__version__ = "0.1.0"
