"""Two-tower matching with propensity re-weighted negatives from three funnel spaces."""

__version__ = "0.1.0"
