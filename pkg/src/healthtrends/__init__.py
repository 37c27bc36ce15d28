"""Bayesian synthesis of fragmentary study summaries into country, subregion,
region and global trend estimates."""

__version__ = "0.1.0"
