"""Replication-portfolio MDPs, an exact DP oracle, and deep hedging / AlphaZero / MuZero agents."""

__version__ = "0.1.0"
