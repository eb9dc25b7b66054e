"""Long-range continuous-spin chains: exact oracle, sampler, checks and certifier."""

__version__ = "0.1.0"
