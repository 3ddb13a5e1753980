"""Prefix-value implicit reward models and distribution-level RL on
synthetic, exactly verifiable token MDPs."""

__version__ = "0.1.0"
