"""svdlab: a desk-scale federated-learning attack/defense laboratory.

Low-rank gradient obfuscation with entropy-adaptive truncation and weighted
aggregation, baseline defenses (noise, pruning), and a gradient inversion
engine with adaptive attacker modes.
"""

__version__ = "0.1.0"
