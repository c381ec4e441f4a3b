"""Amortized preferential black-box optimization.

A transformer policy is pre-trained with reinforcement learning on
synthetic preferential meta-tasks; at test time it proposes duels and
maintains a utility belief without any per-task fitting.
"""

__version__ = "0.1.0"
