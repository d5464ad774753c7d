"""Chemotaxis policy laboratory.

Simulate a noisy chemotactic cell, train spatial/temporal/combined neural
navigation policies with PPO, benchmark them against interpretable explicit
policies, and analyze trained networks with integrated gradients.
"""

from .env import (
    BatchedEnv,
    EnvConfig,
    EnvState,
    Observation,
    SingleEnv,
    concentration,
    expected_counts,
    sensor_positions,
    terminal_reward_values,
    weber_fechner,
)

__version__ = "0.1.0"
