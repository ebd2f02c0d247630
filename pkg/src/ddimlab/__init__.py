"""Desk-scale diffusion laboratory: schedules, DDPM/DDIM sampling, latent
embedding and linear yaw trajectories, with analytic oracles for testing."""

__version__ = "0.1.0"
