"""Reduced effective-SDE identification for field-driven colloidal self-assembly.

The package covers the full workflow: Brownian dynamics of quadrupole-confined
colloids, density-field featurization, diffusion-map latent coordinates,
drift/diffusivity identification (burst moment estimates and likelihood-trained
networks), and free-energy reconstruction, plus a batch CLI tying the stages
together.
"""

__version__ = "0.1.0"

from .bd import PhysicalParams, ParticleConfiguration, Trajectory
from .dmaps import DiffusionMapModel
from .km import TabulatedModel
from .nn_esde import MLPModel, TrainConfig
