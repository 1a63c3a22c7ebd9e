"""Discriminator-guided score-based diffusion on toy data."""
from . import analytic_oracle, diagnostics, diffusion_sde, samplers, tiny_nets
from .config import RunConfig, parse_config, serialize_config

__all__ = ["analytic_oracle", "diagnostics", "diffusion_sde", "samplers", "tiny_nets",
           "RunConfig", "parse_config", "serialize_config"]
__version__ = "0.1.0"
