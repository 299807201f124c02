"""Style-mixing face de-identification on a small style-based generator, with attacks and utility metrics."""

from .synthesis import Generator, GeneratorConfig, NoiseField, map_latent, style_mix, synthesize

__all__ = ["Generator", "GeneratorConfig", "NoiseField", "map_latent", "style_mix", "synthesize"]
__version__ = "0.1.0"
