from .discriminator import Discriminator, DiscriminatorConfig, build_discriminator, discriminate, patch_scores
from .generator import Generator, GeneratorConfig, build_generator, generator_forward

__all__ = [
    "Discriminator",
    "DiscriminatorConfig",
    "Generator",
    "GeneratorConfig",
    "build_discriminator",
    "build_generator",
    "discriminate",
    "generator_forward",
    "patch_scores",
]
