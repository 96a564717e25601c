"""Class-conditional latent video diffusion on synthetic endoscopy-like clips."""

__version__ = "0.1.0"
