"""Desk-scale dual-path diffusion over latent sequences.

Angle-parameterized continuous-time diffusion, multi-chunk velocity
training, a dual-path denoising network with semantic-token conditioning,
DDIM-style angular sampling with classifier-free guidance, and
continuation/inpainting over latent sequences.
"""

__version__ = "0.1.0"
