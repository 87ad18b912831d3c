"""Score-based (EDM) diffusion for conditional image-to-image nowcasting at desk scale."""

__version__ = "0.1.0"
