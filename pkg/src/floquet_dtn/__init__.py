"""Floquet modes, DtN maps and grating scattering for periodic substrates."""

from .profiles import RefractiveProfile, ProfileKind

__all__ = ["RefractiveProfile", "ProfileKind"]
__version__ = "0.1.0"
