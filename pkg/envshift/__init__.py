"""
envshift: environment detection and disentangled latent learning for
nonstationary time series
"""

__version__ = "0.1.0"
