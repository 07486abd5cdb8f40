"""COW-protocol QKD physical-layer modeling, fitting and SKR prediction."""

__version__ = "0.1.0"
