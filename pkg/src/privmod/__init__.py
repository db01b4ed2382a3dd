"""Privacy-preserving vehicle-to-passenger assignment for mobility-on-demand fleets."""

__version__ = "0.1.0"
