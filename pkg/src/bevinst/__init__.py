"""Two-stage camera 3D detection on synthetic multi-view scenes: a
lift-splat BEV branch, a BEV-to-instance adaptor and an instance-level
spatiotemporal refinement branch."""

__version__ = "0.1.0"
