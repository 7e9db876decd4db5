"""Camera trajectories to colored point clouds through a compact radiance field."""

__version__ = "0.1.0"
