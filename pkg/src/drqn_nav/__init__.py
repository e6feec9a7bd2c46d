"""Map-based double DRQN for 3D obstacle avoidance with a narrow-FOV depth camera."""

__version__ = "0.1.0"
