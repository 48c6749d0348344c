"""Feed-forward composable face and hair Gaussian head avatars."""

__version__ = "0.1.0"
