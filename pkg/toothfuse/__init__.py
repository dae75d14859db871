"""Crown / full-tooth mesh fusion through a learned signed-distance shape prior."""

__version__ = "0.1.0"
