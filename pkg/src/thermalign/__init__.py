"""Self-supervised RGB-to-thermal detector adaptation and fusion."""

__version__ = "0.1.0"
