"""Food energy estimation from energy density maps and depth."""

__version__ = "0.1.0"
