"""Block isometric PEPS subspace iteration for 2D lattice eigenproblems."""

__version__ = "0.1.0"
