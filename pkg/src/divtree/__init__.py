"""Tree decompositions and weighted right inverses of the divergence."""
__version__ = "0.1.0"
