"""Channel-attention fusion blocks, a toy grid detector and its tooling, on numpy."""
__version__ = "0.1.0"
