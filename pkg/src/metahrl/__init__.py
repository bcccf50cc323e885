"""Meta-hierarchical DDPG for O-RAN slicing and RB scheduling."""

__version__ = "0.1.0"
