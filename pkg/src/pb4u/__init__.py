"""pb4u: a trainable neural cloth-simulation engine.

Message-passing graph network over garment meshes with resolution-aware
propagation depth and geometry-aware update scaling, trained purely by
minimizing differentiable cloth energies.
"""

__version__ = "0.1.0"
