"""Quadratic normal forms and intersection indices of CR singular points.

A real 4-submanifold of C^3 is CR singular where its tangent plane is a
complex 2-plane.  Near such a point the manifold is a graph z3 = h(z, zbar)
whose quadratic coefficients (R, S) carry all first-order biholomorphic
information.  This package classifies the pair into its canonical form,
computes the discrete and continuous invariants and the Lai intersection
index, and enumerates CR singular points of concrete compact embeddings,
checking the signed counts against the topological identities they must
satisfy.
"""

from . import matcore  # noqa: F401

__version__ = "0.1.0"
