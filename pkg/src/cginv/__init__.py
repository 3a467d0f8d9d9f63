"""Lattices of group-invariant subspaces and networks regularized toward invariance."""
from .groups import (FiniteGroup, GroupElement, GroupFamily, builtin_group, generate_group, image_family,
                     is_normal_subgroup, join_groups, reynolds_operator, transposition_family)
from .lattice import (InvariantLattice, Subspace, power_set_reference, build_lattice, deserialize_lattice,
                      serialize_lattice, verify_lattice)
from .nn import CGConvLayer, CGDenseLayer, GlyphNet, SequenceNet, penalty_exact, penalty_smooth

__version__ = "0.1.0"
