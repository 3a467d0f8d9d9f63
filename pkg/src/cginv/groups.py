"""Finite linear automorphism groups as explicit matrix sets.

Every group acts on ``vec(X)``. Images are vectorised in ``(channel, row, col)``
C-order and sequences in ``(position, feature)`` C-order.

Elements whose matrix is a permutation matrix also carry the index array ``p``
with ``(T @ x)[i] == x[p[i]]``; closure, conjugation and sampling use it as a
fast path, but equality is always decided on the rounded dense matrix.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from itertools import combinations
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    CapExceeded,
    DimensionMismatch,
    InvalidParams,
    NonInvertibleGenerator,
    NotASubgroup,
)

HASH_DECIMALS = 9
DEFAULT_CAP = 20000

BUILTIN_NAMES = ("rot90", "color_perm", "vflip", "h_translate", "transposition")


def matrix_key(matrix: np.ndarray, decimals: int = HASH_DECIMALS) -> bytes:
    """Canonical hash key: entries rounded to ``decimals`` places (``-0.0`` folded)."""
    r = np.round(np.asarray(matrix, dtype=np.float64), decimals) + 0.0
    return r.tobytes()


def as_permutation(matrix: np.ndarray) -> np.ndarray | None:
    """Return ``p`` with ``matrix[i, p[i]] == 1`` if ``matrix`` is a permutation matrix."""
    m = np.asarray(matrix)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        return None
    if not np.all((m == 0) | (m == 1)):
        return None
    if not (np.all(m.sum(axis=0) == 1) and np.all(m.sum(axis=1) == 1)):
        return None
    return np.argmax(m, axis=1)


def permutation_matrix(p: Sequence[int]) -> np.ndarray:
    p = np.asarray(p, dtype=np.int64)
    d = p.shape[0]
    m = np.zeros((d, d))
    m[np.arange(d), p] = 1.0
    return m


@dataclass(frozen=True, eq=False)
class GroupElement:
    matrix: np.ndarray
    label: str | None = None
    perm: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        m = np.array(self.matrix, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise InvalidParams(f"group elements must be square matrices, got shape {m.shape}")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)
        p = self.perm if self.perm is not None else as_permutation(m)
        if p is not None:
            p = np.asarray(p, dtype=np.int64)
            p.setflags(write=False)
        object.__setattr__(self, "perm", p)

    @property
    def dimension(self) -> int:
        return self.matrix.shape[0]

    def key(self, decimals: int = HASH_DECIMALS) -> bytes:
        return matrix_key(self.matrix, decimals)

    def __matmul__(self, other: GroupElement) -> GroupElement:
        if self.perm is not None and other.perm is not None:
            p = other.perm[self.perm]
            return GroupElement(permutation_matrix(p), perm=p)
        return GroupElement(self.matrix @ other.matrix)

    def __eq__(self, other):
        if not isinstance(other, GroupElement):
            return NotImplemented
        return self.key() == other.key()

    def __hash__(self):
        return hash(self.key())

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Apply to a vector or to a batch of row vectors (last axis is ``vec(X)``)."""
        x = np.asarray(x)
        if self.perm is not None:
            return x[..., self.perm]
        return x @ self.matrix.T


class FiniteGroup:
    """Deduplicated, immutable set of matrices closed under composition."""

    def __init__(
        self,
        elements: Iterable[GroupElement],
        generators: Iterable[GroupElement] = (),
        name: str | None = None,
        decimals: int = HASH_DECIMALS,
    ):
        self.decimals = decimals
        self.name = name
        elems: list[GroupElement] = []
        self._index: dict[bytes, int] = {}
        for e in elements:
            k = e.key(decimals)
            if k not in self._index:
                self._index[k] = len(elems)
                elems.append(e)
        if not elems:
            raise InvalidParams("a group needs at least the identity")
        dims = {e.dimension for e in elems}
        if len(dims) != 1:
            raise DimensionMismatch(f"elements act on different dimensions: {sorted(dims)}")
        self.elements: tuple[GroupElement, ...] = tuple(elems)
        self.generators: tuple[GroupElement, ...] = tuple(generators)
        self.dimension: int = dims.pop()

    @property
    def order(self) -> int:
        return len(self.elements)

    def __len__(self) -> int:
        return len(self.elements)

    def __iter__(self):
        return iter(self.elements)

    def __repr__(self) -> str:
        return f"FiniteGroup(name={self.name!r}, order={self.order}, dimension={self.dimension})"

    def index(self, element: GroupElement | np.ndarray) -> int | None:
        m = element.matrix if isinstance(element, GroupElement) else element
        return self._index.get(matrix_key(m, self.decimals))

    def __contains__(self, element) -> bool:
        return self.index(element) is not None

    @property
    def matrices(self) -> np.ndarray:
        return np.stack([e.matrix for e in self.elements])

    @property
    def is_permutation_group(self) -> bool:
        return all(e.perm is not None for e in self.elements)

    def key_set(self) -> frozenset[bytes]:
        return frozenset(self._index)

    def __eq__(self, other):
        if not isinstance(other, FiniteGroup):
            return NotImplemented
        return self.dimension == other.dimension and self.key_set() == other.key_set()

    def __hash__(self):
        return hash(self.key_set())

    def identity_index(self) -> int:
        i = self.index(np.eye(self.dimension))
        assert i is not None
        return i

    def inverse_index(self, i: int) -> int:
        e = self.elements[i]
        if e.perm is not None:
            inv = np.argsort(e.perm)
            j = self.index(permutation_matrix(inv))
        else:
            j = self.index(np.linalg.inv(e.matrix))
        if j is None:
            raise NotASubgroup("element set is not closed under inverses")
        return j


def _check_generator(m: np.ndarray) -> None:
    if np.linalg.cond(m) > 1.0 / np.finfo(np.float64).eps:
        raise NonInvertibleGenerator("generator matrix is singular (or numerically so)")


def generate_group(
    generators: Sequence[np.ndarray | GroupElement],
    cap: int = DEFAULT_CAP,
    dimension: int | None = None,
    name: str | None = None,
    decimals: int = HASH_DECIMALS,
) -> FiniteGroup:
    """Breadth-first closure of ``generators`` under composition.

    With no generators, ``dimension`` is required and the trivial group is returned.
    Raises :class:`CapExceeded` as soon as more than ``cap`` elements are found.
    """
    gens = [g if isinstance(g, GroupElement) else GroupElement(np.asarray(g, dtype=np.float64))
            for g in generators]
    dims = {g.dimension for g in gens}
    if dimension is not None:
        dims.add(dimension)
    if len(dims) != 1:
        raise DimensionMismatch(f"generators disagree on dimension: {sorted(dims)}")
    d = dims.pop()
    for g in gens:
        if g.perm is None:
            _check_generator(g.matrix)

    identity = GroupElement(np.eye(d), label="id")
    if all(g.perm is not None for g in gens):
        return _generate_permutation_group(identity, gens, cap, name, decimals)

    seen = {identity.key(decimals)}
    elements = [identity]
    queue = deque([identity])
    while queue:
        a = queue.popleft()
        for g in gens:
            b = GroupElement(a.matrix @ g.matrix)
            k = b.key(decimals)
            if k in seen:
                continue
            seen.add(k)
            elements.append(b)
            if len(elements) > cap:
                raise CapExceeded(f"closure exceeds cap={cap}")
            queue.append(b)
    return FiniteGroup(elements, gens, name=name, decimals=decimals)


def _generate_permutation_group(identity, gens, cap, name, decimals) -> FiniteGroup:
    d = identity.dimension
    perms = [np.arange(d)]
    seen = {perms[0].tobytes()}
    queue = deque([perms[0]])
    gen_perms = [g.perm for g in gens]
    while queue:
        a = queue.popleft()
        for gp in gen_perms:
            b = gp[a]
            k = b.tobytes()
            if k in seen:
                continue
            seen.add(k)
            perms.append(b)
            if len(perms) > cap:
                raise CapExceeded(f"closure exceeds cap={cap}")
            queue.append(b)
    elements = [identity] + [GroupElement(permutation_matrix(p), perm=p) for p in perms[1:]]
    return FiniteGroup(elements, gens, name=name, decimals=decimals)


def join_groups(parts: Sequence[FiniteGroup], cap: int = DEFAULT_CAP, name: str | None = None) -> FiniteGroup:
    """Smallest group containing every part."""
    if not parts:
        raise InvalidParams("join of an empty list of groups is undefined")
    dims = {g.dimension for g in parts}
    if len(dims) != 1:
        raise DimensionMismatch(f"cannot join groups acting on dimensions {sorted(dims)}")
    if len(parts) == 1:
        return parts[0]
    gens: list[GroupElement] = []
    seen: set[bytes] = set()
    for g in parts:
        # non-identity elements generate as well as the declared generators do
        for e in (g.generators or g.elements):
            k = e.key()
            if k not in seen:
                seen.add(k)
                gens.append(e)
    return generate_group(gens, cap=cap, dimension=dims.pop(), name=name)


def is_normal_subgroup(h: FiniteGroup, g: FiniteGroup) -> bool:
    """True iff ``b a b^-1`` lies in ``h`` for all ``a`` in ``h`` and ``b`` in ``g``."""
    if h.dimension != g.dimension:
        raise DimensionMismatch("groups act on different spaces")
    missing = [e for e in h.elements if e not in g]
    if missing:
        raise NotASubgroup(f"{len(missing)} element(s) of h are not in g")
    for bi, b in enumerate(g.elements):
        b_inv = g.elements[g.inverse_index(bi)]
        for a in h.elements:
            if (b @ a) @ b_inv not in h:
                return False
    return True


def reynolds_operator(g: FiniteGroup) -> np.ndarray:
    """Group average ``(1/|G|) sum_T T``."""
    return g.matrices.mean(axis=0)


# ---------------------------------------------------------------- built-ins

def _image_shape(params) -> tuple[int, int, int]:
    shape = params.get("shape")
    if shape is None:
        raise InvalidParams("image groups need shape=(channels, height, width)")
    shape = tuple(int(s) for s in shape)
    if len(shape) == 2:
        shape = (1,) + shape
    if len(shape) != 3 or min(shape) < 1:
        raise InvalidParams(f"bad image shape {shape}")
    return shape


def _from_index_map(idx_img: np.ndarray) -> GroupElement:
    return GroupElement(permutation_matrix(idx_img.ravel()))


def builtin_group(name: str, **params) -> FiniteGroup:
    """Named group acting on vectorised images or sequences.

    Image groups take ``shape=(c, h, w)``. ``transposition`` takes ``i``, ``j``
    (1-based, ``i < j``), ``n`` and optional ``width``.
    """
    cap = params.pop("cap", DEFAULT_CAP)
    if name == "transposition":
        return _transposition(params, cap)
    if name not in BUILTIN_NAMES:
        raise InvalidParams(f"unknown built-in group {name!r}; choose from {BUILTIN_NAMES}")
    c, h, w = _image_shape(params)
    idx = np.arange(c * h * w).reshape(c, h, w)
    if name == "rot90":
        if h != w:
            raise InvalidParams(f"rot90 needs a square grid, got {h}x{w}")
        gens = [_from_index_map(np.rot90(idx, k=1, axes=(1, 2)))]
    elif name == "vflip":
        gens = [_from_index_map(idx[:, ::-1, :])]
    elif name == "h_translate":
        gens = [_from_index_map(np.roll(idx, 1, axis=2))]
    else:  # color_perm
        gens = []
        for a in range(c - 1):
            order = np.arange(c)
            order[[a, a + 1]] = order[[a + 1, a]]
            gens.append(_from_index_map(idx[order]))
    gens = [g for g in gens if not np.array_equal(g.matrix, np.eye(c * h * w))]
    return generate_group(gens, cap=cap, dimension=c * h * w, name=name)


def _transposition(params, cap) -> FiniteGroup:
    try:
        i, j, n = int(params["i"]), int(params["j"]), int(params["n"])
    except KeyError as exc:
        raise InvalidParams(f"transposition needs i, j and n ({exc} missing)") from None
    width = int(params.get("width", 1))
    if not (1 <= i < j <= n):
        raise InvalidParams(f"transposition needs 1 <= i < j <= n, got i={i}, j={j}, n={n}")
    if width < 1:
        raise InvalidParams("width must be positive")
    idx = np.arange(n * width).reshape(n, width)
    order = np.arange(n)
    order[[i - 1, j - 1]] = order[[j - 1, i - 1]]
    g = _from_index_map(idx[order])
    return generate_group([g], cap=cap, dimension=n * width, name=f"({i},{j})")


@dataclass(frozen=True)
class GroupFamily:
    groups: tuple[FiniteGroup, ...]
    names: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "groups", tuple(self.groups))
        object.__setattr__(self, "names", tuple(self.names))
        if len(self.groups) != len(self.names):
            raise InvalidParams("one name per group required")
        if len(set(self.names)) != len(self.names):
            raise InvalidParams("group names must be unique")
        if not self.groups:
            raise InvalidParams("a family needs at least one group")
        dims = {g.dimension for g in self.groups}
        if len(dims) != 1:
            raise DimensionMismatch(f"family members act on dimensions {sorted(dims)}")

    @property
    def dimension(self) -> int:
        return self.groups[0].dimension

    @property
    def m(self) -> int:
        return len(self.groups)

    def __len__(self) -> int:
        return len(self.groups)

    def indices(self, names: Iterable[str]) -> tuple[int, ...]:
        lookup = {n: i for i, n in enumerate(self.names)}
        try:
            return tuple(sorted(lookup[n] for n in names))
        except KeyError as exc:
            raise InvalidParams(f"unknown group name {exc}") from None

    def join(self, indices: Iterable[int], cap: int = DEFAULT_CAP) -> FiniteGroup:
        idx = sorted(set(indices))
        if not idx:
            return generate_group([], dimension=self.dimension, name="id")
        return join_groups([self.groups[i] for i in idx], cap=cap,
                           name="+".join(self.names[i] for i in idx))


def image_family(shape: Sequence[int], names: Sequence[str] = ("rot90", "color_perm", "vflip"),
                 aliases: dict[str, str] | None = None) -> GroupFamily:
    aliases = aliases or {}
    groups = [builtin_group(aliases.get(n, n), shape=shape) for n in names]
    return GroupFamily(tuple(groups), tuple(names))


def transposition_pairs(n: int) -> list[tuple[int, int]]:
    """All pairs ``(i, j)``, ``1 <= i < j <= n``, ordered by ``j`` descending then ``i`` descending.

    This enumeration fixes the lattice tie-break so that among the dependent
    "all transpositions avoiding p" nodes it is the one avoiding ``n`` that is
    left out once the space is covered.
    """
    pairs = list(combinations(range(1, n + 1), 2))
    return sorted(pairs, key=lambda ij: (-ij[1], -ij[0]))


def transposition_family(n: int, width: int = 1) -> GroupFamily:
    pairs = transposition_pairs(n)
    groups = [builtin_group("transposition", i=i, j=j, n=n, width=width) for i, j in pairs]
    return GroupFamily(tuple(groups), tuple(f"({i},{j})" for i, j in pairs))
