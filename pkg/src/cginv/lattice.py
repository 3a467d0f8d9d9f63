"""Invariant-subspace lattices for a family of finite groups.

For each group ``G_i`` the left 1-eigenspace ``W_i`` of its Reynolds operator
holds exactly the weight vectors ``w`` with ``w^T T = w^T`` for all ``T`` in
``G_i``. A lattice node ``B_M`` keeps the vectors invariant to every group in
``M`` after removing everything invariant to a strict superset of ``M``.

Only *closed* label sets are visited: ``M`` is closed when
``M == {j : cap_{i in M} W_i  is contained in  W_j}``. A non-closed ``M`` has the
same intersection as its closure, which is processed first, so its node is
empty and skipping it changes nothing.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from itertools import combinations
from typing import Iterable, Sequence

import numpy as np

from .errors import DimensionMismatch, FamilyTooLarge, MalformedInput, NotIdempotent
from .groups import GroupFamily, reynolds_operator

FORMAT_VERSION = 1
NULLSPACE_RTOL = 1e-9
DEFLATION_TOL = 1e-8
CONTAIN_TOL = 1e-8
DEFAULT_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class Subspace:
    """Orthonormal basis stored as the columns of ``basis`` (``ambient_dim x dim``)."""

    ambient_dim: int
    basis: np.ndarray
    tol: float = DEFAULT_TOL

    def __post_init__(self):
        b = np.asarray(self.basis, dtype=np.float64)
        if b.ndim == 1:
            b = b.reshape(self.ambient_dim, -1)
        if b.size == 0:
            b = np.zeros((self.ambient_dim, 0))
        if b.shape[0] != self.ambient_dim:
            raise DimensionMismatch(f"basis has {b.shape[0]} rows, ambient_dim is {self.ambient_dim}")
        b.setflags(write=False)
        object.__setattr__(self, "basis", b)

    @property
    def dim(self) -> int:
        return self.basis.shape[1]

    def __len__(self) -> int:
        return self.dim

    def is_zero(self) -> bool:
        return self.dim == 0

    @classmethod
    def zero(cls, ambient_dim: int) -> Subspace:
        return cls(ambient_dim, np.zeros((ambient_dim, 0)))

    @classmethod
    def full(cls, ambient_dim: int) -> Subspace:
        return cls(ambient_dim, np.eye(ambient_dim))

    @classmethod
    def span(cls, vectors: np.ndarray, rtol: float = NULLSPACE_RTOL) -> Subspace:
        """Orthonormal basis of the column span of ``vectors``."""
        v = np.asarray(vectors, dtype=np.float64)
        d = v.shape[0]
        if v.size == 0:
            return cls.zero(d)
        u, s, _ = np.linalg.svd(v, full_matrices=False)
        if s.size == 0 or s[0] == 0.0:
            return cls.zero(d)
        rank = int(np.sum(s > rtol * s[0]))
        return cls(d, u[:, :rank])

    def gram_error(self) -> float:
        if self.dim == 0:
            return 0.0
        return float(np.max(np.abs(self.basis.T @ self.basis - np.eye(self.dim))))

    def project(self, x: np.ndarray) -> np.ndarray:
        return self.basis @ (self.basis.T @ x)


def _nullspace(a: np.ndarray, rtol: float = NULLSPACE_RTOL) -> np.ndarray:
    """Orthonormal basis (columns) of the right nullspace of ``a``."""
    n = a.shape[1]
    if a.shape[0] == 0:
        return np.eye(n)
    _, s, vh = np.linalg.svd(a, full_matrices=True)
    if s.size == 0 or s[0] == 0.0:
        return np.eye(n)
    rank = int(np.sum(s > rtol * s[0]))
    return vh[rank:].T.copy()


def one_eigenspace(reynolds: np.ndarray, tol: float = DEFAULT_TOL) -> Subspace:
    """Basis of ``{w : w^T R = w^T}``, the nullspace of ``R^T - I``."""
    r = np.asarray(reynolds, dtype=np.float64)
    if r.ndim != 2 or r.shape[0] != r.shape[1]:
        raise DimensionMismatch(f"Reynolds operator must be square, got {r.shape}")
    err = float(np.max(np.abs(r @ r - r))) if r.size else 0.0
    if err > 10 * tol:
        raise NotIdempotent(f"operator is not a projection (max |R^2 - R| = {err:.3g})")
    d = r.shape[0]
    return Subspace(d, _nullspace(r.T - np.eye(d)), tol)


def _intersect_pair(a: Subspace, b: Subspace) -> Subspace:
    if a.is_zero() or b.is_zero():
        return Subspace.zero(a.ambient_dim)
    # vectors A alpha = B beta
    coeffs = _nullspace(np.hstack([a.basis, -b.basis]))
    if coeffs.shape[1] == 0:
        return Subspace.zero(a.ambient_dim)
    return Subspace.span(a.basis @ coeffs[: a.dim])


def intersect(parts: Sequence[Subspace]) -> Subspace:
    if not parts:
        raise ValueError("intersection of no subspaces is undefined here")
    d = parts[0].ambient_dim
    if any(p.ambient_dim != d for p in parts):
        raise DimensionMismatch("subspaces live in different ambient spaces")
    out = parts[0]
    for p in parts[1:]:
        out = _intersect_pair(out, p)
        if out.is_zero():
            break
    return out


def orth_against(target: Subspace, remove: Subspace, deflation: float = DEFLATION_TOL) -> Subspace:
    """Remove from ``target`` its orthogonal projection onto ``remove``."""
    if target.ambient_dim != remove.ambient_dim:
        raise DimensionMismatch("subspaces live in different ambient spaces")
    d = target.ambient_dim
    q_rm = remove.basis
    kept: list[np.ndarray] = []
    for k in range(target.dim):
        v = target.basis[:, k].copy()
        for _ in range(2):
            if q_rm.shape[1]:
                v -= q_rm @ (q_rm.T @ v)
            if kept:
                q = np.column_stack(kept)
                v -= q @ (q.T @ v)
        nrm = np.linalg.norm(v)
        if nrm < deflation:
            continue
        kept.append(v / nrm)
    if not kept:
        return Subspace.zero(d)
    return Subspace(d, np.column_stack(kept), target.tol)


def subspace_contains(outer: Subspace, inner: Subspace, tol: float = CONTAIN_TOL) -> bool:
    if outer.ambient_dim != inner.ambient_dim:
        raise DimensionMismatch("subspaces live in different ambient spaces")
    if inner.is_zero():
        return True
    if outer.is_zero():
        return False
    resid = inner.basis - outer.project(inner.basis)
    return bool(np.max(np.linalg.norm(resid, axis=0)) < tol)


# ---------------------------------------------------------------- lattice

@dataclass(frozen=True, eq=False)
class LatticeNode:
    label: tuple[int, ...]
    basis: Subspace

    @property
    def level(self) -> int:
        return len(self.label)

    @property
    def dim(self) -> int:
        return self.basis.dim


@dataclass(eq=False)
class InvariantLattice:
    nodes: list[LatticeNode]
    family_names: tuple[str, ...]
    ambient_dim: int
    tol: float = DEFAULT_TOL
    family: GroupFamily | None = field(default=None, repr=False)

    @property
    def covered_dim(self) -> int:
        return sum(n.dim for n in self.nodes)

    @property
    def labels(self) -> list[tuple[int, ...]]:
        return [n.label for n in self.nodes]

    @property
    def levels(self) -> list[int]:
        return [n.level for n in self.nodes]

    @property
    def dims(self) -> list[int]:
        return [n.dim for n in self.nodes]

    def basis_matrix(self) -> np.ndarray:
        """All node bases side by side, ``ambient_dim x covered_dim``."""
        return np.hstack([n.basis.basis for n in self.nodes])

    def block_slices(self) -> list[slice]:
        out, start = [], 0
        for n in self.nodes:
            out.append(slice(start, start + n.dim))
            start += n.dim
        return out

    def node(self, label: Iterable[int]) -> LatticeNode:
        key = tuple(sorted(label))
        for n in self.nodes:
            if n.label == key:
                return n
        raise KeyError(key)

    def label_names(self, label: Sequence[int]) -> tuple[str, ...]:
        return tuple(self.family_names[i] for i in label)

    def table(self) -> list[tuple[str, int, int]]:
        rows = []
        for n in self.nodes:
            name = ",".join(self.label_names(n.label)) if n.label else "(empty)"
            rows.append((name, n.level, n.dim))
        return rows

    def format_table(self) -> str:
        rows = self.table()
        width = max([len("label")] + [len(r[0]) for r in rows])
        lines = [f"{'label':<{width}}  level  dim", "-" * (width + 13)]
        lines += [f"{name:<{width}}  {lvl:>5}  {dim:>3}" for name, lvl, dim in rows]
        lines.append(f"{'total':<{width}}  {'':>5}  {self.covered_dim:>3}")
        return "\n".join(lines)


def eigenspaces(family: GroupFamily, tol: float = DEFAULT_TOL) -> list[Subspace]:
    return [one_eigenspace(reynolds_operator(g), tol) for g in family.groups]


def _closure_label(space: Subspace, ws: Sequence[Subspace]) -> tuple[int, ...]:
    return tuple(j for j, w in enumerate(ws) if subspace_contains(w, space))


def closed_sets(ws: Sequence[Subspace], max_intersections: int = 100000) -> dict[tuple[int, ...], Subspace]:
    """Every distinct nonzero intersection of the ``ws``, keyed by its closed label."""
    found: dict[tuple[int, ...], Subspace] = {}
    for w in ws:
        if not w.is_zero():
            found.setdefault(_closure_label(w, ws), w)
    done: set[tuple[tuple[int, ...], tuple[int, ...]]] = set()
    count = 0
    changed = True
    while changed:
        changed = False
        keys = sorted(found)
        for a, b in combinations(keys, 2):
            if (a, b) in done:
                continue
            done.add((a, b))
            if set(a) <= set(b) or set(b) <= set(a):
                continue
            count += 1
            if count > max_intersections:
                raise FamilyTooLarge(f"more than {max_intersections} intersections needed")
            s = _intersect_pair(found[a], found[b])
            if s.is_zero():
                continue
            lab = _closure_label(s, ws)
            if lab not in found:
                found[lab] = s
                changed = True
    return found


def _order_key(label: tuple[int, ...]):
    return (-len(label), label)


def _transposition_candidates(family: GroupFamily, ws: Sequence[Subspace]):
    """Closed sets "all transpositions avoiding S" for |S| <= 1, in processing order."""
    n = family_transposition_n(family)
    pairs = [_parse_pair(name) for name in family.names]
    index = {p: k for k, p in enumerate(pairs)}
    labels = [tuple(sorted(index[p] for p in combinations(range(1, n + 1), 2)))]
    for skip in range(1, n + 1):
        keep = [i for i in range(1, n + 1) if i != skip]
        lab = tuple(sorted(index[p] for p in combinations(keep, 2)))
        if lab:
            labels.append(lab)
    labels.sort(key=_order_key)
    for lab in labels:
        yield lab, intersect([ws[i] for i in lab])


def _parse_pair(name: str) -> tuple[int, int] | None:
    try:
        i, j = name.strip("()").split(",")
        return int(i), int(j)
    except ValueError:
        return None


def family_transposition_n(family: GroupFamily) -> int | None:
    """``n`` if ``family`` is exactly the set of all transpositions of ``n`` positions."""
    pairs = [_parse_pair(name) for name in family.names]
    if any(p is None for p in pairs) or not all(g.order == 2 for g in family.groups):
        return None
    n = max(j for _, j in pairs)
    if n < 2 or set(pairs) != set(combinations(range(1, n + 1), 2)):
        return None
    if family.dimension % n:
        return None
    return n


def canonical_signs(basis: np.ndarray) -> np.ndarray:
    """Flip columns so the first largest-magnitude entry of each is positive."""
    b = np.array(basis, dtype=np.float64)
    if b.size:
        pivot = np.argmax(np.abs(b) > np.abs(b).max(axis=0) - 1e-12, axis=0)
        b *= np.where(b[pivot, np.arange(b.shape[1])] < 0, -1.0, 1.0)
    return b


class _Accumulator:
    """Running span of all accepted node bases."""

    def __init__(self, d: int):
        self.d = d
        self.q = np.zeros((d, 0))

    @property
    def dim(self) -> int:
        return self.q.shape[1]

    def add(self, s: Subspace) -> None:
        extra = orth_against(s, Subspace(self.d, self.q))
        if extra.dim:
            self.q = np.hstack([self.q, extra.basis])

    def subspace(self) -> Subspace:
        return Subspace(self.d, self.q)


def _assemble(candidates, d: int, tol: float, independent: bool = True) -> list[LatticeNode]:
    nodes: list[LatticeNode] = []
    acc = _Accumulator(d)
    for label, tilde in candidates:
        if acc.dim >= d:
            break
        if tilde.is_zero():
            continue
        lab = set(label)
        sup = [n.basis.basis for n in nodes if lab < set(n.label)]
        above = Subspace.span(np.hstack(sup)) if sup else Subspace.zero(d)
        b = orth_against(tilde, above)
        if independent and b.dim and acc.dim:
            # part of b already spanned by other nodes would be counted twice
            overlap = intersect([b, acc.subspace()])
            if overlap.dim:
                b = orth_against(b, overlap)
        if b.is_zero():
            continue
        b = Subspace(d, canonical_signs(b.basis), tol)
        nodes.append(LatticeNode(tuple(label), b))
        acc.add(b)
    if acc.dim < d:
        rest = orth_against(Subspace.full(d), acc.subspace())
        if rest.dim:
            nodes.append(LatticeNode((), Subspace(d, canonical_signs(rest.basis), tol)))
    return nodes


def build_lattice(
    family: GroupFamily,
    tol: float = DEFAULT_TOL,
    max_intersections: int = 100000,
    fast_path: bool = True,
) -> InvariantLattice:
    """Nodes in descending level, lexicographic label within a level.

    Stops once the accepted nodes span the whole space; any remainder becomes
    the node with the empty label.
    """
    ws = eigenspaces(family, tol)
    d = family.dimension
    nodes = None
    if fast_path and family_transposition_n(family) is not None:
        nodes = _assemble(_transposition_candidates(family, ws), d, tol)
        if sum(n.dim for n in nodes if n.label) < d:
            nodes = None  # fast path did not cover the space; fall back
    if nodes is None:
        found = closed_sets(ws, max_intersections)
        order = sorted(found, key=_order_key)
        nodes = _assemble(((lab, found[lab]) for lab in order), d, tol)
    return InvariantLattice(nodes, tuple(family.names), d, tol, family)


def power_set_reference(family: GroupFamily, tol: float = DEFAULT_TOL) -> InvariantLattice:
    """Literal power-set procedure: every subset, largest first, no closed-set pruning.

    Exponential in the number of groups; meant as an oracle for small families.
    ``C (+) B_M`` is read as a direct sum, so a node is trimmed to the part not
    already in ``C`` (nodes of one level need not be orthogonal for non-commuting
    groups).
    """
    ws = eigenspaces(family, tol)
    d, m = family.dimension, family.m
    found: list[LatticeNode] = []
    span_all = np.zeros((d, 0))

    def covered() -> int:
        return Subspace.span(span_all).dim if span_all.shape[1] else 0

    for level in range(m, 0, -1):
        for M in combinations(range(m), level):
            tilde = intersect([ws[i] for i in M])
            sup = [n.basis.basis for n in found if set(M) < set(n.label)]
            above = Subspace.span(np.hstack(sup)) if sup else Subspace.zero(d)
            b = orth_against(tilde, above)
            if b.dim and span_all.shape[1]:
                # C (+) B_M is a direct sum: drop what C already holds
                overlap = intersect([b, Subspace.span(span_all)])
                if overlap.dim:
                    b = orth_against(b, overlap)
            if b.dim:
                found.append(LatticeNode(M, b))
                span_all = np.hstack([span_all, b.basis])
            if covered() == d:
                return InvariantLattice(found, tuple(family.names), d, tol, family)
    if found:
        rest = orth_against(Subspace.full(d), Subspace.span(span_all))
    else:
        rest = Subspace.full(d)
    if rest.dim:
        found.append(LatticeNode((), rest))
    return InvariantLattice(found, tuple(family.names), d, tol, family)


def same_lattice(a: InvariantLattice, b: InvariantLattice, tol: float = CONTAIN_TOL) -> bool:
    """Same labels in the same order and mutually contained node spans."""
    if a.labels != b.labels:
        return False
    for x, y in zip(a.nodes, b.nodes):
        if x.dim != y.dim:
            return False
        if not (subspace_contains(x.basis, y.basis, tol) and subspace_contains(y.basis, x.basis, tol)):
            return False
    return True


# ---------------------------------------------------------------- verification

@dataclass
class CheckEntry:
    label: tuple[int, ...]
    group: int
    kind: str  # "invariant" or "witness"
    value: float
    ok: bool


@dataclass
class LatticeReport:
    entries: list[CheckEntry]
    covered_dim: int
    ambient_dim: int
    max_gram_error: float
    max_comparable_overlap: float
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return (all(e.ok for e in self.entries) and self.covered_dim == self.ambient_dim
                and self.max_gram_error < 1e-9 and self.max_comparable_overlap < 1e-9)

    def failures(self) -> list[CheckEntry]:
        return [e for e in self.entries if not e.ok]


def verify_lattice(
    lattice: InvariantLattice,
    family: GroupFamily,
    probes: int = 100,
    seed: int = 0,
    inv_tol: float = 1e-8,
    witness_tol: float = 1e-3,
) -> LatticeReport:
    """Per basis vector: invariance to in-label groups, a witness against each other group."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    d = lattice.ambient_dim
    x = rng.standard_normal((probes, d))
    entries: list[CheckEntry] = []
    for node in lattice.nodes:
        w = node.basis.basis
        inside = set(node.label)
        for j, g in enumerate(family.groups):
            # w^T T x - w^T x = x . ((T^T - I) w)
            dev = np.zeros(w.shape[1])
            for t in g.matrices:
                v = t.T @ w - w
                dev = np.maximum(dev, np.max(np.abs(x @ v), axis=0))
            if j in inside:
                val = float(dev.max()) if dev.size else 0.0
                entries.append(CheckEntry(node.label, j, "invariant", val, val < inv_tol))
            else:
                val = float(dev.min()) if dev.size else np.inf
                entries.append(CheckEntry(node.label, j, "witness", val, val > witness_tol))
    gram = max((n.basis.gram_error() for n in lattice.nodes), default=0.0)
    overlap = 0.0
    for a, b in combinations(lattice.nodes, 2):
        la, lb = set(a.label), set(b.label)
        if la < lb or lb < la or not a.label or not b.label:
            overlap = max(overlap, float(np.max(np.abs(a.basis.basis.T @ b.basis.basis))))
    return LatticeReport(entries, lattice.covered_dim, d, gram, overlap, time.perf_counter() - t0)


# ---------------------------------------------------------------- serialization

def lattice_to_dict(lattice: InvariantLattice) -> dict:
    return {
        "version": FORMAT_VERSION,
        "family_names": list(lattice.family_names),
        "ambient_dim": lattice.ambient_dim,
        "tol": lattice.tol,
        "nodes": [
            {"label": list(n.label), "level": n.level, "basis": n.basis.basis.T.tolist()}
            for n in lattice.nodes
        ],
    }


def serialize_lattice(lattice: InvariantLattice) -> bytes:
    # float repr is the shortest string that round-trips exactly
    return json.dumps(lattice_to_dict(lattice), sort_keys=True).encode("utf-8")


def lattice_from_dict(doc: dict, family: GroupFamily | None = None) -> InvariantLattice:
    if not isinstance(doc, dict):
        raise MalformedInput("lattice document must be a JSON object")
    version = doc.get("version")
    if version != FORMAT_VERSION:
        raise MalformedInput(f"unsupported lattice version {version!r} (expected {FORMAT_VERSION})")
    try:
        names = tuple(str(n) for n in doc["family_names"])
        d = int(doc["ambient_dim"])
        tol = float(doc["tol"])
        nodes = []
        for raw in doc["nodes"]:
            label = tuple(int(i) for i in raw["label"])
            if list(label) != sorted(set(label)) or any(i < 0 or i >= len(names) for i in label):
                raise MalformedInput(f"bad node label {raw['label']!r}")
            if int(raw["level"]) != len(label):
                raise MalformedInput(f"level {raw['level']} does not match label {label}")
            rows = np.asarray(raw["basis"], dtype=np.float64)
            if rows.size == 0:
                raise MalformedInput(f"node {label} has an empty basis")
            if rows.ndim != 2 or rows.shape[1] != d:
                raise MalformedInput(f"node {label} basis has shape {rows.shape}, expected (k, {d})")
            nodes.append(LatticeNode(label, Subspace(d, rows.T, tol)))
    except MalformedInput:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedInput(f"malformed lattice document: {exc}") from None
    if len({n.label for n in nodes}) != len(nodes):
        raise MalformedInput("duplicate node labels")
    return InvariantLattice(nodes, names, d, tol, family)


def deserialize_lattice(data: bytes | str, family: GroupFamily | None = None) -> InvariantLattice:
    try:
        doc = json.loads(data)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise MalformedInput(f"lattice stream is not valid JSON: {exc}") from None
    return lattice_from_dict(doc, family)
