"""Synthetic data: economical training samples, extrapolation samples, coupled pairs.

An observed input is ``x = T_I T_D x_hid``. Training data is economical: ``T_I``
is always the identity. Extrapolation data draws ``T_I`` uniformly from the
join of the ``I`` groups. Labels depend on ``x_hid`` and ``T_D`` only.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import CapExceeded, InvalidParams, MalformedInput, NormalityViolation, OutOfVocabulary
from .groups import (FiniteGroup, GroupFamily, builtin_group, image_family, is_normal_subgroup,
                     transposition_family)

MATERIALIZE_CAP = 5000
ROUNDS = 8
VOCAB = 99
SEQ_LEN = 10
DATASET_VERSION = 1


# ---------------------------------------------------------------- transformations

@dataclass
class Draws:
    """A batch of sampled transformations, one per example.

    ``perms[k]`` encodes ``(T x)[i] = x[perms[k, i]]``; ``mats`` is used instead
    for groups that are not permutation groups. ``index`` is set when the draw
    came from a materialized join and points into ``group``.
    """

    perms: np.ndarray | None = None
    mats: np.ndarray | None = None
    index: np.ndarray | None = None
    group: FiniteGroup | None = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.perms) if self.perms is not None else len(self.mats)

    @classmethod
    def identity(cls, n: int, d: int) -> Draws:
        return cls(perms=np.tile(np.arange(d), (n, 1)))

    def apply(self, x: np.ndarray) -> np.ndarray:
        flat = x.reshape(len(x), -1)
        if self.perms is not None:
            out = np.take_along_axis(flat, self.perms, axis=1)
        else:
            out = np.einsum("nij,nj->ni", self.mats, flat)
        return out.reshape(x.shape)

    def then(self, other: Draws) -> Draws:
        """Apply ``self`` first and ``other`` second."""
        if self.perms is not None and other.perms is not None:
            return Draws(perms=np.take_along_axis(self.perms, other.perms, axis=1))
        return Draws(mats=np.einsum("nij,njk->nik", other.as_mats(), self.as_mats()))

    def as_mats(self) -> np.ndarray:
        if self.mats is not None:
            return self.mats
        n, d = self.perms.shape
        m = np.zeros((n, d, d))
        m[np.arange(n)[:, None], np.arange(d)[None, :], self.perms] = 1.0
        return m


class JoinSampler:
    """Uniform draws from the join of a subset of family groups."""

    def __init__(self, family: GroupFamily, indices: Sequence[int], cap: int = MATERIALIZE_CAP,
                 rounds: int = ROUNDS):
        self.family = family
        self.indices = tuple(sorted(indices))
        self.rounds = rounds
        self.group: FiniteGroup | None = None
        if not self.indices:
            self.group = family.join(())
        else:
            try:
                self.group = family.join(self.indices, cap=cap)
            except CapExceeded:
                self.group = None
        self.members = [family.groups[i] for i in self.indices]

    @property
    def materialized(self) -> bool:
        return self.group is not None

    def _table(self, g: FiniteGroup):
        if g.is_permutation_group:
            return np.stack([e.perm for e in g.elements]), None
        return None, g.matrices

    def draw(self, rng: np.random.Generator, n: int) -> Draws:
        d = self.family.dimension
        if self.group is not None:
            idx = rng.integers(0, self.group.order, size=n)
            perms, mats = self._table(self.group)
            if perms is not None:
                return Draws(perms=perms[idx], index=idx, group=self.group)
            return Draws(mats=mats[idx], index=idx, group=self.group)
        # composed rounds: every round visits each member group once, in a fresh random order
        tables = [self._table(g) for g in self.members]
        if any(p is None for p, _ in tables):
            raise InvalidParams("composed sampling needs permutation groups")
        orders = np.array([g.order for g in self.members])
        width = orders.max()
        padded = np.zeros((len(tables), width, d), dtype=np.int64)
        for k, (p, _) in enumerate(tables):
            padded[k, : len(p)] = p
        out = Draws.identity(n, d)
        k = len(self.members)
        for _ in range(self.rounds):
            order = np.argsort(rng.random((n, k)), axis=1)
            for slot in range(k):
                gi = order[:, slot]
                ei = np.floor(rng.random(n) * orders[gi]).astype(np.int64)
                out = out.then(Draws(perms=padded[gi, ei]))
        return out


def uniform_join_draw(family: GroupFamily, indices: Sequence[int], rng: np.random.Generator,
                      n: int = 1, cap: int = MATERIALIZE_CAP, rounds: int = ROUNDS) -> Draws:
    return JoinSampler(family, indices, cap, rounds).draw(rng, n)


# ---------------------------------------------------------------- SCM

@dataclass(eq=False)
class SCMSpec:
    family: GroupFamily
    I: tuple[int, ...]
    D: tuple[int, ...]
    hidden_sampler: Callable  # (rng, n) -> (x_hid, meta)
    label_fn: Callable  # (x_hid, td, meta) -> labels
    n_classes: int
    name: str = "scm"
    economical: bool = True
    cap: int = MATERIALIZE_CAP
    rounds: int = ROUNDS
    params: dict = field(default_factory=dict)
    check_normality: bool = True

    def __post_init__(self):
        self.I = tuple(sorted(set(self.I)))
        self.D = tuple(sorted(set(self.D)))
        if set(self.I) & set(self.D):
            raise InvalidParams("I and D must be disjoint")
        if any(i < 0 or i >= self.family.m for i in self.I + self.D):
            raise InvalidParams("group index out of range")
        self._samplers: dict[str, JoinSampler] = {}

    def sampler(self, which: str) -> JoinSampler:
        if which not in self._samplers:
            self._samplers[which] = JoinSampler(self.family, getattr(self, which), self.cap, self.rounds)
        return self._samplers[which]

    def describe(self) -> dict:
        return {"name": self.name, "family": list(self.family.names), "dimension": self.family.dimension,
                "I": list(self.I), "D": list(self.D), "n_classes": self.n_classes,
                "cap": self.cap, "rounds": self.rounds, "params": self.params}

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.describe(), sort_keys=True).encode()).hexdigest()

    def verify_normality(self) -> str:
        """How the normal-subgroup precondition was established; raises if it fails."""
        if not self.I or not self.D:
            return "trivial"
        full = JoinSampler(self.family, self.I + self.D, self.cap, self.rounds)
        inner = self.sampler("I")
        if full.group is None or inner.group is None:
            raise NormalityViolation("join too large to check normality; pass check_normality=False to override")
        if not is_normal_subgroup(inner.group, full.group):
            raise NormalityViolation(
                f"<I> is not normal in <I u D> for I={self.family_names(self.I)}, D={self.family_names(self.D)}")
        return "checked"

    def family_names(self, idx) -> list[str]:
        return [self.family.names[i] for i in idx]


@dataclass
class LabeledDataset:
    inputs: np.ndarray
    labels: np.ndarray
    split: str
    seed: int
    spec_hash: str
    n_classes: int
    hidden: np.ndarray | None = None
    td: Draws | None = None
    meta: np.ndarray | None = None

    def __post_init__(self):
        if len(self.inputs) == 0:
            raise InvalidParams("dataset is empty")
        if len(self.inputs) != len(self.labels):
            raise InvalidParams("inputs and labels differ in length")
        if self.labels.min() < 0 or self.labels.max() >= self.n_classes:
            raise InvalidParams("label outside the declared class range")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx, split: str | None = None) -> LabeledDataset:
        td = None
        if self.td is not None:
            td = Draws(perms=None if self.td.perms is None else self.td.perms[idx],
                       mats=None if self.td.mats is None else self.td.mats[idx],
                       index=None if self.td.index is None else self.td.index[idx], group=self.td.group)
        return LabeledDataset(self.inputs[idx], self.labels[idx], split or self.split, self.seed, self.spec_hash,
                              self.n_classes, None if self.hidden is None else self.hidden[idx], td,
                              None if self.meta is None else self.meta[idx])


def _prepare(spec: SCMSpec, normality: bool):
    if normality and spec.check_normality:
        spec.verify_normality()


def sample_training(spec: SCMSpec, n_examples: int, seed: int, check_normality: bool = True) -> LabeledDataset:
    if not spec.economical:
        raise InvalidParams("training samples are economical by definition here")
    _prepare(spec, check_normality)
    rng = np.random.default_rng(seed)
    x_hid, meta = spec.hidden_sampler(rng, n_examples)
    td = spec.sampler("D").draw(rng, n_examples)
    x = td.apply(x_hid)
    y = spec.label_fn(x_hid, td, meta)
    return LabeledDataset(x, y, "train", seed, spec.hash(), spec.n_classes, x_hid, td, meta)


def sample_extrapolation(spec: SCMSpec, n_examples: int, seed: int, check_normality: bool = True) -> LabeledDataset:
    _prepare(spec, check_normality)
    rng = np.random.default_rng(seed)
    x_hid, meta = spec.hidden_sampler(rng, n_examples)
    td = spec.sampler("D").draw(rng, n_examples)
    ti = spec.sampler("I").draw(rng, n_examples)
    x = ti.apply(td.apply(x_hid))
    y = spec.label_fn(x_hid, td, meta)
    return LabeledDataset(x, y, "extrapolation", seed, spec.hash(), spec.n_classes, x_hid, td, meta)


@dataclass
class CoupledPair:
    x_factual: np.ndarray
    x_counterfactual: np.ndarray
    label: int
    label_factual: int
    label_counterfactual: int


def couple_batch(spec: SCMSpec, n: int, seed: int) -> list[CoupledPair]:
    """Shared hidden draw and ``T_D``; identity ``T_I`` versus an independent uniform one."""
    rng = np.random.default_rng(seed)
    x_hid, meta = spec.hidden_sampler(rng, n)
    td = spec.sampler("D").draw(rng, n)
    ti = spec.sampler("I").draw(rng, n)
    base = td.apply(x_hid)
    cf = ti.apply(base)
    # each view recovers (x_hid, T_D) on its own and labels it
    y_f = spec.label_fn(x_hid, td, meta)
    y_c = spec.label_fn(x_hid.copy(), td, None if meta is None else meta.copy())
    return [CoupledPair(base[k], cf[k], int(y_f[k]), int(y_f[k]), int(y_c[k])) for k in range(n)]


def couple(spec: SCMSpec, seed: int) -> CoupledPair:
    return couple_batch(spec, 1, seed)[0]


def reconstruct(dataset: LabeledDataset, family: GroupFamily | None = None) -> np.ndarray:
    """Recompute inputs from the stored hidden draws and ``T_D`` descriptors."""
    if dataset.hidden is None or dataset.td is None:
        raise InvalidParams("dataset carries no hidden draws or descriptors")
    td = dataset.td
    if td.perms is None and td.mats is None and td.index is not None:
        if td.group is None:
            raise InvalidParams("index descriptors need the materialized group")
        td = Draws(perms=np.stack([td.group.elements[i].perm for i in td.index]))
    return td.apply(dataset.hidden)


# ---------------------------------------------------------------- sequence tasks

TASK_NAMES = {1: "sum", 2: "sum_tail", 3: "alternating", 4: "leading_run"}


def _target_values(task_id: int, x: np.ndarray) -> np.ndarray:
    x = np.atleast_2d(x).astype(np.int64)
    if task_id == 1:
        return x.sum(axis=1)
    if task_id == 2:
        return x[:, 1:].sum(axis=1)
    if task_id == 3:
        return (x[:, 1::2] - x[:, 0::2]).sum(axis=1)
    if task_id == 4:
        return np.cumprod(x >= 20, axis=1).sum(axis=1)
    raise InvalidParams(f"unknown task {task_id}")


def target_range(task_id: int, n: int = SEQ_LEN, vocab: int = VOCAB) -> tuple[int, int]:
    if task_id == 1:
        return n, n * vocab
    if task_id == 2:
        return n - 1, (n - 1) * vocab
    if task_id == 3:
        half = n // 2
        return -half * (vocab - 1), half * (vocab - 1)
    if task_id == 4:
        return 0, n
    raise InvalidParams(f"unknown task {task_id}")


def seq_target(task_id: int, sequence: Sequence[int], vocab: int = VOCAB) -> int:
    x = np.asarray(sequence)
    if x.ndim != 1 or x.size == 0:
        raise InvalidParams("sequence must be a non-empty 1-d array")
    if np.any(x != np.round(x)) or x.min() < 1 or x.max() > vocab:
        raise OutOfVocabulary(f"values must be integers in 1..{vocab}")
    if task_id == 3 and x.size % 2:
        raise InvalidParams("task 3 pairs neighbours and needs an even length")
    return int(_target_values(task_id, x)[0])


def seq_invariant_pairs(task_id: int, n: int = SEQ_LEN) -> list[tuple[int, int]]:
    pairs = [(i, j) for i in range(1, n + 1) for j in range(i + 1, n + 1)]
    if task_id == 1:
        return pairs
    if task_id == 2:
        return [(i, j) for i, j in pairs if i >= 2]
    if task_id == 3:
        return [(i, j) for i, j in pairs if (j - i) % 2 == 0]
    if task_id == 4:
        return []
    raise InvalidParams(f"unknown task {task_id}")


def sequence_scm(task_id: int, n: int = SEQ_LEN, vocab: int = VOCAB, **kw) -> SCMSpec:
    if task_id == 3 and n % 2:
        raise InvalidParams("task 3 needs an even length")
    family = transposition_family(n)
    inv = [f"({i},{j})" for i, j in seq_invariant_pairs(task_id, n)]
    I = family.indices(inv)
    D = tuple(range(family.m)) if task_id == 4 else ()
    lo, hi = target_range(task_id, n, vocab)

    def hidden(rng, k):
        return np.sort(rng.integers(1, vocab + 1, size=(k, n)), axis=1), None

    def label(x_hid, td, meta):
        return _target_values(task_id, td.apply(x_hid)) - lo

    return SCMSpec(family, I, D, hidden, label, hi - lo + 1, name=f"seq-task{task_id}",
                   params={"task": task_id, "n": n, "vocab": vocab}, **kw)


# ---------------------------------------------------------------- glyphs

_GLYPHS = (
    ["1111111",
     "1000000",
     "1000000",
     "1111100",
     "1000000",
     "1000000",
     "1000000"],
    ["1111100",
     "1000010",
     "1000010",
     "1111100",
     "1000000",
     "1000000",
     "1000000"],
)
GLYPH_SIZE = 9
IMAGE_GROUPS = ("rot", "color", "vflip")
IMAGE_ALIASES = {"rot": "rot90", "color": "color_perm"}


def _dihedral(img: np.ndarray) -> list[np.ndarray]:
    out = []
    for flip in (False, True):
        base = img[::-1] if flip else img
        out += [np.rot90(base, k) for k in range(4)]
    return out


def glyph_bitmaps(size: int = GLYPH_SIZE) -> np.ndarray:
    """The two glyph masks; construction fails if any pose coincides with another."""
    pad = (size - 7) // 2
    out = np.zeros((len(_GLYPHS), size, size))
    for k, rows in enumerate(_GLYPHS):
        out[k, pad:pad + 7, pad:pad + 7] = np.array([[int(c) for c in r] for r in rows])
    poses = [p.tobytes() for g in out for p in _dihedral(g)]
    if len(set(poses)) != len(poses):
        raise InvalidParams("glyph bitmaps have a dihedral symmetry or collide")
    return out


def glyph_family(size: int = GLYPH_SIZE, channels: int = 3) -> GroupFamily:
    return image_family((channels, size, size), IMAGE_GROUPS, IMAGE_ALIASES)


def glyph_scm(I: Sequence[str], size: int = GLYPH_SIZE, channels: int = 3, **kw) -> SCMSpec:
    bad = set(I) - set(IMAGE_GROUPS)
    if bad:
        raise InvalidParams(f"unknown image groups {sorted(bad)}")
    family = glyph_family(size, channels)
    I_idx = family.indices(I)
    D_idx = tuple(i for i in range(family.m) if i not in I_idx)
    masks = glyph_bitmaps(size)
    spec = SCMSpec(family, I_idx, D_idx, None, None, 1, name="glyph",
                   params={"I": sorted(I), "size": size, "channels": channels}, **kw)
    sampler = spec.sampler("D")
    if not sampler.materialized:
        raise InvalidParams("glyph labels need a materialized G_D")
    n_pose = sampler.group.order

    def hidden(rng, k):
        cls = rng.integers(0, len(masks), size=k)
        scale = rng.uniform(0.6, 1.0, size=(k, 1, 1))
        jitter = rng.uniform(0.8, 1.0, size=(k, size, size))
        img = np.zeros((k, channels, size, size))
        img[:, 0] = masks[cls] * scale * jitter  # canonical glyphs live in the first channel
        return img.reshape(k, -1), cls

    def label(x_hid, td, meta):
        pose = td.index if td.index is not None else np.zeros(len(meta), dtype=np.int64)
        return meta * n_pose + pose

    spec.hidden_sampler, spec.label_fn = hidden, label
    spec.n_classes = len(masks) * n_pose
    return spec


def make_glyph_dataset(I: Sequence[str], n_train: int = 4000, n_test: int = 1000, val_frac: float = 0.2,
                       seed: int = 0, **kw):
    spec = glyph_scm(I, **kw)
    return spec, split_train_val(sample_training(spec, n_train, seed), val_frac, seed), \
        sample_extrapolation(spec, n_test, seed + 1)


def make_sequence_dataset(task_id: int, n_train: int = 8000, n_test: int = 2000, val_frac: float = 0.2,
                          seed: int = 0, **kw):
    spec = sequence_scm(task_id, **kw)
    return spec, split_train_val(sample_training(spec, n_train, seed), val_frac, seed), \
        sample_extrapolation(spec, n_test, seed + 1)


def split_train_val(ds: LabeledDataset, val_frac: float, seed: int):
    if not 0 < val_frac < 1:
        raise InvalidParams("val_frac must be in (0, 1)")
    idx = np.random.default_rng(seed + 7919).permutation(len(ds))
    n_val = int(round(val_frac * len(ds)))
    return ds.subset(idx[n_val:], "train"), ds.subset(idx[:n_val], "val")


# ---------------------------------------------------------------- rod demonstration

@dataclass
class RodReport:
    n: int
    side: int
    upright_values: list[float]
    flat_value: float
    translation_invariant: bool
    separates_labels: bool
    witness_k: int | None
    witness_values: tuple[float, float] | None

    @property
    def passed(self) -> bool:
        return self.translation_invariant and self.separates_labels and self.witness_k is not None

    def describe(self) -> str:
        lines = [f"rod images of side {self.side}, representation = sum of the middle row",
                 f"(a) upright rods at every training translation give {self.upright_values}: "
                 + ("invariant" if self.translation_invariant else "NOT invariant"),
                 f"(b) upright {self.upright_values[0]:g} vs flat {self.flat_value:g}: "
                 + ("labels separated" if self.separates_labels else "labels NOT separated")]
        if self.witness_k is None:
            lines.append("(c) no counterfactual witness found")
        else:
            a, b = self.witness_values
            lines.append(f"(c) shifting by k={self.witness_k} changes the representation: {a:g} -> {b:g}")
        return "\n".join(lines)


def rod_demo(n: int = 2) -> RodReport:
    """Upright rod, middle-row sum as the representation."""
    side = 2 * n + 1
    if side < 5:
        raise InvalidParams("grid side 2n+1 must be at least 5")
    rod = np.zeros((side, side))
    rod[:, n] = 1.0

    def gamma(img):
        return float(img[n].sum())

    def shift(img, k):
        return np.roll(img, k, axis=1)

    upright = [gamma(shift(rod, k)) for k in range(side)]
    flat = gamma(np.rot90(rod))
    invariant = all(v == upright[0] for v in upright)
    separates = flat != upright[0]
    witness = None
    for k in [n] + [k for k in range(1, side) if k != n]:
        a, b = gamma(np.rot90(rod)), gamma(np.rot90(shift(rod, k)))
        if a != b:
            witness = (k, (a, b))
            break
    return RodReport(n, side, upright, flat, invariant, separates,
                     witness[0] if witness else None, witness[1] if witness else None)


# ---------------------------------------------------------------- dataset files

def dataset_to_dict(ds: LabeledDataset) -> dict:
    doc = {"version": DATASET_VERSION, "split": ds.split, "seed": ds.seed, "spec_hash": ds.spec_hash,
           "n_classes": ds.n_classes, "shape": list(ds.inputs.shape[1:]),
           "inputs": ds.inputs.reshape(len(ds), -1).tolist(), "labels": ds.labels.astype(int).tolist()}
    if ds.hidden is not None:
        doc["hidden"] = ds.hidden.reshape(len(ds), -1).tolist()
    if ds.meta is not None:
        doc["meta"] = ds.meta.astype(int).tolist()
    if ds.td is not None:
        if ds.td.index is not None:
            doc["td_index"] = ds.td.index.astype(int).tolist()
        elif ds.td.perms is not None:
            doc["td_perm"] = ds.td.perms.astype(int).tolist()
    return doc


def serialize_dataset(ds: LabeledDataset) -> bytes:
    return json.dumps(dataset_to_dict(ds), sort_keys=True).encode("utf-8")


def deserialize_dataset(data: bytes | str, group: FiniteGroup | None = None) -> LabeledDataset:
    try:
        doc = json.loads(data)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise MalformedInput(f"dataset is not valid JSON: {exc}") from None
    if not isinstance(doc, dict) or doc.get("version") != DATASET_VERSION:
        raise MalformedInput(f"unsupported dataset version {doc.get('version') if isinstance(doc, dict) else None!r}")
    try:
        shape = tuple(doc["shape"])
        x = np.asarray(doc["inputs"], dtype=np.float64).reshape((-1, *shape))
        y = np.asarray(doc["labels"], dtype=np.int64)
        hidden = np.asarray(doc["hidden"], dtype=np.float64).reshape(x.shape) if "hidden" in doc else None
        meta = np.asarray(doc["meta"], dtype=np.int64) if "meta" in doc else None
        td = None
        if "td_index" in doc:
            idx = np.asarray(doc["td_index"], dtype=np.int64)
            perms = None
            if group is not None:
                perms = np.stack([group.elements[i].perm for i in idx])
            td = Draws(perms=perms, index=idx, group=group)
        elif "td_perm" in doc:
            td = Draws(perms=np.asarray(doc["td_perm"], dtype=np.int64))
        return LabeledDataset(x, y, doc["split"], int(doc["seed"]), doc["spec_hash"], int(doc["n_classes"]),
                              hidden, td, meta)
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedInput(f"malformed dataset document: {exc}") from None
