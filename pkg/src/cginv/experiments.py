"""Assemble datasets, lattices and networks from a validated config."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache, partial
from typing import Callable

from .errors import ConfigError
from .groups import image_family, transposition_family
from .lattice import InvariantLattice, build_lattice
from .nn import GlyphNet, SequenceNet
from .tasks import LabeledDataset, SCMSpec, make_glyph_dataset, make_sequence_dataset
from .training import SweepResult, accuracy, select_lambda, sweep_lambda, train

GLYPH_PATCH_GROUPS = ("rot90", "color_perm", "vflip")
GLYPH_DEEP_GROUPS = ("rot90", "vflip")


@lru_cache(maxsize=8)
def sequence_lattice(n: int = 10, width: int = 16) -> InvariantLattice:
    return build_lattice(transposition_family(n, width))


@lru_cache(maxsize=8)
def glyph_lattices(channels: int = 16, kernel: int = 3) -> tuple[InvariantLattice, InvariantLattice]:
    first = build_lattice(image_family((3, kernel, kernel), names=GLYPH_PATCH_GROUPS))
    # deeper layers mix learned channels, so the color group is dropped there
    second = build_lattice(image_family((channels, kernel, kernel), names=GLYPH_DEEP_GROUPS))
    return first, second


def lattice_from_config(cfg: dict) -> InvariantLattice:
    fam = cfg["family"]
    if fam["kind"] == "transpositions":
        return build_lattice(transposition_family(int(fam["n"]), int(fam.get("width", 1))))
    return build_lattice(image_family(tuple(fam["shape"]), names=tuple(fam["groups"])))


def _sequence_net(lattice, n_classes, net_cfg):
    return SequenceNet(lattice, n_classes, embed=tuple(net_cfg["embed"]), hidden=net_cfg["hidden"],
                       head_hidden=net_cfg.get("head_hidden", 0), activation=net_cfg["activation"],
                       encoding=net_cfg.get("encoding", "onehot"))


def _glyph_net(lattices, n_classes, net_cfg):
    return GlyphNet(list(lattices), n_classes, channels=net_cfg["channels"], activation=net_cfg["activation"])


@dataclass
class Setup:
    spec: SCMSpec
    train: LabeledDataset
    val: LabeledDataset
    test: LabeledDataset
    factory: Callable
    lattices: tuple


def setup(cfg: dict, data_seed: int = 0) -> Setup:
    data, net_cfg = cfg["data"], cfg["network"]
    if cfg["experiment"] == "sequence":
        spec, (tr, va), te = make_sequence_dataset(cfg["task"], data["n_train"], data["n_test"],
                                                   data["val_frac"], seed=data_seed)
        width = net_cfg["embed"][-1]
        lat = sequence_lattice(10, width)
        return Setup(spec, tr, va, te, partial(_sequence_net, lat, spec.n_classes, net_cfg), (lat,))
    if cfg["experiment"] == "glyph":
        spec, (tr, va), te = make_glyph_dataset(cfg["I"], data["n_train"], data["n_test"], data["val_frac"],
                                                seed=data_seed)
        lats = glyph_lattices(net_cfg["channels"])
        return Setup(spec, tr, va, te, partial(_glyph_net, lats, spec.n_classes, net_cfg), lats)
    raise ConfigError(f"experiment {cfg['experiment']!r} has no training setup")


def run_train(s: Setup, config):
    fit = train(s.factory, s.train, s.val, config)
    return fit, accuracy(fit.net, s.test)


def run_sweep(s: Setup, grid, config, jobs: int = 1) -> tuple[SweepResult, float]:
    sweep = sweep_lambda(s.factory, s.train, s.val, s.test, grid, config, jobs)
    return sweep, select_lambda(sweep)
