"""Lattice-parameterized layers, the invariance penalty and the two network assemblies."""
from __future__ import annotations

import hashlib
import json
from typing import Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .errors import MalformedInput, ShapeMismatch
from .lattice import InvariantLattice, serialize_lattice

USED_EPS = 1e-12
ACTIVATIONS = {"relu": torch.relu, "tanh": torch.tanh, "identity": lambda x: x}
_ACT_MODULES = {"relu": nn.ReLU, "tanh": nn.Tanh, "identity": nn.Identity}


def _activation(name: str):
    try:
        return ACTIVATIONS[name]
    except KeyError:
        raise ShapeMismatch(f"unknown activation {name!r}") from None


def lattice_hash(lattice: InvariantLattice) -> str:
    return hashlib.sha256(serialize_lattice(lattice)).hexdigest()


def assemble_weights(basis: torch.Tensor | np.ndarray, omega: torch.Tensor | np.ndarray):
    """Column ``h`` is ``sum_i B_{M_i} omega_{M_i,h}``, i.e. ``B @ Omega``."""
    if basis.shape[1] != omega.shape[0]:
        raise ShapeMismatch(f"basis has {basis.shape[1]} columns, coefficients have {omega.shape[0]} rows")
    return basis @ omega


# ---------------------------------------------------------------- penalties

def penalty_exact(norms: Sequence[float], levels: Sequence[int], eps: float = USED_EPS) -> float:
    """Least used level ``l``: count of nodes above ``l`` plus used nodes at ``l``."""
    norms = np.asarray(norms, dtype=np.float64)
    levels = np.asarray(levels)
    if norms.shape != levels.shape:
        raise ShapeMismatch("one norm per lattice node required")
    used = norms > eps
    if not used.any():
        return 0.0
    low = levels[used].min()
    return float(np.sum(levels > low) + np.sum(used & (levels == low)))


def soft_indicator(z, tau: float):
    return tau * z / (tau * z + 1.0)


def penalty_smooth(norms: torch.Tensor, levels: Sequence[int], tau: float = 10.0) -> torch.Tensor:
    """Differentiable surrogate; ``norms`` holds per-node squared block norms."""
    if tau < 1:
        raise ShapeMismatch(f"temperature must be >= 1, got {tau}")
    levels = np.asarray(levels)
    if norms.shape[0] != levels.shape[0]:
        raise ShapeMismatch("one norm per lattice node required")
    soft = soft_indicator(norms, tau)
    r = norms.new_zeros(())
    # most invariant level first, so the last used level visited (the lowest) sets the value
    for lvl in sorted(set(levels.tolist()), reverse=True):
        at = torch.as_tensor(levels == lvl)
        f = float(np.sum(levels > lvl)) + soft[at].sum()
        beta = soft_indicator(norms[at].sum(), tau)
        r = (1 - beta) * r + f * beta
    return r


# ---------------------------------------------------------------- layers

class _LatticeCoefficients(nn.Module):
    """Holds ``B`` as a buffer and the coefficient matrix ``Omega`` as one parameter."""

    def __init__(self, lattice: InvariantLattice, out_features: int, init_scale: float | None = None):
        super().__init__()
        if out_features < 1:
            raise ShapeMismatch("need at least one output unit")
        if lattice.covered_dim != lattice.ambient_dim:
            raise ShapeMismatch("lattice does not cover its ambient space")
        self.lattice = lattice
        self.register_buffer("basis", torch.as_tensor(lattice.basis_matrix(), dtype=torch.get_default_dtype()))
        d = lattice.ambient_dim
        self.omega = nn.Parameter(torch.empty(d, out_features))
        self.bias = nn.Parameter(torch.empty(out_features))
        self.levels = np.array(lattice.levels)
        self.slices = lattice.block_slices()
        bound = init_scale if init_scale is not None else 1.0 / np.sqrt(d)
        nn.init.uniform_(self.omega, -bound, bound)
        nn.init.uniform_(self.bias, -bound, bound)

    def weight(self) -> torch.Tensor:
        return assemble_weights(self.basis, self.omega)

    def node_norms(self) -> torch.Tensor:
        return torch.stack([self.omega[s].pow(2).sum() for s in self.slices])

    def block(self, i: int) -> torch.Tensor:
        return self.omega[self.slices[i]]

    def penalty_smooth(self, tau: float, relative: bool = False) -> torch.Tensor:
        z = self.node_norms()
        if relative:
            # each block's share of the layer's mass; shrinking all of Omega no longer lowers R
            z = z / z.sum().clamp_min(1e-30)
        return penalty_smooth(z, self.levels, tau)

    def penalty_exact(self) -> float:
        return penalty_exact(self.node_norms().detach().cpu().numpy(), self.levels)

    def restrict(self, labels) -> None:
        """Zero every coefficient block whose node label is not in ``labels``."""
        keep = {tuple(sorted(l)) for l in labels}
        with torch.no_grad():
            for node, s in zip(self.lattice.nodes, self.slices):
                if node.label not in keep:
                    self.omega[s] = 0.0


class CGDenseLayer(_LatticeCoefficients):
    def __init__(self, lattice: InvariantLattice, out_features: int, activation: str = "relu",
                 init_scale: float | None = None):
        super().__init__(lattice, out_features, init_scale)
        self.activation = activation
        self._act = _activation(activation)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.basis.shape[0]:
            raise ShapeMismatch(f"expected {self.basis.shape[0]} input features, got {x.shape[-1]}")
        return self._act(x @ self.weight() + self.bias)


class CGConvLayer(_LatticeCoefficients):
    """Cross-correlation whose filters are lattice combinations over ``c*k*k`` patches."""

    def __init__(self, patch_lattice: InvariantLattice, in_channels: int, out_channels: int,
                 kernel_size: int = 3, stride: int = 1, padding: int = 0, init_scale: float | None = None):
        if patch_lattice.ambient_dim != in_channels * kernel_size * kernel_size:
            raise ShapeMismatch(
                f"patch lattice has dimension {patch_lattice.ambient_dim}, "
                f"expected {in_channels}*{kernel_size}*{kernel_size}")
        if stride < 1 or padding < 0:
            raise ShapeMismatch("stride must be >= 1 and padding >= 0")
        super().__init__(patch_lattice, out_channels,
                         init_scale if init_scale is not None else 1.0 / np.sqrt(patch_lattice.ambient_dim))
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel_size, self.stride, self.padding = kernel_size, stride, padding

    def filters(self) -> torch.Tensor:
        k = self.kernel_size
        return self.weight().T.reshape(self.out_channels, self.in_channels, k, k)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeMismatch(f"expected (batch, {self.in_channels}, h, w), got {tuple(x.shape)}")
        size = min(x.shape[-2:]) + 2 * self.padding
        if size < self.kernel_size:
            raise ShapeMismatch(f"map too small for a {self.kernel_size}x{self.kernel_size} filter")
        return F.conv2d(x, self.filters(), self.bias, stride=self.stride, padding=self.padding)


def global_sum_pool(x: torch.Tensor) -> torch.Tensor:
    return x.sum(dim=(-2, -1))


# ---------------------------------------------------------------- networks

class _CGNet(nn.Module):
    def cg_layers(self) -> list[_LatticeCoefficients]:
        return [m for m in self.modules() if isinstance(m, _LatticeCoefficients)]

    def penalty_smooth(self, tau: float = 10.0, relative: bool = False) -> torch.Tensor:
        # summed when more than one layer carries lattice coefficients
        return sum(layer.penalty_smooth(tau, relative) for layer in self.cg_layers())

    def penalty_exact(self) -> float:
        return float(sum(layer.penalty_exact() for layer in self.cg_layers()))

    def used_summary(self) -> list[dict]:
        out = []
        for k, layer in enumerate(self.cg_layers()):
            norms = layer.node_norms().detach().cpu().numpy()
            for node, v in zip(layer.lattice.nodes, norms):
                out.append({"layer": k, "label": list(layer.lattice.label_names(node.label)),
                            "level": node.level, "dim": node.dim, "sq_norm": float(v)})
        return out

    def spec(self) -> dict:
        raise NotImplementedError


class SequenceNet(_CGNet):
    """Shared per-token embedding, one CG dense layer over the flattened sequence, dense head."""

    def __init__(self, lattice: InvariantLattice, n_classes: int, n: int = 10, vocab: int = 99,
                 embed: Sequence[int] = (32, 16), hidden: int = 64, head_hidden: int | Sequence[int] = (),
                 activation: str = "relu", encoding: str = "onehot"):
        super().__init__()
        if encoding not in ("onehot", "scalar", "both"):
            raise ShapeMismatch(f"unknown encoding {encoding!r}")
        self.encoding = encoding
        if lattice.ambient_dim != n * embed[-1]:
            raise ShapeMismatch(f"lattice dimension {lattice.ambient_dim} != n*embed = {n * embed[-1]}")
        self.n, self.vocab, self.n_classes = n, vocab, n_classes
        if isinstance(head_hidden, int):
            head_hidden = (head_hidden,) if head_hidden else ()
        self.embed_sizes, self.hidden, self.head_hidden = tuple(embed), hidden, tuple(head_hidden)
        self.activation = activation
        self._act = _activation(activation)
        width = {"onehot": vocab, "scalar": 1, "both": vocab + 1}[encoding]
        dims = [width, *embed]
        self.phi = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))
        self.cg = CGDenseLayer(lattice, hidden, activation)
        widths = [hidden, *self.head_hidden, n_classes]
        layers: list[nn.Module] = []
        for a, b in zip(widths[:-1], widths[1:]):
            layers += [nn.Linear(a, b), _ACT_MODULES[activation]()]
        self.head = nn.Sequential(*layers[:-1])

    def encode(self, tokens: torch.Tensor) -> torch.Tensor:
        """Integer tokens in ``1..vocab`` of shape (batch, n) to the flattened embedding."""
        if tokens.ndim != 2 or tokens.shape[1] != self.n:
            raise ShapeMismatch(f"expected (batch, {self.n}) tokens, got {tuple(tokens.shape)}")
        dtype = self.cg.basis.dtype
        parts = []
        if self.encoding != "scalar":
            parts.append(F.one_hot(tokens.long() - 1, self.vocab).to(dtype))
        if self.encoding != "onehot":
            parts.append((tokens.to(dtype) / self.vocab).unsqueeze(-1))
        h = torch.cat(parts, dim=-1)
        for layer in self.phi:
            h = self._act(layer(h))
        return h.reshape(h.shape[0], -1)

    def representation(self, tokens: torch.Tensor) -> torch.Tensor:
        return self.cg(self.encode(tokens))

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        return self.head(self.representation(tokens))

    def spec(self) -> dict:
        return {"kind": "sequence", "n": self.n, "vocab": self.vocab, "n_classes": self.n_classes,
                "embed": list(self.embed_sizes), "hidden": self.hidden, "head_hidden": list(self.head_hidden),
                "activation": self.activation, "encoding": self.encoding}


class GlyphNet(_CGNet):
    """Two CG conv layers, max-pool, global sum-pool, dense head."""

    def __init__(self, lattices: Sequence[InvariantLattice], n_classes: int, in_channels: int = 3,
                 channels: int = 16, kernel_size: int = 3, pool_stride: int = 1, activation: str = "relu"):
        super().__init__()
        if len(lattices) != 2:
            raise ShapeMismatch("GlyphNet needs one patch lattice per conv layer")
        pad = kernel_size // 2
        self.conv1 = CGConvLayer(lattices[0], in_channels, channels, kernel_size, padding=pad)
        self.conv2 = CGConvLayer(lattices[1], channels, channels, kernel_size, padding=pad)
        self.head = nn.Linear(channels, n_classes)
        self.n_classes, self.in_channels, self.channels = n_classes, in_channels, channels
        self.kernel_size, self.pool_stride, self.activation = kernel_size, pool_stride, activation
        self._act = _activation(activation)

    def representation(self, x: torch.Tensor) -> torch.Tensor:
        h = self._act(self.conv1(x))
        # stride 1 keeps the pooling windows mirror-symmetric on odd maps
        h = F.max_pool2d(h, 2, stride=self.pool_stride)
        h = self._act(self.conv2(h))
        return global_sum_pool(h)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.representation(x))

    def spec(self) -> dict:
        return {"kind": "glyph", "n_classes": self.n_classes, "in_channels": self.in_channels,
                "channels": self.channels, "kernel_size": self.kernel_size,
                "pool_stride": self.pool_stride, "activation": self.activation}


# ---------------------------------------------------------------- checkpoints

CHECKPOINT_VERSION = 1


def checkpoint_dict(net: _CGNet, penalty: dict | None = None) -> dict:
    return {
        "version": CHECKPOINT_VERSION,
        "network": net.spec(),
        "lattices": [lattice_hash(layer.lattice) for layer in net.cg_layers()],
        "parameters": {k: v.detach().cpu().double().numpy().tolist() for k, v in net.state_dict().items()
                       if k.split(".")[-1] != "basis"},
        "penalty": penalty or {"mode": "smooth", "tau": 10.0},
    }


def save_checkpoint(net: _CGNet, penalty: dict | None = None) -> bytes:
    return json.dumps(checkpoint_dict(net, penalty), sort_keys=True).encode("utf-8")


def load_checkpoint(data: bytes | str, lattices: Sequence[InvariantLattice]) -> _CGNet:
    try:
        doc = json.loads(data)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise MalformedInput(f"checkpoint is not valid JSON: {exc}") from None
    if doc.get("version") != CHECKPOINT_VERSION:
        raise MalformedInput(f"unsupported checkpoint version {doc.get('version')!r}")
    if [lattice_hash(l) for l in lattices] != doc["lattices"]:
        raise MalformedInput("lattice hashes do not match the checkpoint")
    spec = dict(doc["network"])
    kind = spec.pop("kind")
    if kind == "sequence":
        net = SequenceNet(lattices[0], **spec)
    elif kind == "glyph":
        net = GlyphNet(lattices, **spec)
    else:
        raise MalformedInput(f"unknown network kind {kind!r}")
    state = net.state_dict()
    for k, v in doc["parameters"].items():
        if k not in state:
            raise MalformedInput(f"unexpected parameter {k!r}")
        t = torch.as_tensor(np.asarray(v, dtype=np.float64), dtype=state[k].dtype)
        if t.shape != state[k].shape:
            raise MalformedInput(f"parameter {k!r} has shape {tuple(t.shape)}, expected {tuple(state[k].shape)}")
        state[k] = t
    net.load_state_dict(state)
    return net
