"""Fast self-checks aggregated by ``cginv verify``."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .groups import builtin_group, image_family, reynolds_operator, transposition_family
from .lattice import LatticeNode, Subspace, power_set_reference, build_lattice, same_lattice, verify_lattice
from .nn import CGConvLayer, SequenceNet, global_sum_pool, penalty_exact, penalty_smooth
from .tasks import couple_batch, glyph_scm, reconstruct, rod_demo, sample_training, seq_target, sequence_scm
from .training import compute_objective


@dataclass
class SuiteResult:
    name: str
    passed: bool = True
    details: list[str] = field(default_factory=list)
    seconds: float = 0.0

    def check(self, ok: bool, msg: str) -> None:
        self.details.append(("ok   " if ok else "FAIL ") + msg)
        self.passed = self.passed and bool(ok)


def _perturb(lattice, amount: float = 1e-3):
    b = lattice.nodes[0].basis.basis.copy()
    b[0, 0] += amount
    lattice.nodes[0] = LatticeNode(lattice.nodes[0].label, Subspace(lattice.ambient_dim, b))
    return lattice


def suite_lattice(inject_fault: bool = False) -> SuiteResult:
    r = SuiteResult("lattice")
    t0 = time.perf_counter()
    f = image_family((3, 3, 3), names=("rot90", "color_perm"))
    lat = build_lattice(f)
    dims = {tuple(lat.label_names(n.label)): n.dim for n in lat.nodes}
    r.check(dims == {("rot90", "color_perm"): 3, ("rot90",): 6, ("color_perm",): 6, (): 12},
            f"rot/color 3x3x3 node dims {sorted(dims.values())}")
    if inject_fault:
        _perturb(lat)
    rep = verify_lattice(lat, f)
    r.check(rep.passed, f"rot/color predicates ({len(rep.failures())} failures)")
    t = transposition_family(5)
    tl = build_lattice(t)
    r.check(tl.dims == [1] * 5, f"transpositions n=5 dims {tl.dims}")
    r.check(verify_lattice(tl, t).passed, "transposition predicates")
    r.seconds = time.perf_counter() - t0
    r.check(r.seconds < 5, f"runtime {r.seconds:.2f}s < 5s")
    return r


def suite_lemmas() -> SuiteResult:
    r = SuiteResult("lemmas")
    t0 = time.perf_counter()
    groups = [builtin_group(n, shape=(3, 3, 3)) for n in ("rot90", "color_perm", "vflip")]
    groups += [builtin_group("h_translate", shape=(1, 4, 4)), builtin_group("transposition", i=1, j=4, n=5)]
    for g in groups:
        rb = reynolds_operator(g)
        idem = np.max(np.abs(rb @ rb - rb))
        absorb = max(np.max(np.abs(t @ rb - rb)) for t in g.matrices)
        r.check(idem < 1e-10 and absorb < 1e-10, f"{g.name}: idempotence {idem:.1e}, absorption {absorb:.1e}")
    f = image_family((3, 3, 3), names=("rot90", "color_perm", "vflip"))
    r.check(verify_lattice(build_lattice(f), f).passed, "rot/color/vflip lattice predicates")
    r.seconds = time.perf_counter() - t0
    return r


def suite_bruteforce() -> SuiteResult:
    r = SuiteResult("bruteforce")
    t0 = time.perf_counter()
    cases = [((1, 3, 3), ("rot90", "vflip")), ((2, 3, 3), ("rot90", "color_perm", "vflip")),
             ((2, 4, 4), ("rot90", "vflip", "h_translate", "color_perm"))]
    for shape, names in cases:
        f = image_family(shape, names=names)
        r.check(same_lattice(build_lattice(f), power_set_reference(f)), f"{names} on {shape}")
    t = transposition_family(4)
    r.check(same_lattice(build_lattice(t), build_lattice(t, fast_path=False)), "transposition fast path n=4")
    r.seconds = time.perf_counter() - t0
    return r


def suite_penalty() -> SuiteResult:
    r = SuiteResult("penalty")
    t0 = time.perf_counter()
    levels = build_lattice(transposition_family(5)).levels
    r.check(penalty_exact([1, 0, 1, 0, 1], levels) == 3, "R(omega') = 3")
    r.check(penalty_exact([1, 0, 1, 0, 1.5 ** 2], levels) == 3, "R(omega'') = 3")
    rng = np.random.default_rng(0)
    lv = [3, 2, 2, 1, 1, 0]
    worst = 0.0
    for _ in range(50):
        norms = np.where(rng.random(6) < 0.5, 0.0, rng.uniform(0.1, 10, 6))
        worst = max(worst, abs(penalty_smooth(torch.tensor(norms), lv, 1e6).item() - penalty_exact(norms, lv)))
    r.check(worst < 1e-2, f"smooth vs exact at tau=1e6: max gap {worst:.1e}")
    r.seconds = time.perf_counter() - t0
    return r


def suite_gradient() -> SuiteResult:
    r = SuiteResult("gradient")
    t0 = time.perf_counter()
    torch.manual_seed(0)
    lat = build_lattice(transposition_family(4, 3))
    net = SequenceNet(lat, n_classes=5, n=4, vocab=9, embed=(6, 3), hidden=4, activation="tanh").double()
    tok = torch.randint(1, 10, (16, 4))
    y = torch.randint(0, 5, (16,))
    obj = lambda: compute_objective(net, tok, y, lam=10.0)
    params = list(net.parameters())
    grads = torch.autograd.grad(obj(), params)
    rng = np.random.default_rng(0)
    worst, h = 0.0, 1e-5
    for _ in range(60):
        k = int(rng.integers(len(params)))
        i = int(rng.integers(params[k].numel()))
        with torch.no_grad():
            flat = params[k].view(-1)
            old = flat[i].item()
            flat[i] = old + h
            up = obj().item()
            flat[i] = old - h
            down = obj().item()
            flat[i] = old
        fd = (up - down) / (2 * h)
        g = grads[k].view(-1)[i].item()
        worst = max(worst, abs(g - fd) / max(abs(g), abs(fd), 1e-8))
    r.check(worst < 1e-4, f"finite differences: max relative error {worst:.1e}")
    r.seconds = time.perf_counter() - t0
    return r


def suite_equivariance() -> SuiteResult:
    r = SuiteResult("equivariance")
    t0 = time.perf_counter()
    lat = build_lattice(image_family((3, 3, 3), names=("rot90", "color_perm", "vflip")))
    torch.manual_seed(0)
    conv = CGConvLayer(lat, 3, 4).double()
    conv.restrict([n.label for n in lat.nodes if 0 in n.label])
    x = torch.randn(2, 3, 8, 8, dtype=torch.float64)
    with torch.no_grad():
        gap = torch.max(torch.abs(conv(torch.rot90(x, 1, (2, 3))) - torch.rot90(conv(x), 1, (2, 3)))).item()
    r.check(gap < 1e-10, f"conv commutes with rot90: {gap:.1e}")
    p = global_sum_pool(x)
    ok = all(torch.allclose(global_sum_pool(t), p, atol=1e-12)
             for t in (torch.rot90(x, 1, (2, 3)), torch.flip(x, (2,))))
    r.check(ok,
            "sum-pool invariant to rot/flip")
    r.seconds = time.perf_counter() - t0
    return r


def suite_rod() -> SuiteResult:
    r = SuiteResult("rod")
    t0 = time.perf_counter()
    rep = rod_demo(2)
    r.check(rep.translation_invariant, f"(a) middle-row sum constant over translations: {rep.upright_values}")
    r.check(rep.separates_labels, f"(b) upright {rep.upright_values[0]} vs flat {rep.flat_value}")
    r.check(rep.witness_k is not None, f"(c) witness k={rep.witness_k}, values {rep.witness_values}")
    r.seconds = time.perf_counter() - t0
    return r


def suite_coupling() -> SuiteResult:
    r = SuiteResult("coupling")
    t0 = time.perf_counter()
    for task in (1, 2, 3, 4):
        spec = sequence_scm(task)
        pairs = couple_batch(spec, 300, seed=task)
        lo = {1: 10, 2: 9, 3: -490, 4: 0}[task]
        ok = all(p.label_factual == p.label_counterfactual
                 and seq_target(task, p.x_counterfactual) - lo == p.label for p in pairs)
        r.check(ok, f"sequence task {task}: coupled labels equal")
        ds = sample_training(spec, 200, seed=task)
        r.check(np.array_equal(reconstruct(ds), ds.inputs), f"sequence task {task}: inputs reconstruct")
    spec = glyph_scm(["color"])
    pairs = couple_batch(spec, 200, seed=0)
    r.check(all(p.label_factual == p.label_counterfactual for p in pairs), "glyph: coupled labels equal")
    r.seconds = time.perf_counter() - t0
    return r


SUITES = {
    "lattice": suite_lattice,
    "lemmas": suite_lemmas,
    "bruteforce": suite_bruteforce,
    "penalty": suite_penalty,
    "gradient": suite_gradient,
    "equivariance": suite_equivariance,
    "rod": suite_rod,
    "coupling": suite_coupling,
}


def run_suites(names=None, inject_fault: bool = False) -> list[SuiteResult]:
    out = []
    for name in names or SUITES:
        fn = SUITES[name]
        out.append(fn(inject_fault=inject_fault) if name == "lattice" else fn())
    return out
