"""``cginv`` command line: lattices, training, sweeps, verification and demos."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from . import config as cfgmod
from .errors import CGInvError, ConfigError
from .groups import image_family, transposition_family
from .io import RunManifest, atomic_write, write_json
from .lattice import build_lattice, serialize_lattice
from .nn import penalty_exact, penalty_smooth, save_checkpoint
from .tasks import rod_demo, serialize_dataset
from .training import summary_table

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3

log = logging.getLogger("cginv")


def _grid(text: str | None):
    if text is None:
        return None
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise ConfigError(f"bad --lambda-grid {text!r}") from None


def _load(args, experiment: str) -> dict:
    over = {}
    grid = _grid(getattr(args, "lambda_grid", None))
    if grid is not None:
        over["lambda_grid"] = grid
    if getattr(args, "seed", None) is not None and experiment != "lattice":
        over["seeds"] = [args.seed]
    if getattr(args, "task", None) is not None:
        over["task"] = args.task
    if getattr(args, "invariant", None) is not None:
        over["I"] = [g for g in args.invariant.split(",") if g]
    return cfgmod.load_config(args.config, over, experiment=experiment)


# ---------------------------------------------------------------- commands

def cmd_lattice(args) -> int:
    if args.config is None and args.transpositions:
        cfg = cfgmod.load_config(None, {"family": {"kind": "transpositions", "n": args.transpositions,
                                                   "width": args.width}}, experiment="lattice")
    elif args.config is None and args.groups:
        cfg = cfgmod.load_config(None, {"family": {"kind": "image", "shape": args.shape,
                                                   "groups": args.groups.split(",")}}, experiment="lattice")
    else:
        cfg = cfgmod.load_config(args.config, experiment="lattice")
    from .experiments import lattice_from_config
    lat = lattice_from_config(cfg)
    print(lat.format_table())
    if args.out:
        out = Path(args.out)
        man = RunManifest(cfgmod.config_hash(cfg), "lattice")
        man.add("lattice", atomic_write(out / "lattice.json", serialize_lattice(lat)))
        man.finish()
        man.save(out)
    return EXIT_OK


def _train_one(cfg: dict, seed: int, out: Path | None, jobs: int, tag: str, man: RunManifest | None):
    from .experiments import run_sweep, setup
    s = setup(cfg, data_seed=seed)
    tc = cfgmod.train_config(cfg, seed=seed)
    sweep, lam = run_sweep(s, cfg["lambda_grid"], tc, jobs)
    chosen = sweep.entry(lam)
    result = {"seed": seed, "selected_lambda": lam, "selected_test_acc": chosen.test_acc,
              "selected_val_acc": chosen.val_acc, "rows": [e.row() for e in sweep.entries],
              "used_summary": chosen.fit.used_summary if chosen.fit else None,
              "runs": {str(e.lam): e.fit.to_dict() for e in sweep.entries if e.fit is not None}}
    if out is not None and man is not None:
        man.add(f"train{tag}", atomic_write(out / f"train{tag}.json", serialize_dataset(s.train)))
        man.add(f"val{tag}", atomic_write(out / f"val{tag}.json", serialize_dataset(s.val)))
        man.add(f"extrapolation{tag}", atomic_write(out / f"extrapolation{tag}.json", serialize_dataset(s.test)))
        for i, lat in enumerate(s.lattices):
            man.add(f"lattice{i}", atomic_write(out / f"lattice{i}.json", serialize_lattice(lat)))
        if chosen.fit is not None:
            net = s.factory()
            net.load_state_dict({k: torch.as_tensor(v) for k, v in chosen.fit.state.items()})
            pen = {"lam": lam, "tau": tc.tau, "mode": tc.penalty_mode, "norms": tc.penalty_norms}
            man.add(f"checkpoint{tag}", atomic_write(out / f"checkpoint{tag}.json", save_checkpoint(net, pen)))
        man.add(f"metrics{tag}", write_json(out / f"metrics{tag}.json", {"config": cfg, **result}))
    return result, sweep


def _print_result(result: dict) -> None:
    print(f"{'lambda':>8}  {'val acc':>8}  {'test acc':>8}  {'R':>4}  best epoch")
    for r in result["rows"]:
        pen = "-" if r["penalty_exact"] is None else f"{r['penalty_exact']:.0f}"
        print(f"{r['lam']:>8g}  {r['val_acc']:8.2f}  {r['test_acc']:8.2f}  {pen:>4}  {r['best_epoch']}"
              + (f"  ({r['error']})" if r["error"] else ""))
    print(f"selected lambda = {result['selected_lambda']:g}, "
          f"extrapolation accuracy = {result['selected_test_acc']:.2f}%")
    if result["used_summary"]:
        total = sum(u["sq_norm"] for u in result["used_summary"]) or 1.0
        for u in result["used_summary"][:6]:
            print(f"  node {u['label']!s:<24} level {u['level']:>3}  mass {u['sq_norm'] / total:7.2%}")


def _experiment(args) -> str:
    if args.config:
        try:
            return json.loads(Path(args.config).read_text()).get("experiment", args.experiment)
        except (OSError, json.JSONDecodeError, AttributeError):
            return args.experiment  # load_config reports the real problem
    return args.experiment


def cmd_train(args) -> int:
    cfg = _load(args, _experiment(args))
    out = Path(args.out) if args.out else None
    man = RunManifest(cfgmod.config_hash(cfg), "train") if out else None
    try:
        result, _ = _train_one(cfg, cfg["seeds"][0], out, args.jobs, "", man)
    except BaseException:
        if man is not None:
            man.finish(complete=False)
            man.save(out)
        raise
    _print_result(result)
    if man is not None:
        man.finish()
        man.save(out)
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _load(args, _experiment(args))
    out = Path(args.out) if args.out else None
    man = RunManifest(cfgmod.config_hash(cfg), "sweep") if out else None
    rows: dict[float, list[tuple[float, float]]] = {}
    selected = []
    try:
        for seed in cfg["seeds"]:
            result, sweep = _train_one(cfg, seed, out, args.jobs, f"_seed{seed}", man)
            selected.append((seed, result["selected_lambda"], result["selected_test_acc"]))
            for e in sweep.entries:
                rows.setdefault(e.lam, []).append((e.val_acc, e.test_acc))
    except BaseException:
        if man is not None:
            man.finish(complete=False)
            man.save(out)
        raise
    table = summary_table(rows)
    print(table)
    for seed, lam, acc in selected:
        print(f"seed {seed}: selected lambda {lam:g}, extrapolation accuracy {acc:.2f}%")
    if man is not None:
        man.add("summary", atomic_write(out / "summary.txt", table + "\n"))
        man.add("selected", write_json(out / "selected.json",
                                       [{"seed": s, "lambda": l, "test_acc": a} for s, l, a in selected]))
        man.finish()
        man.save(out)
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import SUITES, run_suites
    names = args.suite or list(SUITES)
    bad = [n for n in names if n not in SUITES]
    if bad:
        raise ConfigError(f"unknown suites {bad}; choose from {sorted(SUITES)}")
    results = run_suites(names, inject_fault=args.inject_fault)
    for r in results:
        print(f"[{'PASS' if r.passed else 'FAIL'}] {r.name} ({r.seconds:.2f}s)")
        for d in r.details:
            print(f"    {d}")
    if args.out:
        write_json(Path(args.out) / "verify.json", [asdict(r) for r in results])
    return EXIT_OK if all(r.passed for r in results) else EXIT_VERIFY


def penalty_walkthrough() -> dict:
    """Exact and smooth penalties on two small lattices; returned for printing and tests."""
    out = {}
    img = build_lattice(image_family((3, 3, 3), names=("rot90", "color_perm", "vflip")))
    levels = img.levels
    top_only = [1.0] + [0.0] * (len(levels) - 1)
    lvl1 = next(i for i, l in enumerate(levels) if l == 1)
    with_level1 = [1.0 if i in (0, lvl1) else 0.0 for i in range(len(levels))]
    out["image"] = {
        "nodes": [(img.label_names(n.label), n.level, n.dim) for n in img.nodes],
        "top_only": (penalty_exact(top_only, levels), float(penalty_smooth(torch.tensor(top_only), levels))),
        "top_and_level1": (penalty_exact(with_level1, levels),
                           float(penalty_smooth(torch.tensor(with_level1), levels))),
        "level1_node": img.label_names(img.nodes[lvl1].label),
    }
    t = build_lattice(transposition_family(5))
    basis = t.basis_matrix()
    pairs = {}
    for name, alpha in (("omega_prime", [1, 0, 1, 0, 1]), ("omega_double_prime", [1, 0, 1, 0, 1.5])):
        a = np.asarray(alpha, dtype=float)
        w = basis @ a
        norms = a ** 2
        # transposition swapping positions 2 and 4 (1-based)
        pairs[name] = {"alpha": alpha, "w": w.tolist(), "R_exact": penalty_exact(norms, t.levels),
                       "R_smooth": float(penalty_smooth(torch.tensor(norms), t.levels)),
                       "witness_2_4": float(w[1] - w[3])}
    out["transpositions"] = {"nodes": [(n.level, n.dim) for n in t.nodes], **pairs}
    return out


def cmd_demo_penalty(args) -> int:
    d = penalty_walkthrough()
    im = d["image"]
    print("Image lattice {rot90, color_perm, vflip} on 3x3x3 patches:")
    for names, level, dim in im["nodes"]:
        print(f"  {('{' + ','.join(names) + '}') if names else 'empty':<28} level {level}  dim {dim:>2}")
    print(f"  top node only:              R = {im['top_only'][0]:.0f}   smooth (tau=10) = {im['top_only'][1]:.4f}")
    print(f"  top + level-1 node {im['level1_node']}: R = {im['top_and_level1'][0]:.0f}   "
          f"smooth (tau=10) = {im['top_and_level1'][1]:.4f}")
    print("  the least invariant used node sits at level 1, so every node down to it is counted")
    print()
    print("Transposition lattice, n = 5 (one node per skipped position plus the top node):")
    for key in ("omega_prime", "omega_double_prime"):
        e = d["transpositions"][key]
        print(f"  alpha = {e['alpha']}: R = {e['R_exact']:.0f}, smooth = {e['R_smooth']:.4f}, "
              f"w2 - w4 = {e['witness_2_4']:+.4f}")
    print("  both weight vectors get the same penalty even though only the first is invariant")
    print("  to swapping positions 2 and 4")
    return EXIT_OK


def cmd_demo_rod(args) -> int:
    rep = rod_demo(args.n)
    print(rep.describe())
    return EXIT_OK if rep.passed else EXIT_VERIFY


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cginv", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--out", help="output directory")
        if seed:
            sp.add_argument("--seed", type=int)

    sp = sub.add_parser("lattice", help="build and print an invariant-subspace lattice")
    common(sp, seed=False)
    sp.add_argument("--groups", help="comma-separated built-in image groups, e.g. rot90,color_perm")
    sp.add_argument("--shape", type=int, nargs=3, default=[3, 3, 3], metavar=("C", "H", "W"))
    sp.add_argument("--transpositions", type=int, metavar="N", help="pairwise transpositions of N positions")
    sp.add_argument("--width", type=int, default=1, help="feature width per position")
    sp.set_defaults(func=cmd_lattice)

    for name, fn, hlp in (("train", cmd_train, "sweep lambda once and report the selected model"),
                          ("sweep", cmd_sweep, "sweep lambda over all configured seeds")):
        sp = sub.add_parser(name, help=hlp)
        common(sp)
        sp.add_argument("--experiment", choices=("sequence", "glyph"), default="sequence")
        sp.add_argument("--task", type=int, help="sequence task 1-4")
        sp.add_argument("--invariant", help="glyph invariant groups, e.g. color or ''")
        sp.add_argument("--lambda-grid", help="comma-separated lambda values")
        sp.add_argument("--jobs", type=int, default=1)
        sp.set_defaults(func=fn)

    sp = sub.add_parser("verify", help="run the self-check suites")
    sp.add_argument("--suite", action="append", help="run only this suite (repeatable)")
    sp.add_argument("--inject-fault", action="store_true", help="perturb a basis vector (negative control)")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_verify)

    sp = sub.add_parser("demo-penalty", help="walk through the exact and smooth penalties")
    sp.set_defaults(func=cmd_demo_penalty)

    sp = sub.add_parser("demo-rod", help="translation-invariance counterexample on rod images")
    sp.add_argument("--n", type=int, default=2)
    sp.set_defaults(func=cmd_demo_rod)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    torch.set_num_threads(1)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CGInvError, OSError, RuntimeError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
