"""Regularized objective, training loop with early stopping, lambda sweep and selection."""
from __future__ import annotations

import copy
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
from torch.nn import functional as F

from .errors import ConfigError, Diverged
from .nn import GlyphNet, SequenceNet, _CGNet

log = logging.getLogger(__name__)

DEFAULT_GRID = (0.0, 0.1, 1.0, 2.0, 10.0, 100.0)
OPTIMIZERS = ("adam", "sgd_momentum")


@dataclass
class TrainConfig:
    lam: float = 0.0
    learning_rate: float = 1e-3
    batch_size: int = 128
    max_epochs: int = 500
    patience: int = 25
    seed: int = 0
    optimizer: str = "adam"
    tau: float = 10.0
    momentum: float = 0.9
    penalty_mode: str = "smooth"
    penalty_norms: str = "absolute"

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigError("lambda must be nonnegative")
        if self.learning_rate <= 0:
            raise ConfigError("learning rate must be positive")
        for name in ("batch_size", "max_epochs", "patience"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be a positive integer")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}")
        if self.tau < 1:
            raise ConfigError("tau must be >= 1")
        if self.penalty_mode not in ("smooth", "exact"):
            raise ConfigError("penalty_mode must be smooth or exact")
        if self.penalty_norms not in ("absolute", "relative"):
            raise ConfigError("penalty_norms must be absolute or relative")

    def replace(self, **kw) -> TrainConfig:
        d = asdict(self)
        d.update(kw)
        return TrainConfig(**d)


@dataclass
class FitResult:
    state: dict
    curves: dict
    best_epoch: int
    used_summary: list
    penalty_exact: float
    seconds: float
    config: TrainConfig
    net: _CGNet | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {"config": asdict(self.config), "curves": self.curves, "best_epoch": self.best_epoch,
                "used_summary": self.used_summary, "penalty_exact": self.penalty_exact,
                "seconds": self.seconds}


def to_inputs(net: _CGNet, x: np.ndarray) -> torch.Tensor:
    dtype = net.cg_layers()[0].basis.dtype
    if isinstance(net, SequenceNet):
        return torch.as_tensor(np.asarray(x), dtype=torch.long)
    if isinstance(net, GlyphNet):
        side = int(round(np.sqrt(x.reshape(len(x), -1).shape[1] / net.in_channels)))
        return torch.as_tensor(x, dtype=dtype).reshape(len(x), net.in_channels, side, side)
    return torch.as_tensor(x, dtype=dtype)


def compute_objective(net: _CGNet, x: torch.Tensor, y: torch.Tensor, lam: float, tau: float = 10.0,
                      mode: str = "smooth", relative: bool = False) -> torch.Tensor:
    """Mean cross-entropy plus ``lam`` times the invariance penalty."""
    loss = F.cross_entropy(net(x), y)
    if lam == 0:
        return loss
    if mode == "exact":
        return loss + lam * net.penalty_exact()
    return loss + lam * net.penalty_smooth(tau, relative)


def gradient(objective: Callable[[], torch.Tensor], params: Sequence[torch.Tensor]) -> list[torch.Tensor]:
    params = list(params)
    value = objective()
    if not value.requires_grad:
        return [torch.zeros_like(p) for p in params]
    grads = torch.autograd.grad(value, params, allow_unused=True)
    return [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]


@torch.no_grad()
def evaluate(net: _CGNet, x: torch.Tensor, y: torch.Tensor, batch: int = 2048) -> tuple[float, float]:
    """Mean cross-entropy and accuracy (percent)."""
    net.eval()
    loss, correct = 0.0, 0
    for s in range(0, len(y), batch):
        out = net(x[s:s + batch])
        loss += float(F.cross_entropy(out, y[s:s + batch], reduction="sum"))
        correct += int((out.argmax(1) == y[s:s + batch]).sum())
    return loss / len(y), 100.0 * correct / len(y)


def accuracy(net: _CGNet, ds) -> float:
    return evaluate(net, to_inputs(net, ds.inputs), torch.as_tensor(ds.labels, dtype=torch.long))[1]


def _optimizer(net, cfg: TrainConfig):
    if cfg.optimizer == "adam":
        return torch.optim.Adam(net.parameters(), lr=cfg.learning_rate)
    return torch.optim.SGD(net.parameters(), lr=cfg.learning_rate, momentum=cfg.momentum)


def train(net_factory: Callable[[], _CGNet], train_ds, val_ds, config: TrainConfig) -> FitResult:
    """Deterministic in ``config.seed``: seeds init and batch order, keeps the best validation epoch."""
    t0 = time.perf_counter()
    torch.manual_seed(config.seed)
    net = net_factory()
    rng = np.random.default_rng(config.seed)
    xtr, ytr = to_inputs(net, train_ds.inputs), torch.as_tensor(train_ds.labels, dtype=torch.long)
    xva, yva = to_inputs(net, val_ds.inputs), torch.as_tensor(val_ds.labels, dtype=torch.long)
    opt = _optimizer(net, config)
    relative = config.penalty_norms == "relative"
    curves = {k: [] for k in ("train_loss", "train_acc", "val_loss", "val_acc", "val_objective", "penalty")}
    best, best_epoch, best_state, stale = np.inf, 0, copy.deepcopy(net.state_dict()), 0
    n = len(ytr)
    for epoch in range(config.max_epochs):
        net.train()
        order = torch.as_tensor(rng.permutation(n))
        tot, correct = 0.0, 0
        for s in range(0, n, config.batch_size):
            idx = order[s:s + config.batch_size]
            opt.zero_grad()
            out = net(xtr[idx])
            ce = F.cross_entropy(out, ytr[idx])
            loss = ce + config.lam * net.penalty_smooth(config.tau, relative) if config.lam else ce
            if not torch.isfinite(loss):
                raise Diverged(f"non-finite loss at epoch {epoch}")
            loss.backward()
            opt.step()
            tot += float(ce.detach()) * len(idx)
            correct += int((out.argmax(1) == ytr[idx]).sum())
        vl, va = evaluate(net, xva, yva)
        with torch.no_grad():
            pen = float(net.penalty_smooth(config.tau, relative))
        vobj = vl + config.lam * pen
        if not np.isfinite(vobj):
            raise Diverged(f"non-finite validation loss at epoch {epoch}")
        for k, v in zip(curves, (tot / n, 100.0 * correct / n, vl, va, vobj, pen)):
            curves[k].append(v)
        if vobj < best - 1e-9:
            best, best_epoch, stale = vobj, epoch, 0
            best_state = copy.deepcopy(net.state_dict())
        else:
            stale += 1
            if stale >= config.patience:
                break
    net.load_state_dict(best_state)
    net.eval()
    state = {k: v.detach().cpu().numpy() for k, v in best_state.items()}
    return FitResult(state, curves, best_epoch, net.used_summary(), net.penalty_exact(),
                     time.perf_counter() - t0, config, net)


# ---------------------------------------------------------------- sweep

@dataclass
class SweepEntry:
    lam: float
    val_acc: float
    test_acc: float
    fit: FitResult | None = None
    error: str | None = None

    def row(self) -> dict:
        return {"lam": self.lam, "val_acc": self.val_acc, "test_acc": self.test_acc,
                "penalty_exact": None if self.fit is None else self.fit.penalty_exact,
                "best_epoch": None if self.fit is None else self.fit.best_epoch, "error": self.error}


@dataclass
class SweepResult:
    entries: list[SweepEntry]

    def __post_init__(self):
        lams = [e.lam for e in self.entries]
        if lams != sorted(set(lams)):
            raise ConfigError("sweep lambdas must be unique and sorted")

    def pairs(self) -> list[tuple[float, float]]:
        return [(e.lam, e.val_acc) for e in self.entries if e.error is None]

    def entry(self, lam: float) -> SweepEntry:
        return next(e for e in self.entries if e.lam == lam)


def lambda_seed(base: int, index: int) -> int:
    return (int(base) ^ int(index)) & 0xFFFFFFFFFFFFFFFF


def _run_one(args):
    net_factory, train_ds, val_ds, test_ds, cfg = args
    try:
        fit = train(net_factory, train_ds, val_ds, cfg)
    except Exception as exc:  # per-lambda failures are recorded, the sweep goes on
        log.warning("lambda=%g failed: %s", cfg.lam, exc)
        return SweepEntry(cfg.lam, float("nan"), float("nan"), None, f"{type(exc).__name__}: {exc}")
    val = fit.curves["val_acc"][fit.best_epoch]
    test = accuracy(fit.net, test_ds) if test_ds is not None else float("nan")
    return SweepEntry(cfg.lam, val, test, fit)


def sweep_lambda(net_factory, train_ds, val_ds, test_ds, grid: Sequence[float] = DEFAULT_GRID,
                 config: TrainConfig | None = None, jobs: int = 1) -> SweepResult:
    if not len(grid):
        raise ConfigError("lambda grid is empty")
    config = config or TrainConfig()
    grid = sorted(set(float(g) for g in grid))
    tasks = [(net_factory, train_ds, val_ds, test_ds, config.replace(lam=lam, seed=lambda_seed(config.seed, i)))
             for i, lam in enumerate(grid)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            entries = list(pool.map(_run_one, tasks))
        for e in entries:
            if e.fit is not None:
                e.fit.net = None  # not carried across processes
    else:
        entries = [_run_one(t) for t in tasks]
    return SweepResult(entries)


def select_lambda(sweep: SweepResult | Sequence[tuple[float, float]], margin: float = 5.0) -> float:
    """Largest lambda whose validation accuracy is within ``margin`` points of the best."""
    pairs = sweep.pairs() if isinstance(sweep, SweepResult) else list(sweep)
    if not pairs:
        raise ConfigError("no successful sweep entries to select from")
    best = max(v for _, v in pairs)
    return max(lam for lam, v in pairs if v >= best - margin - 1e-9)


def summary_table(rows: dict[float, list[tuple[float, float]]]) -> str:
    """Rows per lambda with mean (std) validation and test accuracy over seeds."""
    lines = [f"{'lambda':>8}  {'val acc':>16}  {'test acc':>16}"]
    for lam in sorted(rows):
        v = np.array([r[0] for r in rows[lam]])
        t = np.array([r[1] for r in rows[lam]])
        lines.append(f"{lam:>8g}  {v.mean():7.2f} ({v.std():5.2f})  {t.mean():7.2f} ({t.std():5.2f})")
    return "\n".join(lines)
