"""Warmup / search / final training, lambda sweeps, Pareto fronts and baselines."""

from __future__ import annotations

import csv
import itertools
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import Dataset
from .hwmodel import CostReport, CostTerm, PlatformProfile, cost_value, energy_cost, exact_layer_cost, latency_cost
from .mapping import MappedConvLayer
from .netspec import NetworkSpec
from .network import PHASES, Network, PhaseError, build_supernet
from .optim import Optimizer, OptimizerConfig
from .quant import PRECISION_RANK
from .tensor import cross_entropy, make_rng, no_grad

log = logging.getLogger(__name__)

TARGETS = ("latency", "energy")


@dataclass
class TrainConfig:
    epochs: dict = field(default_factory=lambda: {"warmup": 10, "search": 10, "final": 5})
    patience: dict = field(default_factory=lambda: {"warmup": 5, "search": 5, "final": 5})
    # checkpoint kept at the end of a phase: "best" validation accuracy or the "last" epoch
    select: dict = field(default_factory=lambda: {"warmup": "best", "search": "best", "final": "best"})
    batch_size: int = 32
    w_opt: OptimizerConfig = field(default_factory=lambda: OptimizerConfig("sgd", lr=1e-2, momentum=0.9, weight_decay=1e-4))
    theta_opt: OptimizerConfig = field(default_factory=lambda: OptimizerConfig("adam", lr=1e-2))
    lam: float = 0.0
    lambda_mode: str = "raw"  # raw: multiplies cycles (or mW*cycles); normalized: divided by the uniform-theta cost
    target: str = "latency"
    seed: int = 0
    tau_anneal: bool = False  # theta temperature 1.0 -> 0.2 across the search phase
    val_fraction: float = 0.1
    threshold: float = 0.05

    def __post_init__(self):
        for name in ("epochs", "patience"):
            d = getattr(self, name)
            if set(d) != set(PHASES) or any(int(v) < 1 for v in d.values()):
                raise ValueError(f"{name} needs a value >= 1 for each of {PHASES}")
        if set(self.select) != set(PHASES) or not set(self.select.values()) <= {"best", "last"}:
            raise ValueError("select maps each phase to 'best' or 'last'")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lam < 0 or not math.isfinite(self.lam):
            raise ValueError("lambda must be a finite non-negative number")
        if self.target not in TARGETS:
            raise ValueError(f"cost target must be one of {TARGETS}")
        if self.lambda_mode not in ("raw", "normalized"):
            raise ValueError("lambda_mode is 'raw' or 'normalized'")
        for name in ("w_opt", "theta_opt"):
            v = getattr(self, name)
            if isinstance(v, dict):
                setattr(self, name, OptimizerConfig(**v))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        base = cls()
        d = dict(d)
        for name in ("epochs", "patience", "select"):
            if name in d:
                d[name] = {**getattr(base, name), **d[name]}
        for name in ("w_opt", "theta_opt"):
            if name in d:
                d[name] = OptimizerConfig(**{**asdict(getattr(base, name)), **d[name]})
        unknown = set(d) - set(asdict(base))
        if unknown:
            raise ValueError(f"unknown training config keys {sorted(unknown)}")
        return cls(**d)


# ----------------------------------------------------------------- helpers
def cost_fn(target: str):
    return latency_cost if target == "latency" else energy_cost


def exact_cost(net: Network, target: str = "latency") -> tuple[float, CostReport]:
    _, report = latency_cost(net, net.platform, exact=True)
    return cost_value(report, target), report


def uniform_cost(net: Network, target: str = "latency") -> float:
    """Relaxed cost of ``net`` with every theta bank at its uniform start."""
    with no_grad():
        value, _ = cost_fn(target)(net.cost_terms_uniform(), net.platform, exact=False)
    return float(value.data)


def effective_lambda(net: Network, config: TrainConfig) -> float:
    if config.lambda_mode == "raw" or config.lam == 0:
        return config.lam
    return config.lam / uniform_cost(net, config.target)


def evaluate(net: Network, data: Dataset, batch_size: int = 256) -> float:
    correct = 0
    with no_grad():
        for i in range(0, len(data), batch_size):
            logits = net.forward(data.images[i : i + batch_size], training=False)
            correct += int((logits.data.argmax(axis=1) == data.labels[i : i + batch_size]).sum())
    return correct / max(len(data), 1)


@dataclass
class PhaseResult:
    phase: str
    history: list[dict]
    steps: list[dict]  # per-step loss decomposition
    best_epoch: int
    val_acc: float


HISTORY_FIELDS = ("phase", "epoch", "loss", "task_loss", "cost_relaxed", "cost_exact", "val_acc", "tau")


def run_phase(phase: str, net: Network, config: TrainConfig, train: Dataset, val: Dataset, rng: np.random.Generator | None = None) -> PhaseResult:
    """Train ``net`` in place through one protocol phase.

    warmup: task loss only, theta frozen at uniform, float weights.
    search: ``L + lam * C`` with quantizers on, weights and theta trained by
    separate optimizers. final: the argmax assignment is pinned, quantizer
    scales frozen, only weights are trained.
    """
    if phase not in PHASES:
        raise PhaseError(f"unknown phase {phase!r}")
    done = net.completed
    if phase == "search" and "warmup" not in done:
        raise PhaseError("search requires a completed warmup phase")
    if phase == "final" and "search" not in done and not net.is_hard():
        raise PhaseError("final training needs a searched network or a fixed assignment")
    if phase in done:
        raise PhaseError(f"phase {phase} already completed")
    rng = rng if rng is not None else make_rng(config.seed)

    thetas = []
    lam = 0.0
    if phase == "warmup":
        net.set_quant(False)
        net.set_theta_frozen(True)
    elif phase == "search":
        net.set_quant(True)
        net.set_theta_frozen(False)
        thetas = net.theta_parameters()
        lam = effective_lambda(net, config)
    else:
        net.apply_assignment(net.assignment())
        for m in net.modules.values():
            m.freeze_quantizers()
        net.set_quant(True)
    w_opt = Optimizer(net.parameters(), config.w_opt)
    t_opt = Optimizer(thetas, config.theta_opt) if thetas else None
    cost = cost_fn(config.target)

    history, steps = [], []
    best = (-1.0, -1, None)
    stale = 0
    n_epochs = config.epochs[phase]
    for epoch in range(n_epochs):
        tau = _set_tau(net, config, phase, epoch, n_epochs)
        order = rng.permutation(len(train))
        sums = np.zeros(4)
        n_batches = 0
        for i in range(0, len(train), config.batch_size):
            idx = order[i : i + config.batch_size]
            logits = net.forward(train.images[idx], training=True)
            task = cross_entropy(logits, train.labels[idx])
            if phase == "search":
                c, _ = cost(net, net.platform, exact=False)
                total = task + c * lam
                c_val = float(c.data)
            else:
                total, c_val = task, 0.0
            rec = {"loss": float(total.data), "task_loss": float(task.data), "cost": c_val, "lam": lam}
            steps.append(rec)
            total.backward()
            w_opt.step()
            if t_opt is not None:
                t_opt.step()
            sums += (rec["loss"], rec["task_loss"], c_val, 1)
            n_batches += 1
        acc = evaluate(net, val)
        exact, _ = exact_cost(net, config.target)
        row = {
            "phase": phase,
            "epoch": epoch,
            "loss": sums[0] / n_batches,
            "task_loss": sums[1] / n_batches,
            "cost_relaxed": sums[2] / n_batches,
            "cost_exact": exact,
            "val_acc": acc,
            "tau": tau,
        }
        history.append(row)
        log.info("%s epoch %d: loss %.4f acc %.4f cost %.0f", phase, epoch, row["loss"], acc, exact)
        if acc > best[0]:
            best = (acc, epoch, net.state_dict())
            stale = 0
        else:
            stale += 1
            if stale >= config.patience[phase]:
                break
    if config.select[phase] == "best" and best[1] != history[-1]["epoch"]:
        net.load_state_dict(best[2])
        best_epoch, val_acc = best[1], best[0]
    else:
        best_epoch, val_acc = history[-1]["epoch"], history[-1]["val_acc"]
    for p in net.parameters() + net.theta_parameters():
        p.grad = None
    net.completed.append(phase)
    return PhaseResult(phase, history, steps, best_epoch, val_acc)


def _set_tau(net: Network, config: TrainConfig, phase: str, epoch: int, n_epochs: int) -> float:
    tau = 1.0
    if phase == "search" and config.tau_anneal and n_epochs > 1:
        tau = 1.0 - 0.8 * epoch / (n_epochs - 1)
    for m in net.mapped_layers():
        m.theta_bank.tau = tau
    return tau


# --------------------------------------------------------------- baselines
@dataclass
class MappingSolution:
    kind: str
    assignment: dict[str, np.ndarray]
    cycles: float
    energy: float
    accuracy: float | None = None


def min_cost_split(c_out: int, layer_cost: Callable[[tuple[int, ...]], float], ranks: Sequence) -> tuple[int, ...]:
    """Channel counts per branch minimizing ``layer_cost``.

    Every composition of ``c_out`` into ``len(ranks)`` parts is scanned. Among
    cost-minimal splits the one giving most channels to the highest-ranked
    branch wins, then the next-ranked, and so on.
    """
    n = len(ranks)
    order = sorted(range(n), key=lambda j: ranks[j], reverse=True)
    best_key, best = None, None
    for cuts in itertools.combinations_with_replacement(range(c_out + 1), n - 1):
        bounds = (0, *cuts, c_out)
        counts = tuple(bounds[j + 1] - bounds[j] for j in range(n))
        key = (layer_cost(counts), tuple(-counts[j] for j in order))
        if best_key is None or key < best_key:
            best_key, best = key, counts
    return best


def _grouped(counts: Sequence[int]) -> np.ndarray:
    return np.concatenate([np.full(c, j, dtype=np.int64) for j, c in enumerate(counts)])


def build_baseline(kind: str, net: Network, target: str = "latency") -> MappingSolution:
    """Fixed assignment for ``all-on-cu:<name>``, ``io-heuristic[:edge,backbone]`` or ``min-cost``."""
    platform = net.platform
    mapped = net.mapped_layers()
    assignment: dict[str, np.ndarray] = {}
    if kind.startswith("all-on-cu"):
        _, _, cu = kind.partition(":")
        platform.cu(cu)  # unknown names raise KeyError
        for m in mapped:
            if cu not in m.cu_names:
                raise ValueError(f"layer {m.name}: CU {cu} cannot execute this layer")
            assignment[m.name] = np.full(m.geometry.c_out, m.cu_names.index(cu), dtype=np.int64)
    elif kind.startswith("io-heuristic"):
        _, _, names = kind.partition(":")
        precisions = {c.precision for c in platform.cus}
        if len(precisions) < 2:
            raise ValueError("io-heuristic needs CUs with distinct weight precisions")
        if names:
            edge, backbone = names.split(",")
        else:
            ranked = sorted(platform.cus, key=lambda c: PRECISION_RANK[c.precision])
            edge, backbone = ranked[-1].name, ranked[0].name
        for i, m in enumerate(mapped):
            cu = edge if i in (0, len(mapped) - 1) else backbone
            if cu not in m.cu_names:
                raise ValueError(f"layer {m.name}: CU {cu} cannot execute this layer")
            assignment[m.name] = np.full(m.geometry.c_out, m.cu_names.index(cu), dtype=np.int64)
    elif kind == "min-cost":
        for m in mapped:
            branches = m.branches

            def layer_cost(counts, m=m, branches=branches):
                terms = [CostTerm(b.cu, b.op, c) for b, c in zip(branches, counts)]
                return exact_layer_cost(platform, m.geometry, terms, target)

            counts = min_cost_split(m.geometry.c_out, layer_cost, [m.precision_rank(j) for j in range(len(branches))])
            assignment[m.name] = _grouped(counts)
    else:
        raise ValueError(f"unknown baseline kind {kind!r}")
    net.apply_assignment(assignment)
    _, report = latency_cost(net, platform, exact=True)
    return MappingSolution(kind, assignment, report.total_cycles, report.energy_mw_cycles)


# ------------------------------------------------------------------ pareto
@dataclass
class ParetoPoint:
    lam: float
    val_acc: float
    test_acc: float
    cycles: float
    energy: float
    artifact: str = ""
    warmup_acc: float = float("nan")
    error: str = ""

    def __post_init__(self):
        if not self.error:
            if not (0 <= self.val_acc <= 1 and 0 <= self.test_acc <= 1):
                raise ValueError("accuracies are fractions in [0, 1]")
            if self.cycles < 0 or self.energy < 0:
                raise ValueError("costs are non-negative")


def pareto_front(points: Sequence[ParetoPoint], cost: str = "cycles", acc: str = "val_acc") -> list[ParetoPoint]:
    """Non-dominated points in (accuracy up, cost down); input order is kept."""
    ok = [p for p in points if not p.error]
    front = []
    for p in ok:
        pa, pc = getattr(p, acc), getattr(p, cost)
        dominated = any(
            getattr(q, acc) >= pa and getattr(q, cost) <= pc and (getattr(q, acc) > pa or getattr(q, cost) < pc) for q in ok
        )
        if not dominated:
            front.append(p)
    return front


# ------------------------------------------------------------------- sweep
@dataclass
class RunResult:
    point: ParetoPoint
    phases: list[PhaseResult]
    state: dict
    report: CostReport


def train_from_warmup(
    spec: NetworkSpec,
    platform: PlatformProfile,
    config: TrainConfig,
    train: Dataset,
    val: Dataset,
    test: Dataset | None,
    warm_state: dict,
    warm_acc: float,
) -> RunResult:
    """Search + final training starting from a shared warmup checkpoint."""
    net = build_supernet(spec, platform, make_rng(config.seed), threshold=config.threshold)
    net.load_state_dict(warm_state)
    net.completed.append("warmup")
    rng = make_rng([config.seed, 1])
    phases = [run_phase("search", net, config, train, val, rng), run_phase("final", net, config, train, val, rng)]
    return _finish_run(net, config, val, test, phases, warm_acc)


def _finish_run(net, config, val, test, phases, warm_acc) -> RunResult:
    _, report = latency_cost(net, net.platform, exact=True)
    val_acc = evaluate(net, val)
    test_acc = evaluate(net, test) if test is not None else val_acc
    point = ParetoPoint(config.lam, val_acc, test_acc, report.total_cycles, report.energy_mw_cycles, warmup_acc=warm_acc)
    return RunResult(point, phases, net.state_dict(), report)


def run_warmup(spec, platform, config: TrainConfig, train, val) -> tuple[Network, PhaseResult]:
    net = build_supernet(spec, platform, make_rng(config.seed), threshold=config.threshold)
    res = run_phase("warmup", net, config, train, val, make_rng([config.seed, 0]))
    return net, res


def run_pipeline(spec, platform, config: TrainConfig, train, val, test=None) -> RunResult:
    """All three phases for one lambda."""
    net, warm = run_warmup(spec, platform, config, train, val)
    res = train_from_warmup(spec, platform, config, train, val, test, net.state_dict(), warm.val_acc)
    res.phases.insert(0, warm)
    return res


def run_baseline(kind: str, spec, platform, config: TrainConfig, train, val, test=None) -> tuple[MappingSolution, RunResult]:
    """Fix a baseline assignment, then warmup and final training on it."""
    net = build_supernet(spec, platform, make_rng(config.seed), threshold=config.threshold)
    solution = build_baseline(kind, net, config.target)
    rng = make_rng([config.seed, 0])
    warm = run_phase("warmup", net, config, train, val, rng)
    final = run_phase("final", net, config, train, val, rng)
    res = _finish_run(net, config, val, test, [warm, final], warm.val_acc)
    solution.accuracy = res.point.val_acc
    return solution, res


def _sweep_job(args):
    spec, platform, config, train, val, test, warm_state, warm_acc = args
    try:
        return train_from_warmup(spec, platform, config, train, val, test, warm_state, warm_acc)
    except Exception as e:  # one failed lambda must not stop the sweep
        log.exception("lambda %g failed", config.lam)
        return ParetoPoint(config.lam, 0.0, 0.0, 0.0, 0.0, error=f"{type(e).__name__}: {e}")


@dataclass
class SweepResult:
    points: list[ParetoPoint]
    front: list[ParetoPoint]
    runs: list[RunResult | None]
    warmup: PhaseResult


def sweep(
    lambdas: Sequence[float],
    spec: NetworkSpec,
    platform: PlatformProfile,
    config: TrainConfig,
    train: Dataset,
    val: Dataset,
    test: Dataset | None = None,
    jobs: int = 1,
) -> SweepResult:
    """One shared warmup, then search + final per lambda (optionally in worker processes)."""
    if not lambdas:
        raise ValueError("sweep needs at least one lambda")
    net, warm = run_warmup(spec, platform, config, train, val)
    state = net.state_dict()
    args = [(spec, platform, replace(config, lam=float(lam)), train, val, test, state, warm.val_acc) for lam in lambdas]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_sweep_job, args))
    else:
        results = [_sweep_job(a) for a in args]
    points = [r.point if isinstance(r, RunResult) else r for r in results]
    runs = [r if isinstance(r, RunResult) else None for r in results]
    return SweepResult(points, pareto_front(points), runs, warm)


SUMMARY_FIELDS = ("lam", "val_acc", "test_acc", "cycles", "energy", "warmup_acc", "artifact", "error")


def write_rows(path: str | Path, rows: Sequence[dict], fields: Sequence[str]):
    """Deterministic CSV: fixed header, floats in repr form."""
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(fields), lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(float(v)) if isinstance(v, (float, np.floating)) else v for k, v in r.items()})


def spearman(x: Sequence[float], y: Sequence[float]) -> float:
    """Rank correlation with average ranks for ties."""
    from scipy.stats import spearmanr

    return float(spearmanr(x, y).statistic)
