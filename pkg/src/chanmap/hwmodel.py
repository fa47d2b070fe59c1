"""Per-CU latency models, smooth layer max, and platform latency/energy costs.

A CU computes its share ``n`` of a layer's output channels with a
lane-parallel roofline plus a fixed per-layer overhead::

    std-conv / linear:  A * r(n / P_out) * r(C_in / P_in) * O_x * O_y * K^2 + B * [n > 0]
    dw-conv:            A * r(n / P_out) * O_x * O_y * K^2 + B * [n > 0]

``r`` is the integer ceiling when evaluating a discrete mapping and the
identity during training. Energy is kept in mW*cycles until reporting.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from .netspec import LayerGeometry
from .quant import PRECISION_RANK
from .tensor import DTYPE, Tensor, as_tensor, make_node, stack

OPERATORS = ("std-conv", "dw-conv", "linear", "any")


class UnsupportedOperator(ValueError):
    pass


class ProfileError(ValueError):
    pass


@dataclass(frozen=True)
class CUProfile:
    name: str
    operator: str = "any"
    precision: str = "int8"
    p_out: int = 1
    p_in: int = 1
    cycles_per_step: float = 1.0
    overhead_cycles: float = 0.0
    active_power_mw: float = 0.0
    capacity: int | None = None  # max K^2 * C_in held by a weight array; None = unbounded

    def __post_init__(self):
        if self.operator not in OPERATORS:
            raise ProfileError(f"CU {self.name}: unknown operator {self.operator!r}")
        if self.precision not in PRECISION_RANK:
            raise ProfileError(f"CU {self.name}: unknown precision {self.precision!r}")
        if self.p_out < 1 or self.p_in < 1:
            raise ProfileError(f"CU {self.name}: parallel lanes must be >= 1")
        if self.cycles_per_step <= 0 or self.overhead_cycles < 0 or self.active_power_mw < 0:
            raise ProfileError(f"CU {self.name}: negative or zero cost constants")

    def supports(self, op: str) -> bool:
        if self.operator == "any":
            return True
        if self.operator == "std-conv":
            return op in ("std-conv", "linear")
        return self.operator == op

    def fits(self, geom: LayerGeometry, op: str | None = None) -> bool:
        op = op or geom.op
        if not self.supports(op):
            return False
        if self.capacity is None or op == "dw-conv":
            return True
        return geom.kernel * geom.kernel * geom.c_in <= self.capacity


@dataclass(frozen=True)
class PlatformProfile:
    name: str
    cus: tuple[CUProfile, ...]
    idle_power_mw: float = 0.0
    clock_hz: float = 260e6
    default_cu: str | None = None
    activation_bits: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "cus", tuple(self.cus))
        names = [c.name for c in self.cus]
        if len(self.cus) < 2:
            raise ProfileError(f"platform {self.name}: needs at least two CUs")
        if len(set(names)) != len(names):
            raise ProfileError(f"platform {self.name}: duplicate CU names {names}")
        if self.default_cu is not None and self.default_cu not in names:
            raise ProfileError(f"platform {self.name}: unknown default CU {self.default_cu!r}")
        if self.clock_hz <= 0 or self.idle_power_mw < 0:
            raise ProfileError(f"platform {self.name}: bad clock or idle power")

    def cu(self, name: str) -> CUProfile:
        for c in self.cus:
            if c.name == name:
                return c
        raise KeyError(f"unknown CU {name!r} on platform {self.name}")

    def index(self, name: str) -> int:
        return [c.name for c in self.cus].index(self.cu(name).name)

    @property
    def fallback(self) -> CUProfile:
        """CU that runs layers which are not mapped."""
        if self.default_cu is not None:
            return self.cu(self.default_cu)
        for c in self.cus:
            if c.operator == "any":
                return c
        return self.cus[0]

    def cu_for(self, op: str) -> CUProfile:
        fb = self.fallback
        if fb.supports(op):
            return fb
        for c in self.cus:
            if c.supports(op):
                return c
        raise UnsupportedOperator(f"platform {self.name}: no CU executes {op}")

    @property
    def mode(self) -> str:
        """``precision`` when std-conv CUs differ in weight format, else ``operator``."""
        std = [c for c in self.cus if c.supports("std-conv")]
        if len({c.precision for c in std}) >= 2:
            return "precision"
        if std and any(c.operator == "dw-conv" for c in self.cus):
            return "operator"
        raise ProfileError(f"platform {self.name}: CUs differ neither in precision nor in operator")

    # -------------------------------------------------------------------- io
    def to_dict(self) -> dict:
        d = {
            "name": self.name,
            "idle_power_mw": self.idle_power_mw,
            "clock_hz": self.clock_hz,
            "default_cu": self.default_cu,
            "activation_bits": self.activation_bits,
            "cus": [asdict(c) for c in self.cus],
        }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> PlatformProfile:
        try:
            cus = []
            for cd in d["cus"]:
                if "name" not in cd:
                    raise ProfileError("every CU section needs a name")
                cus.append(CUProfile(**cd))
            return cls(
                name=d["name"],
                cus=tuple(cus),
                idle_power_mw=float(d.get("idle_power_mw", 0.0)),
                clock_hz=float(d.get("clock_hz", 260e6)),
                default_cu=d.get("default_cu"),
                activation_bits=d.get("activation_bits"),
            )
        except (KeyError, TypeError) as e:
            raise ProfileError(f"malformed platform profile: {e}") from e

    @classmethod
    def load(cls, path: str | Path) -> PlatformProfile:
        return cls.from_dict(yaml.safe_load(Path(path).read_text()))

    def save(self, path: str | Path):
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))


def builtin_platforms() -> dict[str, PlatformProfile]:
    out = {}
    for entry in resources.files("chanmap.platforms").iterdir():
        if entry.name.endswith(".yaml"):
            p = PlatformProfile.from_dict(yaml.safe_load(entry.read_text()))
            out[p.name] = p
    return out


def resolve_platform(name_or_path: str) -> PlatformProfile:
    builtins = builtin_platforms()
    if name_or_path in builtins:
        return builtins[name_or_path]
    path = Path(name_or_path)
    if not path.exists():
        raise ProfileError(f"unknown platform {name_or_path!r} (not a builtin, no such file)")
    return PlatformProfile.load(path)


# ------------------------------------------------------------------ latency
def _geom_factors(geom: LayerGeometry, op: str) -> tuple[int, int]:
    """(input channels seen per output channel, spatial*kernel steps)."""
    if op == "linear":
        return geom.c_in, 1
    k2 = geom.kernel * geom.kernel
    return (1 if op == "dw-conv" else geom.c_in), geom.out_h * geom.out_w * k2


def cu_steps(profile: CUProfile, geom: LayerGeometry, n: int, op: str | None = None, ceil: bool = True):
    """Inner-step count for ``n`` output channels (integer when ``ceil``)."""
    op = op or geom.op
    c_in, spatial = _geom_factors(geom, op)
    if ceil:
        lanes_out = -(-int(n) // profile.p_out)
        lanes_in = 1 if op == "dw-conv" else -(-c_in // profile.p_in)
        return lanes_out * lanes_in * spatial
    lanes_in = 1.0 if op == "dw-conv" else c_in / profile.p_in
    return (n / profile.p_out) * lanes_in * spatial


def cu_latency(profile: CUProfile, geom: LayerGeometry, n, exact: bool = True, op: str | None = None, ceil: bool | None = None):
    """Cycles for ``profile`` to produce ``n`` of the layer's output channels.

    ``exact`` expects an integer ``n`` and returns a float. Otherwise ``n`` may
    be a Tensor of effective channels and the result is a differentiable Tensor.
    ``ceil`` defaults to ``exact``.
    """
    op = op or geom.op
    if not profile.supports(op):
        raise UnsupportedOperator(f"CU {profile.name} ({profile.operator}) cannot execute {op}")
    ceil = exact if ceil is None else ceil
    if exact:
        if int(n) != n or not 0 <= n <= geom.c_out:
            raise ValueError(f"exact latency needs an integer channel count in [0, {geom.c_out}], got {n}")
        if n == 0:
            return 0.0
        return profile.cycles_per_step * cu_steps(profile, geom, int(n), op, ceil) + profile.overhead_cycles
    if ceil:
        raise ValueError("the relaxed latency model uses linear lane counts; pass ceil=False")
    n = as_tensor(n)
    per_channel = profile.cycles_per_step * cu_steps(profile, geom, 1, op, ceil=False)
    overhead = profile.overhead_cycles if float(n.data) > 0 else 0.0
    return n * per_channel + overhead


# --------------------------------------------------------------- smooth max
def smooth_max_array(values: np.ndarray, tau: float | None = None, alpha: float = 0.1) -> float:
    """Plain float64 evaluation of :func:`smooth_max` (no tape)."""
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    if v.size == 0:
        raise ValueError("smooth_max of an empty vector")
    if tau is not None and tau <= 0:
        raise ValueError(f"smooth_max temperature must be positive, got {tau}")
    t = alpha * v.mean() if tau is None else tau
    if t <= 0:
        return float(v.max())
    w = np.exp((v - v.max()) / t)
    w /= w.sum()
    return float(np.clip((w * v).sum(), v.min(), v.max()))


def smooth_max(values: Tensor | Sequence[Tensor], tau: float | None = None, alpha: float = 0.1) -> Tensor:
    """Softmax-weighted mean ``sum(softmax(v / tau) * v)``.

    With ``tau=None`` the temperature is ``alpha * mean(v)`` and is
    differentiated through like any other input.
    """
    if not isinstance(values, Tensor):
        if len(values) == 0:
            raise ValueError("smooth_max of an empty vector")
        values = stack([as_tensor(v).reshape(()) for v in values])
    if values.size == 0:
        raise ValueError("smooth_max of an empty vector")
    if tau is not None and tau <= 0:
        raise ValueError(f"smooth_max temperature must be positive, got {tau}")
    v = values.data.astype(np.float64).reshape(-1)
    n = v.size
    t = alpha * v.mean() if tau is None else float(tau)
    if t <= 0:
        # all-zero latencies: nothing to weigh
        return make_node(np.asarray(v.max(), dtype=DTYPE), (values,), lambda g: (np.zeros(values.shape, DTYPE),))
    w = np.exp((v - v.max()) / t)
    w /= w.sum()
    s = float((w * v).sum())
    out = np.clip(s, v.min(), v.max())

    def backward(g):
        grad = w + w * (v - s) / t
        if tau is None:
            var_w = float((w * (v - s) ** 2).sum())
            grad = grad - (alpha / n) * var_w / (t * t)
        return ((float(g) * grad).astype(DTYPE).reshape(values.shape),)

    return make_node(np.asarray(out, dtype=DTYPE), (values,), backward)


# --------------------------------------------------------------- aggregation
@dataclass
class LayerCost:
    name: str
    channels: dict[str, float]
    cycles: dict[str, float]
    max_cycles: float
    energy: float


@dataclass
class CostReport:
    platform: str
    layers: list[LayerCost] = field(default_factory=list)
    total_cycles: float = 0.0
    latency_s: float = 0.0
    energy_mw_cycles: float = 0.0
    energy_uj: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> CostReport:
        return cls(
            platform=d["platform"],
            layers=[LayerCost(**lc) for lc in d["layers"]],
            total_cycles=d["total_cycles"],
            latency_s=d["latency_s"],
            energy_mw_cycles=d["energy_mw_cycles"],
            energy_uj=d["energy_uj"],
        )


@dataclass
class CostTerm:
    """One CU's share of one layer: which CU, which operator, how many channels."""

    cu: CUProfile
    op: str
    n: object  # int in exact mode, Tensor in relaxed mode


def _evaluate(layers, platform: PlatformProfile, exact: bool, ceil: bool | None, tau: float | None):
    """Shared walk for latency and energy. Returns (sum M, sum active, report)."""
    report = CostReport(platform.name)
    total_m = 0.0 if exact else None
    total_active = 0.0 if exact else None
    for name, geom, terms in layers:
        lats = [cu_latency(t.cu, geom, t.n, exact=exact, op=t.op, ceil=ceil) for t in terms]
        if exact:
            m = max(lats)
            active = 0.0
            for t, lat in zip(terms, lats):
                active += t.cu.active_power_mw * lat
            energy_l = active + platform.idle_power_mw * m
        else:
            lat_t = [as_tensor(lat).reshape(()) for lat in lats]
            m = lat_t[0] if len(lat_t) == 1 else smooth_max(lat_t, tau)
            active = None
            for t, lat in zip(terms, lat_t):
                term = lat * t.cu.active_power_mw
                active = term if active is None else active + term
            energy_l = active + m * platform.idle_power_mw
        total_m = m if total_m is None else total_m + m
        total_active = active if total_active is None else total_active + active
        fl = (lambda x: float(x)) if exact else (lambda x: float(as_tensor(x).data))
        report.layers.append(
            LayerCost(
                name=name,
                channels={t.cu.name: fl(t.n) for t in terms},
                cycles={t.cu.name: fl(lat) for t, lat in zip(terms, lats)},
                max_cycles=fl(m),
                energy=fl(energy_l),
            )
        )
    return total_m, total_active, report


def _finish(report: CostReport, platform: PlatformProfile, total_m, total_active, exact: bool):
    fl = float if exact else (lambda x: float(as_tensor(x).data))
    energy = total_active + total_m * platform.idle_power_mw if not exact else total_active + platform.idle_power_mw * total_m
    report.total_cycles = fl(total_m)
    report.latency_s = report.total_cycles / platform.clock_hz
    report.energy_mw_cycles = fl(energy)
    report.energy_uj = report.energy_mw_cycles / platform.clock_hz * 1e3
    return energy


def _layers_of(network, exact: bool):
    if hasattr(network, "cost_terms"):
        return network.cost_terms(exact)
    return network


def latency_cost(network, platform: PlatformProfile, exact: bool = True, ceil: bool | None = None, tau: float | None = None):
    """Sum over layers of the (smooth, when relaxed) max of per-CU latencies.

    ``network`` is either a :class:`~chanmap.network.Network` or an iterable of
    ``(name, geometry, [CostTerm, ...])``. Returns ``(cost, CostReport)``.
    """
    total_m, total_active, report = _evaluate(_layers_of(network, exact), platform, exact, ceil, tau)
    _finish(report, platform, total_m, total_active, exact)
    return total_m, report


def energy_cost(network, platform: PlatformProfile, exact: bool = True, ceil: bool | None = None, tau: float | None = None):
    """Active energy of every CU plus idle power over the layer latency, summed over layers."""
    total_m, total_active, report = _evaluate(_layers_of(network, exact), platform, exact, ceil, tau)
    energy = _finish(report, platform, total_m, total_active, exact)
    return energy, report


def exact_layer_cost(platform: PlatformProfile, geom: LayerGeometry, terms: Sequence[CostTerm], target: str = "latency") -> float:
    lats = [cu_latency(t.cu, geom, t.n, exact=True, op=t.op) for t in terms]
    m = max(lats)
    if target == "latency":
        return m
    return sum(t.cu.active_power_mw * lat for t, lat in zip(terms, lats)) + platform.idle_power_mw * m


def cost_value(report: CostReport, target: str) -> float:
    if target == "latency":
        return report.total_cycles
    if target == "energy":
        return report.energy_mw_cycles
    raise ValueError(f"unknown cost target {target!r}")

