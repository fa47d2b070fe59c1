"""Search-time mapped layers.

A :class:`MappedConvLayer` evaluates one convolution on every candidate CU
and mixes the candidates per output channel with trainable probabilities.
Two parametrizations exist:

* per-channel: a ``[C_out, N]`` logit matrix, row-wise softmax. Used when the
  CUs differ in weight precision; the channels can be regrouped afterwards.
* contiguous: ``C_out + 1`` logits over split positions ``k``. Channel ``i``
  goes to branch 0 with probability ``P(k > i)``, so the branch-0 share is
  non-increasing in the channel index and discretizes to a contiguous prefix.
  Mandatory for std-vs-depthwise choices, where regrouping is impossible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import functional as F
from .hwmodel import CUProfile
from .netspec import LayerGeometry
from .quant import PRECISION_RANK, WeightQuantizer
from .tensor import DTYPE, Tensor, as_tensor, concat, matmul, softmax


class MappingError(ValueError):
    pass


def contiguous_theta(split_probs: Tensor) -> Tensor:
    """Per-channel branch-0 probability from a distribution over split positions.

    ``theta[i] = sum(split_probs[k] for k > i)`` for ``i < C_out``.
    """
    split_probs = as_tensor(split_probs)
    p = split_probs.data
    if p.ndim != 1 or p.size < 2:
        raise MappingError(f"split probabilities must be a vector of C_out + 1 >= 2 entries, got {p.shape}")
    if np.any(p < -1e-7) or abs(float(p.astype(np.float64).sum()) - 1.0) > 1e-5:
        raise MappingError("split probabilities must be non-negative and sum to 1")
    c = p.size - 1
    suffix = np.triu(np.ones((c, c + 1), dtype=DTYPE), k=1)  # suffix[i, k] = [k > i]
    return matmul(Tensor(suffix), split_probs.reshape(c + 1, 1)).reshape(c)


class ThetaBank:
    """Trainable assignment logits for one layer."""

    def __init__(self, c_out: int, n_branches: int, contiguous: bool = False, tau: float = 1.0):
        if n_branches < 2:
            raise MappingError("a mapped layer needs at least two branches")
        if contiguous and n_branches != 2:
            raise MappingError("contiguous split mode supports exactly two branches")
        self.c_out = c_out
        self.n_branches = n_branches
        self.contiguous = contiguous
        self.tau = tau
        shape = (c_out + 1,) if contiguous else (c_out, n_branches)
        self.logits = Tensor(np.zeros(shape, dtype=DTYPE), requires_grad=True, name="theta")
        self.hard: np.ndarray | None = None

    @property
    def frozen(self) -> bool:
        return not self.logits.requires_grad

    @frozen.setter
    def frozen(self, value: bool):
        self.logits.requires_grad = not value
        if value:
            self.logits.grad = None

    def probs(self) -> Tensor:
        """Row-wise softmax (per-channel) or the split distribution (contiguous)."""
        return softmax(self.logits * (1.0 / self.tau), axis=-1)

    def theta(self) -> Tensor:
        """``[C_out, N]`` per-channel branch probabilities."""
        if self.hard is not None:
            return Tensor(np.eye(self.n_branches, dtype=DTYPE)[self.hard])
        p = self.probs()
        if not self.contiguous:
            return p
        first = contiguous_theta(p).reshape(self.c_out, 1)
        return concat([first, 1.0 - first], axis=1)

    def discretize(self) -> np.ndarray:
        """Largest-probability branch per channel; ties go to the lowest branch index."""
        if self.hard is not None:
            return self.hard.copy()
        p = self.probs().data
        if self.contiguous:
            k = int(np.argmax(p))
            return np.array([0] * k + [1] * (self.c_out - k), dtype=np.int64)
        return np.argmax(p, axis=1).astype(np.int64)

    def set_hard(self, assignment: np.ndarray):
        assignment = np.asarray(assignment, dtype=np.int64)
        if assignment.shape != (self.c_out,) or assignment.min() < 0 or assignment.max() >= self.n_branches:
            raise MappingError(f"assignment must be {self.c_out} branch indices in [0, {self.n_branches})")
        if self.contiguous and np.any(np.diff(assignment) < 0):
            raise MappingError("contiguous layers need a sorted (prefix/suffix) assignment")
        self.hard = assignment.copy()
        self.frozen = True


@dataclass
class Branch:
    cu: CUProfile
    op: str  # std-conv | dw-conv
    quantizer: WeightQuantizer


def kaiming(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(DTYPE)


class MappedConvLayer:
    """A convolution whose output channels are split among ``N`` CU branches."""

    def __init__(self, name: str, geometry: LayerGeometry, mode: str, branches: list[Branch], rng: np.random.Generator, tau: float = 1.0, bias: bool = False):
        if mode not in ("precision", "operator"):
            raise MappingError(f"unknown mapping mode {mode!r}")
        if len(branches) < 2:
            raise MappingError(f"layer {name}: a mapped layer needs N >= 2 branches")
        ops = {b.op for b in branches}
        if mode == "precision" and ops != {"std-conv"}:
            raise MappingError(f"layer {name}: precision alternatives must share one operator shape, got {sorted(ops)}")
        if "dw-conv" in ops and geometry.c_in != geometry.c_out:
            raise MappingError(f"layer {name}: a depthwise branch needs C_in == C_out ({geometry.c_in} != {geometry.c_out})")
        self.name = name
        self.geometry = geometry
        self.mode = mode
        self.branches = branches
        self.theta_bank = ThetaBank(geometry.c_out, len(branches), contiguous=(mode == "operator"), tau=tau)
        g = geometry
        k = g.kernel
        if mode == "precision":
            self.weights = [Tensor(kaiming(rng, (g.c_out, g.c_in, k, k)), requires_grad=True, name=f"{name}.weight")]
        else:
            self.weights = [
                Tensor(kaiming(rng, self.branch_shape(b)), requires_grad=True, name=f"{name}.w{j}")
                for j, b in enumerate(branches)
            ]
        self.bias = Tensor(np.zeros(g.c_out, DTYPE), requires_grad=True, name=f"{name}.bias") if bias else None
        self.quant_enabled = True

    # ------------------------------------------------------------- helpers
    def branch_shape(self, b: Branch) -> tuple[int, int, int, int]:
        g = self.geometry
        return (g.c_out, 1 if b.op == "dw-conv" else g.c_in, g.kernel, g.kernel)

    def branch_weight(self, j: int) -> Tensor:
        w = self.weights[0] if self.mode == "precision" else self.weights[j]
        return self.branches[j].quantizer(w) if self.quant_enabled else w

    def branch_groups(self, j: int) -> int:
        return self.geometry.c_in if self.branches[j].op == "dw-conv" else 1

    def branch_output(self, x: Tensor, j: int) -> Tensor:
        g = self.geometry
        return F.conv2d(x, self.branch_weight(j), None, g.stride, g.padding, self.branch_groups(j))

    def parameters(self) -> list[Tensor]:
        return self.weights + ([self.bias] if self.bias is not None else [])

    @property
    def cu_names(self) -> list[str]:
        return [b.cu.name for b in self.branches]

    def precision_rank(self, j: int) -> tuple[int, int]:
        """Ordering used by the Min-Cost tie-break: more precise, then more general operator."""
        b = self.branches[j]
        return PRECISION_RANK[b.cu.precision], int(b.op == "std-conv")

    # ------------------------------------------------------------- forward
    def forward(self, x: Tensor) -> Tensor:
        y = blend_weights(self, x) if self.mode == "precision" else blend_outputs(self, x)
        if self.bias is not None:
            y = y + self.bias.reshape(1, -1, 1, 1)
        return y

    def forward_int(self, x_codes: np.ndarray, x_scale: float) -> np.ndarray | None:
        """Eval path on integer codes for a hard assignment; ``None`` when not applicable."""
        a = self.theta_bank.hard
        if a is None:
            return None
        g = self.geometry
        out = None
        for j, b in enumerate(self.branches):
            idx = np.flatnonzero(a == j)
            if idx.size == 0:
                continue
            w = self.weights[0] if self.mode == "precision" else self.weights[j]
            codes, scale = b.quantizer.codes(w.data)
            if scale is None:
                return None
            dw = b.op == "dw-conv"
            y = F.conv2d_int(x_codes[:, idx] if dw else x_codes, x_scale, codes[idx], scale[idx], g.stride, g.padding, idx.size if dw else 1)
            if out is None:
                out = np.zeros((y.shape[0], g.c_out) + y.shape[2:], DTYPE)
            out[:, idx] = y
        if self.bias is not None:
            out = out + self.bias.data[None, :, None, None]
        return out

    def freeze_quantizers(self):
        for j, b in enumerate(self.branches):
            w = self.weights[0] if self.mode == "precision" else self.weights[j]
            b.quantizer.freeze(w.data)

    def assignment(self) -> np.ndarray:
        return discretize(self)


def blend_outputs(layer: MappedConvLayer, x: Tensor) -> Tensor:
    """Per-channel convex mix of every branch's full output."""
    theta = layer.theta_bank.theta()
    out = None
    ref = None
    for j in range(len(layer.branches)):
        y = layer.branch_output(x, j)
        if ref is None:
            ref = y.shape
        elif y.shape != ref:
            raise MappingError(f"layer {layer.name}: branch {j} output {y.shape} != branch 0 output {ref}")
        term = y * theta[:, j].reshape(1, -1, 1, 1)
        out = term if out is None else out + term
    return out


def effective_weights(layer: MappedConvLayer) -> Tensor:
    if layer.mode != "precision":
        raise MappingError(f"layer {layer.name}: weight blending needs precision alternatives of one operator shape")
    theta = layer.theta_bank.theta()
    w_eff = None
    for j in range(len(layer.branches)):
        term = layer.branch_weight(j) * theta[:, j].reshape(-1, 1, 1, 1)
        w_eff = term if w_eff is None else w_eff + term
    return w_eff


def blend_weights(layer: MappedConvLayer, x: Tensor) -> Tensor:
    """Single convolution with the theta-weighted mix of quantized filters."""
    g = layer.geometry
    return F.conv2d(x, effective_weights(layer), None, g.stride, g.padding, 1)


def effective_channels(layer: MappedConvLayer, j: int) -> Tensor:
    """Expected number of output channels on branch ``j`` (differentiable)."""
    return layer.theta_bank.theta()[:, j].sum()


def discretize(layer: MappedConvLayer) -> np.ndarray:
    return layer.theta_bank.discretize()
