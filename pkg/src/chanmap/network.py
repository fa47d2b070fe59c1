"""Executable networks built from a :class:`NetworkSpec` and a platform."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import functional as F
from .hwmodel import CostTerm, CUProfile, PlatformProfile, UnsupportedOperator
from .mapping import Branch, MappedConvLayer, ThetaBank, kaiming
from .netspec import LayerSpec, NetworkSpec, SpecError
from .quant import WeightQuantizer, activation_codes, quantize_activation
from .tensor import DTYPE, Tensor, is_grad_enabled, relu

log = logging.getLogger(__name__)

PHASES = ("warmup", "search", "final")


class PhaseError(RuntimeError):
    pass


class PlainLayer:
    """A conv or linear layer pinned to one CU."""

    def __init__(self, spec: LayerSpec, geometry, cu: CUProfile, rng: np.random.Generator, threshold: float = 0.05):
        self.name = spec.name
        self.kind = spec.kind
        self.geometry = geometry
        self.cu = cu
        self.op = spec.op
        self.groups = spec.c_in if spec.depthwise else 1
        g = geometry
        if spec.kind == "linear":
            shape = (g.c_out, g.c_in)
        else:
            shape = (g.c_out, g.c_in // self.groups, g.kernel, g.kernel)
        self.weight = Tensor(kaiming(rng, shape), requires_grad=True, name=f"{spec.name}.weight")
        has_bias = spec.kind == "linear" or not spec.bn
        self.bias = Tensor(np.zeros(g.c_out, DTYPE), requires_grad=True, name=f"{spec.name}.bias") if has_bias else None
        self.quantizer = WeightQuantizer(cu.precision, threshold)
        self.quant_enabled = True

    def parameters(self) -> list[Tensor]:
        return [self.weight] + ([self.bias] if self.bias is not None else [])

    def effective_weight(self) -> Tensor:
        return self.quantizer(self.weight) if self.quant_enabled else self.weight

    def forward(self, x: Tensor) -> Tensor:
        w = self.effective_weight()
        if self.kind == "linear":
            return F.linear(x, w, self.bias)
        g = self.geometry
        return F.conv2d(x, w, self.bias, g.stride, g.padding, self.groups)

    def forward_int(self, x_codes: np.ndarray, x_scale: float) -> np.ndarray | None:
        codes, scale = self.quantizer.codes(self.weight.data)
        if scale is None or not self.quant_enabled:
            return None
        if self.kind == "linear":
            out = F.linear_int(x_codes, x_scale, codes, scale)
            return out + self.bias.data if self.bias is not None else out
        g = self.geometry
        out = F.conv2d_int(x_codes, x_scale, codes, scale, g.stride, g.padding, self.groups)
        return out + self.bias.data[None, :, None, None] if self.bias is not None else out

    def freeze_quantizers(self):
        self.quantizer.freeze(self.weight.data)


class BatchNorm:
    def __init__(self, name: str, channels: int):
        self.name = name
        self.gamma = Tensor(np.ones(channels, DTYPE), requires_grad=True, name=f"{name}.gamma")
        self.beta = Tensor(np.zeros(channels, DTYPE), requires_grad=True, name=f"{name}.beta")
        self.running_mean = np.zeros(channels, DTYPE)
        self.running_var = np.ones(channels, DTYPE)

    def forward(self, x: Tensor, training: bool) -> Tensor:
        return F.batchnorm2d(x, self.gamma, self.beta, self.running_mean, self.running_var, training)

    def fold(self, eps: float = 1e-5) -> tuple[np.ndarray, np.ndarray]:
        """Eval-mode per-channel (scale, shift)."""
        scale = self.gamma.data / np.sqrt(self.running_var + eps)
        return scale.astype(DTYPE), (self.beta.data - self.running_mean * scale).astype(DTYPE)


@dataclass
class Exclusion:
    layer: str
    reason: str


class Network:
    """A supernet: plain layers, mapped layers, batch norms and the wiring of its NetworkSpec."""

    def __init__(self, spec: NetworkSpec, platform: PlatformProfile):
        self.spec = spec
        self.platform = platform
        self.modules: dict[str, PlainLayer | MappedConvLayer] = {}
        self.bns: dict[str, BatchNorm] = {}
        self.excluded: list[Exclusion] = []
        self.completed: list[str] = []
        self.quant_enabled = False
        self.training = True
        self.reordered = False

    # ------------------------------------------------------------ structure
    def mapped_layers(self) -> list[MappedConvLayer]:
        return [m for m in self.modules.values() if isinstance(m, MappedConvLayer)]

    def parameters(self) -> list[Tensor]:
        params = []
        for name in self.modules:
            params += self.modules[name].parameters()
            if name in self.bns:
                params += [self.bns[name].gamma, self.bns[name].beta]
        return params

    def theta_parameters(self) -> list[Tensor]:
        return [m.theta_bank.logits for m in self.mapped_layers()]

    def assignment(self) -> dict[str, np.ndarray]:
        return {m.name: m.assignment() for m in self.mapped_layers()}

    def set_quant(self, enabled: bool):
        self.quant_enabled = enabled
        for m in self.modules.values():
            m.quant_enabled = enabled

    def set_theta_frozen(self, frozen: bool):
        for m in self.mapped_layers():
            if m.theta_bank.hard is None:
                m.theta_bank.frozen = frozen

    def is_hard(self) -> bool:
        return all(m.theta_bank.hard is not None for m in self.mapped_layers())

    def apply_assignment(self, assignment: dict[str, np.ndarray]):
        """Pin every mapped layer to a hard one-hot assignment."""
        mapped = {m.name: m for m in self.mapped_layers()}
        missing = set(mapped) - set(assignment)
        if missing:
            raise KeyError(f"assignment misses mapped layers {sorted(missing)}")
        for name, a in assignment.items():
            mapped[name].theta_bank.set_hard(a)

    # -------------------------------------------------------------- forward
    def forward(self, x, training: bool | None = None, return_all: bool = False):
        training = self.training if training is None else training
        x = x if isinstance(x, Tensor) else Tensor(x)
        outs: dict[str, Tensor] = {"input": x}
        act_bits = self.platform.activation_bits if self.quant_enabled else None
        for i, layer in enumerate(self.spec.layers):
            srcs = [outs[s] for s in self.spec.inputs_of(i)]
            if layer.kind in ("conv", "linear"):
                inp = srcs[0]
                y = None
                if act_bits and not training and not is_grad_enabled():
                    # integer-exact evaluation, insensitive to channel order
                    q, s = activation_codes(inp.data, act_bits)
                    y = self.modules[layer.name].forward_int(q, s)
                    y = Tensor(y) if y is not None else None
                if y is None:
                    if act_bits:
                        inp = quantize_activation(inp, act_bits)
                    y = self.modules[layer.name].forward(inp)
                if layer.name in self.bns:
                    y = self.bns[layer.name].forward(y, training)
            elif layer.kind == "add":
                y = srcs[0]
                for s in srcs[1:]:
                    y = y + s
            else:
                y = F.global_avgpool(srcs[0])
            if layer.act == "relu":
                y = relu(y)
            outs[layer.name] = y
        return outs if return_all else outs[self.spec.layers[-1].name]

    __call__ = forward

    # ----------------------------------------------------------------- cost
    def cost_terms_uniform(self):
        """Relaxed cost terms with every theta bank at its all-zero-logit start."""
        return self.cost_terms(exact=False, uniform=True)

    def cost_terms(self, exact: bool, uniform: bool = False):
        """``(name, geometry, [CostTerm])`` for every layer with weights."""

        items = []
        for layer in self.spec.layers:
            if not layer.has_weights:
                continue
            m = self.modules[layer.name]
            if isinstance(m, MappedConvLayer):
                if exact:
                    a = m.assignment()
                    terms = [CostTerm(b.cu, b.op, int((a == j).sum())) for j, b in enumerate(m.branches)]
                else:
                    bank = m.theta_bank
                    if uniform:
                        bank = ThetaBank(bank.c_out, bank.n_branches, bank.contiguous)
                    theta = bank.theta()
                    terms = [CostTerm(b.cu, b.op, theta[:, j].sum()) for j, b in enumerate(m.branches)]
            else:
                terms = [CostTerm(m.cu, m.op, m.geometry.c_out if exact else Tensor(float(m.geometry.c_out)))]
            items.append((layer.name, m.geometry, terms))
        return items

    # ---------------------------------------------------------------- state
    def state_dict(self) -> dict[str, np.ndarray]:
        sd: dict[str, np.ndarray] = {}
        for name, m in self.modules.items():
            if isinstance(m, MappedConvLayer):
                for j, w in enumerate(m.weights):
                    sd[f"{name}.w{j}"] = w.data.copy()
                sd[f"{name}.theta"] = m.theta_bank.logits.data.copy()
                if m.theta_bank.hard is not None:
                    sd[f"{name}.hard"] = m.theta_bank.hard.copy()
                quants = [b.quantizer for b in m.branches]
            else:
                sd[f"{name}.weight"] = m.weight.data.copy()
                quants = [m.quantizer]
            if m.bias is not None:
                sd[f"{name}.bias"] = m.bias.data.copy()
            for j, q in enumerate(quants):
                for k, v in (q.frozen or {}).items():
                    sd[f"{name}.q{j}.{k}"] = v.copy()
            if name in self.bns:
                bn = self.bns[name]
                sd[f"{name}.bn.gamma"] = bn.gamma.data.copy()
                sd[f"{name}.bn.beta"] = bn.beta.data.copy()
                sd[f"{name}.bn.running_mean"] = bn.running_mean.copy()
                sd[f"{name}.bn.running_var"] = bn.running_var.copy()
        return sd

    def load_state_dict(self, sd: dict[str, np.ndarray]):
        def put(t: Tensor, key):
            arr = np.asarray(sd[key], dtype=DTYPE)
            if arr.shape != t.shape:
                raise ValueError(f"state {key}: shape {arr.shape} != {t.shape}")
            t.data = arr.copy()

        for name, m in self.modules.items():
            if isinstance(m, MappedConvLayer):
                for j, w in enumerate(m.weights):
                    put(w, f"{name}.w{j}")
                put(m.theta_bank.logits, f"{name}.theta")
                if f"{name}.hard" in sd:
                    m.theta_bank.set_hard(sd[f"{name}.hard"])
                else:
                    m.theta_bank.hard = None
                quants = [b.quantizer for b in m.branches]
            else:
                put(m.weight, f"{name}.weight")
                quants = [m.quantizer]
            if m.bias is not None:
                put(m.bias, f"{name}.bias")
            for j, q in enumerate(quants):
                keys = [k for k in sd if k.startswith(f"{name}.q{j}.")]
                q.frozen = {k.rsplit(".", 1)[1]: np.asarray(sd[k]).copy() for k in keys} or None
            if name in self.bns:
                bn = self.bns[name]
                put(bn.gamma, f"{name}.bn.gamma")
                put(bn.beta, f"{name}.bn.beta")
                bn.running_mean[...] = sd[f"{name}.bn.running_mean"]
                bn.running_var[...] = sd[f"{name}.bn.running_var"]


def _mapped_branches(layer: LayerSpec, geom, platform: PlatformProfile, mode: str, threshold: float):
    """Branches for a mappable layer, or ``(None, reason)`` when the mode constraint fails."""
    if mode == "precision":
        cus = [c for c in platform.cus if c.fits(geom, "std-conv")]
        if len({c.precision for c in cus}) < 2:
            return None, "fewer than two weight precisions can hold this layer"
        return [Branch(c, "std-conv", WeightQuantizer(c.precision, threshold)) for c in cus], ""
    if layer.c_in != layer.c_out:
        return None, f"c_in {layer.c_in} != c_out {layer.c_out}: no depthwise alternative"
    if layer.stride < 1:
        return None, "bad stride"
    branches = []
    for c in platform.cus:
        if c.operator == "dw-conv" and not any(b.op == "dw-conv" for b in branches):
            branches.append(Branch(c, "dw-conv", WeightQuantizer(c.precision, threshold)))
        elif c.supports("std-conv") and not any(b.op == "std-conv" for b in branches):
            branches.append(Branch(c, "std-conv", WeightQuantizer(c.precision, threshold)))
    if len(branches) != 2:
        return None, "platform lacks a std-conv and a dw-conv CU"
    return branches, ""


def build_supernet(spec: NetworkSpec, platform: PlatformProfile, rng: np.random.Generator, tau: float = 1.0, threshold: float = 0.05) -> Network:
    """Turn every mappable layer that satisfies its mode constraint into a :class:`MappedConvLayer`.

    Layers that are not mappable keep a single CU: the platform default when it
    supports the operator. Mappable layers failing the constraint are recorded
    in ``network.excluded``.
    """
    net = Network(spec, platform)
    pmode = platform.mode
    for layer in spec.layers:
        if not layer.has_weights:
            continue
        geom = spec.geometry(layer.name)
        mapped = None
        if layer.mappable and layer.kind == "conv" and not layer.depthwise:
            mode = pmode if layer.mode == "auto" else layer.mode
            if mode != pmode:
                raise SpecError(f"layer {layer.name}: {mode} alternatives requested but platform {platform.name} offers {pmode}")
            branches, reason = _mapped_branches(layer, geom, platform, mode, threshold)
            if branches is None:
                if layer.mode != "auto":
                    raise SpecError(f"layer {layer.name}: {reason}")
                net.excluded.append(Exclusion(layer.name, reason))
                log.info("layer %s not mapped: %s", layer.name, reason)
            else:
                mapped = MappedConvLayer(layer.name, geom, mode, branches, rng, tau=tau, bias=not layer.bn)
        if mapped is not None:
            net.modules[layer.name] = mapped
        else:
            try:
                cu = platform.cu_for(layer.op)
            except UnsupportedOperator as e:
                raise SpecError(f"layer {layer.name}: {e}") from e
            net.modules[layer.name] = PlainLayer(layer, geom, cu, rng, threshold)
        if layer.kind == "conv" and layer.bn:
            net.bns[layer.name] = BatchNorm(layer.name, layer.c_out)
    net.set_quant(False)
    return net
