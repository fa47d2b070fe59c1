"""From a searched network to a deployable split-layer mapping.

The pass runs in three steps:

1. discretize: every mapped layer is pinned to its argmax assignment and the
   quantizer statistics are frozen;
2. reorder (per-channel mode only): output channels are stable-sorted by CU so
   each CU owns a contiguous block, and consumers get the matching input
   permutation;
3. split: every layer becomes one sub-layer per CU that owns channels, with
   quantized weights materialized in the CU's format.

The artifact is a JSON description plus a little-endian tensor blob next to it
(same stem, ``.bin``). Replay needs nothing else.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import functional as F
from .hwmodel import CostReport, CostTerm, CUProfile, PlatformProfile, latency_cost
from .mapping import MappedConvLayer
from .netspec import NetworkSpec
from .network import Network
from .quant import activation_codes, quantize_activation_array
from .tensor import DTYPE, no_grad

FORMAT_VERSION = 1
BLOB_DTYPES = {"<i1": np.int8, "<f4": np.float32, "<f8": np.float64, "<i8": np.int64}


class ExportError(ValueError):
    pass


# ------------------------------------------------------------------ spaces
def channel_spaces(spec: NetworkSpec) -> dict[str, str]:
    """Map every tensor name to its channel space.

    Tensors joined by an add, and a pooling output with its input, must share
    one channel order; union-find groups them.
    """
    parent = {"input": "input", **{layer.name: layer.name for layer in spec.layers}}

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for i, layer in enumerate(spec.layers):
        if layer.kind in ("add", "gap") or (layer.kind == "conv" and layer.depthwise):
            for src in spec.inputs_of(i):
                ra, rb = find(layer.name), find(src)
                if ra != rb:
                    parent[max(ra, rb)] = min(ra, rb)
    return {name: find(name) for name in parent}


@dataclass
class ReorderResult:
    network: Network
    perms: dict[str, np.ndarray]  # layer -> permutation of its output channels
    secondary: set[str] = field(default_factory=set)  # join producers whose CU blocks may be split into runs


def _permute_outputs(net: Network, name: str, perm: np.ndarray):
    m = net.modules[name]
    if isinstance(m, MappedConvLayer):
        for w in m.weights:
            w.data = np.ascontiguousarray(w.data[perm])
        bank = m.theta_bank
        bank.logits.data = np.ascontiguousarray(bank.logits.data[perm])
        if bank.hard is not None:
            bank.hard = bank.hard[perm]
        for b in m.branches:
            b.quantizer.permute(perm)
    else:
        m.weight.data = np.ascontiguousarray(m.weight.data[perm])
        m.quantizer.permute(perm)
    if m.bias is not None:
        m.bias.data = np.ascontiguousarray(m.bias.data[perm])
    if name in net.bns:
        bn = net.bns[name]
        bn.gamma.data = np.ascontiguousarray(bn.gamma.data[perm])
        bn.beta.data = np.ascontiguousarray(bn.beta.data[perm])
        bn.running_mean[...] = bn.running_mean[perm]
        bn.running_var[...] = bn.running_var[perm]


def _permute_inputs(net: Network, name: str, perm: np.ndarray):
    m = net.modules[name]
    weights = m.weights if isinstance(m, MappedConvLayer) else [m.weight]
    for w in weights:
        w.data = np.ascontiguousarray(w.data[:, perm])


def freeze_all(net: Network):
    """Freeze quantizers that are still dynamic; scales pinned by final training are kept."""
    for m in net.modules.values():
        quants = [b.quantizer for b in m.branches] if isinstance(m, MappedConvLayer) else [m.quantizer]
        if any(q.frozen is None for q in quants):
            m.freeze_quantizers()


def reorder_channels(net: Network, assignment: dict[str, np.ndarray] | None = None) -> ReorderResult:
    """Group each layer's channels by CU without changing the network function.

    Works on a copy. The permutation of a channel space is the stable sort of
    its first mapped producer's assignment; it is applied to the outputs of
    every producer in the space and to the inputs of every consumer. Spaces
    containing the network input or the logits are never permuted.
    """
    spec = net.spec
    for layer in spec.layers:
        if layer.kind == "conv" and layer.depthwise:
            raise ExportError(f"cannot reorder through depthwise layer {layer.name}: use contiguous (operator) mode")
    for m in net.mapped_layers():
        if m.mode != "precision":
            raise ExportError(f"layer {m.name} uses operator alternatives: channels must stay contiguous, reordering is impossible")
    out = copy.deepcopy(net)
    if assignment is not None:
        out.apply_assignment(assignment)
    elif not out.is_hard():
        out.apply_assignment(out.assignment())
    freeze_all(out)

    spaces = channel_spaces(spec)
    by_space: dict[str, list[str]] = {}
    for layer in spec.layers:
        if layer.kind == "conv":
            by_space.setdefault(spaces[layer.name], []).append(layer.name)
    perms: dict[str, np.ndarray] = {}
    secondary: set[str] = set()
    mapped = {m.name for m in out.mapped_layers()}
    space_perm: dict[str, np.ndarray] = {}
    for root, producers in by_space.items():
        if root == spaces["input"]:
            continue
        leaders = [p for p in producers if p in mapped]
        if not leaders:
            continue
        perm = np.argsort(out.modules[leaders[0]].theta_bank.hard, kind="stable")
        secondary.update(leaders[1:])
        space_perm[root] = perm
        for p in producers:
            _permute_outputs(out, p, perm)
            perms[p] = perm
    for i, layer in enumerate(spec.layers):
        if layer.has_weights:
            src_space = spaces[spec.inputs_of(i)[0]]
            if src_space in space_perm:
                _permute_inputs(out, layer.name, space_perm[src_space])
    out.reordered = True
    return ReorderResult(out, perms, secondary)


# ----------------------------------------------------------------- artifact
@dataclass
class MappingArtifact:
    meta: dict
    tensors: dict[str, np.ndarray]

    @property
    def spec(self) -> NetworkSpec:
        return NetworkSpec.from_dict(self.meta["network"])

    @property
    def platform(self) -> PlatformProfile:
        return PlatformProfile.from_dict(self.meta["platform"])

    @property
    def cost(self) -> CostReport:
        return CostReport.from_dict(self.meta["cost"])

    def layer(self, name: str) -> dict:
        for entry in self.meta["layers"]:
            if entry["name"] == name:
                return entry
        raise KeyError(name)

    def tensor(self, ref: str) -> np.ndarray:
        if ref not in self.tensors:
            raise ExportError(f"artifact misses tensor {ref!r}")
        return self.tensors[ref]

    def save(self, path: str | Path) -> Path:
        """Write ``path`` (JSON) and its ``.bin`` sidecar."""
        path = Path(path)
        blob_path = path.with_suffix(".bin")
        index, chunks, offset = {}, [], 0
        for name in sorted(self.tensors):
            arr = self.tensors[name]
            code = f"<{arr.dtype.kind}{arr.dtype.itemsize}"
            if code not in BLOB_DTYPES:
                raise ExportError(f"tensor {name}: unsupported dtype {arr.dtype}")
            raw = np.ascontiguousarray(arr, dtype=code).tobytes()
            index[name] = {"offset": offset, "nbytes": len(raw), "dtype": code, "shape": list(arr.shape)}
            chunks.append(raw)
            offset += len(raw)
        blob = b"".join(chunks)
        blob_path.write_bytes(blob)
        meta = dict(self.meta)
        meta["blob"] = {"file": blob_path.name, "sha256": hashlib.sha256(blob).hexdigest(), "tensors": index}
        path.write_text(json.dumps(meta, indent=1, sort_keys=False) + "\n")
        return path

    @classmethod
    def load(cls, path: str | Path) -> MappingArtifact:
        path = Path(path)
        meta = json.loads(path.read_text())
        if meta.get("format_version") != FORMAT_VERSION:
            raise ExportError(f"unsupported artifact format_version {meta.get('format_version')}")
        info = meta.pop("blob")
        blob = (path.parent / info["file"]).read_bytes()
        if hashlib.sha256(blob).hexdigest() != info["sha256"]:
            raise ExportError("tensor blob checksum mismatch")
        tensors = {}
        for name, t in info["tensors"].items():
            dt = np.dtype(t["dtype"])
            count = t["nbytes"] // dt.itemsize
            tensors[name] = np.frombuffer(blob, dt, count, t["offset"]).reshape(t["shape"]).copy()
        return cls(meta, tensors)


def _runs(idx: np.ndarray) -> list[list[int]]:
    """Maximal runs of consecutive integers as [start, stop) pairs."""
    if idx.size == 0:
        return []
    breaks = np.flatnonzero(np.diff(idx) != 1)
    starts = np.concatenate([[idx[0]], idx[breaks + 1]])
    stops = np.concatenate([idx[breaks] + 1, [idx[-1] + 1]])
    return [[int(a), int(b)] for a, b in zip(starts, stops)]


def _sublayer(tensors, layer: str, k: int, cu: CUProfile, op: str, quantizer, w: np.ndarray, idx: np.ndarray) -> dict:
    codes, scale = quantizer.codes(w)
    key = f"{layer}.s{k}"
    tensors[f"{key}.weight"] = np.ascontiguousarray(codes[idx])
    desc = {
        "cu": cu.name,
        "operator": op,
        "precision": quantizer.precision,
        "ranges": _runs(idx),
        "groups": int(idx.size) if op == "dw-conv" else 1,
        "weight": f"{key}.weight",
        "scale": None,
    }
    if scale is not None:
        tensors[f"{key}.scale"] = np.ascontiguousarray(scale[idx], dtype=np.float64)
        desc["scale"] = f"{key}.scale"
    if not cu.supports(op) or cu.precision != quantizer.precision:
        raise ExportError(f"layer {layer}: CU {cu.name} cannot run {op} at {quantizer.precision}")
    return desc


def split_sublayers(net: Network, reorder: ReorderResult | None = None) -> MappingArtifact:
    """Describe every layer as per-CU sub-layers over contiguous channel ranges.

    ``net`` must carry hard assignments with each CU's channels in one block,
    except for join producers listed in ``reorder.secondary``, whose blocks may
    consist of several runs.
    """
    spec, platform = net.spec, net.platform
    secondary = reorder.secondary if reorder is not None else set()
    perms = reorder.perms if reorder is not None else {}
    tensors: dict[str, np.ndarray] = {}
    layers = []
    for i, layer in enumerate(spec.layers):
        entry: dict = {"name": layer.name, "kind": layer.kind, "act": layer.act}
        if not layer.has_weights:
            layers.append(entry)
            continue
        m = net.modules[layer.name]
        c_out = layer.c_out
        subs = []
        if isinstance(m, MappedConvLayer):
            a = m.theta_bank.hard
            if a is None:
                raise ExportError(f"layer {layer.name}: no discrete assignment; discretize first")
            entry["mode"] = m.mode
            entry["assignment"] = a.tolist()
            entry["cus"] = [{"cu": b.cu.name, "operator": b.op} for b in m.branches]
            if m.mode == "operator":
                entry["split"] = int((a == 0).sum())
            for j, b in enumerate(m.branches):
                idx = np.flatnonzero(a == j)
                if idx.size == 0:
                    continue
                if len(_runs(idx)) > 1 and layer.name not in secondary:
                    raise ExportError(f"layer {layer.name}: channels of CU {b.cu.name} are not grouped; reorder first")
                w = m.weights[0] if m.mode == "precision" else m.weights[j]
                subs.append(_sublayer(tensors, layer.name, j, b.cu, b.op, b.quantizer, w.data, idx))
        else:
            entry["mode"] = None
            entry["cus"] = [{"cu": m.cu.name, "operator": m.op}]
            subs.append(_sublayer(tensors, layer.name, 0, m.cu, m.op, m.quantizer, m.weight.data, np.arange(c_out)))
        subs.sort(key=lambda d: d["ranges"][0][0])
        covered = sorted(r for d in subs for r in d["ranges"])
        if covered[0][0] != 0 or covered[-1][1] != c_out or any(a[1] != b[0] for a, b in zip(covered, covered[1:])):
            raise ExportError(f"layer {layer.name}: sub-layer ranges do not tile [0, {c_out})")
        entry["sublayers"] = subs
        entry["permutation"] = perms.get(layer.name, np.arange(c_out)).tolist()
        if m.bias is not None:
            tensors[f"{layer.name}.bias"] = m.bias.data.copy()
            entry["bias"] = f"{layer.name}.bias"
        if layer.name in net.bns:
            bn = net.bns[layer.name]
            for k, v in (("gamma", bn.gamma.data), ("beta", bn.beta.data), ("mean", bn.running_mean), ("var", bn.running_var)):
                tensors[f"{layer.name}.bn.{k}"] = np.asarray(v, DTYPE).copy()
            entry["bn"] = {k: f"{layer.name}.bn.{k}" for k in ("gamma", "beta", "mean", "var")} | {"eps": 1e-5}
        entry["geometry"] = {"stride": layer.stride, "padding": layer.padding, "kernel": layer.kernel}
        layers.append(entry)
    _, report = latency_cost(net, platform, exact=True)
    meta = {
        "format_version": FORMAT_VERSION,
        "network": spec.to_dict(),
        "platform": platform.to_dict(),
        "activation_bits": platform.activation_bits,
        "layers": layers,
        "cost": report.to_dict(),
    }
    return MappingArtifact(meta, tensors)


def export_network(net: Network, inputs: np.ndarray | None = None) -> tuple[MappingArtifact, ReorderResult | None]:
    """Discretize, reorder when legal, split, and (given inputs) verify."""
    mode = {m.mode for m in net.mapped_layers()}
    if "operator" in mode or not mode:
        work = copy.deepcopy(net)
        if not work.is_hard():
            work.apply_assignment(work.assignment())
        freeze_all(work)
        reorder = None
    else:
        reorder = reorder_channels(net)
        work = reorder.network
    work.set_quant(True)
    artifact = split_sublayers(work, reorder)
    if inputs is not None:
        rep = verify_artifact(artifact, work, inputs)
        if not rep.passed:
            raise ExportError(f"exported artifact deviates by {rep.max_abs_dev:.3g} (first at layer {rep.layer})")
        artifact.meta["verification"] = {"inputs": int(len(inputs)), "max_abs_dev": rep.max_abs_dev, "output_sha256": rep.checksum}
    return artifact, reorder


# ------------------------------------------------------------------- replay
def _dequantize(codes: np.ndarray, scale: np.ndarray | None) -> np.ndarray:
    if scale is None:
        return np.asarray(codes, DTYPE)
    return (codes.reshape(codes.shape[0], -1) * scale[:, None]).astype(DTYPE).reshape(codes.shape)


def _replay_layer(art: MappingArtifact, entry: dict, x: np.ndarray, kind: str, bits: int | None) -> np.ndarray:
    geo = entry.get("geometry", {})
    stride, padding = geo.get("stride", 1), geo.get("padding", 0)
    c_out = sum(b - a for s in entry["sublayers"] for a, b in s["ranges"])
    q = None
    if bits:
        q, s_x = activation_codes(x, bits)
        xf = quantize_activation_array(x, bits)
    else:
        xf = x
    out = None
    for sub in entry["sublayers"]:
        idx = np.concatenate([np.arange(a, b) for a, b in sub["ranges"]])
        codes = art.tensor(sub["weight"])
        scale = art.tensor(sub["scale"]) if sub["scale"] else None
        if len(codes) != idx.size:
            raise ExportError(f"layer {entry['name']}: sub-layer on {sub['cu']} holds {len(codes)} filters for {idx.size} channels")
        dw = sub["operator"] == "dw-conv"
        if q is not None and scale is not None:
            src = q[:, idx] if dw else q
            if kind == "linear":
                y = F.linear_int(src, s_x, codes, scale)
            else:
                y = F.conv2d_int(src, s_x, codes, scale, stride, padding, sub["groups"])
        else:
            src = xf[:, idx] if dw else xf
            w = _dequantize(codes, scale)
            y = src @ w.T if kind == "linear" else F.conv2d_array(src, w, stride, padding, sub["groups"])
        if out is None:
            out = np.zeros((y.shape[0], c_out) + y.shape[2:], DTYPE)
        out[:, idx] = y
    if entry.get("bias"):
        b = art.tensor(entry["bias"])
        out = out + (b if kind == "linear" else b[None, :, None, None])
    if entry.get("bn"):
        bn = entry["bn"]
        out = F.batchnorm_eval_array(
            out, art.tensor(bn["gamma"]), art.tensor(bn["beta"]), art.tensor(bn["mean"]), art.tensor(bn["var"]), bn["eps"]
        )
    return out


def replay(art: MappingArtifact, inputs: np.ndarray) -> dict[str, np.ndarray]:
    """Run inference from the artifact alone; returns every layer's output."""
    spec = art.spec
    bits = art.meta.get("activation_bits")
    outs = {"input": np.asarray(inputs, DTYPE)}
    entries = {e["name"]: e for e in art.meta["layers"]}
    for i, layer in enumerate(spec.layers):
        srcs = [outs[s] for s in spec.inputs_of(i)]
        entry = entries[layer.name]
        if layer.kind in ("conv", "linear"):
            y = _replay_layer(art, entry, srcs[0], layer.kind, bits)
        elif layer.kind == "add":
            y = srcs[0]
            for s in srcs[1:]:
                y = y + s
        else:
            y = srcs[0].mean(axis=(2, 3))
        if layer.act == "relu":
            y = np.where(y > 0, y, 0).astype(DTYPE)
        outs[layer.name] = y
    return outs


@dataclass
class VerifyReport:
    max_abs_dev: float
    passed: bool
    layer: str | None
    per_layer: dict[str, float]
    checksum: str
    tolerance: float = 1e-4


def verify_artifact(art: MappingArtifact, reference: Network, inputs: np.ndarray, tol: float = 1e-4) -> VerifyReport:
    """Replay ``art`` and compare with ``reference`` layer by layer.

    ``reference`` is either the network the artifact was split from or the
    discretized network before reordering; in the latter case the recorded
    permutations map its activations into the artifact's channel order.
    """
    spec = art.spec
    got = replay(art, inputs)
    with no_grad():
        ref_t = reference.forward(inputs, training=False, return_all=True)
    ref = {k: v.data for k, v in ref_t.items()}
    if not getattr(reference, "reordered", False):
        spaces = channel_spaces(spec)
        space_perm = {}
        for entry in art.meta["layers"]:
            if "permutation" in entry:
                space_perm.setdefault(spaces[entry["name"]], np.asarray(entry["permutation"]))
        ref = {k: (v[:, space_perm[spaces[k]]] if spaces[k] in space_perm and v.ndim >= 2 else v) for k, v in ref.items()}
    per_layer = {}
    first_bad = None
    for layer in spec.layers:
        a, b = got[layer.name], ref[layer.name]
        if a.shape != b.shape:
            raise ExportError(f"layer {layer.name}: replay shape {a.shape} != reference {b.shape}")
        dev = float(np.abs(a.astype(np.float64) - b).max()) if a.size else 0.0
        per_layer[layer.name] = dev
        if first_bad is None and dev > tol:
            first_bad = layer.name
    logits = got[spec.layers[-1].name]
    max_dev = max(per_layer.values())
    checksum = hashlib.sha256(np.ascontiguousarray(logits).tobytes()).hexdigest()
    return VerifyReport(max_dev, first_bad is None, first_bad, per_layer, checksum, tol)


def artifact_cost(art: MappingArtifact) -> CostReport:
    """Exact cost recomputed from the artifact's channel counts."""
    spec, platform = art.spec, art.platform
    items = []
    for entry in art.meta["layers"]:
        if "sublayers" not in entry:
            continue
        counts = {}
        for sub in entry["sublayers"]:
            counts[(sub["cu"], sub["operator"])] = sum(b - a for a, b in sub["ranges"])
        terms = [CostTerm(platform.cu(c["cu"]), c["operator"], counts.get((c["cu"], c["operator"]), 0)) for c in entry["cus"]]
        items.append((entry["name"], spec.geometry(entry["name"]), terms))
    _, report = latency_cost(items, platform, exact=True)
    return report


__all__ = [
    "ExportError",
    "MappingArtifact",
    "ReorderResult",
    "VerifyReport",
    "artifact_cost",
    "channel_spaces",
    "export_network",
    "reorder_channels",
    "replay",
    "split_sublayers",
    "verify_artifact",
]
