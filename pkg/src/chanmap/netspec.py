"""Declarative network descriptions and the shipped seed architectures."""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from .functional import conv_out_size

FORMAT_VERSION = 1
LAYER_KINDS = ("conv", "linear", "add", "gap")
MODES = ("auto", "precision", "operator")


class SpecError(ValueError):
    pass


@dataclass(frozen=True)
class LayerGeometry:
    c_in: int
    c_out: int
    kernel: int
    stride: int
    padding: int
    in_h: int
    in_w: int
    out_h: int
    out_w: int
    op: str = "std-conv"  # std-conv | dw-conv | linear

    @property
    def macs(self) -> int:
        per_out = self.kernel * self.kernel * (1 if self.op == "dw-conv" else self.c_in)
        return per_out * self.c_out * self.out_h * self.out_w


@dataclass
class LayerSpec:
    name: str
    kind: str
    inputs: list[str] = field(default_factory=list)
    c_in: int = 0
    c_out: int = 0
    kernel: int = 1
    stride: int = 1
    padding: int = 0
    depthwise: bool = False
    bn: bool = True
    act: str | None = "relu"
    mappable: bool = False
    mode: str = "auto"

    @property
    def op(self) -> str:
        if self.kind == "linear":
            return "linear"
        return "dw-conv" if self.depthwise else "std-conv"

    @property
    def has_weights(self) -> bool:
        return self.kind in ("conv", "linear")


@dataclass
class NetworkSpec:
    name: str
    input_shape: tuple[int, int, int]
    num_classes: int
    layers: list[LayerSpec]
    format_version: int = FORMAT_VERSION

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        self._shapes = self.validate()

    # ------------------------------------------------------------ structure
    def inputs_of(self, idx: int) -> list[str]:
        layer = self.layers[idx]
        if layer.inputs:
            return list(layer.inputs)
        return ["input"] if idx == 0 else [self.layers[idx - 1].name]

    def validate(self) -> dict[str, tuple[int, int, int]]:
        """Infer every layer's output shape, raising :class:`SpecError` on any inconsistency."""
        if self.format_version != FORMAT_VERSION:
            raise SpecError(f"unsupported network spec format_version {self.format_version}")
        shapes: dict[str, tuple[int, int, int]] = {"input": self.input_shape}
        for i, layer in enumerate(self.layers):
            if layer.kind not in LAYER_KINDS:
                raise SpecError(f"layer {layer.name}: unknown kind {layer.kind!r}")
            if layer.name in shapes:
                raise SpecError(f"duplicate layer name {layer.name!r}")
            if layer.mode not in MODES:
                raise SpecError(f"layer {layer.name}: unknown mode {layer.mode!r}")
            srcs = self.inputs_of(i)
            for s in srcs:
                if s not in shapes:
                    raise SpecError(f"layer {layer.name}: input {s!r} is not an earlier layer")
            c, h, w = shapes[srcs[0]]
            if layer.kind == "conv":
                if len(srcs) != 1 or layer.c_in != c:
                    raise SpecError(f"layer {layer.name}: c_in={layer.c_in} but input has {c} channels")
                if layer.depthwise and layer.c_in != layer.c_out:
                    raise SpecError(f"layer {layer.name}: depthwise requires c_in == c_out")
                oh = conv_out_size(h, layer.kernel, layer.stride, layer.padding)
                ow = conv_out_size(w, layer.kernel, layer.stride, layer.padding)
                if oh < 1 or ow < 1 or layer.c_out < 1:
                    raise SpecError(f"layer {layer.name}: empty output")
                shapes[layer.name] = (layer.c_out, oh, ow)
            elif layer.kind == "linear":
                if (h, w) != (1, 1) or layer.c_in != c:
                    raise SpecError(f"layer {layer.name}: linear needs a pooled [{layer.c_in}] input, got {(c, h, w)}")
                shapes[layer.name] = (layer.c_out, 1, 1)
            elif layer.kind == "add":
                if len(srcs) < 2:
                    raise SpecError(f"layer {layer.name}: add needs at least two inputs")
                for s in srcs[1:]:
                    if shapes[s] != shapes[srcs[0]]:
                        raise SpecError(f"layer {layer.name}: add of mismatched shapes {shapes[s]} and {shapes[srcs[0]]}")
                shapes[layer.name] = shapes[srcs[0]]
            else:
                shapes[layer.name] = (c, 1, 1)
        last = self.layers[-1]
        if last.kind != "linear" or last.c_out != self.num_classes:
            raise SpecError("the last layer must be a linear classifier with num_classes outputs")
        return shapes

    def output_shape(self, name: str) -> tuple[int, int, int]:
        return self._shapes[name]

    def layer(self, name: str) -> LayerSpec:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(name)

    def geometry(self, name: str) -> LayerGeometry:
        idx = [layer.name for layer in self.layers].index(name)
        layer = self.layers[idx]
        if not layer.has_weights:
            raise SpecError(f"layer {name} has no geometry (kind {layer.kind})")
        _, h, w = self._shapes[self.inputs_of(idx)[0]]
        _, oh, ow = self._shapes[name]
        return LayerGeometry(layer.c_in, layer.c_out, layer.kernel, layer.stride, layer.padding, h, w, oh, ow, layer.op)

    # -------------------------------------------------------------------- io
    def to_dict(self) -> dict:
        defaults = LayerSpec("", "conv")
        layers = []
        for layer in self.layers:
            d = {"name": layer.name, "kind": layer.kind}
            for f in fields(LayerSpec)[2:]:
                v = getattr(layer, f.name)
                if v != getattr(defaults, f.name):
                    d[f.name] = list(v) if isinstance(v, list) else v
            layers.append(d)
        return {
            "format_version": self.format_version,
            "name": self.name,
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "layers": layers,
        }

    @classmethod
    def from_dict(cls, d: dict) -> NetworkSpec:
        known = {f.name for f in fields(LayerSpec)}
        try:
            layers = []
            for ld in d["layers"]:
                extra = set(ld) - known
                if extra:
                    raise SpecError(f"layer {ld.get('name')}: unknown keys {sorted(extra)}")
                layers.append(LayerSpec(**ld))
            return cls(
                name=d["name"],
                input_shape=tuple(d["input_shape"]),
                num_classes=int(d["num_classes"]),
                layers=layers,
                format_version=int(d.get("format_version", -1)),
            )
        except (KeyError, TypeError) as e:
            raise SpecError(f"malformed network spec: {e}") from e

    def save(self, path: str | Path):
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))

    @classmethod
    def load(cls, path: str | Path) -> NetworkSpec:
        return cls.from_dict(yaml.safe_load(Path(path).read_text()))


# ------------------------------------------------------------------ builtins
def _conv(name, c_in, c_out, k=3, s=1, act="relu", inputs=None, mappable=True, **kw):
    return LayerSpec(name, "conv", list(inputs or []), c_in, c_out, k, s, k // 2, act=act, mappable=mappable, **kw)


def _round8(x: float) -> int:
    return max(8, int(round(x / 8)) * 8)


def tiny_cnn(num_classes: int = 10, input_hw: int = 32, in_ch: int = 3) -> NetworkSpec:
    """Three convolutions and a classifier; the quick-test seed."""
    layers = [
        _conv("conv1", in_ch, 8),
        _conv("conv2", 8, 16, s=2),
        _conv("conv3", 16, 16, s=2),
        LayerSpec("pool", "gap", bn=False, act=None),
        LayerSpec("fc", "linear", c_in=16, c_out=num_classes, bn=False, act=None),
    ]
    return NetworkSpec("tiny-cnn", (in_ch, input_hw, input_hw), num_classes, layers)


def resnet8_slim(num_classes: int = 10, input_hw: int = 32, in_ch: int = 3, width: int = 8) -> NetworkSpec:
    """Residual seed: stem, three basic blocks (two with 1x1 projection shortcuts), classifier."""
    c1, c2, c3 = width, 2 * width, 4 * width
    layers = [
        _conv("stem", in_ch, c1),
        _conv("b1a", c1, c1),
        _conv("b1b", c1, c1, act=None),
        LayerSpec("add1", "add", ["b1b", "stem"], bn=False),
        _conv("b2a", c1, c2, s=2),
        _conv("b2b", c2, c2, act=None),
        _conv("b2s", c1, c2, k=1, s=2, act=None, inputs=["add1"]),
        LayerSpec("add2", "add", ["b2b", "b2s"], bn=False),
        _conv("b3a", c2, c3, s=2),
        _conv("b3b", c3, c3, act=None),
        _conv("b3s", c2, c3, k=1, s=2, act=None, inputs=["add2"]),
        LayerSpec("add3", "add", ["b3b", "b3s"], bn=False),
        LayerSpec("pool", "gap", bn=False, act=None),
        LayerSpec("fc", "linear", c_in=c3, c_out=num_classes, bn=False, act=None),
    ]
    return NetworkSpec("resnet8-slim", (in_ch, input_hw, input_hw), num_classes, layers)


def mbv1_micro(width: float = 1.0, num_classes: int = 10, input_hw: int = 32, in_ch: int = 3) -> NetworkSpec:
    """MobileNetV1-style seed where each depthwise-separable block is a 3x3 layer.

    Layers with equal input/output channels become std-vs-depthwise choices on
    platforms with a depthwise engine.
    """
    a, b, c = _round8(16 * width), _round8(32 * width), _round8(64 * width)
    layers = [
        _conv("stem", in_ch, a, mappable=False),
        _conv("l1", a, a),
        _conv("l2", a, b, s=2),
        _conv("l3", b, b),
        _conv("l4", b, c, s=2),
        _conv("l5", c, c),
        _conv("l6", c, c),
        LayerSpec("pool", "gap", bn=False, act=None),
        LayerSpec("fc", "linear", c_in=c, c_out=num_classes, bn=False, act=None),
    ]
    return NetworkSpec(f"mbv1-micro-w{width:g}", (in_ch, input_hw, input_hw), num_classes, layers)


def builtin_specs(num_classes: int = 10, input_hw: int = 32, in_ch: int = 3) -> dict[str, NetworkSpec]:
    specs = {
        "tiny-cnn": tiny_cnn(num_classes, input_hw, in_ch),
        "resnet8-slim": resnet8_slim(num_classes, input_hw, in_ch),
    }
    for w in (0.25, 0.5, 1.0):
        specs[f"mbv1-micro-w{w:g}"] = mbv1_micro(w, num_classes, input_hw, in_ch)
    specs["mbv1-micro"] = specs["mbv1-micro-w1"]
    return specs


def resolve_spec(name_or_path: str, num_classes: int = 10, input_hw: int = 32, in_ch: int = 3) -> NetworkSpec:
    """A builtin name, or a path to a YAML spec file."""
    builtins = builtin_specs(num_classes, input_hw, in_ch)
    if name_or_path in builtins:
        return builtins[name_or_path]
    path = Path(name_or_path)
    if not path.exists():
        raise SpecError(f"unknown network {name_or_path!r} (not a builtin, no such file)")
    return NetworkSpec.load(path)
