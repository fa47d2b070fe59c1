"""Independent reference computations shared by the test modules."""

import contextlib
import sys

import numpy as np

from chanmap import functional as F
from chanmap.quant import quantize_affine_array, quantize_ternary_array
from chanmap.tensor import Tensor


@contextlib.contextmanager
def float64_engine():
    """Run the engine in float64 so central differences are not limited by float32 round-off."""
    mods = [m for name, m in sys.modules.items() if name.startswith("chanmap") and hasattr(m, "DTYPE")]
    saved = [m.DTYPE for m in mods]
    for m in mods:
        m.DTYPE = np.float64
    try:
        yield
    finally:
        for m, d in zip(mods, saved):
            m.DTYPE = d


def numeric_grad(f, arrays, h=1e-3):
    """Central differences of the scalar ``f()`` with respect to each array, in place."""
    grads = []
    for a in arrays:
        g = np.zeros(a.shape, dtype=np.float64)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = float(a[i])
            a[i] = old + h
            fp = float(f())
            a[i] = old - h
            fm = float(f())
            a[i] = old
            g[i] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def rel_error(a, b) -> float:
    a = np.asarray(a, np.float64).ravel()
    b = np.asarray(b, np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-8)
    return float(np.linalg.norm(a - b) / denom)


def gradcheck(build, arrays, h=1e-3, seed=0):
    """Compare float32 tape gradients of ``sum(R * build(*tensors))`` against central differences.

    ``build`` maps leaf tensors to an output tensor; ``R`` is a fixed random
    projection so every output element contributes. Returns the worst
    relative error over the inputs.
    """
    arrays = [np.asarray(a, np.float32).copy() for a in arrays]
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    out = build(*leaves)
    proj = np.random.default_rng([seed, 7919]).uniform(-1.0, 1.0, out.shape).astype(np.float32)
    (out * Tensor(proj)).sum().backward()
    analytic = [t.grad for t in leaves]

    wide = [a.astype(np.float64) for a in arrays]

    def f():
        return float((build(*[Tensor(a) for a in wide]).data * proj).sum())

    with float64_engine():
        numeric = numeric_grad(f, wide, h)
    return max(rel_error(a, n) for a, n in zip(analytic, numeric))


def away_from_zero(rng, shape, margin=0.05):
    """Uniform values in [-1, 1] avoiding a band around 0 (kinks of relu/abs)."""
    x = rng.uniform(margin, 1.0, shape) * rng.choice([-1.0, 1.0], shape)
    return x.astype(np.float32)




# ------------------------------------------------------------ gradient cases
# Each case draws a random small instance: (build, input arrays).
def _case(fn):
    GRAD_CASES[fn.__name__.removeprefix("case_")] = fn
    return fn


GRAD_CASES: dict = {}


@_case
def case_add(rng):
    a, b = rng.uniform(-1, 1, (3, 4)), rng.uniform(-1, 1, (1, 4))
    return (lambda x, y: x + y), [a, b]


@_case
def case_sub(rng):
    return (lambda x, y: x - y), [rng.uniform(-1, 1, (2, 3)), rng.uniform(-1, 1, (2, 3))]


@_case
def case_mul(rng):
    return (lambda x, y: x * y), [rng.uniform(-1, 1, (2, 3, 2)), rng.uniform(-1, 1, (3, 1))]


@_case
def case_div(rng):
    b = rng.uniform(0.5, 1.5, (2, 3)) * rng.choice([-1, 1], (2, 3))
    return (lambda x, y: x / y), [rng.uniform(-1, 1, (2, 3)), b]


@_case
def case_exp(rng):
    return (lambda x: x.exp()), [rng.uniform(-1, 1, (3, 3))]


@_case
def case_log(rng):
    return (lambda x: x.log()), [rng.uniform(0.5, 2.0, (3, 3))]


@_case
def case_relu(rng):
    from chanmap.tensor import relu

    return relu, [away_from_zero(rng, (4, 5))]


@_case
def case_sum_mean(rng):
    return (lambda x: x.sum(axis=1, keepdims=True) + x.mean(axis=0)), [rng.uniform(-1, 1, (3, 3))]


@_case
def case_reshape_transpose(rng):
    return (lambda x: x.reshape(3, 4).transpose(1, 0)), [rng.uniform(-1, 1, (2, 6))]


@_case
def case_getitem(rng):
    return (lambda x: x[:, 1:3] * 2.0), [rng.uniform(-1, 1, (3, 4))]


@_case
def case_concat_stack(rng):
    from chanmap.tensor import concat, stack

    return (lambda x, y: concat([x, y], axis=1) + stack([x[:, :1].reshape(3), y[:, 0]]).sum()), [
        rng.uniform(-1, 1, (3, 1)),
        rng.uniform(-1, 1, (3, 2)),
    ]


@_case
def case_matmul(rng):
    return (lambda x, y: x @ y), [rng.uniform(-1, 1, (3, 4)), rng.uniform(-1, 1, (4, 2))]


@_case
def case_softmax(rng):
    from chanmap.tensor import softmax

    return (lambda x: softmax(x, axis=-1)), [rng.uniform(-2, 2, (3, 4))]


@_case
def case_log_softmax(rng):
    from chanmap.tensor import log_softmax

    return (lambda x: log_softmax(x, axis=1)), [rng.uniform(-2, 2, (3, 4))]


@_case
def case_cross_entropy(rng):
    from chanmap.tensor import cross_entropy

    labels = rng.integers(0, 5, 4)
    return (lambda x: cross_entropy(x, labels)), [rng.uniform(-2, 2, (4, 5))]


@_case
def case_conv2d(rng):
    from chanmap import functional as F

    stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
    return (lambda x, w, b: F.conv2d(x, w, b, stride, pad)), [
        rng.uniform(-1, 1, (2, 3, 5, 5)),
        rng.uniform(-1, 1, (4, 3, 3, 3)),
        rng.uniform(-1, 1, 4),
    ]


@_case
def case_conv2d_depthwise(rng):
    from chanmap import functional as F

    stride = int(rng.integers(1, 3))
    return (lambda x, w: F.conv2d(x, w, None, stride, 1, groups=3)), [rng.uniform(-1, 1, (2, 3, 5, 5)), rng.uniform(-1, 1, (3, 1, 3, 3))]


@_case
def case_linear(rng):
    from chanmap import functional as F

    return (lambda x, w, b: F.linear(x, w, b)), [rng.uniform(-1, 1, (3, 4)), rng.uniform(-1, 1, (2, 4)), rng.uniform(-1, 1, 2)]


@_case
def case_batchnorm_train(rng):
    from chanmap import functional as F

    def build(x, g, b):
        return F.batchnorm2d(x, g, b, np.zeros(3, np.float32), np.ones(3, np.float32), training=True)

    return build, [rng.uniform(-1, 1, (2, 3, 2, 2)), rng.uniform(0.5, 1.5, 3), rng.uniform(-1, 1, 3)]


@_case
def case_batchnorm_eval(rng):
    from chanmap import functional as F

    mean, var = rng.uniform(-0.5, 0.5, 3).astype(np.float32), rng.uniform(0.5, 2, 3).astype(np.float32)

    def build(x, g, b):
        return F.batchnorm2d(x, g, b, mean.copy(), var.copy(), training=False)

    return build, [rng.uniform(-1, 1, (2, 3, 3, 3)), rng.uniform(0.5, 1.5, 3), rng.uniform(-1, 1, 3)]


@_case
def case_avgpool(rng):
    from chanmap import functional as F

    return (lambda x: F.avgpool2d(x, 2) * 1.0 + F.global_avgpool(x).sum()), [rng.uniform(-1, 1, (2, 2, 4, 4))]


def _operator_layer(rng, c, precision="float", k=3):
    from chanmap.hwmodel import CUProfile
    from chanmap.mapping import Branch, MappedConvLayer
    from chanmap.netspec import LayerGeometry
    from chanmap.quant import WeightQuantizer

    geom = LayerGeometry(c, c, k, 1, k // 2, 4, 4, 4, 4)
    branches = [
        Branch(CUProfile("cluster", "any", "int8" if precision != "float" else "float", 8), "std-conv", WeightQuantizer(precision)),
        Branch(CUProfile("dwe", "dw-conv", "int8" if precision != "float" else "float", 16), "dw-conv", WeightQuantizer(precision)),
    ]
    return MappedConvLayer("op", geom, "operator", branches, rng)


def _precision_layer(rng, c_in, c_out, precisions=("int8", "ternary"), k=3):
    from chanmap.hwmodel import CUProfile
    from chanmap.mapping import Branch, MappedConvLayer
    from chanmap.netspec import LayerGeometry
    from chanmap.quant import WeightQuantizer

    geom = LayerGeometry(c_in, c_out, k, 1, k // 2, 4, 4, 4, 4)
    branches = [Branch(CUProfile(f"cu{j}", "any", p, 4), "std-conv", WeightQuantizer(p)) for j, p in enumerate(precisions)]
    return MappedConvLayer("prec", geom, "precision", branches, rng)


@_case
def case_blend_outputs(rng):
    from chanmap.mapping import blend_outputs

    c = int(rng.integers(2, 4))
    layer = _operator_layer(rng, c)

    def build(x, logits, w0, w1):
        layer.theta_bank.logits = logits
        layer.weights = [w0, w1]
        return blend_outputs(layer, x)

    return build, [rng.uniform(-1, 1, (2, c, 4, 4)), rng.uniform(-1, 1, c + 1), rng.uniform(-1, 1, (c, c, 3, 3)), rng.uniform(-1, 1, (c, 1, 3, 3))]


@_case
def case_blend_outputs_quantized(rng):
    # weights stay constant; theta logits and the input are the free variables
    from chanmap.mapping import blend_outputs

    c = int(rng.integers(2, 4))
    layer = _operator_layer(rng, c, precision="int8")

    def build(x, logits):
        layer.theta_bank.logits = logits
        return blend_outputs(layer, x)

    return build, [rng.uniform(-1, 1, (2, c, 4, 4)), rng.uniform(-1, 1, c + 1)]


@_case
def case_blend_weights(rng):
    # identity quantizers make both branches equal, so theta is held fixed here
    # and its gradient is covered by the quantized case
    from chanmap.mapping import blend_weights

    c_in, c_out = int(rng.integers(1, 4)), int(rng.integers(2, 4))
    layer = _precision_layer(rng, c_in, c_out, precisions=("float", "float"))
    layer.theta_bank.logits = Tensor(rng.uniform(-1, 1, (c_out, 2)))

    def build(x, w):
        layer.weights = [w]
        return blend_weights(layer, x)

    return build, [rng.uniform(-1, 1, (2, c_in, 4, 4)), rng.uniform(-1, 1, (c_out, c_in, 3, 3))]


@_case
def case_blend_weights_quantized(rng):
    from chanmap.mapping import blend_weights

    c_in, c_out = int(rng.integers(1, 4)), int(rng.integers(2, 4))
    layer = _precision_layer(rng, c_in, c_out)

    def build(x, logits):
        layer.theta_bank.logits = logits
        return blend_weights(layer, x)

    return build, [rng.uniform(-1, 1, (2, c_in, 4, 4)), rng.uniform(-1, 1, (c_out, 2))]


@_case
def case_contiguous_theta(rng):
    from chanmap.mapping import contiguous_theta
    from chanmap.tensor import softmax

    c = int(rng.integers(2, 9))
    return (lambda z: contiguous_theta(softmax(z))), [rng.uniform(-2, 2, c + 1)]


def random_cu(rng, name, op="any", precision="int8"):
    from chanmap.hwmodel import CUProfile

    return CUProfile(
        name,
        op,
        precision,
        p_out=int(rng.integers(1, 5)),
        p_in=int(rng.integers(1, 5)),
        cycles_per_step=float(rng.uniform(0.25, 2.0)),
        overhead_cycles=float(rng.uniform(0, 20)),
        active_power_mw=float(rng.uniform(0, 3)),
    )


def random_geometry(rng, op="std-conv", max_c=6):
    from chanmap.netspec import LayerGeometry

    c_in = int(rng.integers(1, max_c + 1))
    c_out = c_in if op == "dw-conv" else int(rng.integers(2, max_c + 1))
    k = int(rng.choice([1, 3]))
    o = int(rng.integers(1, 4))
    return LayerGeometry(c_in, c_out, k, 1, k // 2, o, o, o, o, op)


def _relaxed_items(rng, logits_list, geoms, cus):
    from chanmap.hwmodel import CostTerm
    from chanmap.tensor import softmax

    items = []
    for i, (z, g) in enumerate(zip(logits_list, geoms)):
        theta = softmax(z, axis=-1)
        terms = [CostTerm(cu, g.op, theta[:, j].sum()) for j, cu in enumerate(cus)]
        items.append((f"l{i}", g, terms))
    return items


def _cost_case(rng, which):
    from chanmap.hwmodel import PlatformProfile, energy_cost, latency_cost

    cus = (random_cu(rng, "a"), random_cu(rng, "b", precision="ternary"))
    platform = PlatformProfile("rand", cus, idle_power_mw=float(rng.uniform(0, 1)))
    geoms = [random_geometry(rng) for _ in range(2)]
    fn = latency_cost if which == "latency" else energy_cost

    def build(z0, z1):
        value, _ = fn(_relaxed_items(rng, [z0, z1], geoms, cus), platform, exact=False)
        return value

    return build, [rng.uniform(-1, 1, (g.c_out, 2)) for g in geoms]


@_case
def case_latency_cost(rng):
    return _cost_case(rng, "latency")


@_case
def case_energy_cost(rng):
    return _cost_case(rng, "energy")


# ------------------------------------------------------------ STE surrogate
def ste_gradcheck(quantize, w, seed=0, h=1e-3):
    """Tape gradient of ``sum(R * Q(w))`` against central differences of the identity surrogate ``sum(R * w)``."""
    w = np.asarray(w, np.float32)
    leaf = Tensor(w.copy(), requires_grad=True)
    out = quantize(leaf)
    proj = np.random.default_rng([seed, 7919]).uniform(-1.0, 1.0, out.shape).astype(np.float32)
    (out * Tensor(proj)).sum().backward()
    arr = w.copy()
    (numeric,) = numeric_grad(lambda: float((arr.astype(np.float64) * proj).sum()), [arr], h)
    return rel_error(leaf.grad, numeric)


def _ste_ternary(w):
    from chanmap.quant import quantize_ternary

    return quantize_ternary(w)


def _ste_affine(w):
    from chanmap.quant import quantize_affine

    return quantize_affine(w, 8)


STE_CASES = {"ste_ternary": _ste_ternary, "ste_affine": _ste_affine}


# ------------------------------------------------------------ cost oracles
def count_cycles(profile, geom, n):
    """Brute-force schedule count: one step per (output lane group, input lane group, pixel, tap)."""
    if n == 0:
        return 0.0
    out_groups = len(range(0, n, profile.p_out))
    if geom.op == "dw-conv":
        in_groups = 1
    else:
        in_groups = len(range(0, geom.c_in, profile.p_in))
    steps = 0
    for _ in range(out_groups):
        for _ in range(in_groups):
            steps += geom.out_h * geom.out_w * geom.kernel * geom.kernel
    return profile.cycles_per_step * steps + profile.overhead_cycles


def exhaustive_two_cu_split(hi, lo, geom):
    """Channels for the higher-precision CU ``hi`` minimizing max latency; ties keep more on ``hi``."""
    best = None
    for n_hi in range(geom.c_out + 1):
        cost = max(count_cycles(hi, geom, n_hi), count_cycles(lo, geom, geom.c_out - n_hi))
        if best is None or cost < best[0] or (cost == best[0] and n_hi > best[1]):
            best = (cost, n_hi)
    return best[1], best[0]


def single_layer_spec(c_in, c_out, k, hw, stride=1):
    from chanmap.netspec import LayerSpec, NetworkSpec

    layers = [
        LayerSpec("conv", "conv", c_in=c_in, c_out=c_out, kernel=k, stride=stride, padding=k // 2, mappable=True),
        LayerSpec("pool", "gap", bn=False, act=None),
        LayerSpec("fc", "linear", c_in=c_out, c_out=2, bn=False, act=None),
    ]
    return NetworkSpec("single", (c_in, hw, hw), 2, layers)


# ------------------------------------------------------------ network fixtures
def random_hard_network(rng, name="resnet8-slim", platform="diana-like", contiguous_ok=True):
    """A supernet with random weights, BN statistics and a random hard assignment, quantizers on."""
    from chanmap import build_supernet, resolve_platform, resolve_spec

    net = build_supernet(resolve_spec(name), resolve_platform(platform), np.random.default_rng(int(rng.integers(1 << 31))))
    for bn in net.bns.values():
        c = bn.running_mean.size
        bn.running_mean[...] = rng.normal(0, 0.1, c)
        bn.running_var[...] = rng.uniform(0.5, 2.0, c)
        bn.gamma.data = rng.uniform(0.5, 1.5, c).astype(bn.gamma.data.dtype)
        bn.beta.data = rng.normal(0, 0.1, c).astype(bn.beta.data.dtype)
    assignment = {}
    for m in net.mapped_layers():
        c = m.geometry.c_out
        if m.theta_bank.contiguous:
            k = int(rng.integers(0, c + 1))
            assignment[m.name] = (np.arange(c) >= k).astype(np.int64)
        else:
            assignment[m.name] = rng.integers(0, len(m.branches), c)
    net.apply_assignment(assignment)
    net.set_quant(True)
    return net


# ------------------------------------------------------------ mapping oracles
def blend_loop(branch_outputs, theta):
    """Per-channel scalar loop: out[:, c] = sum_j theta[c, j] * Y_j[:, c]."""
    out = np.zeros_like(branch_outputs[0], dtype=np.float64)
    for c in range(theta.shape[0]):
        for j, y in enumerate(branch_outputs):
            out[:, c] += float(theta[c, j]) * y[:, c]
    return out


def blend_reference(layer, x):
    """Output blend evaluated from scratch: quantize each branch, convolve, mix per channel."""
    w = layer.weights[0].data
    qs = {"int8": lambda a: quantize_affine_array(a, 8), "ternary": quantize_ternary_array}
    g = layer.geometry
    ys = [F.conv2d_array(x, qs[b.quantizer.precision](w), g.stride, g.padding) for b in layer.branches]
    return blend_loop(ys, layer.theta_bank.theta().data)
