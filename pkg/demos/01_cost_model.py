"""How the analytical cost model scores a channel split.

Walks one 3x3 convolution of tiny-cnn through the diana-like platform: exact
cycles per CU, the per-layer max, the smooth relaxation the search optimizes,
and the Min-Cost split that an accuracy-unaware mapper would choose.
"""

import numpy as np

from chanmap import build_supernet, resolve_platform, resolve_spec
from chanmap.hwmodel import CostTerm, cu_latency, exact_layer_cost, latency_cost, smooth_max_array
from chanmap.search import build_baseline
from chanmap.tensor import Tensor, make_rng

platform = resolve_platform("diana-like")
spec = resolve_spec("tiny-cnn")
geom = spec.geometry("conv2")
digital, analog = platform.cu("digital"), platform.cu("analog")
print(f"conv2: {geom.c_in}->{geom.c_out} channels, {geom.kernel}x{geom.kernel}, output {geom.out_h}x{geom.out_w}")

# Sweeping the number of channels kept on the digital CU shows the staircase
# caused by lane groups and the crossover where the slower CU dominates.
print("\n n_digital  digital  analog   layer max")
for n in range(0, geom.c_out + 1, 2):
    d = cu_latency(digital, geom, n)
    a = cu_latency(analog, geom, geom.c_out - n)
    print(f"{n:9d} {d:8.0f} {a:7.0f} {max(d, a):10.0f}")

# The search sees a differentiable stand-in: linear channel counts and a
# softmax-weighted max whose temperature follows the latencies' scale.
lat = np.array([cu_latency(digital, geom, 6), cu_latency(analog, geom, 10)])
tau = 0.1 * lat.mean()
print(f"\nsmooth max of {lat} at tau={tau:.1f}: {smooth_max_array(lat, tau):.1f} (exact {lat.max():.0f})")

relaxed = [("conv2", geom, [CostTerm(digital, "std-conv", Tensor(6.0)), CostTerm(analog, "std-conv", Tensor(10.0))])]
value, _ = latency_cost(relaxed, platform, exact=False)
exact_items = [("conv2", geom, [CostTerm(digital, "std-conv", 6), CostTerm(analog, "std-conv", 10)])]
unrounded, _ = latency_cost(exact_items, platform, exact=True, ceil=False)
rounded, _ = latency_cost(exact_items, platform, exact=True)
# the relaxation drops lane-group rounding, so it tracks the unrounded count
print(f"6/10 split: relaxed {value.item():.1f}, exact without lane rounding {unrounded:.1f}, exact {rounded:.0f}")

# Min-Cost scans every split per layer and keeps the cheapest, preferring
# more digital channels on ties.
net = build_supernet(spec, platform, make_rng(0))
solution = build_baseline("min-cost", net)
for name, a in solution.assignment.items():
    g = spec.geometry(name)
    terms = [CostTerm(digital, "std-conv", int((a == 0).sum())), CostTerm(analog, "std-conv", int((a == 1).sum()))]
    print(f"min-cost {name}: {int((a == 0).sum())} digital / {int((a == 1).sum())} analog, {exact_layer_cost(platform, g, terms):.0f} cycles")
print(f"network total: {solution.cycles:.0f} cycles, {solution.energy:.0f} mW*cycles")
