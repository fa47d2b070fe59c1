"""A lambda sweep on mbv1-micro over the darkside-like platform.

Each mapped layer chooses how many of its leading channels stay on the
cluster (standard conv) while the rest become depthwise on the DWE. Raising
lambda trades accuracy for cycles; the printout lists every point, the Pareto
front and the two single-CU baselines.

Pass a CIFAR-10 binary directory as the first argument to use real data;
otherwise synthetic blobs stand in (about 4 minutes on one core).
"""

import sys

from chanmap import build_supernet, resolve_platform, resolve_spec
from chanmap.data import gen_synthetic, load_cifar10_binary
from chanmap.search import TrainConfig, build_baseline, spearman, sweep
from chanmap.tensor import make_rng

spec, platform = resolve_spec("mbv1-micro"), resolve_platform("darkside-like")
if len(sys.argv) > 1:
    full = load_cifar10_binary(sys.argv[1], limit=5000)
    epochs = {"warmup": 10, "search": 8, "final": 4}
else:
    full = gen_synthetic(10, 1250, seed=0, noise=2.0)
    epochs = {"warmup": 4, "search": 3, "final": 2}
train, val = full.split_validation(0.2, seed=0)

lambdas = [0.0, 0.1, 0.3, 1.0, 3.0]
config = TrainConfig.from_dict({"epochs": epochs, "patience": epochs, "lambda_mode": "normalized"})
result = sweep(lambdas, spec, platform, config, train, val)

baselines = {kind: build_baseline(kind, build_supernet(spec, platform, make_rng(0))).cycles for kind in ("all-on-cu:cluster", "all-on-cu:dwe")}
print(f"warmup val acc {result.warmup.val_acc:.3f}")
for kind, cycles in baselines.items():
    print(f"{kind:18s} {cycles:10.0f} cycles")
print("\n lambda  val acc     cycles  on front")
for p in result.points:
    print(f"{p.lam:7.2f} {p.val_acc:8.3f} {p.cycles:10.0f}  {'*' if p in result.front else ''}")
print(f"\nspearman(lambda, cycles) = {spearman(lambdas, [p.cycles for p in result.points]):.2f}")
