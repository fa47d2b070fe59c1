"""Search a precision mapping for tiny-cnn on the diana-like platform, then export it.

Uses synthetic class blobs so it finishes in under a minute. Try a few
lambdas (first argument): exact cycles only drop once a CU's lane group
empties, so small lambdas can shuffle channels without saving cycles. The three
phases run back to back; afterwards the mapping is split into per-CU
sub-layers, written to disk and replayed from the artifact alone.
"""

import sys
import tempfile
from pathlib import Path

import numpy as np

from chanmap import build_supernet, resolve_platform
from chanmap.data import gen_synthetic
from chanmap.export import MappingArtifact, artifact_cost, export_network, verify_artifact
from chanmap.netspec import tiny_cnn
from chanmap.search import TrainConfig, exact_cost, run_phase
from chanmap.tensor import make_rng

lam = float(sys.argv[1]) if len(sys.argv) > 1 else 0.1
spec = tiny_cnn(4)
platform = resolve_platform("diana-like")
train = gen_synthetic(4, 600, seed=0, shape=spec.input_shape, noise=2.0)
val = gen_synthetic(4, 200, seed=0, shape=spec.input_shape, noise=2.0, split="val")

config = TrainConfig.from_dict(
    {"epochs": {"warmup": 4, "search": 6, "final": 2}, "lam": lam, "lambda_mode": "normalized", "batch_size": 32}
)
net = build_supernet(spec, platform, make_rng(config.seed))
for phase in ("warmup", "search", "final"):
    res = run_phase(phase, net, config, train, val)
    cycles, _ = exact_cost(net)
    print(f"{phase:7s} val acc {res.val_acc:.3f} (best epoch {res.best_epoch}), exact cycles {cycles:.0f}")

for m in net.mapped_layers():
    a = m.assignment()
    print(f"  {m.name}: {int((a == 0).sum())} channels int8 / {int((a == 1).sum())} ternary")

# Channels are regrouped so each CU owns one block; the artifact carries the
# permutation, integer weight codes and the cost it was exported with.
x = val.images[:16]
art, reorder = export_network(net, x)
with tempfile.TemporaryDirectory() as tmp:
    path = art.save(Path(tmp) / "tiny.json")
    loaded = MappingArtifact.load(path)
    rep = verify_artifact(loaded, reorder.network, x)
    print(f"\nreplay from {path.name}: max deviation {rep.max_abs_dev:.2e}, passed {rep.passed}")
    print(f"recomputed cost {artifact_cost(loaded).total_cycles:.0f} cycles, embedded {loaded.cost.total_cycles:.0f}")
    for entry in loaded.meta["layers"]:
        for sub in entry.get("sublayers", []):
            print(f"  {entry['name']:6s} {sub['cu']:8s} {sub['precision']:8s} channels {sub['ranges']}")
    print("conv1 permutation:", np.asarray(loaded.layer("conv1")["permutation"]))
