"""Build the reference detector, audit its shapes and parameter counts, fuse BN.

Run: python demos/01_network_audit.py
"""

# %% The reference graph ships as a text config; every node lists its inputs and the
# output shape and parameter count it is expected to have.
import numpy as np

from alsskit import netgraph as G

g = G.build_alss_yolo(num_classes=4)
print(f"{len(g.nodes)} nodes, ALSS nodes at {[n.index for n in g.alss_nodes]}")
print("alpha schedule:", g.alpha_schedule)

# %% Shape propagation for a single-channel 640x640 image.  Node 19 concatenates
# 56 + 88 channels, which disagrees with the declared 136.
for row in G.shape_report(g, (1, 640, 640)):
    flag = "" if row["match"] else "   <-- mismatch"
    print(f"{row['index']:>2} {row['kind']:<8} {G._format_shape(row['computed']):>28}{flag}")

# %% Parameter audit.  Exact-class rows must match to the unit; ALSS/LCA rows depend on
# knob choices and are reported as relative deltas.
audit = G.audit_params(g)
for r in audit.rows:
    if r.kind in ("ALSS", "LCA"):
        print(f"node {r.index:>2} {r.kind:<4} computed {r.computed_params:>7} declared {r.declared_params:>7} "
              f"({r.rel_delta:+.1%})")
print(f"total {audit.computed_total} vs {audit.declared_total}; after BN fusion {audit.fused_total}")

# %% Fusing BN into the preceding convolutions leaves the outputs unchanged.
x = np.random.default_rng(0).normal(size=(1, 1, 128, 128))
ref = G.forward(g, x)[-1]
fused = G.forward(G.fuse_bn(g), x)[-1]
err = max(np.abs(a - b).max() / np.abs(b).max() for a, b in zip(fused, ref))
print("head outputs:", [o.shape for o in ref], f"fusion max rel err {err:.1e}")

# %% Per-layer timings on a small input.
rows = G.time_layers(g, x, repeats=2)
slowest = sorted(rows, key=lambda r: -r["median_ms"])[:3]
print("slowest layers:", [(r["index"], r["kind"], round(r["median_ms"], 2)) for r in slowest])
