"""Match detections, build PR curves, and compute AP, mAP and the max-F1 operating point.

Run: python demos/05_detection_metrics.py
"""

# %% A hand-sized example: three ranked detections, two ground-truth boxes.
from pathlib import Path

import numpy as np

from alsskit import evalmetrics as E
from alsskit import netgraph as G

curve = E.pr_curve([True, False, True], [0.9, 0.8, 0.7], num_gt=2)
print("precision", curve.precision, "recall", curve.recall, "AP", E.average_precision(curve))
print("best F1 (threshold, F1):", E.f1_sweep([True, False, True], [0.9, 0.8, 0.7], 2)[:2])

# %% The same pipeline over box files; the test fixtures double as sample data.
fixtures = Path(__file__).resolve().parent.parent / "tests" / "fixtures"
report = E.evaluate(E.read_boxes(fixtures / "eval_det.txt", True), E.read_boxes(fixtures / "eval_gt.txt", False))
print(report.to_json())

# %% Raw head maps from the network decode into detections, followed by NMS.  With
# random weights nothing is meaningful, but the plumbing is exercised end to end.
g = G.build_alss_yolo()
outs = G.forward(g, np.random.default_rng(0).normal(size=(1, 1, 128, 128)))[-1]
dets = E.nms(E.decode_head(outs, conf_threshold=0.5, image_ids=["img0"]))
print(f"{len(dets)} detections after NMS; first:", dets[0] if dets else None)
