"""Detection metrics: greedy matching, precision/recall, F1 sweep, AP and mAP.

Also holds head post-processing (distribution decoding and per-class NMS) and the
text/JSON box file formats.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .boxloss import Box, iou


@dataclass(frozen=True)
class Detection:
    image_id: str
    class_id: int
    box: Box
    confidence: float

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")


@dataclass(frozen=True)
class GtBox:
    image_id: str
    class_id: int
    box: Box


def _order(confidences: Sequence[float]) -> list[int]:
    # stable: equal confidences keep input order
    return sorted(range(len(confidences)), key=lambda i: -confidences[i])


def match_detections(dets: Sequence[Detection], gts: Sequence[GtBox], iou_threshold: float = 0.5) -> np.ndarray:
    """TP flag per detection (input order).

    Detections are visited by descending confidence; each takes the unmatched
    ground truth of the same image and class with the highest IoU, if that IoU
    reaches ``iou_threshold``.
    """
    if not 0.0 < iou_threshold < 1.0:
        raise ValueError("iou_threshold must lie in (0, 1)")
    pool: dict[tuple, list[int]] = {}
    for j, g in enumerate(gts):
        pool.setdefault((g.image_id, g.class_id), []).append(j)
    used = np.zeros(len(gts), dtype=bool)
    flags = np.zeros(len(dets), dtype=bool)
    for i in _order([d.confidence for d in dets]):
        d = dets[i]
        best, best_iou = -1, iou_threshold
        for j in pool.get((d.image_id, d.class_id), ()):
            if used[j]:
                continue
            v = iou(d.box, gts[j].box)
            if v >= best_iou and (best < 0 or v > best_iou):
                best, best_iou = j, v
        if best >= 0:
            used[best] = True
            flags[i] = True
    return flags


@dataclass
class PRCurve:
    """Cumulative precision/recall after each detection in descending-confidence order."""

    precision: np.ndarray
    recall: np.ndarray
    confidences: np.ndarray
    recall_defined: bool = True


def pr_curve(flags, confidences, num_gt: int) -> PRCurve:
    flags = np.asarray(flags, dtype=bool)
    conf = np.asarray(confidences, dtype=np.float64)
    if num_gt < 0:
        raise ValueError("num_gt must be >= 0")
    order = np.array(_order(conf.tolist()), dtype=int)
    tp = np.cumsum(flags[order]) if order.size else np.zeros(0)
    k = np.arange(1, order.size + 1)
    precision = tp / k if order.size else np.zeros(0)
    if num_gt == 0:
        return PRCurve(precision, np.zeros(order.size), conf[order], recall_defined=False)
    return PRCurve(precision, tp / num_gt, conf[order])


def precision_envelope(precision) -> np.ndarray:
    """Running maximum from the right: the non-increasing upper envelope."""
    p = np.asarray(precision, dtype=np.float64)
    return np.maximum.accumulate(p[::-1])[::-1] if p.size else p


def average_precision(curve: PRCurve) -> float:
    """Area under the precision envelope over recall, all points, no sampling grid."""
    if curve.recall.size == 0:
        return 0.0
    env = precision_envelope(curve.precision)
    dr = np.diff(np.concatenate([[0.0], curve.recall]))
    return float(np.sum(dr * env))


def _f1(p: float, r: float) -> float:
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def f1_sweep(flags, confidences, num_gt: int):
    """F1 at every distinct confidence cut (keep detections with confidence >= cut).

    Returns ``(best_threshold, best_f1, samples)`` where samples are
    ``(threshold, precision, recall, f1)`` in descending threshold order.  Ties on F1
    resolve to the highest threshold.
    """
    flags = np.asarray(flags, dtype=bool)
    conf = np.asarray(confidences, dtype=np.float64)
    samples = []
    for t in sorted(set(conf.tolist()), reverse=True):
        keep = conf >= t
        tp = int(flags[keep].sum())
        fp = int(keep.sum()) - tp
        p = tp / (tp + fp)
        r = tp / num_gt if num_gt else 0.0
        samples.append((t, p, r, _f1(p, r)))
    if not samples:
        return None, 0.0, samples
    best = max(samples, key=lambda s: s[3])  # first max wins, i.e. highest threshold
    return best[0], best[3], samples


@dataclass
class EvalReport:
    per_class_ap: dict[int, float]
    map: float
    precision: float
    recall: float
    f1: float
    threshold: float | None
    iou_threshold: float
    pr_curves: dict[int, PRCurve] = field(default_factory=dict, repr=False)
    f1_curve: list[tuple] = field(default_factory=list, repr=False)
    excluded_classes: list[int] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "iou_threshold": self.iou_threshold,
            "mAP": self.map,
            "per_class_ap": {str(k): v for k, v in self.per_class_ap.items()},
            "operating_point": {
                "threshold": self.threshold,
                "precision": self.precision,
                "recall": self.recall,
                "f1": self.f1,
            },
            "excluded_classes": self.excluded_classes,
            "pr_curves": {
                str(k): {"precision": c.precision.tolist(), "recall": c.recall.tolist()}
                for k, c in self.pr_curves.items()
            },
            "f1_curve": [list(s) for s in self.f1_curve],
            "notes": self.notes,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class_id", "ap"])
        for k, v in self.per_class_ap.items():
            w.writerow([k, f"{v:.6g}"])
        w.writerow(["mAP", f"{self.map:.6g}"])
        return buf.getvalue()


def evaluate(
    dets: Sequence[Detection],
    gts: Sequence[GtBox],
    classes: Iterable[int] | None = None,
    iou_threshold: float = 0.5,
) -> EvalReport:
    notes: list[str] = []
    if classes is None:
        classes = sorted({d.class_id for d in dets} | {g.class_id for g in gts})
    classes = list(classes)
    known = set(classes)
    stray = sorted({x.class_id for x in (*dets, *gts)} - known)
    if stray:
        notes.append(f"ignored boxes with class ids outside {classes}: {stray}")
        dets = [d for d in dets if d.class_id in known]
        gts = [g for g in gts if g.class_id in known]
    flags = match_detections(dets, gts, iou_threshold)
    conf = np.array([d.confidence for d in dets], dtype=np.float64)
    cls_d = np.array([d.class_id for d in dets], dtype=int)
    aps, curves, excluded = {}, {}, []
    for c in classes:
        sel = cls_d == c
        n_gt = sum(g.class_id == c for g in gts)
        if n_gt == 0 and not sel.any():
            excluded.append(c)
            notes.append(f"class {c} has no ground truth and no detections; excluded from mAP")
            continue
        curve = pr_curve(flags[sel], conf[sel], n_gt)
        if not curve.recall_defined:
            notes.append(f"class {c} has detections but no ground truth; recall reported as 0")
        curves[c] = curve
        aps[c] = average_precision(curve)
    if not dets and gts:
        notes.append("no detections: every ground-truth box is a false negative")
    m = float(np.mean(list(aps.values()))) if aps else 0.0
    thr, best, samples = f1_sweep(flags, conf, len(gts))
    p = r = 0.0
    if thr is not None:
        _, p, r, _ = next(s for s in samples if s[0] == thr)
    return EvalReport(aps, m, p, r, best, thr, iou_threshold, curves, samples, excluded, notes)


# ---------------------------------------------------------------------------
# head post-processing


def _softmax(x, axis):
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def decode_head(
    outputs: Sequence[np.ndarray],
    strides: Sequence[int] = (8, 16, 32),
    reg_max: int = 16,
    conf_threshold: float = 0.25,
    image_ids: Sequence[str] | None = None,
) -> list[Detection]:
    """Turn raw per-scale head maps into detections (pixel units, before NMS).

    Each map holds ``4 * reg_max`` side-distance logits followed by class logits; a side
    distance is the expectation of its softmax over ``0..reg_max-1`` bins, in stride units.
    """
    from .tensor import sigmoid

    bins = np.arange(reg_max, dtype=np.float64)
    out: list[Detection] = []
    for o, s in zip(outputs, strides):
        n, c, h, w = o.shape
        dist = (_softmax(o[:, : 4 * reg_max].reshape(n, 4, reg_max, h, w), 2) * bins[:, None, None]).sum(2)
        scores = sigmoid(o[:, 4 * reg_max :])
        ay, ax = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing="ij")
        for b in range(n):
            x1, y1 = (ax - dist[b, 0]) * s, (ay - dist[b, 1]) * s
            x2, y2 = (ax + dist[b, 2]) * s, (ay + dist[b, 3]) * s
            cls = scores[b].argmax(0)
            best = scores[b].max(0)
            for i, j in zip(*np.nonzero(best >= conf_threshold)):
                bw, bh = x2[i, j] - x1[i, j], y2[i, j] - y1[i, j]
                if bw <= 0 or bh <= 0:
                    continue
                out.append(
                    Detection(
                        image_ids[b] if image_ids else str(b),
                        int(cls[i, j]),
                        Box(float(x1[i, j] + x2[i, j]) / 2, float(y1[i, j] + y2[i, j]) / 2, float(bw), float(bh)),
                        float(best[i, j]),
                    )
                )
    return out


def nms(dets: Sequence[Detection], iou_threshold: float = 0.7) -> list[Detection]:
    """Greedy per-image, per-class suppression in descending confidence."""
    kept: list[Detection] = []
    for i in _order([d.confidence for d in dets]):
        d = dets[i]
        if all(
            k.image_id != d.image_id or k.class_id != d.class_id or iou(k.box, d.box) <= iou_threshold for k in kept
        ):
            kept.append(d)
    return kept


# ---------------------------------------------------------------------------
# files


class BoxFileError(ValueError):
    def __init__(self, path, line, msg):
        self.path, self.line = str(path), line
        super().__init__(f"{path}:{line}: {msg}")


def _record(path, line, fields: dict, with_conf: bool):
    try:
        box = Box(float(fields["cx"]), float(fields["cy"]), float(fields["w"]), float(fields["h"]))
        if with_conf:
            return Detection(str(fields["image_id"]), int(fields["class_id"]), box, float(fields.get("confidence", 1.0)))
        return GtBox(str(fields["image_id"]), int(fields["class_id"]), box)
    except (KeyError, ValueError, TypeError) as e:
        raise BoxFileError(path, line, str(e)) from None


def parse_boxes(text: str, detections: bool, path="<string>") -> list:
    """Parse ``image_id class_id cx cy w h [confidence]`` lines, or a JSON array of
    objects with the same keys."""
    keys = ("image_id", "class_id", "cx", "cy", "w", "h", "confidence")
    if text.lstrip().startswith("["):
        try:
            items = json.loads(text)
        except json.JSONDecodeError as e:
            raise BoxFileError(path, e.lineno, e.msg) from None
        return [_record(path, i + 1, item, detections) for i, item in enumerate(items)]
    out = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        if len(tok) not in (6, 7):
            raise BoxFileError(path, lineno, f"expected 6 or 7 fields, got {len(tok)}")
        out.append(_record(path, lineno, dict(zip(keys, tok)), detections))
    return out


def read_boxes(path, detections: bool) -> list:
    return parse_boxes(Path(path).read_text(), detections, path)
