"""IoU-family box regression losses: IoU, CIoU, SIoU and FineSIoU.

Boxes are center-format ``(cx, cy, w, h)``.  Every loss is written once over generic
scalars so the same code path evaluates plain floats and forward-mode dual numbers;
:func:`loss_grad` uses the latter for exact derivatives with respect to the predicted box.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

LOSS_KINDS = ("ciou", "siou", "finesiou")

# Lambda value at 5 degrees from the diagonal: sin(2 * 40deg) rounded to 4 places
ANGLE_THRESHOLD = 0.9847


class SingularPointError(ValueError):
    """Gradient requested where the loss is not differentiable."""


@dataclass(frozen=True)
class Box:
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box width and height must be positive, got {self.w}x{self.h}")

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h], dtype=np.float64)

    @classmethod
    def from_array(cls, a) -> "Box":
        cx, cy, w, h = (float(v) for v in a)
        return cls(cx, cy, w, h)

    def scaled(self, k: float) -> "Box":
        return Box(self.cx * k, self.cy * k, self.w * k, self.h * k)

    def shifted(self, dx: float, dy: float) -> "Box":
        return Box(self.cx + dx, self.cy + dy, self.w, self.h)


@dataclass(frozen=True)
class LossParams:
    """``theta`` weights the shape cost, ``eta`` the separated angle term.

    ``externalize_angle`` drops the angle from the distance cost's ``gamma`` in
    FineSIoU (``gamma = 2``); off by default.
    """

    theta: float = 6.0
    eta: float = 3.0
    angle_threshold_value: float = ANGLE_THRESHOLD
    externalize_angle: bool = False

    def __post_init__(self):
        if self.theta <= 0 or self.eta <= 0:
            raise ValueError("theta and eta must be positive")


@dataclass(frozen=True)
class LossBreakdown:
    """Components of one loss evaluation.

    For CIoU, ``delta_dist`` holds the normalized center-distance penalty and
    ``omega_shape`` the aspect-ratio term; angle fields are zero.
    """

    kind: str
    iou: float
    lambda_angle: float
    zeta: float
    delta_dist: float
    omega_shape: float
    center_distance: float
    total: float

    def recompose(self) -> float:
        return _combine(self.kind, self.iou, self.zeta, self.delta_dist, self.omega_shape)


def _combine(kind, iou, zeta, delta, omega):
    if kind == "finesiou":
        return 1 - iou + (zeta + delta + omega) / 2
    if kind == "siou":
        return 1 - iou + (delta + omega) / 2
    return 1 - iou + delta + omega


# ---------------------------------------------------------------------------
# forward-mode dual numbers over the 4 predicted-box coordinates


class _Dual:
    __slots__ = ("v", "d")

    def __init__(self, v, d):
        self.v = float(v)
        self.d = d

    @staticmethod
    def _lift(o):
        return o if isinstance(o, _Dual) else _Dual(o, 0.0)

    def __add__(self, o):
        o = self._lift(o)
        return _Dual(self.v + o.v, self.d + o.d)

    __radd__ = __add__

    def __sub__(self, o):
        o = self._lift(o)
        return _Dual(self.v - o.v, self.d - o.d)

    def __rsub__(self, o):
        return self._lift(o) - self

    def __neg__(self):
        return _Dual(-self.v, -self.d)

    def __mul__(self, o):
        o = self._lift(o)
        return _Dual(self.v * o.v, self.d * o.v + self.v * o.d)

    __rmul__ = __mul__

    def __truediv__(self, o):
        o = self._lift(o)
        return _Dual(self.v / o.v, (self.d * o.v - self.v * o.d) / (o.v * o.v))

    def __rtruediv__(self, o):
        return self._lift(o) / self

    def __pow__(self, k):
        if self.v == 0.0:
            return _Dual(0.0, 0.0 * self.d) if k > 1 else _Dual(0.0 ** k, self.d * (k * 0.0 ** (k - 1)))
        return _Dual(self.v**k, self.d * (k * self.v ** (k - 1)))

    def __lt__(self, o):
        return self.v < _val(o)

    def __gt__(self, o):
        return self.v > _val(o)

    def __le__(self, o):
        return self.v <= _val(o)

    def __ge__(self, o):
        return self.v >= _val(o)


def _val(x) -> float:
    return x.v if isinstance(x, _Dual) else float(x)


def _unary(f, df):
    def op(x):
        if isinstance(x, _Dual):
            return _Dual(f(x.v), x.d * df(x.v))
        return f(x)

    return op


_exp = _unary(math.exp, math.exp)
_sqrt = _unary(math.sqrt, lambda v: 0.5 / math.sqrt(v))
_atan = _unary(math.atan, lambda v: 1.0 / (1.0 + v * v))


def _abs(x):
    return -x if _val(x) < 0 else x


def _max(a, b):
    return a if _val(a) >= _val(b) else b


def _min(a, b):
    return a if _val(a) <= _val(b) else b


# ---------------------------------------------------------------------------
# components over generic scalars


def _geometry(p, g):
    pcx, pcy, pw, ph = p
    gcx, gcy, gw, gh = g
    px1, px2, py1, py2 = pcx - pw / 2, pcx + pw / 2, pcy - ph / 2, pcy + ph / 2
    gx1, gx2, gy1, gy2 = gcx - gw / 2, gcx + gw / 2, gcy - gh / 2, gcy + gh / 2
    iw = _max(_min(px2, gx2) - _max(px1, gx1), 0.0)
    ih = _max(_min(py2, gy2) - _max(py1, gy1), 0.0)
    inter = iw * ih
    # areas from the same corner differences as the overlap, so identical boxes give exactly 1
    union = (px2 - px1) * (py2 - py1) + (gx2 - gx1) * (gy2 - gy1) - inter
    cw = _max(px2, gx2) - _min(px1, gx1)
    ch = _max(py2, gy2) - _min(py1, gy1)
    return inter / union, cw, ch


def _angle(p, g):
    dx, dy = g[0] - p[0], g[1] - p[1]
    sigma = _sqrt(dx * dx + dy * dy) if (_val(dx) or _val(dy)) else 0.0
    if _val(sigma) == 0.0:
        return 0.0, 0.0
    # 1 - 2 sin^2(asin(|dy|/sigma) - pi/4) == 2 |dx| |dy| / sigma^2, which keeps a
    # finite derivative where the arcsine form has |dy| = sigma
    lam = 2 * _abs(dx) * _abs(dy) / (sigma * sigma)
    return _min(_max(lam, 0.0), 1.0), sigma


def _zeta(lam, eta, threshold=ANGLE_THRESHOLD):
    u = _max(threshold - lam, 0.0)
    return (1 - _exp(-u)) ** eta


def _distance(p, g, lam, cw, ch):
    if _val(cw) == 0.0 or _val(ch) == 0.0:
        return 0.0
    gamma = 2 - lam
    rx = ((g[0] - p[0]) / cw) ** 2
    ry = ((g[1] - p[1]) / ch) ** 2
    return (1 - _exp(-gamma * rx)) + (1 - _exp(-gamma * ry))


def _omegas(p, g, fine: bool):
    if fine:
        return _abs(p[2] - g[2]) / g[2], _abs(p[3] - g[3]) / g[3]
    return _abs(p[2] - g[2]) / _max(p[2], g[2]), _abs(p[3] - g[3]) / _max(p[3], g[3])


def _shape(p, g, theta, fine: bool):
    ow, oh = _omegas(p, g, fine)
    return (1 - _exp(-ow)) ** theta + (1 - _exp(-oh)) ** theta


def _terms(kind, p, g, params: LossParams):
    """(iou, lambda, zeta, delta, omega, sigma) for ``kind`` over generic scalars."""
    iou_v, cw, ch = _geometry(p, g)
    if kind == "ciou":
        dx, dy = g[0] - p[0], g[1] - p[1]
        dist = (dx * dx + dy * dy) / (cw * cw + ch * ch)
        v = (4 / math.pi**2) * (_atan(g[2] / g[3]) - _atan(p[2] / p[3])) ** 2
        aspect = v * (v / ((1 - iou_v) + v)) if _val(v) > 0 else 0.0
        sigma = _sqrt(dx * dx + dy * dy) if (_val(dx) or _val(dy)) else 0.0
        return iou_v, 0.0, 0.0, dist, aspect, sigma
    if kind not in ("siou", "finesiou"):
        raise ValueError(f"unknown loss kind {kind!r}")
    fine = kind == "finesiou"
    lam, sigma = _angle(p, g)
    # coincident centers: no angle, so the separated angle term vanishes
    zeta = _zeta(lam, params.eta, params.angle_threshold_value) if fine and _val(sigma) > 0 else 0.0
    gamma_lam = 0.0 if (fine and params.externalize_angle) else lam
    delta = _distance(p, g, gamma_lam, cw, ch)
    omega = _shape(p, g, params.theta, fine)
    return iou_v, lam, zeta, delta, omega, sigma


def _coords(b) -> tuple:
    if isinstance(b, Box):
        return (b.cx, b.cy, b.w, b.h)
    return tuple(float(v) for v in b)


# ---------------------------------------------------------------------------
# public scalar API


def iou(a: Box, b: Box) -> float:
    return _val(_geometry(_coords(a), _coords(b))[0])


def enclosing_extents(a: Box, b: Box) -> tuple[float, float]:
    _, cw, ch = _geometry(_coords(a), _coords(b))
    return _val(cw), _val(ch)


def shape_ratios(pred: Box, gt: Box, fine: bool = False) -> tuple[float, float]:
    """(omega_w, omega_h): max-normalized for SIoU, ground-truth-normalized for FineSIoU."""
    ow, oh = _omegas(_coords(pred), _coords(gt), fine)
    return _val(ow), _val(oh)


def siou_shape_cost(pred: Box, gt: Box, theta: float) -> float:
    return _val(_shape(_coords(pred), _coords(gt), theta, fine=False))


def finesiou_shape_cost(pred: Box, gt: Box, theta: float) -> float:
    return _val(_shape(_coords(pred), _coords(gt), theta, fine=True))


def angle_cost(pred: Box, gt: Box) -> tuple[float, float]:
    """(Lambda, center distance).  Coincident centers give (0, 0)."""
    lam, sigma = _angle(_coords(pred), _coords(gt))
    return _val(lam), _val(sigma)


def zeta_angle_term(lam: float, eta: float, threshold: float = ANGLE_THRESHOLD) -> float:
    """Separated angle term; zero once Lambda reaches the 5-degree threshold."""
    return _val(_zeta(lam, eta, threshold))


def distance_cost(pred: Box, gt: Box, lam: float, enclosing: tuple[float, float] | None = None) -> float:
    cw, ch = enclosing if enclosing is not None else enclosing_extents(pred, gt)
    return _val(_distance(_coords(pred), _coords(gt), lam, cw, ch))


def loss_breakdown(kind: str, pred: Box, gt: Box, params: LossParams | None = None) -> LossBreakdown:
    params = params or LossParams()
    terms = [_val(t) for t in _terms(kind, _coords(pred), _coords(gt), params)]
    iou_v, lam, zeta, delta, omega, sigma = terms
    return LossBreakdown(kind, iou_v, lam, zeta, delta, omega, sigma, _combine(kind, iou_v, zeta, delta, omega))


def siou_loss(pred: Box, gt: Box, params: LossParams | None = None) -> LossBreakdown:
    return loss_breakdown("siou", pred, gt, params)


def finesiou_loss(pred: Box, gt: Box, params: LossParams | None = None) -> LossBreakdown:
    return loss_breakdown("finesiou", pred, gt, params)


def ciou_loss(pred: Box, gt: Box) -> float:
    return loss_breakdown("ciou", pred, gt).total


def loss_value(kind: str, pred, gt, params: LossParams | None = None) -> float:
    """Total loss; ``pred`` may be a Box or a raw ``(cx, cy, w, h)`` sequence."""
    params = params or LossParams()
    iou_v, _, zeta, delta, omega, _ = _terms(kind, _coords(pred), _coords(gt), params)
    return _val(_combine(kind, iou_v, zeta, delta, omega))


def loss_grad(kind: str, pred: Box, gt: Box, params: LossParams | None = None, strict: bool = True) -> np.ndarray:
    """Gradient of the total loss with respect to the predicted ``(cx, cy, w, h)``.

    With ``strict`` the angle singularity at coincident centers raises; otherwise the
    zero-angle convention is differentiated as a constant.
    """
    params = params or LossParams()
    p, g = _coords(pred), _coords(gt)
    if strict and kind in ("siou", "finesiou") and p[:2] == g[:2]:
        raise SingularPointError("angle cost is not differentiable at coincident centers")
    eye = np.eye(4)
    pd = tuple(_Dual(v, eye[i]) for i, v in enumerate(p))
    iou_v, _, zeta, delta, omega, _ = _terms(kind, pd, g, params)
    total = _combine(kind, iou_v, zeta, delta, omega)
    return np.array(total.d, dtype=np.float64) if isinstance(total, _Dual) else np.zeros(4)


# ---------------------------------------------------------------------------
# gradient-descent regression


@dataclass
class Trajectory:
    kind: str
    boxes: list[Box] = field(default_factory=list)
    losses: list[LossBreakdown] = field(default_factory=list)
    converged: bool = False
    diverged: bool = False
    monotone_violations: list[int] = field(default_factory=list)

    @property
    def steps_to_tol(self) -> int | None:
        return len(self.losses) - 1 if self.converged else None

    def rows(self):
        for i, b in enumerate(self.losses):
            yield (i, b.iou, b.lambda_angle, b.zeta, b.delta_dist, b.omega_shape, b.total)


def regression_sim(
    init: Box,
    target: Box,
    kind: str,
    step_size: float = 1e-3,
    max_steps: int = 1000,
    tol: float = 1e-3,
    params: LossParams | None = None,
    slack: float = 1e-12,
) -> Trajectory:
    """Plain gradient descent on the predicted box.

    Stops when the total drops below ``tol``, after ``max_steps`` updates, or on
    divergence (loss above 10x its initial value, or a non-positive size).  Steps where
    the loss rises by more than ``slack`` are recorded in ``monotone_violations``.
    """
    if step_size <= 0:
        raise ValueError("step_size must be positive")
    params = params or LossParams()
    traj = Trajectory(kind)
    x = init.as_array()
    box = init
    first = None
    for step in range(max_steps + 1):
        b = loss_breakdown(kind, box, target, params)
        traj.boxes.append(box)
        traj.losses.append(b)
        if first is None:
            first = b.total
        elif b.total > traj.losses[-2].total + slack:
            traj.monotone_violations.append(step)
        if b.total < tol:
            traj.converged = True
            break
        if first > 0 and b.total > 10 * first:
            traj.diverged = True
            break
        if step == max_steps:
            break
        x = x - step_size * loss_grad(kind, box, target, params, strict=False)
        if x[2] <= 0 or x[3] <= 0:
            traj.diverged = True
            break
        box = Box.from_array(x)
    return traj


# ---------------------------------------------------------------------------
# shape-cost table

# (w_gt, h_gt, w, h, omega_w siou, omega_w fine, omega_h siou, omega_h fine, Omega siou, Omega fine)
SHAPE_TABLE = (
    (30, 40, 50, 60, 2 / 5, 2 / 3, 1 / 3, 1 / 2, 0.0586, 0.1761),
    (30, 40, 10, 20, 2 / 3, 2 / 3, 1 / 2, 1 / 2, 0.0967, 0.1761),
    (40, 30, 60, 50, 1 / 3, 1 / 2, 2 / 5, 2 / 3, 0.0586, 0.1761),
    (50, 60, 30, 40, 2 / 5, 2 / 5, 1 / 3, 1 / 3, 0.0586, 0.0586),
    (60, 80, 80, 100, 1 / 4, 1 / 3, 1 / 5, 1 / 4, 0.0168, 0.0336),
    (60, 80, 40, 60, 1 / 3, 1 / 3, 1 / 4, 1 / 4, 0.0336, 0.0336),
    (80, 60, 100, 80, 1 / 5, 1 / 4, 1 / 4, 1 / 3, 0.0167, 0.0336),
    (80, 100, 60, 80, 1 / 4, 1 / 4, 1 / 5, 1 / 5, 0.0167, 0.0168),
)
# (row, column) cells whose printed value disagrees with its own printed ratios
SHAPE_TABLE_EXCLUDED = frozenset({(1, "Omega_siou")})
SHAPE_TABLE_COLUMNS = (
    "wgt", "hgt", "w", "h", "omega_w_siou", "omega_w_fine",
    "omega_h_siou", "omega_h_fine", "Omega_siou", "Omega_fine",
)


def shape_table(theta: float = 3.0) -> list[tuple]:
    """Recompute every row of :data:`SHAPE_TABLE` at ``theta`` (centers coincide)."""
    rows = []
    for wg, hg, w, h, *_ in SHAPE_TABLE:
        gt, pred = Box(0, 0, wg, hg), Box(0, 0, w, h)
        sw, sh = shape_ratios(pred, gt, fine=False)
        fw, fh = shape_ratios(pred, gt, fine=True)
        rows.append(
            (wg, hg, w, h, sw, fw, sh, fh, siou_shape_cost(pred, gt, theta), finesiou_shape_cost(pred, gt, theta))
        )
    return rows


def shape_table_deviations(theta: float = 3.0, include_excluded: bool = False) -> list[tuple[int, str, float]]:
    """(row, column, computed - printed) for the two Omega columns."""
    out = []
    for i, (ref, got) in enumerate(zip(SHAPE_TABLE, shape_table(theta))):
        for col, j in (("Omega_siou", 8), ("Omega_fine", 9)):
            if not include_excluded and (i, col) in SHAPE_TABLE_EXCLUDED:
                continue
            out.append((i, col, got[j] - ref[j]))
    return out


def theta_sweep(thetas=range(1, 9)) -> list[tuple[float, float]]:
    """(theta, max |deviation|) against the printed Omega values."""
    return [(float(t), max(abs(d) for *_, d in shape_table_deviations(t))) for t in thetas]
