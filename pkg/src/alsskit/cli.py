"""Command-line front end: ``alsskit <command> ...`` or ``python -m alsskit``.

Exit status is 0 on success, 1 when a validation check fails and 2 for usage or
parse errors.  Randomized commands take ``--seed``, defaulting to ``$ALSSKIT_SEED``
(or 0).
"""

from __future__ import annotations

import argparse
import csv
import io
import os
import sys
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from . import boxloss as L
from . import evalmetrics as E
from . import netgraph as G
from ._files import atomic_write
from .tensor import finite_diff_grad

SEED_ENV = "ALSSKIT_SEED"
GRAD_TOLERANCE = 1e-4

OK, INVALID, USAGE = 0, 1, 2


class UsageError(Exception):
    pass


class ScenarioError(ValueError):
    def __init__(self, path, line, msg):
        self.path, self.line = str(path), line
        super().__init__(f"{path}:{line}: {msg}")


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{v:.6g}"
    return str(v)


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    return buf.getvalue()


def _emit(text: str, path) -> None:
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        atomic_write(path, text)


def _load_graph(path):
    if path is None:
        return G.parse_graph(G.reference_config_text())
    try:
        return G.load_graph(path)
    except OSError as e:
        raise UsageError(f"cannot read {path}: {e.strerror}") from None


# ---------------------------------------------------------------------------
# params / shapes


def cmd_params(args) -> int:
    g = _load_graph(args.config)
    report = G.audit_params(g)
    _emit(report.to_csv(), args.output)
    bad = report.exact_mismatches()
    for r in bad:
        print(f"exact-class mismatch at node {r.index} ({r.kind}): {r.computed_params} vs {r.declared_params}",
              file=sys.stderr)
    print(
        f"total {report.computed_total} (declared {report.declared_total}), "
        f"fused {report.fused_total} (declared {report.declared_fused_total})",
        file=sys.stderr,
    )
    return INVALID if bad else OK


def cmd_shapes(args) -> int:
    g = _load_graph(args.config)
    c = g.input_shape[0]
    try:
        rows = G.shape_report(g, (c, args.height, args.width))
    except G.ShapeError as e:
        print(f"error: {e}", file=sys.stderr)
        return INVALID
    body = _csv(
        ["index", "kind", "computed", "declared", "match"],
        (
            (r["index"], r["kind"], G._format_shape(r["computed"]), G._format_shape(r["declared"]), r["match"])
            for r in rows
        ),
    )
    _emit(body, args.output)
    bad = [r for r in rows if not r["match"]]
    for r in bad:
        print(
            f"shape mismatch at node {r['index']} ({r['kind']}): "
            f"{G._format_shape(r['computed'])} vs {G._format_shape(r['declared'])}",
            file=sys.stderr,
        )
    print(f"{len(rows) - len(bad)}/{len(rows)} shapes match", file=sys.stderr)
    return INVALID if bad else OK


# ---------------------------------------------------------------------------
# losses


def cmd_loss_table(args) -> int:
    if args.theta <= 0:
        raise UsageError("--theta must be positive")
    if args.sweep:
        sweep = L.theta_sweep(range(1, args.sweep_max + 1))
        _emit(_csv(["theta", "max_abs_deviation"], sweep), args.output)
        best = min(sweep, key=lambda s: s[1])
        print(f"minimum deviation {best[1]:.6g} at theta {best[0]:g}", file=sys.stderr)
        return OK
    rows = L.shape_table(args.theta)
    devs = {(i, col): d for i, col, d in L.shape_table_deviations(args.theta, include_excluded=True)}
    out = []
    for i, (row, ref) in enumerate(zip(rows, L.SHAPE_TABLE)):
        out.append(
            (*row, ref[8], ref[9], devs[(i, "Omega_siou")], devs[(i, "Omega_fine")],
             int((i, "Omega_siou") in L.SHAPE_TABLE_EXCLUDED), i + 1)
        )
    header = [*L.SHAPE_TABLE_COLUMNS, "printed_Omega_siou", "printed_Omega_fine",
              "dev_Omega_siou", "dev_Omega_fine", "siou_cell_excluded", "row"]
    _emit(_csv(header, out), args.output)
    worst = max(abs(d) for *_, d in L.shape_table_deviations(args.theta))
    print(f"max abs deviation {worst:.6g} at theta {args.theta:g} (eta {args.eta:g} unused by shape cost)",
          file=sys.stderr)
    return OK


def _random_box(rng) -> L.Box:
    cx, cy = rng.uniform(0.2, 0.8, 2)
    w, h = rng.uniform(0.05, 0.5, 2)
    return L.Box(cx, cy, w, h)


def gradient_relative_error(kind: str, pred: L.Box, gt: L.Box, params: L.LossParams) -> float:
    """Relative gap between the exact gradient and a central difference (inf-norm)."""
    exact = L.loss_grad(kind, pred, gt, params)
    numeric = finite_diff_grad(lambda v: L.loss_value(kind, v, gt, params), pred.as_array())
    scale = max(np.abs(exact).max(), np.abs(numeric).max(), 1e-12)
    return float(np.abs(exact - numeric).max() / scale)


@dataclass
class GradcheckResult:
    kind: str
    errors: list[float] = field(default_factory=list)
    redraws: int = 0

    @property
    def passed(self) -> int:
        return sum(e < GRAD_TOLERANCE for e in self.errors)


def gradcheck(kind: str, trials: int, seed: int, params: L.LossParams | None = None) -> GradcheckResult:
    if trials < 1:
        raise UsageError("trials must be >= 1")
    params = params or L.LossParams()
    rng = np.random.default_rng(seed)
    res = GradcheckResult(kind)
    while len(res.errors) < trials:
        pred, gt = _random_box(rng), _random_box(rng)
        if np.hypot(pred.cx - gt.cx, pred.cy - gt.cy) < 1e-6:
            res.redraws += 1
            continue
        res.errors.append(gradient_relative_error(kind, pred, gt, params))
    return res


def cmd_gradcheck(args) -> int:
    kinds = L.LOSS_KINDS if args.loss == "all" else (args.loss,)
    params = L.LossParams(theta=args.theta, eta=args.eta)
    rows, failed = [], False
    for kind in kinds:
        res = gradcheck(kind, args.trials, args.seed, params)
        rows += [(kind, i, e, e < GRAD_TOLERANCE) for i, e in enumerate(res.errors)]
        failed |= res.passed < args.trials
        print(f"{kind}: {res.passed}/{args.trials} pass, max rel err {max(res.errors):.3g}, "
              f"redraws {res.redraws}", file=sys.stderr)
    if args.output:
        _emit(_csv(["loss", "trial", "rel_error", "pass"], rows), args.output)
    return INVALID if failed else OK


# ---------------------------------------------------------------------------
# regression races


@dataclass
class Scenario:
    name: str
    init: L.Box
    target: L.Box
    kinds: tuple[str, ...] = L.LOSS_KINDS
    step: float = 1e-3
    max_steps: int = 1000
    tol: float = 1e-3
    theta: float = 6.0
    eta: float = 3.0

    @property
    def params(self) -> L.LossParams:
        return L.LossParams(theta=self.theta, eta=self.eta)


_SCENARIO_KEYS = {"init", "target", "kinds", "step", "max_steps", "tol", "theta", "eta"}


def parse_scenarios(text: str, path="<string>") -> list[Scenario]:
    """Blocks opened by ``defaults`` or ``scenario NAME``, then ``key value...`` lines."""
    defaults: dict = {}
    blocks: list[tuple[str, int, dict]] = []
    cur = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, *vals = line.split()
        if key == "defaults" and not vals:
            cur = defaults
        elif key == "scenario" and len(vals) == 1:
            cur = {}
            blocks.append((vals[0], lineno, cur))
        elif cur is None:
            raise ScenarioError(path, lineno, "expected 'defaults' or 'scenario NAME' first")
        elif key not in _SCENARIO_KEYS or not vals:
            raise ScenarioError(path, lineno, f"unknown or empty key {key!r}")
        else:
            cur[key] = (lineno, vals)
    out = []
    for name, lineno, kv in blocks:
        merged = {**defaults, **kv}
        try:
            for k in ("init", "target"):
                if k not in merged:
                    raise ValueError(f"scenario {name!r} lacks {k}")
            fields = {}
            for k, (ln, vals) in merged.items():
                lineno = ln
                if k in ("init", "target"):
                    if len(vals) != 4:
                        raise ValueError(f"{k} needs 4 numbers")
                    fields[k] = L.Box(*map(float, vals))
                elif k == "kinds":
                    bad = set(vals) - set(L.LOSS_KINDS)
                    if bad:
                        raise ValueError(f"unknown loss kinds {sorted(bad)}")
                    fields[k] = tuple(vals)
                elif k == "max_steps":
                    fields[k] = int(vals[0])
                else:
                    fields[k] = float(vals[0])
            out.append(Scenario(name, **fields))
        except ValueError as e:
            raise ScenarioError(path, lineno, str(e)) from None
    if not out:
        raise ScenarioError(path, 0, "no scenarios")
    return out


def default_scenarios_text() -> str:
    return resources.files("alsskit.data").joinpath("scenarios.txt").read_text()


def run_scenarios(scenarios: list[Scenario]):
    """Yield ``(scenario, trajectory)`` for every listed loss kind."""
    for sc in scenarios:
        for kind in sc.kinds:
            yield sc, L.regression_sim(sc.init, sc.target, kind, sc.step, sc.max_steps, sc.tol, sc.params)


def cmd_regress(args) -> int:
    if args.scenarios:
        try:
            text = open(args.scenarios).read()
        except OSError as e:
            raise UsageError(f"cannot read {args.scenarios}: {e.strerror}") from None
        scenarios = parse_scenarios(text, args.scenarios)
    else:
        scenarios = parse_scenarios(default_scenarios_text(), "scenarios.txt")
    traj_rows, summary = [], []
    for sc, t in run_scenarios(scenarios):
        traj_rows += [(sc.name, t.kind, *r) for r in t.rows()]
        first = t.losses[0]
        summary.append(
            (sc.name, t.kind, t.steps_to_tol, len(t.losses) - 1, t.converged, t.diverged,
             len(t.monotone_violations), first.omega_shape, first.total, t.losses[-1].total)
        )
    _emit(_csv(["scenario", "loss", "step", "iou", "lambda", "zeta", "delta", "omega", "total"], traj_rows),
          args.output)
    text = _csv(
        ["scenario", "loss", "steps_to_tol", "steps_run", "converged", "diverged", "monotone_violations",
         "initial_omega", "initial_total", "final_total"],
        summary,
    )
    if args.summary:
        _emit(text, args.summary)
    else:
        sys.stderr.write(text)
    for row in summary:
        if row[5]:
            print(f"warning: {row[0]}/{row[1]} diverged", file=sys.stderr)
    return OK


# ---------------------------------------------------------------------------
# evaluation


def cmd_eval(args) -> int:
    gts = E.read_boxes(args.gt, detections=False)
    dets = E.read_boxes(args.det, detections=True)
    gt_classes = {g.class_id for g in gts}
    classes = range(args.num_classes) if args.num_classes else None
    if classes is None:
        extra = sorted({d.class_id for d in dets} - gt_classes)
        if extra:
            print(f"warning: detection classes absent from ground truth: {extra}", file=sys.stderr)
    report = E.evaluate(dets, gts, classes, args.iou)
    for note in report.notes:
        print(f"note: {note}", file=sys.stderr)
    _emit(report.to_json(), args.json)
    if args.csv:
        _emit(report.to_csv(), args.csv)
    print(f"mAP@{args.iou:g} {report.map:.6g}  P {report.precision:.6g}  R {report.recall:.6g}  "
          f"F1 {report.f1:.6g}", file=sys.stderr)
    return OK


# ---------------------------------------------------------------------------


def _default_seed() -> int:
    raw = os.environ.get(SEED_ENV, "0")
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"${SEED_ENV} must be an integer, got {raw!r}") from None


def build_parser() -> argparse.ArgumentParser:
    from . import __version__

    p = argparse.ArgumentParser(prog="alsskit", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("params", help="per-layer parameter audit as CSV")
    s.add_argument("--config", help="graph config (default: bundled reference)")
    s.add_argument("-o", "--output", help="CSV path (default stdout)")
    s.set_defaults(func=cmd_params)

    s = sub.add_parser("shapes", help="computed vs declared output shapes")
    s.add_argument("--config")
    s.add_argument("--height", type=int, default=640)
    s.add_argument("--width", type=int, default=640)
    s.add_argument("-o", "--output")
    s.set_defaults(func=cmd_shapes)

    s = sub.add_parser("loss-table", help="recompute the shape-cost table")
    s.add_argument("--theta", type=float, default=3.0)
    s.add_argument("--eta", type=float, default=3.0)
    s.add_argument("--sweep", action="store_true", help="max deviation for theta = 1..N instead")
    s.add_argument("--sweep-max", type=int, default=8)
    s.add_argument("-o", "--output")
    s.set_defaults(func=cmd_loss_table)

    s = sub.add_parser("gradcheck", help="exact vs finite-difference loss gradients")
    s.add_argument("--loss", choices=(*L.LOSS_KINDS, "all"), default="all")
    s.add_argument("--trials", type=int, default=100)
    s.add_argument("--seed", type=int)
    s.add_argument("--theta", type=float, default=6.0)
    s.add_argument("--eta", type=float, default=3.0)
    s.add_argument("-o", "--output", help="per-trial CSV")
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("regress", help="gradient-descent races between losses")
    s.add_argument("--scenarios", help="scenario file (default: bundled suite)")
    s.add_argument("-o", "--output", help="trajectory CSV")
    s.add_argument("--summary", help="summary CSV (default stderr)")
    s.set_defaults(func=cmd_regress)

    s = sub.add_parser("eval", help="AP / mAP / max-F1 report for a detection file")
    s.add_argument("--gt", required=True)
    s.add_argument("--det", required=True)
    s.add_argument("--iou", type=float, default=0.5)
    s.add_argument("--num-classes", type=int, help="evaluate classes 0..N-1")
    s.add_argument("--json", help="JSON report path (default stdout)")
    s.add_argument("--csv", help="per-class AP CSV path")
    s.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return USAGE if e.code else OK
    try:
        if getattr(args, "seed", "absent") is None:
            args.seed = _default_seed()
        return args.func(args)
    except (UsageError, ScenarioError, G.ConfigError, E.BoxFileError) as e:
        print(f"error: {e}", file=sys.stderr)
        return USAGE
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return USAGE


if __name__ == "__main__":
    sys.exit(main())
