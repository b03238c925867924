"""Declarative detector graph: config parsing, shape propagation, parameter audit,
BN fusion, forward execution, per-layer timing and parameter dump/load.
"""

from __future__ import annotations

import copy
import csv
import io
import statistics
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import blocks as B
from ._files import atomic_write
from .tensor import as_tensor4, channel_concat, max_pool2d, upsample_nearest

KINDS = ("Input", "Focus", "CBS", "CB", "ALSS", "SPPF", "Upsample", "Concat", "MaxPool", "LCA", "CA", "Detect")
# kinds whose parameter count follows entirely from the node knobs
EXACT_KINDS = frozenset({"Input", "Focus", "CBS", "CB", "SPPF", "Upsample", "Concat", "MaxPool", "Detect"})
REFERENCE_CONFIG = "alss_yolo.cfg"

Shape = tuple  # (C, H, W)


class ConfigError(ValueError):
    def __init__(self, msg: str, line: int | None = None, path: str | None = None):
        self.msg, self.line, self.path = msg, line, path
        if path is None:
            where = "" if line is None else f"line {line}: "
        else:
            where = f"{path}: " if line is None else f"{path}:{line}: "
        super().__init__(where + msg)


class ShapeError(ValueError):
    def __init__(self, msg: str, index: int):
        self.index = index
        super().__init__(f"node {index}: {msg}")


@dataclass
class LayerNode:
    index: int
    kind: str
    inputs: tuple[int, ...]
    knobs: dict[str, str] = field(default_factory=dict)
    declared_output: Shape | None = None
    declared_params: int | None = None
    inferred_inputs: tuple[int, ...] = ()

    def get(self, key, default=None, cast=int):
        v = self.knobs.get(key)
        return default if v is None else cast(v)


@dataclass
class NetworkGraph:
    nodes: list[LayerNode]
    num_classes: int = 4
    declared_total: int | None = None
    declared_fused_total: int | None = None
    params: dict[int, B.BlockParams] = field(default_factory=dict, repr=False)
    block_configs: dict[int, object] = field(default_factory=dict, repr=False)
    fused: bool = False

    @property
    def alss_nodes(self) -> list[LayerNode]:
        return [n for n in self.nodes if n.kind == "ALSS"]

    @property
    def alpha_schedule(self) -> tuple[float, ...]:
        return tuple(float(n.knobs["alpha"]) for n in self.alss_nodes)

    @property
    def beta_schedule(self) -> tuple[float, ...]:
        return tuple(float(n.knobs["beta"]) for n in self.alss_nodes)

    @property
    def input_shape(self) -> Shape:
        node = self.nodes[0]
        return node.declared_output or (node.get("c", 1), 640, 640)

    def node(self, index: int) -> LayerNode:
        return self.nodes[index]


# ---------------------------------------------------------------------------
# config text


def _parse_shape(s: str) -> Shape | None:
    if s == "-":
        return None
    if "+" in s:
        return tuple(_parse_shape(part) for part in s.split("+"))
    return tuple(int(v) for v in s.lower().split("x"))


def _format_shape(s) -> str:
    if s is None:
        return "-"
    if s and isinstance(s[0], tuple):
        return "+".join(_format_shape(t) for t in s)
    return "x".join(str(v) for v in s)


def parse_graph(text: str) -> NetworkGraph:
    header: dict[str, str] = {}
    nodes: list[LayerNode] = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        if not tok[0].isdigit():
            if len(tok) != 2:
                raise ConfigError(f"expected '<key> <value>', got {line!r}", lineno)
            header[tok[0]] = tok[1]
            continue
        if len(tok) < 3:
            raise ConfigError("node line needs <index> <kind> <inputs>", lineno)
        index, kind, ins = int(tok[0]), tok[1], tok[2]
        if index != len(nodes):
            raise ConfigError(f"expected node index {len(nodes)}, got {index}", lineno)
        if kind not in KINDS:
            raise ConfigError(f"unknown kind {kind!r}", lineno)
        try:
            inputs = () if ins == "-" else tuple(int(v) for v in ins.split(","))
        except ValueError:
            raise ConfigError(f"bad input list {ins!r}", lineno) from None
        if any(i < 0 or i >= index for i in inputs):
            raise ConfigError(f"inputs {inputs} must reference earlier nodes", lineno)
        if (kind == "Input") != (not inputs):
            raise ConfigError("only the Input node may (and must) have no inputs", lineno)
        knobs = {}
        for kv in tok[3:]:
            if "=" not in kv:
                raise ConfigError(f"knob {kv!r} is not key=value", lineno)
            k, v = kv.split("=", 1)
            knobs[k] = v
        try:
            declared = _parse_shape(knobs.pop("declared", "-"))
            dp = knobs.pop("params", None)
            inferred = knobs.pop("inferred", None)
            node = LayerNode(
                index,
                kind,
                inputs,
                knobs,
                declared,
                None if dp in (None, "-") else int(dp),
                tuple(int(v) for v in inferred.split(",")) if inferred else (),
            )
        except ValueError as e:
            raise ConfigError(str(e), lineno) from None
        nodes.append(node)
    if not nodes:
        raise ConfigError("config defines no nodes")
    if sum(n.kind == "Input" for n in nodes) != 1 or nodes[0].kind != "Input":
        raise ConfigError("graph needs exactly one Input node at index 0")
    try:
        return NetworkGraph(
            nodes,
            num_classes=int(header.get("num_classes", 4)),
            declared_total=int(header["declared_total"]) if "declared_total" in header else None,
            declared_fused_total=int(header["declared_fused_total"]) if "declared_fused_total" in header else None,
        )
    except ValueError as e:
        raise ConfigError(f"bad header value: {e}") from None


def format_graph(g: NetworkGraph) -> str:
    lines = [f"num_classes {g.num_classes}"]
    if g.declared_total is not None:
        lines.append(f"declared_total {g.declared_total}")
    if g.declared_fused_total is not None:
        lines.append(f"declared_fused_total {g.declared_fused_total}")
    for n in g.nodes:
        parts = [str(n.index), n.kind, ",".join(map(str, n.inputs)) or "-"]
        parts += [f"{k}={v}" for k, v in n.knobs.items()]
        if n.inferred_inputs:
            parts.append("inferred=" + ",".join(map(str, n.inferred_inputs)))
        parts.append(f"declared={_format_shape(n.declared_output)}")
        if n.declared_params is not None:
            parts.append(f"params={n.declared_params}")
        lines.append(" ".join(parts))
    return "\n".join(lines) + "\n"


def load_graph(path) -> NetworkGraph:
    try:
        return parse_graph(Path(path).read_text())
    except ConfigError as e:
        raise ConfigError(e.msg, e.line, str(path)) from None


def reference_config_text() -> str:
    return resources.files("alsskit.data").joinpath(REFERENCE_CONFIG).read_text()


# ---------------------------------------------------------------------------
# shapes


def _block_config(node: LayerNode, in_channels: list[int]):
    k = node.kind
    c1 = in_channels[0] if in_channels else None
    if k == "ALSS":
        return B.AlssConfig(
            c1,
            node.get("c2"),
            node.get("alpha", cast=float),
            node.get("beta", cast=float),
            stride=node.get("s", 1),
            part_a_mode=node.get("part_a", "conv", str),
            dw_repeats=node.get("n", 1),
            shuffle_groups=node.get("groups", 2),
            part_a_kernel=node.get("a_k"),
            rounding=node.get("rounding", "floor", str),
        )
    if k == "LCA":
        return B.LcaConfig(c1, node.get("groups", 2), bool(node.get("norm", 0)))
    return None


def _node_shape(node: LayerNode, ins: list[Shape], num_classes: int, input_shape: Shape):
    k = node.kind
    if k == "Input":
        return tuple(input_shape)
    if k == "Concat":
        hw = {s[1:] for s in ins}
        if len(hw) != 1:
            raise ShapeError(f"Concat inputs disagree spatially: {ins}", node.index)
        return (sum(s[0] for s in ins),) + ins[0][1:]
    if k == "Detect":
        reg = node.get("reg_max", 16)
        return tuple((4 * reg + num_classes,) + s[1:] for s in ins)
    if len(ins) != 1:
        raise ShapeError(f"{k} takes exactly one input", node.index)
    c, h, w = ins[0]

    def conv_hw(kk, s, p):
        oh, ow = (h + 2 * p - kk) // s + 1, (w + 2 * p - kk) // s + 1
        if oh < 1 or ow < 1:
            raise ShapeError(f"{k} produces empty output from {h}x{w}", node.index)
        return oh, ow

    if k == "Focus":
        if c != 1:
            raise ShapeError(f"Focus needs 1 input channel, got {c}", node.index)
        if h % 2 or w % 2:
            raise ShapeError(f"Focus needs even spatial dims, got {h}x{w}", node.index)
        h, w = h // 2, w // 2
        return (node.get("c2"),) + conv_hw(node.get("k", 6), node.get("s", 2), node.get("p", 2))
    if k in ("CBS", "CB"):
        kk = node.get("k", 1)
        return (node.get("c2"),) + conv_hw(kk, node.get("s", 1), node.get("p", kk // 2))
    if k == "ALSS":
        s = node.get("s", 1)
        if s == 2 and (h % 2 or w % 2):
            raise ShapeError(f"downsampling ALSS needs even spatial dims, got {h}x{w}", node.index)
        return (node.get("c2"), h // s, w // s)
    if k == "SPPF":
        return (node.get("c2"), h, w)
    if k == "Upsample":
        f = node.get("factor", 2)
        return (c, h * f, w * f)
    if k == "MaxPool":
        kk = node.get("k", 2)
        return (c,) + conv_hw(kk, node.get("s", kk), node.get("p", 0))
    if k in ("LCA", "CA"):
        return (c, h, w)
    raise ShapeError(f"unhandled kind {k}", node.index)


def propagate_shapes(g: NetworkGraph, input_shape: Shape | None = None) -> list:
    """Output shape of every node.  Detect yields one shape per scale."""
    input_shape = tuple(input_shape or g.input_shape)
    shapes: list = []
    for node in g.nodes:
        ins = [shapes[i] for i in node.inputs]
        if any(isinstance(s[0], tuple) for s in ins):
            raise ShapeError("cannot consume a multi-output node", node.index)
        shapes.append(_node_shape(node, ins, g.num_classes, input_shape))
    return shapes


def _rescale(shape, fh: float, fw: float):
    if shape and isinstance(shape[0], tuple):
        return tuple(_rescale(t, fh, fw) for t in shape)
    return (shape[0], int(round(shape[1] * fh)), int(round(shape[2] * fw)))


def shape_report(g: NetworkGraph, input_shape: Shape | None = None) -> list[dict]:
    """Computed vs declared shapes.  Declared spatial dims are rescaled when the input
    differs from the declared input resolution."""
    input_shape = tuple(input_shape or g.input_shape)
    shapes = propagate_shapes(g, input_shape)
    ref = g.nodes[0].declared_output or input_shape
    fh, fw = input_shape[1] / ref[1], input_shape[2] / ref[2]
    rows = []
    for node, s in zip(g.nodes, shapes):
        d = node.declared_output
        if node.kind == "Input":
            d = input_shape
        elif d is not None:
            d = _rescale(d, fh, fw)
        rows.append(
            {
                "index": node.index,
                "kind": node.kind,
                "computed": s,
                "declared": d,
                "match": d is None or tuple(s) == tuple(d),
            }
        )
    return rows


# ---------------------------------------------------------------------------
# construction


def instantiate(g: NetworkGraph, seed: int = 0) -> NetworkGraph:
    """Attach seeded parameters to every node.  Returns ``g`` for chaining."""
    rng = np.random.default_rng(seed)
    shapes = propagate_shapes(g)
    g.params, g.block_configs = {}, {}
    for node in g.nodes:
        ins = [shapes[i][0] for i in node.inputs]
        cfg = _block_config(node, ins)
        k = node.kind
        if k == "Focus":
            p = B.init_focus(node.get("c2"), node.get("k", 6), node.get("s", 2), node.get("p", 2), rng=rng)
        elif k in ("CBS", "CB"):
            kk = node.get("k", 1)
            p = B.init_conv_bn(ins[0], node.get("c2"), kk, node.get("s", 1), node.get("p", kk // 2), rng=rng)
        elif k == "ALSS":
            p = B.init_alss(cfg, rng)
        elif k == "SPPF":
            p = B.init_sppf(ins[0], node.get("c2"), node.get("k", 5), rng=rng)
        elif k == "LCA":
            p = B.init_lca(cfg, rng)
        elif k == "CA":
            p = B.init_ca(ins[0], node.get("reduction", 32), rng=rng)
        elif k == "Detect":
            p = B.init_detect(g.num_classes, tuple(ins), node.get("reg_max", 16), rng=rng)
        else:
            p = B.BlockParams()
        g.params[node.index] = p
        if cfg is not None:
            g.block_configs[node.index] = cfg
    g.fused = False
    return g


def build_alss_yolo(num_classes: int = 4, overrides: dict | None = None, seed: int = 0) -> NetworkGraph:
    """Reference detector from the bundled config.

    ``overrides`` maps node index to a dict of knob replacements, e.g.
    ``{4: {"part_a": "conv"}}``.
    """
    if num_classes < 1:
        raise ValueError("num_classes must be >= 1")
    g = parse_graph(reference_config_text())
    g.num_classes = num_classes
    for idx, knobs in (overrides or {}).items():
        g.nodes[idx].knobs.update({k: str(v) for k, v in knobs.items()})
    return instantiate(g, seed)


# ---------------------------------------------------------------------------
# audit


@dataclass
class AuditRow:
    index: int
    kind: str
    computed_shape: object
    declared_shape: Shape | None
    computed_params: int
    declared_params: int | None
    fused_params: int
    inferred_inputs: tuple[int, ...] = ()

    @property
    def delta(self) -> int | None:
        return None if self.declared_params is None else self.computed_params - self.declared_params

    @property
    def rel_delta(self) -> float | None:
        if not self.declared_params:
            return None
        return self.delta / self.declared_params

    @property
    def shape_match(self) -> bool:
        return self.declared_shape is None or tuple(self.computed_shape) == tuple(self.declared_shape)

    @property
    def exact_class(self) -> bool:
        return self.kind in EXACT_KINDS


@dataclass
class AuditReport:
    rows: list[AuditRow]
    declared_total: int | None
    declared_fused_total: int | None

    @property
    def computed_total(self) -> int:
        return sum(r.computed_params for r in self.rows)

    @property
    def fused_total(self) -> int:
        return sum(r.fused_params for r in self.rows)

    @property
    def declared_sum(self) -> int:
        return sum(r.declared_params or 0 for r in self.rows)

    def exact_mismatches(self) -> list[AuditRow]:
        return [r for r in self.rows if r.exact_class and r.delta not in (None, 0)]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(
            [
                "index", "kind", "class", "inferred_inputs", "computed_shape", "declared_shape",
                "shape_match", "computed_params", "declared_params", "delta", "rel_delta", "fused_params",
            ]
        )
        for r in self.rows:
            w.writerow(
                [
                    r.index, r.kind, "exact" if r.exact_class else "calibrated",
                    ";".join(map(str, r.inferred_inputs)), _format_shape(r.computed_shape),
                    _format_shape(r.declared_shape), int(r.shape_match), r.computed_params,
                    "" if r.declared_params is None else r.declared_params,
                    "" if r.delta is None else r.delta,
                    "" if r.rel_delta is None else f"{r.rel_delta:.6g}", r.fused_params,
                ]
            )
        dt, dft = self.declared_total, self.declared_fused_total
        w.writerow(["total", "", "", "", "", "", "", self.computed_total, dt or "",
                    "" if dt is None else self.computed_total - dt,
                    "" if not dt else f"{(self.computed_total - dt) / dt:.6g}", self.fused_total])
        w.writerow(["fused_total", "", "", "", "", "", "", self.fused_total, dft or "",
                    "" if dft is None else self.fused_total - dft,
                    "" if not dft else f"{(self.fused_total - dft) / dft:.6g}", self.fused_total])
        return buf.getvalue()


def audit_params(g: NetworkGraph) -> AuditReport:
    if not g.params:
        instantiate(g)
    shapes = propagate_shapes(g)
    rows = []
    for node, s in zip(g.nodes, shapes):
        p = g.params[node.index]
        rows.append(
            AuditRow(
                node.index,
                node.kind,
                s,
                node.declared_output,
                B.block_param_count(p),
                node.declared_params,
                B.block_param_count(B.fuse_block(p)),
                node.inferred_inputs,
            )
        )
    return AuditReport(rows, g.declared_total, g.declared_fused_total)


def fuse_bn(g: NetworkGraph) -> NetworkGraph:
    """Copy of ``g`` with every conv+BN pair folded into one biased conv."""
    out = copy.copy(g)
    out.nodes = list(g.nodes)
    out.params = {i: B.fuse_block(p) for i, p in g.params.items()}
    out.fused = True
    return out


# ---------------------------------------------------------------------------
# execution


def _run_node(g: NetworkGraph, node: LayerNode, ins: list):
    k, p = node.kind, g.params[node.index]
    if k == "Input":
        return as_tensor4(ins[0])
    if k == "Concat":
        return channel_concat(ins)
    if k == "Detect":
        return B.detect_forward(ins, p)
    x = ins[0]
    if k == "Focus":
        return B.focus_forward(x, p)
    if k == "CBS":
        return B.cbs_forward(x, p)
    if k == "CB":
        return B.cb_forward(x, p)
    if k == "ALSS":
        cfg = g.block_configs[node.index]
        return (B.alss_forward if cfg.stride == 1 else B.alss_down_forward)(x, cfg, p)
    if k == "SPPF":
        return B.sppf_forward(x, p, node.get("k", 5))
    if k == "Upsample":
        return upsample_nearest(x, node.get("factor", 2))
    if k == "MaxPool":
        kk = node.get("k", 2)
        return max_pool2d(x, kk, node.get("s", kk), node.get("p", 0))
    if k == "LCA":
        return B.lca_forward(x, g.block_configs[node.index], p)
    if k == "CA":
        return B.ca_forward(x, p)
    raise ValueError(f"unhandled kind {k}")


def forward(g: NetworkGraph, x) -> list:
    """Run the graph; element ``i`` is node ``i``'s output (a list for Detect)."""
    x = as_tensor4(x)
    if x.shape[1] != g.input_shape[0]:
        raise ShapeError(f"input has {x.shape[1]} channels, graph expects {g.input_shape[0]}", 0)
    if not g.params:
        instantiate(g)
    outs: list = []
    for node in g.nodes:
        ins = [x] if node.kind == "Input" else [outs[i] for i in node.inputs]
        try:
            outs.append(_run_node(g, node, ins))
        except ShapeError:
            raise
        except ValueError as e:
            raise ShapeError(str(e), node.index) from e
    return outs


def detect_inputs(g: NetworkGraph, outs: list) -> list[np.ndarray]:
    head = next(n for n in g.nodes if n.kind == "Detect")
    return [outs[i] for i in head.inputs]


def time_layers(g: NetworkGraph, x, repeats: int = 3) -> list[dict]:
    """Median wall time per node in milliseconds, with the sample variance."""
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    x = as_tensor4(x)
    if not g.params:
        instantiate(g)
    samples = {n.index: [] for n in g.nodes}
    for _ in range(repeats):
        outs: list = []
        for node in g.nodes:
            ins = [x] if node.kind == "Input" else [outs[i] for i in node.inputs]
            t0 = time.perf_counter_ns()
            outs.append(_run_node(g, node, ins))
            samples[node.index].append(max(time.perf_counter_ns() - t0, 1) / 1e6)
    return [
        {
            "index": n.index,
            "kind": n.kind,
            "median_ms": statistics.median(samples[n.index]),
            "variance": statistics.variance(samples[n.index]) if repeats > 1 else 0.0,
        }
        for n in g.nodes
    ]


# ---------------------------------------------------------------------------
# parameter dump


def _flat_tensors(g: NetworkGraph):
    for idx in sorted(g.params):
        for name, v in g.params[idx].items():
            if isinstance(v, B.ConvParams):
                yield f"{idx}.{name}.weight", v.weights
                if v.bias is not None:
                    yield f"{idx}.{name}.bias", v.bias
            else:
                for f in ("scale", "shift", "running_mean", "running_var"):
                    yield f"{idx}.{name}.{f}", getattr(v, f)


def save_params(g: NetworkGraph, path) -> None:
    """Little-endian float32 blob in name order plus a ``.idx`` sidecar of
    ``name offset length`` lines (offsets and lengths in elements)."""
    blobs, index, off = [], [], 0
    for name, arr in _flat_tensors(g):
        a = np.ascontiguousarray(arr, dtype="<f4").ravel()
        blobs.append(a.tobytes())
        index.append(f"{name} {off} {a.size}")
        off += a.size
    atomic_write(path, b"".join(blobs))
    atomic_write(str(path) + ".idx", ("\n".join(index) + "\n").encode())


def load_params(g: NetworkGraph, path) -> NetworkGraph:
    """Fill ``g``'s parameters from a dump written by :func:`save_params`."""
    data = np.fromfile(path, dtype="<f4")
    entries = {}
    for line in Path(str(path) + ".idx").read_text().splitlines():
        name, off, n = line.split()
        entries[name] = (int(off), int(n))
    if not g.params:
        instantiate(g)
    for name, arr in _flat_tensors(g):
        if name not in entries:
            raise KeyError(f"dump has no tensor {name!r}")
        off, n = entries[name]
        if n != arr.size:
            raise ValueError(f"{name}: dump holds {n} values, graph expects {arr.size}")
        arr[...] = data[off : off + n].astype(np.float64).reshape(arr.shape)
    return g
