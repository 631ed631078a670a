"""Model graphs: assembly of the baseline and improved detectors, forward
evaluation, parameter/MAC accounting, deterministic init, and weight IO.

A graph is an ordered tuple of nodes; every edge references an earlier node or
the reserved input "image". Parameter-bearing blocks are registered once in the
graph's param table under a canonical name, so weights shared by several nodes
(the lightweight head's RepConv stack and its box/cls convs) are stored and
counted exactly once.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .blocks import (
    C2f,
    ConvBlock,
    HeadConfig,
    MSCABlock,
    SharedRepHead,
    SPPF,
    BaselineHead,
    ScaleParam,
)
from .errors import SpecError, ValidationError
from .tensor_ops import DTYPE, concat_channels, silu, upsample_nearest2x
from .weights import WeightStore

INPUT = "image"

# node counts at 640x640, nc arbitrary (structure does not depend on nc)
BASELINE_NODE_COUNT = 43
IMPROVED_NODE_COUNT = 71
IMPROVED_FUSED_NODE_COUNT = 47

# suffixes that are frozen statistics, not learnable parameters
_STAT_SUFFIXES = ("bn.mean", "bn.var")


@dataclass(frozen=True)
class Node:
    name: str
    kind: str
    inputs: tuple = ()
    block: object = None
    group: str | None = None


@dataclass(frozen=True)
class ParamEntry:
    """Canonical parameter prefix -> block, attributed to one node for reporting."""

    name: str
    block: object
    node: str


@dataclass(frozen=True)
class ModelGraph:
    variant: str
    nc: int
    nodes: tuple
    params: tuple
    outputs: tuple
    cfg: HeadConfig
    fused: bool = False

    def node_map(self) -> dict:
        return {n.name: n for n in self.nodes}


def _validate_graph(nodes, outputs) -> None:
    seen = {INPUT}
    for node in nodes:
        if node.name in seen:
            raise SpecError(f"duplicate node name {node.name!r}")
        for ref in node.inputs:
            if ref not in seen:
                raise SpecError(f"node {node.name!r} references {ref!r} before definition")
        seen.add(node.name)
    if len(outputs) != 3:
        raise SpecError(f"expected 3 output nodes, got {len(outputs)}")
    for out in outputs:
        if out not in seen:
            raise SpecError(f"output {out!r} is not a node")


class _Builder:
    def __init__(self):
        self.nodes: list[Node] = []
        self.params: list[ParamEntry] = []

    def add(self, name, kind, inputs, block=None, group=None, register=True, owner=None):
        self.nodes.append(Node(name, kind, tuple(inputs), block, group))
        if block is not None and register:
            self.params.append(ParamEntry(owner or name, block, name))
        return name

    def wire_repconv(self, rep, stack, level, x, first):
        """Expand a RepConv application site into its branch subgraph."""
        base = f"head.{level}.{stack}"
        gid = f"head.{stack}@{level}"
        k3 = self.add(f"{base}.k3", "conv", [x], rep.branch_3x3,
                      group=gid, register=first, owner=f"head.{stack}.k3")
        k1 = self.add(f"{base}.k1", "conv", [x], rep.branch_1x1,
                      group=gid, register=first, owner=f"head.{stack}.k1")
        av = self.add(f"{base}.avg", "avgpool_bn", [x], rep.branch_avg,
                      group=gid, register=first, owner=f"head.{stack}.avg")
        s = self.add(f"{base}.sum", "add", [k3, k1, av], group=gid)
        return self.add(f"{base}.act", "silu", [s], group=gid)


def build_model(variant: str, nc: int = 3) -> ModelGraph:
    """Assemble the detector graph. The improved variant swaps the last two
    backbone C2f stages and neck stages 1/3/4 to the split-path conv variant,
    gates the backbone tail with strip-conv attention, and replaces the
    decoupled head with the shared reparameterizable head."""
    if variant not in ("baseline", "improved"):
        raise SpecError(f"unknown model variant {variant!r}")
    improved = variant == "improved"
    cfg = HeadConfig(nc=nc)
    b = _Builder()

    def c2f_kind(ms):
        return "c2f_ms" if ms else "c2f"

    def c2f_variant(ms):
        return "multiscale" if ms else "standard"

    x = INPUT
    x = b.add("backbone.conv0", "conv", [x], ConvBlock(3, 16, 3, 2))
    x = b.add("backbone.conv1", "conv", [x], ConvBlock(16, 32, 3, 2))
    x = b.add("backbone.c2f2", "c2f", [x], C2f(32, 32, 1, shortcut=True))
    x = b.add("backbone.conv3", "conv", [x], ConvBlock(32, 64, 3, 2))
    p3b = b.add("backbone.c2f4", "c2f", [x], C2f(64, 64, 2, shortcut=True))
    x = b.add("backbone.conv5", "conv", [p3b], ConvBlock(64, 128, 3, 2))
    p4b = b.add("backbone.c2f6", c2f_kind(improved), [x],
                C2f(128, 128, 2, shortcut=True, variant=c2f_variant(improved)))
    x = b.add("backbone.conv7", "conv", [p4b], ConvBlock(128, 256, 3, 2))
    x = b.add("backbone.c2f8", c2f_kind(improved), [x],
              C2f(256, 256, 1, shortcut=True, variant=c2f_variant(improved)))
    x = b.add("backbone.sppf", "sppf", [x], SPPF(256))

    if improved:
        # strip-conv attention unit gating the backbone tail, with a residual
        a = b.add("attn.proj_in", "conv", [x], ConvBlock(256, 256, 1, bn=False, act="silu"))
        a = b.add("attn.msca", "msca", [a], MSCABlock(256))
        a = b.add("attn.proj_out", "conv", [a], ConvBlock(256, 256, 1, bn=False, act="none"))
        x = b.add("attn.add", "add", [x, a])
    p5b = x

    u = b.add("neck.up10", "upsample", [p5b])
    c = b.add("neck.cat11", "concat", [u, p4b])
    n1 = b.add("neck.c2f12", c2f_kind(improved), [c],
               C2f(256 + 128, 128, 1, variant=c2f_variant(improved)))
    u = b.add("neck.up13", "upsample", [n1])
    c = b.add("neck.cat14", "concat", [u, p3b])
    p3 = b.add("neck.c2f15", "c2f", [c], C2f(128 + 64, 64, 1))
    d = b.add("neck.conv16", "conv", [p3], ConvBlock(64, 64, 3, 2))
    c = b.add("neck.cat17", "concat", [d, n1])
    p4 = b.add("neck.c2f18", c2f_kind(improved), [c],
               C2f(128 + 64, 128, 1, variant=c2f_variant(improved)))
    d = b.add("neck.conv19", "conv", [p4], ConvBlock(128, 128, 3, 2))
    c = b.add("neck.cat20", "concat", [d, p5b])
    p5 = b.add("neck.c2f21", c2f_kind(improved), [c],
               C2f(256 + 128, 256, 1, variant=c2f_variant(improved)))

    outputs = []
    taps = (p3, p4, p5)
    if improved:
        head = SharedRepHead(cfg)
        for i, level in enumerate(("p3", "p4", "p5")):
            first = i == 0
            t = b.add(f"head.{level}.stem", "conv", [taps[i]], head.stems[i])
            t = b.wire_repconv(head.rep1, "rep1", level, t, first)
            t = b.wire_repconv(head.rep2, "rep2", level, t, first)
            box = b.add(f"head.{level}.box", "conv", [t], head.box_conv,
                        register=first, owner="head.box")
            box = b.add(f"head.{level}.scale", "scale", [box], head.scales[i])
            cls = b.add(f"head.{level}.cls", "conv", [t], head.cls_conv,
                        register=first, owner="head.cls")
            outputs.append(b.add(f"head.{level}.out", "concat", [box, cls]))
    else:
        head = BaselineHead(cfg)
        for i, level in enumerate(("p3", "p4", "p5")):
            bx = taps[i]
            for j, blk in enumerate(head.box_branches[i], 1):
                bx = b.add(f"head.{level}.box{j}", "conv", [bx], blk)
            cl = taps[i]
            for j, blk in enumerate(head.cls_branches[i], 1):
                cl = b.add(f"head.{level}.cls{j}", "conv", [cl], blk)
            outputs.append(b.add(f"head.{level}.out", "concat", [bx, cl]))

    _validate_graph(b.nodes, outputs)
    return ModelGraph(variant, nc, tuple(b.nodes), tuple(b.params), tuple(outputs), cfg)


def run_graph(g: ModelGraph, x: np.ndarray) -> dict:
    """Evaluate every node on input `x`; returns the full name -> tensor map."""
    vals = {INPUT: np.asarray(x, dtype=DTYPE)}
    for node in g.nodes:
        ins = [vals[i] for i in node.inputs]
        if node.kind in ("conv", "c2f", "c2f_ms", "sppf", "msca", "avgpool_bn", "scale"):
            v = node.block.forward(ins[0])
        elif node.kind == "add":
            acc = ins[0].astype(np.float64)
            for t in ins[1:]:
                acc = acc + t.astype(np.float64)
            v = acc.astype(DTYPE)
        elif node.kind == "silu":
            v = silu(ins[0])
        elif node.kind == "upsample":
            v = upsample_nearest2x(ins[0])
        elif node.kind == "concat":
            v = concat_channels(ins)
        else:
            raise SpecError(f"unknown node kind {node.kind!r}")
        vals[node.name] = v
    return vals


def forward(g: ModelGraph, x: np.ndarray):
    """Run the graph and return the three head maps (P3, P4, P5)."""
    vals = run_graph(g, x)
    return tuple(vals[name] for name in g.outputs)


@dataclass(frozen=True)
class NodeProfile:
    name: str
    kind: str
    out_shape: tuple
    params: int
    macs: int
    elem_ops: int


def _entry_param_count(entry: ParamEntry) -> int:
    total = 0
    for suffix, arr in entry.block.named_arrays():
        if suffix.endswith(_STAT_SUFFIXES):
            continue
        total += arr.size
    return total


def profile_graph(g: ModelGraph, size: int = 640):
    """Shape propagation plus per-node parameter and MAC accounting at the given
    square input size. Returns (rows, total_params, total_macs, total_elem_ops)."""
    params_by_node: dict[str, int] = {}
    for entry in g.params:
        params_by_node[entry.node] = params_by_node.get(entry.node, 0) + _entry_param_count(entry)

    shapes = {INPUT: (1, 3, size, size)}
    rows = []
    for node in g.nodes:
        ins = [shapes[i] for i in node.inputs]
        if node.kind in ("conv", "c2f", "c2f_ms", "sppf", "msca", "avgpool_bn", "scale"):
            macs, elems, out = node.block.profile(ins[0])
        elif node.kind == "add":
            out = ins[0]
            n, c, h, w = out
            macs, elems = 0, (len(ins) - 1) * n * c * h * w
        elif node.kind == "silu":
            out = ins[0]
            n, c, h, w = out
            macs, elems = 0, n * c * h * w
        elif node.kind == "upsample":
            n, c, h, w = ins[0]
            out = (n, c, 2 * h, 2 * w)
            macs, elems = 0, 0
        elif node.kind == "concat":
            n, _, h, w = ins[0]
            out = (n, sum(s[1] for s in ins), h, w)
            macs, elems = 0, 0
        else:
            raise SpecError(f"unknown node kind {node.kind!r}")
        shapes[node.name] = out
        rows.append(NodeProfile(node.name, node.kind, out, params_by_node.get(node.name, 0), macs, elems))
    total_params = sum(r.params for r in rows)
    total_macs = sum(r.macs for r in rows)
    total_elems = sum(r.elem_ops for r in rows)
    return rows, total_params, total_macs, total_elems


def param_count(g: ModelGraph) -> int:
    return sum(_entry_param_count(e) for e in g.params)


def flop_count(g: ModelGraph, size: int = 640):
    """(total MACs, total elementwise ops) at the given square input size."""
    _, _, macs, elems = profile_graph(g, size)
    return macs, elems


def output_shapes(g: ModelGraph, size: int = 640):
    rows, _, _, _ = profile_graph(g, size)
    by_name = {r.name: r.out_shape for r in rows}
    return tuple(by_name[o] for o in g.outputs)


def init_weights(g: ModelGraph, seed: int = 0) -> WeightStore:
    """Deterministically initialize every parameter in place and return a
    snapshot store. Conv weights are uniform within +/- sqrt(1/fan_in) from a
    PCG64 stream; norms start at identity, biases at zero, scales at one."""
    rng = np.random.default_rng(seed)
    for entry in g.params:
        for suffix, arr in entry.block.named_arrays():
            leaf = suffix.rsplit(".", 1)[-1]
            if leaf == "w":
                fan_in = int(np.prod(arr.shape[1:]))
                bound = float(np.sqrt(1.0 / fan_in))
                arr[...] = rng.uniform(-bound, bound, arr.shape).astype(DTYPE)
            elif leaf in ("gamma", "var", "s"):
                arr[...] = 1.0
            else:  # b, beta, mean
                arr[...] = 0.0
    return collect_weights(g)


def collect_weights(g: ModelGraph) -> WeightStore:
    store = WeightStore()
    for entry in g.params:
        for suffix, arr in entry.block.named_arrays():
            store.put(f"{entry.name}.{suffix}", arr.copy())
    return store


def load_weights(g: ModelGraph, store: WeightStore) -> None:
    """Copy a store into the graph's blocks, validating names and shapes."""
    expected = set()
    for entry in g.params:
        for suffix, arr in entry.block.named_arrays():
            name = f"{entry.name}.{suffix}"
            expected.add(name)
            if name not in store:
                raise ValidationError(f"store is missing tensor {name!r} for node {entry.node!r}")
            src = store[name]
            if tuple(src.shape) != tuple(arr.shape):
                raise ValidationError(
                    f"tensor {name!r}: store shape {tuple(src.shape)} != graph shape {tuple(arr.shape)}"
                )
    extra = [n for n in store.names() if n not in expected]
    if extra:
        raise ValidationError(f"store has {len(extra)} tensors unknown to the graph: {extra[:5]}")
    for entry in g.params:
        for suffix, arr in entry.block.named_arrays():
            arr[...] = store[f"{entry.name}.{suffix}"]


def structurally_equal(g1: ModelGraph, g2: ModelGraph) -> bool:
    """Same topology and bit-equal parameters (used for fusion idempotence)."""
    if g1.variant != g2.variant or g1.nc != g2.nc:
        return False
    if len(g1.nodes) != len(g2.nodes) or g1.outputs != g2.outputs:
        return False
    for a, b in zip(g1.nodes, g2.nodes):
        if (a.name, a.kind, a.inputs, a.group) != (b.name, b.kind, b.inputs, b.group):
            return False
    if len(g1.params) != len(g2.params):
        return False
    for ea, eb in zip(g1.params, g2.params):
        if ea.name != eb.name or ea.node != eb.node:
            return False
        names_a = dict((s, v) for s, v in ea.block.named_arrays())
        names_b = dict((s, v) for s, v in eb.block.named_arrays())
        if names_a.keys() != names_b.keys():
            return False
        for k in names_a:
            if not np.array_equal(names_a[k], names_b[k]):
                return False
    return True
