"""Structural-reparameterization pass: collapse multi-branch RepConvs into single
biased 3x3 convolutions and fold every conv+BN pair graph-wide.

All transforms build new blocks and a new graph; inputs are never mutated, so a
fused graph can be compared side by side with its source.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, replace

import numpy as np

from .blocks import (
    AvgPoolBranch,
    Bottleneck,
    C2f,
    ConvBlock,
    MultiScaleSplitConv,
    MSCABlock,
    RepConvBlock,
    SPPF,
    ScaleParam,
)
from .errors import NumericError, ShapeError, SpecError, StateError
from .model import ModelGraph, Node, ParamEntry, _validate_graph
from .tensor_ops import DTYPE, BatchNormParams, Conv2dSpec


@dataclass(frozen=True)
class FusedConv:
    """Weights and bias of a collapsed RepConv: one 3x3 kernel per branch sum."""

    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        if not (np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.bias))):
            raise NumericError("fused conv contains non-finite entries")


def _fold64(w, b, bn: BatchNormParams):
    var = bn.var.astype(np.float64) + bn.eps
    if np.any(var <= 0):
        raise NumericError("variance + eps must be positive to fold a batch norm")
    scale = bn.gamma.astype(np.float64) / np.sqrt(var)
    w2 = w.astype(np.float64) * scale[:, None, None, None]
    b0 = np.zeros(len(scale)) if b is None else b.astype(np.float64)
    b2 = bn.beta.astype(np.float64) + (b0 - bn.mean.astype(np.float64)) * scale
    return w2, b2


def fuse_conv_bn(w: np.ndarray, b, bn: BatchNormParams):
    """Fold BN into conv weights: w' = w*g/sqrt(v+eps), b' = beta + (b-mu)*g/sqrt(v+eps)."""
    if w.shape[0] != bn.channels:
        raise ShapeError(f"channel axis: conv has {w.shape[0]} outputs, bn has {bn.channels}")
    w2, b2 = _fold64(w, b, bn)
    return w2.astype(DTYPE), b2.astype(DTYPE)


def lower_1x1_to_3x3(k: np.ndarray) -> np.ndarray:
    """Embed a 1x1 kernel at the center of a zero 3x3 kernel."""
    if k.shape[2:] != (1, 1):
        raise SpecError(f"expected a 1x1 kernel, got {k.shape[2:]}")
    out = np.zeros((k.shape[0], k.shape[1], 3, 3), dtype=k.dtype)
    out[:, :, 1, 1] = k[:, :, 0, 0]
    return out


def avg_kernel_3x3(channels: int) -> np.ndarray:
    """3x3 conv weights equal to a stride-1 average pool with padding counted:
    1/9 on the diagonal channel pattern, zero elsewhere."""
    w = np.zeros((channels, channels, 3, 3), dtype=DTYPE)
    idx = np.arange(channels)
    w[idx, idx] = 1.0 / 9.0
    return w


def fuse_repconv(blk: RepConvBlock) -> FusedConv:
    """Fold each branch's BN, lower non-3x3 branches to 3x3, and sum."""
    if blk.mode != "train":
        raise StateError("fuse_repconv expects a train-form block")
    b3, b1 = blk.branch_3x3, blk.branch_1x1
    if b3.spec.out_ch != b1.spec.out_ch or b3.spec.in_ch != b1.spec.in_ch:
        raise ShapeError("branch shapes disagree")
    w, b = _fold64(b3.w, None, b3.bn)
    w1, bias1 = _fold64(lower_1x1_to_3x3(b1.w), None, b1.bn)
    w, b = w + w1, b + bias1
    if blk.branch_avg is not None:
        if blk.stride != 1:
            raise SpecError("avg-pool branch cannot be lowered at stride != 1")
        wa, ba = _fold64(avg_kernel_3x3(blk.out_ch), None, blk.branch_avg.bn)
        w, b = w + wa, b + ba
    return FusedConv(w.astype(DTYPE), b.astype(DTYPE))


def _fused_conv_block(fc: FusedConv, in_ch, out_ch, stride, act="silu") -> ConvBlock:
    spec = Conv2dSpec(in_ch, out_ch, (3, 3), stride, (1, 1), has_bias=True)
    return ConvBlock.from_parts(spec, fc.weights, fc.bias, None, act)


def deploy_repconv(blk: RepConvBlock) -> RepConvBlock:
    """New deploy-form block: one biased 3x3 conv plus the post-activation."""
    fc = fuse_repconv(blk)
    out = RepConvBlock.__new__(RepConvBlock)
    out.in_ch, out.out_ch, out.stride = blk.in_ch, blk.out_ch, blk.stride
    out.branch_3x3 = out.branch_1x1 = out.branch_avg = None
    out.mode = "deploy"
    out.deploy = _fused_conv_block(fc, blk.in_ch, blk.out_ch, blk.stride)
    return out


def fold_conv_block(cb: ConvBlock) -> ConvBlock:
    """BN folded into the conv; BN-free blocks are copied unchanged."""
    if cb.bn is None:
        b = None if cb.b is None else cb.b.copy()
        return ConvBlock.from_parts(cb.spec, cb.w.copy(), b, None, cb.act)
    w, b = fuse_conv_bn(cb.w, cb.b, cb.bn)
    return ConvBlock.from_parts(replace(cb.spec, has_bias=True), w, b, None, cb.act)


def fold_block(block):
    """Recursively fold conv+BN pairs inside any block, returning a new block."""
    if block is None:
        return None
    if isinstance(block, ConvBlock):
        return fold_conv_block(block)
    if isinstance(block, ScaleParam):
        out = ScaleParam(float(block.s[0]))
        return out
    if isinstance(block, AvgPoolBranch):
        out = copy.copy(block)
        out.bn = BatchNormParams(block.bn.gamma.copy(), block.bn.beta.copy(),
                                 block.bn.mean.copy(), block.bn.var.copy(), block.bn.eps)
        return out
    if isinstance(block, MultiScaleSplitConv):
        out = copy.copy(block)
        out.path3 = fold_block(block.path3)
        out.path5 = fold_block(block.path5)
        out.fuse = fold_block(block.fuse)
        return out
    if isinstance(block, Bottleneck):
        out = copy.copy(block)
        out.cv1 = fold_block(block.cv1)
        out.cv2 = fold_block(block.cv2)
        return out
    if isinstance(block, C2f):
        out = copy.copy(block)
        out.cv1 = fold_block(block.cv1)
        out.bottlenecks = [fold_block(m) for m in block.bottlenecks]
        out.cv2 = fold_block(block.cv2)
        return out
    if isinstance(block, SPPF):
        out = copy.copy(block)
        out.cv1 = fold_block(block.cv1)
        out.cv2 = fold_block(block.cv2)
        return out
    if isinstance(block, MSCABlock):
        out = copy.copy(block)
        out.base = fold_block(block.base)
        out.pairs = [(fold_block(r), fold_block(c)) for r, c in block.pairs]
        out.mix = fold_block(block.mix)
        return out
    raise SpecError(f"cannot fold block of type {type(block).__name__}")


def _repconv_from_branches(b3: ConvBlock, b1: ConvBlock, avg: AvgPoolBranch | None) -> RepConvBlock:
    rep = RepConvBlock.__new__(RepConvBlock)
    rep.in_ch, rep.out_ch = b3.spec.in_ch, b3.spec.out_ch
    rep.stride = b3.spec.stride[0]
    rep.branch_3x3, rep.branch_1x1, rep.branch_avg = b3, b1, avg
    rep.mode, rep.deploy = "train", None
    return rep


def fuse_model_graph(g: ModelGraph) -> ModelGraph:
    """Replace every RepConv branch subgraph with its fused conv node and fold
    BN graph-wide. Idempotent: a graph without branch groups round-trips."""
    # branch group id -> role -> node
    groups: dict[str, dict[str, Node]] = {}
    for node in g.nodes:
        if node.group:
            role = node.name.rsplit(".", 1)[1]
            groups.setdefault(node.group, {})[role] = node

    # fuse each distinct parameter stack once; sites sharing a stack share the result
    fused_stacks: dict[int, ConvBlock] = {}
    stack_member_ids: dict[int, int] = {}  # id(branch block) -> id(k3 block) key
    for members in groups.values():
        b3 = members["k3"].block
        b1 = members["k1"].block
        avg = members["avg"].block if "avg" in members else None
        key = id(b3)
        for blk in (b3, b1, avg):
            if blk is not None:
                stack_member_ids[id(blk)] = key
        if key not in fused_stacks:
            rep = _repconv_from_branches(b3, b1, avg)
            fused_stacks[key] = _fused_conv_block(
                fuse_repconv(rep), rep.in_ch, rep.out_ch, rep.stride
            )

    folded: dict[int, object] = {}

    def fold_memo(block):
        if block is None:
            return None
        if id(block) not in folded:
            folded[id(block)] = fold_block(block)
        return folded[id(block)]

    rename: dict[str, str] = {}
    new_nodes: list[Node] = []
    site_node: dict[int, str] = {}  # stack key -> first fused node name
    for node in g.nodes:
        if node.group:
            role = node.name.rsplit(".", 1)[1]
            if role != "k3":
                continue  # k1/avg/sum/act branch nodes vanish
            base = node.name.rsplit(".", 1)[0]
            key = stack_member_ids[id(node.block)]
            inputs = tuple(rename.get(i, i) for i in node.inputs)
            new_nodes.append(Node(base, "conv", inputs, fused_stacks[key]))
            site_node.setdefault(key, base)
            rename[f"{base}.act"] = base
        else:
            inputs = tuple(rename.get(i, i) for i in node.inputs)
            new_nodes.append(Node(node.name, node.kind, inputs, fold_memo(node.block), None))

    new_params: list[ParamEntry] = []
    emitted_stacks: set[int] = set()
    for entry in g.params:
        key = stack_member_ids.get(id(entry.block))
        if key is not None:
            if key in emitted_stacks:
                continue
            emitted_stacks.add(key)
            # "head.rep1.k3" -> "head.rep1"; the k3 entry is registered first
            stack_name = entry.name.rsplit(".", 1)[0]
            new_params.append(ParamEntry(stack_name, fused_stacks[key], site_node[key]))
        else:
            new_params.append(ParamEntry(entry.name, fold_memo(entry.block), entry.node))

    outputs = tuple(rename.get(o, o) for o in g.outputs)
    _validate_graph(new_nodes, outputs)
    return ModelGraph(g.variant, g.nc, tuple(new_nodes), tuple(new_params), outputs,
                      g.cfg, fused=True)
