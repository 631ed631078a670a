"""Composite block tests: composition oracles, isolation cases, parameter
comparisons, and the two detection heads."""
import numpy as np
import pytest

from repdet.blocks import (
    BaselineHead,
    Bottleneck,
    C2f,
    ConvBlock,
    MultiScaleSplitConv,
    HeadConfig,
    MSCABlock,
    SharedRepHead,
    RepConvBlock,
    SPPF,
)
from repdet.errors import SpecError, StateError
from repdet.tensor_ops import (
    batch_norm_inference,
    concat_channels,
    conv2d,
    pool2d,
    silu,
    split_channels,
)

from oracles import c2f_params, conv_block_params


def randomize(block, rng, scale=1.0):
    """Fill every array of a block with unit-scale noise; BN stats stay sane."""
    for suffix, arr in block.named_arrays():
        leaf = suffix.rsplit(".", 1)[-1]
        if leaf == "var":
            arr[...] = rng.uniform(0.25, 2.0, arr.shape)
        elif leaf == "gamma":
            arr[...] = rng.uniform(0.5, 1.5, arr.shape)
        elif leaf == "s":
            arr[...] = rng.uniform(0.5, 1.5, arr.shape)
        else:
            arr[...] = rng.uniform(-scale, scale, arr.shape)
    return block


class TestConvBlock:
    def test_identity_passthrough(self):
        blk = ConvBlock(3, 3, 1, groups=3, act="none")
        blk.w[...] = 1.0
        blk.bn.eps = 1e-12
        x = np.random.default_rng(0).normal(size=(1, 3, 4, 4)).astype(np.float32)
        assert np.abs(blk.forward(x) - x).max() < 1e-6

    def test_zero_weights_give_silu_beta(self):
        blk = ConvBlock(2, 3, 3)
        blk.bn.beta[...] = [0.5, -1.0, 2.0]
        blk.bn.eps = 1e-12
        out = blk.forward(np.random.default_rng(1).normal(size=(1, 2, 4, 4)).astype(np.float32))
        want = silu(np.broadcast_to(np.float32([0.5, -1.0, 2.0])[None, :, None, None],
                                    out.shape).copy())
        assert np.abs(out - want).max() < 1e-6

    def test_matches_op_composition(self):
        rng = np.random.default_rng(2)
        blk = randomize(ConvBlock(4, 6, 3, stride=2), rng)
        x = rng.uniform(-1, 1, (1, 4, 9, 9)).astype(np.float32)
        want = silu(batch_norm_inference(conv2d(x, blk.spec, blk.w), blk.bn))
        assert np.array_equal(blk.forward(x), want)


class TestC2f:
    def test_zero_weight_shortcut_passthrough(self):
        blk = C2f(8, 8, n=1, shortcut=True)
        # bottleneck convs are zero-filled at construction, BNs are identity-ish:
        # its output equals the chunk it receives, which feeds the concat
        x = np.random.default_rng(3).normal(size=(1, 8, 6, 6)).astype(np.float32)
        y1 = split_channels(blk.cv1.forward(x), [4, 4])[1]
        assert np.abs(blk.bottlenecks[0].forward(y1) - y1).max() < 1e-3

    def test_shape_preserved(self):
        blk = C2f(64, 64, n=1, shortcut=True)
        assert blk.profile((1, 64, 80, 80))[2] == (1, 64, 80, 80)

    def test_multiscale_variant_has_fewer_params(self):
        std = sum(a.size for s, a in C2f(128, 128, 2).named_arrays()
                  if not s.endswith(("bn.mean", "bn.var")))
        ms = sum(a.size for s, a in C2f(128, 128, 2, variant="multiscale").named_arrays()
                   if not s.endswith(("bn.mean", "bn.var")))
        assert std == c2f_params(128, 128, 2)
        assert ms == c2f_params(128, 128, 2, multiscale=True)
        assert ms < std

    def test_forward_matches_manual_composition(self):
        rng = np.random.default_rng(4)
        blk = C2f(16, 16, n=2, shortcut=True)
        randomize(blk.cv1, rng)
        randomize(blk.cv2, rng)
        for m in blk.bottlenecks:
            randomize(m.cv1, rng)
            randomize(m.cv2, rng)
        x = rng.uniform(-1, 1, (1, 16, 8, 8)).astype(np.float32)
        parts = split_channels(blk.cv1.forward(x), [8, 8])
        y = parts[1]
        for m in blk.bottlenecks:
            y = m.cv2.forward(m.cv1.forward(y)) + y
            parts.append(y)
        want = blk.cv2.forward(concat_channels(parts))
        assert np.abs(blk.forward(x) - want).max() < 1e-5

    def test_odd_out_channels_rejected(self):
        with pytest.raises(SpecError, match="even"):
            C2f(8, 7)

    def test_multiscale_hidden_divisibility(self):
        with pytest.raises(SpecError, match="divisible"):
            C2f(12, 12, variant="multiscale")  # hidden 6 is not a multiple of 4


class TestSPPF:
    def test_constant_input_stays_spatially_constant(self):
        rng = np.random.default_rng(5)
        blk = SPPF(8)
        randomize(blk.cv1, rng)
        randomize(blk.cv2, rng)
        x = np.full((1, 8, 6, 6), 0.37, dtype=np.float32)
        out = blk.forward(x)
        spread = out.max(axis=(2, 3)) - out.min(axis=(2, 3))
        assert spread.max() < 1e-6

    def test_shape(self):
        assert SPPF(256).profile((1, 256, 20, 20))[2] == (1, 256, 20, 20)

    def test_matches_manual_composition(self):
        rng = np.random.default_rng(6)
        blk = SPPF(8)
        randomize(blk.cv1, rng)
        randomize(blk.cv2, rng)
        x = rng.uniform(-1, 1, (1, 8, 7, 7)).astype(np.float32)
        y = blk.cv1.forward(x)
        p1 = pool2d(y, "max", 5, 1, 2)
        p2 = pool2d(p1, "max", 5, 1, 2)
        p3 = pool2d(p2, "max", 5, 1, 2)
        want = blk.cv2.forward(concat_channels([y, p1, p2, p3]))
        assert np.array_equal(blk.forward(x), want)


class TestMultiScaleSplitConv:
    def test_zero_paths_isolate_kept_half(self):
        blk = MultiScaleSplitConv(8, 4)
        blk.fuse.bn.eps = 1e-12
        # select the kept half through the 1x1 merge; path outputs are zero
        blk.fuse.w[...] = 0.0
        for i in range(4):
            blk.fuse.w[i, i, 0, 0] = 1.0
        x = np.random.default_rng(7).uniform(-1, 1, (1, 8, 5, 5)).astype(np.float32)
        assert np.abs(blk.forward(x) - silu(x[:, :4])).max() < 1e-6

    def test_shape_preserved(self):
        assert MultiScaleSplitConv(64, 64).profile((1, 64, 40, 40))[2] == (1, 64, 40, 40)

    def test_matches_split_conv_concat_composition(self):
        rng = np.random.default_rng(8)
        blk = MultiScaleSplitConv(16, 12)
        for part in (blk.path3, blk.path5, blk.fuse):
            randomize(part, rng)
        x = rng.uniform(-1, 1, (1, 16, 6, 6)).astype(np.float32)
        keep, a, b = split_channels(x, [8, 4, 4])
        want = blk.fuse.forward(concat_channels(
            [keep, blk.path3.forward(a), blk.path5.forward(b)]))
        assert np.abs(blk.forward(x) - want).max() < 1e-5

    def test_divisibility_check(self):
        with pytest.raises(SpecError, match="divisible"):
            MultiScaleSplitConv(6, 6)


class TestMSCA:
    def test_unit_attention_is_identity(self):
        blk = MSCABlock(8)
        blk.mix.w[...] = 0.0
        blk.mix.b[...] = 1.0
        x = np.random.default_rng(9).uniform(-1, 1, (1, 8, 6, 6)).astype(np.float32)
        assert np.abs(blk.forward(x) - x).max() < 1e-6

    def test_zero_attention_annihilates(self):
        blk = MSCABlock(8)
        x = np.random.default_rng(10).uniform(-1, 1, (1, 8, 6, 6)).astype(np.float32)
        assert np.all(blk.forward(x) == 0.0)

    def test_matches_four_path_sum_oracle(self):
        rng = np.random.default_rng(11)
        blk = MSCABlock(8)
        for part in [blk.base, blk.mix] + [c for pair in blk.pairs for c in pair]:
            randomize(part, rng)
        x = rng.uniform(-1, 1, (1, 8, 12, 12)).astype(np.float32)
        u = blk.base.forward(x)
        s = u.astype(np.float64)
        for row, col in blk.pairs:
            s = s + col.forward(row.forward(u)).astype(np.float64)
        att = blk.mix.forward(s.astype(np.float32))
        want = att.astype(np.float64) * x.astype(np.float64)
        assert np.abs(blk.forward(x) - want).max() < 1e-5

    def test_output_shape(self):
        assert MSCABlock(16).profile((1, 16, 9, 9))[2] == (1, 16, 9, 9)


class TestRepConv:
    def test_avg_branch_isolation(self):
        blk = RepConvBlock(4, 4)
        # conv weights default to zero; make every BN exactly identity
        for bn in (blk.branch_3x3.bn, blk.branch_1x1.bn, blk.branch_avg.bn):
            bn.eps = 1e-12
        x = np.random.default_rng(12).uniform(-1, 1, (1, 4, 6, 6)).astype(np.float32)
        want = silu(pool2d(x, "avg", 3, 1, 1))
        assert np.abs(blk.forward(x) - want).max() < 1e-6

    def test_zero_everything_gives_zero(self):
        blk = RepConvBlock(4, 4)
        x = np.zeros((1, 4, 5, 5), dtype=np.float32)
        assert np.all(blk.forward(x) == 0.0)

    def test_deploy_forward_without_conv_is_state_error(self):
        blk = RepConvBlock(4, 4)
        blk.mode = "deploy"
        with pytest.raises(StateError):
            blk.forward(np.zeros((1, 4, 5, 5), dtype=np.float32))

    def test_no_avg_branch_when_channels_differ(self):
        assert RepConvBlock(4, 8).branch_avg is None
        assert RepConvBlock(4, 4, stride=2).branch_avg is None


class TestHeads:
    CFG = HeadConfig(nc=3)

    def _taps(self, rng):
        return (rng.uniform(-1, 1, (1, 64, 8, 8)).astype(np.float32),
                rng.uniform(-1, 1, (1, 128, 4, 4)).astype(np.float32),
                rng.uniform(-1, 1, (1, 256, 2, 2)).astype(np.float32))

    def test_baseline_output_channels(self):
        rng = np.random.default_rng(13)
        out = BaselineHead(self.CFG).forward(*self._taps(rng))
        assert [o.shape for o in out] == [(1, 67, 8, 8), (1, 67, 4, 4), (1, 67, 2, 2)]

    def test_baseline_zero_final_convs_give_zero_logits(self):
        rng = np.random.default_rng(14)
        head = BaselineHead(self.CFG)
        for i in range(3):
            for blk in head.box_branches[i][:2] + head.cls_branches[i][:2]:
                randomize(blk, rng)
            # final 1x1 convs stay zero-filled
        out = head.forward(*self._taps(rng))
        assert all(np.all(o == 0.0) for o in out)

    def test_baseline_levels_independent(self):
        rng = np.random.default_rng(15)
        head = BaselineHead(self.CFG)
        for i in range(3):
            for blk in head.box_branches[i] + head.cls_branches[i]:
                randomize(blk, rng)
        taps = self._taps(rng)
        before = head.forward(*taps)[0]
        for blk in head.box_branches[2] + head.cls_branches[2]:
            randomize(blk, np.random.default_rng(999))
        after = head.forward(*taps)[0]
        assert np.array_equal(before, after)

    def test_shared_head_output_channels(self):
        rng = np.random.default_rng(16)
        out = SharedRepHead(self.CFG).forward(*self._taps(rng))
        assert [o.shape for o in out] == [(1, 67, 8, 8), (1, 67, 4, 4), (1, 67, 2, 2)]

    def test_shared_head_unit_scales_are_identity(self):
        rng = np.random.default_rng(17)
        head = SharedRepHead(self.CFG)
        for blk in head.stems + [head.box_conv, head.cls_conv,
                                 head.rep1.branch_3x3, head.rep1.branch_1x1,
                                 head.rep2.branch_3x3, head.rep2.branch_1x1]:
            randomize(blk, rng)
        taps = self._taps(rng)
        base = head.forward(*taps)
        for s in head.scales:
            s.s[...] = 1.0
        again = head.forward(*taps)
        assert all(np.array_equal(a, b) for a, b in zip(base, again))

    def test_shared_head_stack_spans_levels(self):
        rng = np.random.default_rng(20)
        head = SharedRepHead(self.CFG)
        for blk in head.stems + [head.box_conv, head.cls_conv]:
            randomize(blk, rng)
        taps = self._taps(rng)
        before = head.forward(*taps)
        # perturbing the single stack must move every pyramid level
        head.rep1.branch_3x3.w[...] = rng.uniform(-1, 1, head.rep1.branch_3x3.w.shape)
        after = head.forward(*taps)
        assert all(not np.array_equal(a, b) for a, b in zip(before, after))

    def test_shared_head_inconsistent_modes_state_error(self):
        rng = np.random.default_rng(18)
        head = SharedRepHead(self.CFG)
        head.rep1.mode = "deploy"
        with pytest.raises(StateError, match="modes"):
            head.forward(*self._taps(rng))

    def test_shared_head_fewer_params_than_baseline(self):
        def head_params(head):
            seen, total = set(), 0
            blocks = []
            if isinstance(head, BaselineHead):
                for i in range(3):
                    blocks += head.box_branches[i] + head.cls_branches[i]
            else:
                blocks = head.stems + [head.rep1, head.rep2, head.box_conv,
                                       head.cls_conv] + head.scales
            for blk in blocks:
                if id(blk) in seen:
                    continue
                seen.add(id(blk))
                total += sum(a.size for s, a in blk.named_arrays()
                             if not s.endswith(("bn.mean", "bn.var")))
            return total

        baseline = head_params(BaselineHead(self.CFG))
        shared = head_params(SharedRepHead(self.CFG))
        # closed-form cross-check of both towers
        want_baseline = sum(
            conv_block_params(ch, 64, 3) + conv_block_params(64, 64, 3)
            + conv_block_params(64, 64, 1, bn=False)
            + conv_block_params(ch, 64, 3) + conv_block_params(64, 64, 3)
            + conv_block_params(64, 3, 1, bn=False)
            for ch in (64, 128, 256)
        )
        want_shared = (
            sum(conv_block_params(ch, 64, 1) for ch in (64, 128, 256))
            + 2 * (conv_block_params(64, 64, 3) + conv_block_params(64, 64, 1) + 2 * 64)
            + conv_block_params(64, 64, 1, bn=False)
            + conv_block_params(64, 3, 1, bn=False) + 3
        )
        assert baseline == want_baseline == 751881
        assert shared == want_shared == 116102
        assert shared < baseline


class TestBottleneck:
    def test_shortcut_adds_input(self):
        rng = np.random.default_rng(19)
        with_sc = Bottleneck(8, shortcut=True)
        randomize(with_sc.cv1, rng)
        randomize(with_sc.cv2, rng)
        no_sc = Bottleneck(8, shortcut=False)
        no_sc.cv1, no_sc.cv2 = with_sc.cv1, with_sc.cv2
        x = rng.uniform(-1, 1, (1, 8, 5, 5)).astype(np.float32)
        assert np.abs(with_sc.forward(x) - (no_sc.forward(x) + x)).max() < 1e-6

    def test_unknown_variant(self):
        with pytest.raises(SpecError):
            Bottleneck(8, variant="ghost")
