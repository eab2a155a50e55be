"""Pyramid encoders: stage contracts, mixer block properties, gradients."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from truncpose import tensor as T
from truncpose.encoders import (
    GroupMixBlock,
    HierarchicalEncoder,
    SelectiveScanBlock,
    SwinBlock,
    ViTEncoder,
    VitBlock,
    directional_scans,
    expected_hw,
    load_encoder_spec,
    make_block,
)
from truncpose.layers import ConfigError
from truncpose.tensor import ShapeError, Tensor

from _gradcheck import gradcheck, uniform

FAMILIES = ["Swin", "GMF", "VM"]
SIZES = ["B", "S", "T"]
CONFIGS = [(f, s) for f in FAMILIES for s in SIZES]


def _init(module, seed=0):
    return module.init_weights(np.random.default_rng(seed))


def _softmax(z):
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _params(module):
    return {n: p.value.data for n, p in module.named_parameters()}


class TestSpecs:
    @pytest.mark.parametrize("family,size", CONFIGS)
    @pytest.mark.parametrize("profile", ["full", "toy"])
    def test_pyramid_doubling(self, family, size, profile):
        spec = load_encoder_spec(family, size, profile)
        assert spec.hierarchical and spec.patch == 4
        assert all(b == 2 * a for a, b in zip(spec.stage_dims, spec.stage_dims[1:]))
        assert min(spec.stage_depths) >= 1

    def test_toy_profile_is_small(self):
        for family, size in CONFIGS:
            spec = load_encoder_spec(family, size, "toy")
            assert spec.stage_dims[0] <= 64 and max(spec.stage_depths) <= 2

    def test_swin_official_shapes(self):
        b, s, t = (load_encoder_spec("Swin", z) for z in "BST")
        assert (b.stage_dims[0], s.stage_dims[0], t.stage_dims[0]) == (128, 96, 96)
        assert b.stage_depths == s.stage_depths == (2, 2, 18, 2)
        assert t.stage_depths == (2, 2, 6, 2)

    @pytest.mark.parametrize("size", ["H", "L", "B", "S"])
    def test_vit_single_stage(self, size):
        spec = load_encoder_spec("ViT", size)
        assert not spec.hierarchical and spec.patch == 16 and len(spec.stage_dims) == 1

    def test_unknown_family(self):
        with pytest.raises(ConfigError):
            load_encoder_spec("ResNet", "B")


class TestPatchEmbed:
    def test_swin_full_quarter_resolution(self):
        spec = load_encoder_spec("Swin", "B")
        enc = _init(HierarchicalEncoder(spec, (256, 192), num_stages=1))
        with T.no_grad():
            f = enc.embed(Tensor(np.zeros((1, 3, 256, 192))))
        assert f.tensor.shape == (1, spec.stage_dims[0], 64, 48) and f.reduction == 4

    def test_vit_sixteenth_resolution(self):
        spec = load_encoder_spec("ViT", "S")
        enc = _init(ViTEncoder(spec, (256, 192)))
        with T.no_grad():
            f = enc.embed(Tensor(np.zeros((1, 3, 256, 192))))
        assert f.tensor.shape == (1, spec.stage_dims[0], 16, 12)

    def test_toy_input(self):
        spec = load_encoder_spec("VM", "T", "toy")
        enc = _init(HierarchicalEncoder(spec, (64, 64)))
        with T.no_grad():
            f = enc.embed(Tensor(np.zeros((1, 3, 64, 64))))
        assert f.tensor.shape == (1, spec.stage_dims[0], 16, 16)

    @pytest.mark.parametrize("hw,multiple", [((250, 192), "32"), ((256, 100), "32")])
    def test_indivisible_input(self, hw, multiple):
        with pytest.raises(ShapeError, match=multiple):
            HierarchicalEncoder(load_encoder_spec("Swin", "T", "toy"), hw)

    def test_vit_indivisible(self):
        with pytest.raises(ShapeError, match="16"):
            ViTEncoder(load_encoder_spec("ViT", "S"), (250, 192))


class TestStages:
    @pytest.mark.parametrize("family,size", CONFIGS)
    @pytest.mark.parametrize("hw", [(64, 64), (96, 64), (128, 96)])
    def test_resolution_and_channel_contract(self, family, size, hw):
        spec = load_encoder_spec(family, size, "toy")
        enc = _init(HierarchicalEncoder(spec, hw))
        with T.no_grad():
            outs = enc(Tensor(np.random.default_rng(0).uniform(size=(1, 3) + hw)))
        assert [f.reduction for f in outs] == [4, 8, 16, 32]
        for i, f in enumerate(outs, start=1):
            assert f.stage_index == i
            assert f.channels == spec.stage_dims[i - 1]
            assert f.hw == expected_hw(hw, f.reduction)

    def test_stage_preserves_resolution(self):
        spec = load_encoder_spec("Swin", "T", "toy")
        enc = _init(HierarchicalEncoder(spec, (256, 192), num_stages=2))
        from truncpose.encoders import FeatureMap

        f = FeatureMap(Tensor(np.random.default_rng(1).standard_normal((1, spec.stage_dims[1], 32, 24))), 1, 8)
        with T.no_grad():
            out = enc.run_stage(f, 2)
        assert out.tensor.shape == (1, spec.stage_dims[1], 32, 24) and out.reduction == 8

    def test_stage_index_out_of_range(self):
        enc = HierarchicalEncoder(load_encoder_spec("GMF", "T", "toy"), (64, 64), num_stages=2)
        from truncpose.encoders import FeatureMap

        with pytest.raises(ConfigError):
            enc.run_stage(FeatureMap(Tensor(np.zeros((1, 8, 4, 4))), 2, 16), 3)

    def test_vm_deterministic(self):
        spec = load_encoder_spec("VM", "T", "toy")
        enc = _init(HierarchicalEncoder(spec, (64, 64)))
        x = Tensor(np.random.default_rng(2).uniform(size=(1, 3, 64, 64)))
        with T.no_grad():
            a, b = enc(x)[-1].tensor.data, enc(x)[-1].tensor.data
        assert a.tobytes() == b.tobytes()

    @pytest.mark.parametrize("family", FAMILIES)
    def test_gradient_reaches_patch_embed(self, family):
        spec = load_encoder_spec(family, "T", "toy")
        enc = _init(HierarchicalEncoder(spec, (64, 64)))
        out = enc(Tensor(np.random.default_rng(3).uniform(size=(1, 3, 64, 64))))[-1]
        T.backward(T.mean(T.square(out.tensor)))
        g = enc.patch_embed.weight.value.grad
        assert g is not None and np.abs(g).max() > 0


class TestSwinBlock:
    def _block(self, dim=8, heads=2, window=4, shift=0, seed=0):
        blk = _init(SwinBlock(dim, heads, window, shift), seed)
        blk.rel_bias.value.data[...] = 0.0
        return blk

    def test_single_window_is_full_attention(self):
        """Window == map, shift 0: token mixing equals plain multi-head attention."""
        blk = self._block()
        x = np.random.default_rng(0).standard_normal((1, 4, 4, 8))
        with T.no_grad():
            got = blk.attend(Tensor(x)).data
        p = _params(blk)
        toks = x.reshape(16, 8)
        qkv = toks @ p["qkv.weight"] + p["qkv.bias"]
        q, k, v = np.split(qkv, 3, axis=-1)
        heads = []
        for h in range(2):
            sl = slice(4 * h, 4 * h + 4)
            a = _softmax(q[:, sl] @ k[:, sl].T / 2.0)
            heads.append(a @ v[:, sl])
        want = np.concatenate(heads, axis=-1) @ p["proj.weight"] + p["proj.bias"]
        assert_allclose(got.reshape(16, 8), want, atol=1e-12)

    def test_permutation_within_window(self):
        blk = self._block(window=2)
        x = np.random.default_rng(1).standard_normal((1, 4, 4, 8))
        y = x.copy()
        y[0, 0, 0], y[0, 1, 1] = x[0, 1, 1], x[0, 0, 0]
        with T.no_grad():
            a, b = blk.attend(Tensor(x)).data, blk.attend(Tensor(y)).data
        assert_allclose(b[0, 0, 0], a[0, 1, 1], atol=1e-12)
        assert_allclose(b[0, 1, 1], a[0, 0, 0], atol=1e-12)
        assert_allclose(b[0, 2:], a[0, 2:], atol=1e-12)

    def test_locality_without_shift(self):
        blk = _init(SwinBlock(8, 2, 2, 0))
        x = np.random.default_rng(2).standard_normal((1, 4, 6, 8))
        y = x.copy()
        y[0, 2:] += 5.0
        y[0, :2, 2:] -= 3.0
        with T.no_grad():
            a, b = blk(Tensor(x)).data, blk(Tensor(y)).data
        assert_array_equal(a[0, :2, :2], b[0, :2, :2])

    def test_window_larger_than_map(self):
        blk = _init(SwinBlock(8, 2, 4))
        with pytest.raises(ConfigError):
            blk(Tensor(np.zeros((1, 3, 3, 8))))

    def test_nondivisible_map_padding(self):
        blk = _init(SwinBlock(8, 2, 4, 2))
        out = blk(Tensor(np.random.default_rng(3).standard_normal((1, 6, 5, 8))))
        assert out.shape == (1, 6, 5, 8)


class TestGroupMixBlock:
    def test_kernel_one_is_plain_global_attention(self):
        """With only the identity branch, mixing is unaggregated linear attention."""
        blk = _init(GroupMixBlock(8, 2, (1,)))
        x = np.random.default_rng(0).standard_normal((1, 3, 4, 8))
        with T.no_grad():
            got = blk.mix(Tensor(x)).data
        p = _params(blk)
        q, k, v = np.split(x.reshape(12, 8) @ p["qkv.weight"] + p["qkv.bias"], 3, axis=-1)
        heads = []
        for h in range(2):
            sl = slice(4 * h, 4 * h + 4)
            ctx = _softmax(k[:, sl].T) @ v[:, sl]
            heads.append(_softmax(q[:, sl]) @ ctx)
        want = np.concatenate(heads, axis=-1) @ p["proj.weight"] + p["proj.bias"]
        assert_allclose(got.reshape(12, 8), want, atol=1e-12)
        assert not any("dw" in n for n, _ in blk.named_parameters())

    def test_constant_map_stays_constant(self):
        blk = _init(GroupMixBlock(8, 2, (1, 3, 5)))
        x = np.broadcast_to(np.random.default_rng(1).standard_normal(8), (1, 6, 5, 8)).copy()
        with T.no_grad():
            out = blk(Tensor(x)).data
        assert_allclose(out, np.broadcast_to(out[0, 0, 0], out.shape), atol=1e-12)

    def test_shape_preserved(self):
        blk = _init(GroupMixBlock(8, 2, (1, 3)))
        x = Tensor(np.zeros((1, 8, 6, 8)))
        assert blk(x).shape == (1, 8, 6, 8)

    def test_kernel_exceeds_map(self):
        blk = _init(GroupMixBlock(8, 2, (1, 7)))
        with pytest.raises(ConfigError):
            blk(Tensor(np.zeros((1, 4, 4, 8))))


class TestSelectiveScan:
    def test_zero_gate_is_pointwise(self):
        u = np.random.default_rng(0).standard_normal((1, 3, 4, 2))
        zeros = [Tensor(np.zeros_like(u)) for _ in range(4)]
        assert_allclose(directional_scans(zeros, Tensor(u)).data, 4 * u, atol=1e-15)

    def test_single_pixel_scans_coincide(self):
        u = Tensor(np.random.default_rng(1).standard_normal((1, 1, 1, 3)))
        a = Tensor(np.full((1, 1, 1, 3), 0.7))
        outs = [T.linear_scan(a, u, axis=ax, reverse=r).data for ax in (1, 2) for r in (False, True)]
        for o in outs:
            assert_array_equal(o, u.data)

    def test_unrolled_recurrence(self):
        x = np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 1, 4, 1)
        h = T.linear_scan(Tensor(np.full_like(x, 0.5)), Tensor(x), axis=2).data.ravel()
        x1, x2, x3, x4 = x.ravel()
        want = [x1, x2 + 0.5 * x1, x3 + 0.5 * x2 + 0.25 * x1, x4 + 0.5 * x3 + 0.25 * x2 + 0.125 * x1]
        assert_allclose(h, want, atol=1e-15)

    def test_reverse_scan(self):
        x = np.array([1.0, 2.0, 3.0]).reshape(1, 3, 1, 1)
        h = T.linear_scan(Tensor(np.full_like(x, 0.5)), Tensor(x), axis=1, reverse=True).data.ravel()
        assert_allclose(h, [1 + 0.5 * 2 + 0.25 * 3, 2 + 0.5 * 3, 3.0], atol=1e-15)


@given(
    family=st.sampled_from(FAMILIES),
    h=st.integers(3, 9),
    w=st.integers(3, 9),
    batch=st.integers(1, 2),
    index=st.integers(0, 1),
)
@settings(max_examples=20, deadline=None)
def test_mixer_blocks_preserve_shape(family, h, w, batch, index):
    spec = load_encoder_spec(family, "T", "toy")
    dim = spec.stage_dims[0]
    blk = _init(make_block(spec, dim, index, (h, w)))
    x = Tensor(np.random.default_rng(h * 10 + w).standard_normal((batch, h, w, dim)))
    with T.no_grad():
        assert blk(x).shape == (batch, h, w, dim)


BLOCKS = {
    "swin": lambda: SwinBlock(8, 2, 2, 1),
    "gmf": lambda: GroupMixBlock(8, 2, (1, 3)),
    "vm": lambda: SelectiveScanBlock(8),
    "vit": lambda: VitBlock(8, 2),
}


@pytest.mark.parametrize("seed", [0, 1, 2, 3, 4])
@pytest.mark.parametrize("kind", sorted(BLOCKS))
def test_block_gradcheck(kind, seed):
    rng = np.random.default_rng(seed)
    blk = _init(BLOCKS[kind](), seed)
    for _, p in blk.named_parameters():
        p.value.data[...] = uniform(rng, *p.shape) * 0.5
    shape = (1, 6, 8) if kind == "vit" else (1, 4, 4, 8)
    params = [p.value for _, p in blk.named_parameters()]
    assert gradcheck(blk, [uniform(rng, *shape)], rng, params=params, max_coords=12) < 1e-4
