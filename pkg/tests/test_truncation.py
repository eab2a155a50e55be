"""Stage truncation: adapters, truncated encoders and the model-name grammar."""

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from truncpose import tensor as T
from truncpose.encoders import FeatureMap, load_encoder_spec
from truncpose.layers import ConfigError
from truncpose.tensor import Tensor
from truncpose.truncation import (
    VIT_BASELINES,
    Adapter,
    ModelName,
    ModelNameError,
    UnsupportedFamilyError,
    adapter_spec,
    all_hierarchical_names,
    format_model_name,
    parse_model_name,
    truncate,
)

CONFIGS = [(f, s) for f in ("Swin", "GMF", "VM") for s in ("B", "S", "T")]


def _adapter(spec, k):
    return Adapter(adapter_spec(spec, k)).init_weights(np.random.default_rng(0))


class TestAdapters:
    @pytest.mark.parametrize("k,kind", [(4, "DeconvUp"), (3, "Identity"), (2, "ConvDown")])
    @pytest.mark.parametrize("family,size", CONFIGS)
    def test_kind_and_width(self, family, size, k, kind):
        spec = load_encoder_spec(family, size)
        a = adapter_spec(spec, k)
        assert a.kind == kind
        assert a.in_channels == spec.stage_dims[k - 1]
        assert a.out_channels == spec.stage_dims[2]
        if kind != "Identity":
            assert a.stride == 2

    def test_geometry_defaults(self):
        spec = load_encoder_spec("Swin", "B")
        assert (adapter_spec(spec, 2).kernel, adapter_spec(spec, 2).padding) == (3, 1)
        assert (adapter_spec(spec, 4).kernel, adapter_spec(spec, 4).padding) == (2, 0)

    def test_conv_down(self):
        spec = load_encoder_spec("Swin", "B")
        c2, c3 = spec.stage_dims[1:3]
        f = FeatureMap(Tensor(np.random.default_rng(1).standard_normal((1, c2, 32, 24))), 2, 8)
        with T.no_grad():
            out = _adapter(spec, 2)(f)
        assert out.tensor.shape == (1, c3, 16, 12) and out.reduction == 16

    def test_identity_is_untouched(self):
        spec = load_encoder_spec("Swin", "B")
        t = Tensor(np.random.default_rng(2).standard_normal((1, spec.stage_dims[2], 16, 12)))
        out = _adapter(spec, 3)(FeatureMap(t, 3, 16))
        assert out.tensor is t

    def test_deconv_up(self):
        spec = load_encoder_spec("Swin", "B")
        c3, c4 = spec.stage_dims[2:]
        f = FeatureMap(Tensor(np.random.default_rng(3).standard_normal((1, c4, 8, 6))), 4, 32)
        with T.no_grad():
            out = _adapter(spec, 4)(f)
        assert out.tensor.shape == (1, c3, 16, 12) and out.reduction == 16

    def test_reduction_mismatch(self):
        spec = load_encoder_spec("Swin", "T", "toy")
        with pytest.raises(ConfigError):
            _adapter(spec, 2)(FeatureMap(Tensor(np.zeros((1, spec.stage_dims[1], 4, 4))), 2, 16))


class TestTruncate:
    @pytest.mark.parametrize("k", [1, 5, 0])
    def test_bad_stage(self, k):
        with pytest.raises(ConfigError):
            truncate(load_encoder_spec("VM", "T"), k)

    def test_vit_unsupported(self):
        with pytest.raises(UnsupportedFamilyError):
            truncate(load_encoder_spec("ViT", "S"), 3)

    @pytest.mark.parametrize("k", [2, 3, 4])
    def test_later_stages_absent(self, k):
        enc = truncate(load_encoder_spec("GMF", "B"), k)
        stages = {n.split(".")[2] for n, _ in enc.named_parameters() if n.startswith("encoder.stages")}
        assert stages == {f"{i}" for i in range(k)}

    def test_identity_adds_nothing(self):
        for family, size in CONFIGS:
            enc = truncate(load_encoder_spec(family, size), 3)
            assert enc.params_breakdown()["adapter"] == 0
            assert enc.macs_breakdown()["adapter"] == 0

    @pytest.mark.parametrize("family,size", CONFIGS)
    def test_monotone_cost(self, family, size):
        spec = load_encoder_spec(family, size)
        p = [truncate(spec, k).num_params() for k in (2, 3, 4)]
        f = [sum(truncate(spec, k).macs_breakdown().values()) for k in (2, 3, 4)]
        assert p[0] < p[1] < p[2]
        assert f[0] < f[1] < f[2]

    @pytest.mark.parametrize("family,size", CONFIGS)
    @pytest.mark.parametrize("k", [2, 3, 4])
    def test_toy_output_contract(self, family, size, k):
        spec = load_encoder_spec(family, size, "toy")
        enc = truncate(spec, k, (64, 64)).init_weights(np.random.default_rng(k))
        with T.no_grad():
            out = enc(Tensor(np.random.default_rng(0).uniform(size=(2, 3, 64, 64))))
        assert out.reduction == 16
        assert out.tensor.shape == (2, spec.stage_dims[2], 4, 4)


class TestNames:
    @pytest.mark.parametrize("name,want", [
        ("SwinPose-S-S3", ModelName("HPE", "Swin", "S", 3)),
        ("VMHMR2.0-T-S2", ModelName("HMR", "VM", "T", 2)),
        ("GMFPose-B-S4", ModelName("HPE", "GMF", "B", 4)),
        ("ViTPose-H", ModelName("HPE", "ViT", "H", None)),
        ("HMR2.0", ModelName("HMR", "ViT", "H", None)),
        ("HMR2.0-S", ModelName("HMR", "ViT", "S", None)),
    ])
    def test_examples(self, name, want):
        assert parse_model_name(name) == want

    @pytest.mark.parametrize("name,pos", [
        ("SwinPose-S5", 10),
        ("SwinPose-S-S5", 12),
        ("BadName-S9", 0),
        ("Swin-S-S3", 4),
        ("SwinPose-X-S3", 9),
        ("ViTPose-T", 8),
        ("HMR2.0-H", 7),
        ("", 0),
        ("SwinPose-S-S3x", 13),
    ])
    def test_malformed(self, name, pos):
        with pytest.raises(ModelNameError) as exc:
            parse_model_name(name)
        assert exc.value.position == pos

    def test_all_names(self):
        for task in ("HPE", "HMR"):
            names = all_hierarchical_names(task)
            assert len(names) == 27 == len(set(names))

    def test_roundtrip_all(self):
        for name in all_hierarchical_names("HPE") + all_hierarchical_names("HMR") + list(VIT_BASELINES):
            assert format_model_name(parse_model_name(name)) == name

    @given(st.sampled_from(["Swin", "GMF", "VM"]), st.sampled_from(["Pose", "HMR2.0"]),
           st.sampled_from("BST"), st.sampled_from([2, 3, 4]))
    def test_roundtrip_structured(self, family, task, size, k):
        m = parse_model_name(f"{family}{task}-{size}-S{k}")
        assert (m.family, m.size, m.stage) == (family, size, k)
        assert parse_model_name(format_model_name(m)) == m

    @given(st.text(alphabet="SwinPoseGMFVHR2.0-BTL34x", max_size=16))
    def test_fuzz_never_crashes(self, text):
        try:
            m = parse_model_name(text)
        except ModelNameError as exc:
            assert 0 <= exc.position <= len(text)
        else:
            assert format_model_name(m) == text
