import numpy as np
import pytest

from appledx import ops
from appledx.errors import DimensionError, ValidationError
from appledx.model import ModelSpec, ResidualBlockSpec, block_specs, build_resnet34, replace_head
from appledx.tensor import Tensor, backward, no_grad
from oracles import resnet34_parameter_count

SMALL = ModelSpec(num_classes=6, input_size=64)


@pytest.fixture(scope="module")
def model224():
    return build_resnet34(ModelSpec(), seed=0)


def test_forward_shape_and_stage_shapes(model224):
    x = Tensor(np.random.default_rng(0).standard_normal((2, 3, 224, 224)).astype(np.float32))
    with no_grad():
        outputs = model224.stages_forward(x)
        logits = model224.head(ops.global_avg_pool(outputs[-1]))
    assert [o.shape[1:] for o in outputs[1:]] == [(64, 56, 56), (128, 28, 28), (256, 14, 14), (512, 7, 7)]
    assert outputs[0].shape[1:] == (64, 56, 56)
    assert logits.shape == (2, 6) and np.isfinite(logits.data).all()


def test_weighted_layers_and_parameter_count(model224):
    assert model224.weighted_layer_count() == 34
    assert model224.parameter_count() == resnet34_parameter_count(6) == 21_287_750


def test_parameter_count_matches_torchvision():
    models = pytest.importorskip("torchvision.models")
    reference = models.resnet34(weights=None, num_classes=6)
    assert build_resnet34(SMALL, seed=0).parameter_count() == sum(p.numel() for p in reference.parameters())


def test_logits_match_torchvision_with_copied_weights():
    torch = pytest.importorskip("torch")
    models = pytest.importorskip("torchvision.models")
    ours = build_resnet34(SMALL, seed=3, dtype=np.float64)
    rng = np.random.default_rng(4)
    for name, t in ours.state().items():
        if name.endswith("running_mean") or name.endswith(".beta"):
            t.data[:] = rng.standard_normal(t.shape) * 0.1
        elif name.endswith("running_var") or name.endswith(".gamma"):
            t.data[:] = rng.uniform(0.5, 1.5, t.shape)

    def torch_name(name):
        name = name.replace("stem.conv", "conv1").replace("stem.bn", "bn1").replace("head.", "fc.")
        name = name.replace(".gamma", ".weight").replace(".beta", ".bias")
        for s in range(1, 5):
            name = name.replace(f"stage{s}.block", f"layer{s}.")
        return name.replace("..", ".").replace(".proj.conv", ".downsample.0").replace(".proj.bn", ".downsample.1")

    reference = models.resnet34(weights=None, num_classes=6).double().eval()
    ref_state = reference.state_dict()
    loaded = {}
    for name, t in ours.state().items():
        key = torch_name(name)
        assert ref_state[key].shape == t.shape, name
        loaded[key] = torch.from_numpy(t.data.copy())
    reference.load_state_dict(loaded, strict=False)
    x = rng.standard_normal((2, 3, 64, 64))
    with torch.no_grad():
        expected = reference(torch.from_numpy(x)).numpy()
    np.testing.assert_allclose(ours.predict_logits(x), expected, rtol=1e-9, atol=1e-9)


def test_block_layout():
    layout = block_specs(ModelSpec())
    assert [len(s) for s in layout] == [3, 4, 6, 3]
    projections = [(s, b) for s, blocks in enumerate(layout) for b, blk in enumerate(blocks) if blk.projection]
    assert projections == [(1, 0), (2, 0), (3, 0)]
    assert ResidualBlockSpec(64, 64, 1).projection is False
    assert ResidualBlockSpec(64, 64, 2).projection is True
    assert ResidualBlockSpec(64, 128, 1).projection is True


def test_parameter_names():
    names = list(build_resnet34(SMALL).state())
    assert names[0] == "stem.conv.weight"
    assert "stage2.block0.proj.conv.weight" in names and "stage1.block0.proj.conv.weight" not in names
    assert names[-2:] == ["head.weight", "head.bias"]


def test_wrong_input_size_is_dimension_error(model224):
    with pytest.raises(DimensionError):
        model224.forward(Tensor(np.zeros((1, 3, 64, 64), np.float32)))
    with pytest.raises(DimensionError):
        model224.forward(Tensor(np.zeros((1, 1, 224, 224), np.float32)))


@pytest.mark.parametrize("kwargs", [{"num_classes": 0}, {"stem_stride": 3}, {"input_size": 0},
                                    {"stage_block_counts": (3, 4, 6)}])
def test_invalid_spec(kwargs):
    with pytest.raises(ValidationError):
        build_resnet34(ModelSpec(**kwargs))


def test_eval_forward_is_deterministic_and_pure():
    model = build_resnet34(SMALL, seed=1)
    x = np.random.default_rng(1).standard_normal((2, 3, 64, 64)).astype(np.float32)
    before = {k: v.data.copy() for k, v in model.state().items()}
    a, b = model.predict_logits(x), model.predict_logits(x)
    np.testing.assert_array_equal(a, b)
    for k, v in model.state().items():
        np.testing.assert_array_equal(v.data, before[k])


def test_same_seed_same_weights():
    a, b = build_resnet34(SMALL, seed=9), build_resnet34(SMALL, seed=9)
    c = build_resnet34(SMALL, seed=10)
    assert all(np.array_equal(a.state()[k].data, b.state()[k].data) for k in a.state())
    assert not np.array_equal(a.stem_conv.weight.data, c.stem_conv.weight.data)


def test_zero_head_gives_uniform_softmax():
    model = replace_head(build_resnet34(SMALL), 6, zero=True)
    logits = model.predict_logits(np.random.default_rng(2).standard_normal((3, 3, 64, 64)))
    assert (logits == 0).all()
    np.testing.assert_allclose(ops.softmax(logits.astype(np.float64)), 1 / 6, atol=1e-12)


def test_residual_identity_when_second_gamma_is_zero():
    model = build_resnet34(SMALL, seed=2, dtype=np.float64)
    x = np.random.default_rng(3).standard_normal((2, 3, 64, 64))
    for blocks in model.stages:
        for block in blocks:
            block.bn2.gamma.data[:] = 0
            block.bn2.beta.data[:] = 0
    with no_grad():
        h = model.stages_forward(Tensor(x))[0]
        for blocks in model.stages:
            for block in blocks:
                out = block(h, training=False)
                shortcut = h
                if block.proj_conv is not None:
                    shortcut = ops.batchnorm2d(ops.conv2d(h, block.proj_conv), block.proj_bn, False)
                np.testing.assert_array_equal(out.data, np.maximum(shortcut.data, 0))
                h = out


def test_gradient_reaches_every_parameter():
    model = build_resnet34(SMALL, seed=4)
    x = Tensor(np.random.default_rng(5).standard_normal((4, 3, 64, 64)).astype(np.float32))
    backward(ops.softmax_cross_entropy(model.forward(x, "train"), np.array([0, 1, 2, 3])))
    for name, t in model.parameters().items():
        assert t.grad is not None and np.any(t.grad != 0), name


def test_replace_head_changes_only_the_head():
    base = build_resnet34(ModelSpec(num_classes=1000, input_size=64), seed=6)
    new = replace_head(base, 6, seed=1)
    assert new.head_weight.shape == (6, 512) and new.head_bias.shape == (6,)
    assert new.spec.num_classes == 6 and base.num_classes == 1000
    changed = [k for k in base.state() if k in new.state()
               and not np.array_equal(base.state()[k].data, new.state()[k].data)]
    assert changed == ["head.weight", "head.bias"] and set(base.state()) == set(new.state())
    for k in base.backbone_parameters():
        assert new.state()[k].data.tobytes() == base.state()[k].data.tobytes()
        assert new.state()[k] is not base.state()[k]


def test_replace_head_same_count_reinitialises_head_only():
    base = build_resnet34(SMALL, seed=7)
    new = replace_head(base, 6, seed=123)
    assert not np.array_equal(base.head_weight.data, new.head_weight.data)
    for k in base.backbone_parameters():
        assert np.array_equal(base.state()[k].data, new.state()[k].data)


def test_stem_stride_one_variant_keeps_stage_grid():
    spec = ModelSpec(num_classes=2, input_size=112, stem_stride=1)
    model = build_resnet34(spec)
    with no_grad():
        outputs = model.stages_forward(Tensor(np.zeros((1, 3, 112, 112), np.float32)))
    assert [o.shape[2] for o in outputs[1:]] == [56, 28, 14, 7]
