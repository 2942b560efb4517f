import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from anchornet.errors import DimensionError, FormatError, ValidationError
from anchornet.models import (
    Model,
    ModelSpec,
    build,
    forward,
    load_checkpoint,
    parameter_count,
    predict_logits,
    save_checkpoint,
    spec_for,
)
from anchornet.tensor import Tensor


def _count_oracle(spec):
    # independent walk: conv keeps size (same padding), each block halves it
    if spec.kind == "mlp":
        dims = [spec.first_layer_channels * spec.input_hw[0] * spec.input_hw[1], *spec.hidden, spec.num_classes]
        return sum(a * b + b for a, b in zip(dims[:-1], dims[1:]))
    c, (h, w), total = spec.first_layer_channels, spec.input_hw, 0
    for f, k, _ in spec.hidden:
        total += f * c * k * k + f
        c, h, w = f, h // 2, w // 2
    return total + c * h * w * spec.num_classes + spec.num_classes


def test_anchored_cnn_doubles_first_layer():
    m = build(spec_for(3, (16, 16), 10, anchored=True))
    assert m.parameters["conv0.weight"].shape[1] == 6
    s = build(spec_for(3, (16, 16), 10, anchored=False))
    assert s.parameters["conv0.weight"].shape[1] == 3
    diff = {k for k in m.parameters if m.parameters[k].shape != s.parameters[k].shape}
    assert diff == {"conv0.weight"}


def test_linear_mlp_parameter_count():
    spec = ModelSpec(kind="mlp", input_channels=2, input_hw=(3, 3), num_classes=4, hidden=())
    assert parameter_count(spec) == 18 * 4 + 4
    assert build(spec).parameter_count() == parameter_count(spec)


@settings(max_examples=30, deadline=None)
@given(kind=st.sampled_from(["mlp", "small_cnn"]), channels=st.integers(1, 3), side=st.sampled_from([4, 8, 12]),
       classes=st.integers(2, 6), anchored=st.booleans(), widths=st.lists(st.integers(1, 6), min_size=0, max_size=2))
def test_parameter_count_matches_shape_walk(kind, channels, side, classes, anchored, widths):
    hidden = tuple(widths) if kind == "mlp" else tuple((w, 3, 1) for w in widths[: 1 if side == 4 else 2])
    spec = ModelSpec(kind=kind, input_channels=channels, input_hw=(side, side), num_classes=classes,
                     hidden=hidden, anchored=anchored)
    assert parameter_count(spec) == _count_oracle(spec) == build(spec).parameter_count()


def test_init_is_deterministic_and_bounded():
    spec = spec_for(3, (8, 8), 5, init_seed=11)
    a, b = build(spec), build(spec)
    for k in a.parameters:
        assert a.parameters[k].data.tobytes() == b.parameters[k].data.tobytes()
        assert a.parameters[k].requires_grad
    w = a.parameters["conv0.weight"].data
    assert np.all(np.abs(w) < np.sqrt(6 / (3 * 9)))
    assert not a.parameters["conv0.bias"].data.any()
    other = build(spec_for(3, (8, 8), 5, init_seed=12))
    assert not np.array_equal(other.parameters["conv0.weight"].data, w)


def test_zero_sized_layer_rejected():
    with pytest.raises(ValidationError):
        build(ModelSpec(kind="mlp", hidden=(0,)))
    with pytest.raises(ValidationError):
        build(ModelSpec(kind="small_cnn", hidden=((0, 3, 1),)))


def test_affine_map_by_hand():
    spec = ModelSpec(kind="mlp", input_channels=1, input_hw=(1, 2), num_classes=2, hidden=())
    m = build(spec)
    m.load_state_dict({"out.weight": np.array([[1.0, 0.0], [0.0, 1.0]]), "out.bias": np.array([0.5, -0.5])})
    out = forward(m, np.array([[[[3.0, 4.0]]]]))
    assert out.data.tolist() == [[3.5, 3.5]]


def test_forward_shape_and_batch_separability(rng):
    m = build(spec_for(3, (8, 8), 4, anchored=True, init_seed=2))
    x = rng.random((7, 6, 8, 8))
    out = forward(m, x).data
    assert out.shape == (7, 4)
    perm = rng.permutation(7)
    assert np.allclose(forward(m, x[perm]).data, out[perm], rtol=0, atol=1e-12)
    single = np.concatenate([forward(m, x[i : i + 1]).data for i in range(7)])
    assert np.allclose(single, out, rtol=0, atol=1e-12)
    assert m.forward_samples == 14 + 7


def test_forward_channel_mismatch():
    m = build(spec_for(3, (8, 8), 4, anchored=True))
    with pytest.raises(DimensionError):
        forward(m, np.zeros((2, 3, 8, 8)))
    with pytest.raises(DimensionError):
        forward(m, np.zeros((6, 8, 8)))


def test_checkpoint_round_trip(tmp_path, rng):
    m = build(spec_for(3, (8, 8), 4, kind="mlp", hidden=(5,), anchored=True, init_seed=4))
    for p in m.parameters.values():
        p.data = rng.standard_normal(p.shape)
    save_checkpoint(m, tmp_path / "m.ckpt")
    back = load_checkpoint(tmp_path / "m.ckpt")
    assert back.spec == m.spec
    for k in m.parameters:
        assert back.parameters[k].data.tobytes() == m.parameters[k].data.tobytes()
    x = rng.random((5, 6, 8, 8))
    assert np.array_equal(predict_logits(back, x), predict_logits(m, x))


def test_checkpoint_corruption(tmp_path):
    m = build(spec_for(1, (4, 4), 2, kind="mlp", hidden=()))
    path = tmp_path / "m.ckpt"
    save_checkpoint(m, path)
    blob = path.read_bytes()
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"XXXXXXXX" + blob[8:])
    with pytest.raises(FormatError, match="magic"):
        load_checkpoint(bad)
    bad.write_bytes(blob[:8] + (7).to_bytes(4, "little") + blob[12:])
    with pytest.raises(FormatError, match="expected 1, found 7"):
        load_checkpoint(bad)
    bad.write_bytes(blob[:-3])
    with pytest.raises(FormatError):
        load_checkpoint(bad)
    bad.write_bytes(blob + b"\0")
    with pytest.raises(FormatError, match="trailing"):
        load_checkpoint(bad)


def test_model_call_and_state_dict_shape_check():
    m = build(spec_for(1, (4, 4), 2, kind="mlp", hidden=(3,)))
    assert isinstance(m(Tensor(np.zeros((1, 1, 4, 4)))), Tensor)
    state = m.state_dict()
    state["fc0.weight"] = np.zeros((2, 2))
    with pytest.raises(DimensionError):
        m.load_state_dict(state)
    assert isinstance(m, Model)
