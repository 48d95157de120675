import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from qckpt.container import (
    Checkpoint,
    LayerType,
    NamedTensor,
    check_aligned,
    classify_layer_type,
    dumps_checkpoint,
    loads_checkpoint,
    make_checkpoint,
    parse_layer_rules,
    read_checkpoint,
    reclassify,
    write_checkpoint,
)
from qckpt.errors import BadMagic, NonFiniteData, ShapeMismatch, TruncatedFile


def test_round_trip_single_tensor(tmp_path):
    ck = Checkpoint((NamedTensor("w", (2, 2), np.array([1, 2, 3, 4], np.float32)),))
    write_checkpoint(ck, tmp_path / "a.dqt")
    back = read_checkpoint(tmp_path / "a.dqt")
    assert back == ck
    assert back["w"].array.tolist() == [[1, 2], [3, 4]]


def test_bad_magic():
    data = bytearray(dumps_checkpoint(make_checkpoint({"w": [1.0]})))
    data[:4] = b"XXXX"
    with pytest.raises(BadMagic):
        loads_checkpoint(bytes(data))


def test_truncated_payload():
    data = dumps_checkpoint(make_checkpoint({"w": np.arange(4.0)}))
    with pytest.raises(TruncatedFile):
        loads_checkpoint(data[:-4])  # declares 4 elements, holds 3


def test_trailing_garbage_rejected():
    data = dumps_checkpoint(make_checkpoint({"w": np.arange(4.0)}))
    with pytest.raises(ShapeMismatch):
        loads_checkpoint(data + b"\0")


def test_empty_checkpoint_file(tmp_path):
    write_checkpoint(Checkpoint(()), tmp_path / "e.dqt")
    raw = (tmp_path / "e.dqt").read_bytes()
    assert raw[-4:] == struct.pack("<I", 0)
    assert len(read_checkpoint(tmp_path / "e.dqt")) == 0


def test_file_size_follows_layout(tmp_path):
    n = 1_000_000
    ck = make_checkpoint({"layer.w": np.zeros(n)})
    write_checkpoint(ck, tmp_path / "big.dqt")
    header = struct.calcsize("<4sII")
    per_tensor = struct.calcsize("<H") + len("layer.w") + struct.calcsize("<BB") + struct.calcsize("<Q")
    assert (tmp_path / "big.dqt").stat().st_size == header + per_tensor + 4 * n


@pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
def test_non_finite_rejected(bad, tmp_path):
    ck = make_checkpoint({"w": [1.0, bad]})
    with pytest.raises(NonFiniteData):
        write_checkpoint(ck, tmp_path / "x.dqt")


def test_non_finite_payload_rejected_on_read():
    data = bytearray(dumps_checkpoint(make_checkpoint({"w": [1.0, 2.0]})))
    data[-4:] = struct.pack("<f", float("nan"))
    with pytest.raises(NonFiniteData):
        loads_checkpoint(bytes(data))


def test_duplicate_names_rejected():
    t = NamedTensor("w", (1,), np.zeros(1))
    with pytest.raises(ShapeMismatch):
        Checkpoint((t, t))


def test_shape_must_match_data():
    with pytest.raises(ShapeMismatch):
        NamedTensor("w", (3,), np.zeros(4))


def test_step_and_meta_survive(tmp_path):
    ck = make_checkpoint({"a": [1.0]}, step=77, meta={"run": "x", "note": "ünï"})
    write_checkpoint(ck, tmp_path / "m.dqt")
    back = read_checkpoint(tmp_path / "m.dqt")
    assert back.step == 77 and dict(back.meta) == {"run": "x", "note": "ünï"}
    assert (tmp_path / "m.dqt").read_bytes()[4:8] == struct.pack("<I", 2)


def test_plain_layout_byte_for_byte():
    ck = make_checkpoint({"w": [1.0, -2.0]})
    expected = (b"DQT1" + struct.pack("<II", 1, 1) + struct.pack("<H", 1) + b"w"
                + struct.pack("<BBQ", int(LayerType.OTHER), 1, 2) + struct.pack("<2f", 1.0, -2.0))
    assert dumps_checkpoint(ck) == expected


def test_unknown_version():
    data = bytearray(dumps_checkpoint(make_checkpoint({"w": [1.0]})))
    data[4:8] = struct.pack("<I", 9)
    with pytest.raises(BadMagic):
        loads_checkpoint(bytes(data))


def test_bytes_are_deterministic():
    arrays = {"b": np.linspace(-1, 1, 10), "a": np.ones((2, 3))}
    assert dumps_checkpoint(make_checkpoint(arrays, step=3)) == dumps_checkpoint(make_checkpoint(arrays, step=3))


@pytest.mark.parametrize(
    "name, expected",
    [
        ("embed.weight", LayerType.EMBEDDING),
        ("layer1.conv.weight", LayerType.CONV),
        ("h.0.attn.qkv.weight", LayerType.ATTENTION),
        ("h.0.mlp.fc1.bias", LayerType.BIAS),
        ("h.0.ln_1.weight", LayerType.NORM),
        ("foo", LayerType.OTHER),
    ],
)
def test_default_rules(name, expected):
    assert classify_layer_type(name) == expected


def test_first_matching_rule_wins():
    rules = [("*conv*", LayerType.CONV), ("*", LayerType.OTHER)]
    assert classify_layer_type("layer1.conv.weight", rules) == LayerType.CONV
    assert classify_layer_type("foo", [("*", LayerType.OTHER)]) == LayerType.OTHER


def test_rule_file_parsing():
    rules = parse_layer_rules("# comment\n*enc* = attention\n\nblock.* = LINEAR\n")
    assert rules == [("*enc*", LayerType.ATTENTION), ("block.*", LayerType.LINEAR), ("*", LayerType.OTHER)]
    with pytest.raises(ValueError):
        parse_layer_rules("*x* = WIDGET")
    with pytest.raises(ValueError):
        parse_layer_rules("no separator")


def test_reclassify_keeps_data():
    ck = make_checkpoint({"enc.w": [1.0, 2.0]}, step=4)
    out = reclassify(ck, parse_layer_rules("enc.* = CONV"))
    assert out["enc.w"].layer_type == LayerType.CONV
    assert out.step == 4 and np.array_equal(out["enc.w"].data, ck["enc.w"].data)


def test_alignment_check():
    a = make_checkpoint({"w": np.zeros(3)})
    check_aligned(a, make_checkpoint({"w": np.ones(3)}))
    with pytest.raises(ShapeMismatch):
        check_aligned(a, make_checkpoint({"w": np.ones(4)}))
    with pytest.raises(ShapeMismatch):
        check_aligned(a, make_checkpoint({"v": np.ones(3)}))


finite32 = st.floats(allow_nan=False, allow_infinity=False, width=32)
tensor_st = st.tuples(
    st.text(min_size=1, max_size=12),
    hnp.array_shapes(min_dims=0, max_dims=3, min_side=1, max_side=5),
    st.sampled_from(list(LayerType)),
)


@settings(max_examples=60, deadline=None)
@given(specs=st.lists(tensor_st, max_size=5, unique_by=lambda s: s[0]), step=st.integers(0, 2**40),
       data=st.data())
def test_round_trip_property(specs, step, data):
    tensors = []
    for name, shape, lt in specs:
        arr = data.draw(hnp.arrays(np.float32, shape, elements=finite32))
        tensors.append(NamedTensor(name, shape, arr.reshape(-1), lt))
    ck = Checkpoint(tuple(tensors), step=step)
    back = loads_checkpoint(dumps_checkpoint(ck))
    assert back == ck
    assert dumps_checkpoint(back) == dumps_checkpoint(ck)
