import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from cheff.errors import DataIOError
from cheff.io import (TensorFormatError, atomic_write, decode_pgm, encode_pgm, load_tensor, read_pgm,
                      read_tensor, save_tensor, tensor_from_bytes, tensor_to_bytes, to_model_range,
                      to_unit_range, write_pgm)
from cheff.optim import Adam, ParamSet, adam_step
from cheff.rng import RngState


# -- rng -----------------------------------------------------------------
def test_rng_is_deterministic_and_advances():
    a, b = RngState(7), RngState(7)
    x1, y1 = a.normal((4,)), b.normal((4,))
    np.testing.assert_array_equal(x1, y1)
    assert a.counter == 1
    assert not np.array_equal(a.normal((4,)), x1)


def test_rng_copy_replays_stream():
    a = RngState(3)
    a.normal((2,))
    c = a.copy()
    np.testing.assert_array_equal(a.uniform((5,)), c.uniform((5,)))


def test_spawn_is_independent_of_parent_position():
    a = RngState(11)
    child1 = a.spawn(4)
    a.normal((10,))
    child2 = a.spawn(4)
    np.testing.assert_array_equal(child1.normal((3,)), child2.normal((3,)))
    assert not np.array_equal(a.spawn(4).normal((3,)), a.spawn(5).normal((3,)))


def test_fork_gives_distinct_streams():
    draws = [r.normal((8,)) for r in RngState(0).fork(4)]
    assert len({d.tobytes() for d in draws}) == 4


def test_normal_moments():
    x = RngState(123).normal((200_000,), dtype=np.float64)
    assert abs(x.mean()) < 0.01
    assert abs(x.var() - 1.0) < 0.02


def test_integers_in_range():
    v = RngState(1).integers(1, 11, size=1000)
    assert v.min() >= 1 and v.max() <= 10


# -- optim ---------------------------------------------------------------
def test_adam_matches_hand_formula():
    ps = ParamSet()
    p = ps.add("w", np.array([1.0, -2.0]))
    g = np.array([0.5, -1.0])
    lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
    m = v = np.zeros(2)
    expected = p.data.copy()
    for t in range(1, 4):
        adam_step(ps, {"w": g}, lr)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        expected = expected - lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
        np.testing.assert_allclose(ps["w"].data, expected, rtol=1e-12)
    assert ps.step == 3


def test_adam_first_step_moves_by_lr():
    ps = ParamSet()
    ps.add("w", np.zeros(3))
    Adam(lr=0.01).step(ps, {"w": np.array([1.0, -3.0, 0.2])})
    np.testing.assert_allclose(ps["w"].data, [-0.01, 0.01, -0.01], rtol=1e-6)


def test_adam_rejects_unknown_or_misshaped_grads():
    ps = ParamSet()
    ps.add("w", np.zeros(3))
    with pytest.raises(KeyError):
        adam_step(ps, {"x": np.zeros(3)}, 0.1)
    with pytest.raises(ValueError):
        adam_step(ps, {"w": np.zeros(2)}, 0.1)


def test_state_dict_round_trip_and_strictness():
    ps = ParamSet()
    ps.add("a", np.ones((2, 2)))
    ps.add("b", np.zeros(3))
    state = ps.state_dict()
    state["a"][0, 0] = 5.0
    assert ps["a"].data[0, 0] == 1.0  # state_dict copies
    ps.load_state_dict(state)
    assert ps["a"].data[0, 0] == 5.0
    with pytest.raises(KeyError):
        ps.load_state_dict({"a": np.ones((2, 2))})
    with pytest.raises(ValueError):
        ps.load_state_dict({"a": np.ones(4), "b": np.zeros(3)})
    with pytest.raises(KeyError):
        ps.add("a", np.ones(1))


# -- CTNSR1 --------------------------------------------------------------
@settings(max_examples=50, deadline=None)
@given(arrays(st.sampled_from([np.float32, np.float64]), array_shapes(min_dims=0, max_dims=4, max_side=5),
              elements=st.floats(-1e6, 1e6, width=32)))
def test_tensor_round_trip(a):
    b = tensor_from_bytes(tensor_to_bytes(a))
    assert b.dtype == a.dtype and b.shape == a.shape
    np.testing.assert_array_equal(a, b)


def test_tensor_layout_is_little_endian():
    raw = tensor_to_bytes(np.array([[1.0, 2.0]], dtype=np.float32))
    assert raw[:6] == b"CTNSR1"
    assert raw[6:10] == (2).to_bytes(4, "little")
    assert raw[10:18] == (1).to_bytes(8, "little") and raw[18:26] == (2).to_bytes(8, "little")
    assert raw[26] == 0
    assert np.frombuffer(raw[27:], "<f4").tolist() == [1.0, 2.0]


def test_tensor_errors():
    good = tensor_to_bytes(np.arange(6.0))
    with pytest.raises(TensorFormatError, match="magic"):
        tensor_from_bytes(b"XXXXXX" + good[6:])
    with pytest.raises(TensorFormatError, match="truncated"):
        tensor_from_bytes(good[:-3])
    bad_dtype = bytearray(good)
    bad_dtype[6 + 4 + 8] = 9
    with pytest.raises(TensorFormatError, match="dtype"):
        tensor_from_bytes(bytes(bad_dtype))
    with pytest.raises(TensorFormatError):
        tensor_to_bytes(np.arange(3))


def test_consecutive_tensors_in_one_stream(tmp_path):
    buf = io.BytesIO(tensor_to_bytes(np.ones(2)) + tensor_to_bytes(np.zeros((1, 3), np.float32)))
    assert read_tensor(buf).shape == (2,)
    assert read_tensor(buf).shape == (1, 3)
    save_tensor(tmp_path / "t.bin", np.eye(2))
    np.testing.assert_array_equal(load_tensor(tmp_path / "t.bin"), np.eye(2))


def test_atomic_write_leaves_no_temp_files(tmp_path):
    atomic_write(tmp_path / "sub" / "f.txt", "hello")
    assert (tmp_path / "sub" / "f.txt").read_text() == "hello"
    assert [p.name for p in (tmp_path / "sub").iterdir()] == ["f.txt"]


# -- PGM -----------------------------------------------------------------
@pytest.mark.parametrize("bits", [8, 16])
def test_pgm_round_trip(tmp_path, bits):
    maxval = 2**bits - 1
    img = np.random.default_rng(0).integers(0, maxval + 1, (5, 7)) / maxval
    write_pgm(tmp_path / "x.pgm", img, bits)
    np.testing.assert_array_equal(read_pgm(tmp_path / "x.pgm"), img)


def test_pgm_16bit_is_big_endian():
    raw = encode_pgm(np.array([[1.0 / 65535 * 258]]), bits=16)
    assert raw.endswith(b"\x01\x02")


def test_pgm_header_comments_and_errors():
    data = b"P5\n# comment\n2 1\n# another\n255\n\x00\xff"
    np.testing.assert_array_equal(decode_pgm(data), [[0.0, 1.0]])
    with pytest.raises(DataIOError, match="binary PGM"):
        decode_pgm(b"P2\n1 1\n255\n0")
    with pytest.raises(DataIOError, match="truncated"):
        decode_pgm(b"P5\n2 2\n255\n\x00")
    with pytest.raises(DataIOError, match="exceeds maxval"):
        decode_pgm(b"P5\n1 1\n100\n\xff")
    with pytest.raises(DataIOError):
        decode_pgm(b"P5\n1")


def test_read_pgm_names_missing_file(tmp_path):
    with pytest.raises(DataIOError, match="nope.pgm"):
        read_pgm(tmp_path / "nope.pgm")


def test_range_maps_are_inverse():
    x = np.linspace(0, 1, 11)
    np.testing.assert_allclose(to_unit_range(to_model_range(x)), x, atol=1e-15)
