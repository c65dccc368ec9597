import math
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from modnas.optim import (
    CheckpointError,
    OptimizerConfig,
    ParamStore,
    adam_step,
    cosine_lr,
    read_container,
    write_container,
)


def store_with(name="theta", value=0.0, shape=(1,)):
    s = ParamStore()
    s.add(name, np.full(shape, value, dtype=np.float64))
    return s


def test_optimizer_defaults():
    c = OptimizerConfig()
    assert (c.beta1, c.beta2, c.epsilon, c.lr_max, c.lr_min, c.total_epochs) == (0.9, 0.999, 1e-8, 1e-3, 1e-5, 140)


@pytest.mark.parametrize("kwargs", [{"beta1": 1.0}, {"beta2": 0.0}, {"epsilon": 0.0},
                                    {"lr_min": 1e-2}, {"total_epochs": 0}])
def test_optimizer_config_validation(kwargs):
    with pytest.raises(ValueError):
        OptimizerConfig(**kwargs)


def test_adam_zero_gradient_keeps_parameter():
    s = store_with(value=0.7, shape=(3,))
    adam_step(s, "theta", np.zeros(3), 1e-3)
    np.testing.assert_array_equal(s["theta"].data, 0.7)
    assert s.entries["theta"].step == 1


def test_adam_first_step_hand_value():
    s = store_with()
    adam_step(s, "theta", np.ones(1), 1e-3)
    assert abs(s["theta"].data[0] - (-1e-3)) < 1e-6


def test_adam_second_step_hand_value():
    s = store_with()
    adam_step(s, "theta", np.ones(1), 1e-3)
    adam_step(s, "theta", np.full(1, 0.5), 1e-3)
    m = 0.9 * 0.1 + 0.1 * 0.5
    v = 0.999 * 0.001 + 0.001 * 0.25
    expected = -1e-3 / (1 + 1e-8) - 1e-3 * (m / (1 - 0.81)) / (math.sqrt(v / (1 - 0.999 ** 2)) + 1e-8)
    assert s["theta"].data[0] == pytest.approx(expected, abs=1e-12)


def test_adam_converges_on_quadratic():
    s = store_with(value=1.0)
    for _ in range(500):
        adam_step(s, "theta", 2 * s["theta"].data, 1e-2)
    assert abs(s["theta"].data[0]) < 1e-2


def test_adam_shape_mismatch():
    with pytest.raises(ValueError):
        adam_step(store_with(shape=(2,)), "theta", np.zeros(3), 1e-3)


def test_store_basics():
    s = ParamStore()
    s.add("a", np.zeros((2, 2)))
    s.add("b", [1, 2, 3])
    assert len(s) == 2 and "a" in s and s.numel() == 7
    assert s["b"].dtype == np.float32
    with pytest.raises(KeyError):
        s.add("a", np.zeros(1))
    for e in s.entries.values():
        assert e.m.shape == e.tensor.shape == e.v.shape and e.step == 0


def test_cosine_endpoints_and_midpoint():
    c = OptimizerConfig()
    assert abs(cosine_lr(0, c) - 1e-3) < 1e-12
    assert abs(cosine_lr(140, c) - 1e-5) < 1e-12
    assert cosine_lr(70, c) == pytest.approx(5.05e-4, abs=1e-12)
    with pytest.raises(ValueError):
        cosine_lr(141, c)
    with pytest.raises(ValueError):
        cosine_lr(-1, c)


@given(st.integers(1, 500))
def test_cosine_monotone(total):
    c = OptimizerConfig(total_epochs=total)
    lrs = [cosine_lr(e, c) for e in range(total + 1)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


# ---------------------------------------------------------------------------
# container


def test_container_round_trip_bit_exact(tmp_path, rng):
    arrays = {"w": rng.standard_normal((3, 4)).astype(np.float32), "b": np.arange(5, dtype=np.float64),
              "scalar": np.array(1.5, dtype=np.float32)}
    write_container(tmp_path / "c.bin", arrays, {"note": "x"})
    back, meta = read_container(tmp_path / "c.bin")
    assert meta == {"note": "x"}
    for k, v in arrays.items():
        assert back[k].dtype == v.dtype and back[k].shape == v.shape
        assert back[k].tobytes() == v.tobytes()


def test_container_is_deterministic(tmp_path):
    a = {"x": np.ones(3, dtype=np.float32), "y": np.zeros(2, dtype=np.float32)}
    write_container(tmp_path / "1", a, {"k": 1})
    write_container(tmp_path / "2", dict(reversed(list(a.items()))), {"k": 1})
    assert (tmp_path / "1").read_bytes() == (tmp_path / "2").read_bytes()


def test_container_layout(tmp_path):
    write_container(tmp_path / "c", {"x": np.array([1.0], dtype="<f4")})
    blob = (tmp_path / "c").read_bytes()
    assert blob[:8] == b"MODNASPS"
    (n,) = struct.unpack("<Q", blob[8:16])
    assert blob[16 + n :] == np.array([1.0], dtype="<f4").tobytes()


def test_container_truncated_payload(tmp_path):
    write_container(tmp_path / "c", {"x": np.ones(100, dtype=np.float32)})
    blob = (tmp_path / "c").read_bytes()
    (tmp_path / "t").write_bytes(blob[:-10])
    with pytest.raises(CheckpointError, match="truncated"):
        read_container(tmp_path / "t")


@pytest.mark.parametrize("mutate", [
    lambda b: b"NOTMAGIC" + b[8:],
    lambda b: b[:12],
    lambda b: b[:16] + b"X" + b[17:],
    lambda b: b[:8] + struct.pack("<Q", 10 ** 9) + b[16:],
])
def test_container_corruption_detected(tmp_path, mutate):
    write_container(tmp_path / "c", {"x": np.ones(4, dtype=np.float32)})
    (tmp_path / "bad").write_bytes(mutate((tmp_path / "c").read_bytes()))
    with pytest.raises(CheckpointError):
        read_container(tmp_path / "bad")


def test_load_arrays_checks_shapes_and_presence():
    s = store_with(shape=(2,))
    arrays, steps = s.to_arrays()
    other = store_with(shape=(3,))
    with pytest.raises(ValueError):
        other.load_arrays(arrays, steps)
    with pytest.raises(KeyError):
        store_with(name="missing").load_arrays(arrays, steps)
