"""finite_diff_check harness behaviour and SFWT/SFOP checkpoint files."""

import numpy as np
import pytest

from sinostd.grid import (AdamState, CheckpointError, OPTIM_MAGIC, PARAM_MAGIC,
                          Tensor, conv2d, dense, finite_diff_check, load_adam,
                          load_arrays, load_params_into, save_adam, save_arrays,
                          save_params)


@pytest.fixture
def rng():
    return np.random.default_rng(3)


class TestFiniteDiffCheck:
    def test_linear_op_near_exact(self, rng):
        w = rng.normal(size=(4, 3))
        rep = finite_diff_check(lambda x: dense(x, Tensor(w)), [rng.normal(size=(2, 4))])
        assert rep.max_rel_error < 1e-8

    def test_conv_stack_depth_three(self, rng):
        k1 = rng.normal(size=(2, 1, 3, 3))
        k2 = rng.normal(size=(2, 2, 3, 3))
        k3 = rng.normal(size=(1, 2, 3, 3))

        def stack(x, a, b, c):
            h = conv2d(x, a, stride=1, pad=1)
            h = conv2d(h, b, stride=1, pad=1)
            return conv2d(h, c, stride=1, pad=1)

        rep = finite_diff_check(stack, [rng.normal(size=(1, 1, 6, 6)) * 0.5, k1, k2, k3],
                                max_probes_per_input=40)
        assert rep.max_rel_error < 1e-4

    def test_corrupted_backward_is_caught(self, rng):
        """Negative control: a wrong backward must blow past the tolerance."""

        def broken_mul(x):
            out = Tensor._from_op(x.data * 3.0, (x,),
                                  lambda g: x._accumulate(g * 2.0), "broken")
            return out

        rep = finite_diff_check(broken_mul, [rng.normal(size=(5,))])
        assert rep.max_rel_error > 1e-2
        assert not rep.passed

    def test_report_carries_probe_count(self, rng):
        rep = finite_diff_check(lambda x: x * 2.0, [np.ones((2, 3))])
        assert rep.n_probes == 6


class TestParameterCheckpoints:
    def test_round_trip(self, tmp_path, rng):
        arrays = {"enc.w": rng.normal(size=(2, 3, 3, 3)).astype(np.float32),
                  "enc.b": rng.normal(size=2).astype(np.float32),
                  "scalar": np.array(1.5, dtype=np.float32)}
        path = tmp_path / "params.sfwt"
        save_arrays(path, arrays)
        loaded = load_arrays(path)
        assert set(loaded) == set(arrays)
        for name in arrays:
            assert np.array_equal(loaded[name], arrays[name])
            assert loaded[name].shape == arrays[name].shape

    def test_magic_bytes(self, tmp_path):
        path = tmp_path / "p.sfwt"
        save_arrays(path, {"x": np.zeros(1, dtype=np.float32)})
        assert open(path, "rb").read(4) == b"SFWT"

    def test_bad_magic_rejected_with_offset(self, tmp_path):
        path = tmp_path / "bad.sfwt"
        path.write_bytes(b"XXXX" + b"\x00" * 16)
        with pytest.raises(CheckpointError, match="byte 0"):
            load_arrays(path)

    def test_truncation_reports_offset(self, tmp_path, rng):
        path = tmp_path / "t.sfwt"
        save_arrays(path, {"w": rng.normal(size=8).astype(np.float32)})
        blob = path.read_bytes()
        path.write_bytes(blob[:-10])
        with pytest.raises(CheckpointError, match="truncated"):
            load_arrays(path)

    def test_trailing_bytes_rejected(self, tmp_path):
        path = tmp_path / "x.sfwt"
        save_arrays(path, {"w": np.zeros(2, dtype=np.float32)})
        path.write_bytes(path.read_bytes() + b"junk")
        with pytest.raises(CheckpointError, match="trailing"):
            load_arrays(path)

    def test_load_params_into_validates_shapes(self, tmp_path):
        path = tmp_path / "p.sfwt"
        params = {"w": Tensor(np.zeros((2, 2), dtype=np.float32), requires_grad=True)}
        save_params(path, params)
        wrong = {"w": Tensor(np.zeros((3, 3), dtype=np.float32), requires_grad=True)}
        with pytest.raises(CheckpointError, match="shape"):
            load_params_into(path, wrong)

    def test_little_endian_layout(self, tmp_path):
        """Byte layout is fixed: the float 1.0 appears as 00 00 80 3F."""
        path = tmp_path / "e.sfwt"
        save_arrays(path, {"a": np.array([1.0], dtype=np.float32)})
        blob = path.read_bytes()
        # magic(4) + version u16 + count u32 + namelen u16 + "a" + rank u8 + extent u32
        assert blob[4:6] == (1).to_bytes(2, "little")
        assert blob.endswith(b"\x00\x00\x80\x3f")


class TestOptimizerCheckpoints:
    def test_round_trip(self, tmp_path, rng):
        state = AdamState(learning_rate=0.01, beta1=0.8, beta2=0.99, eps=1e-7, step=17)
        state.m["w"] = rng.normal(size=(2, 2)).astype(np.float32)
        state.v["w"] = np.abs(rng.normal(size=(2, 2))).astype(np.float32)
        path = tmp_path / "opt.sfop"
        save_adam(path, state)
        assert open(path, "rb").read(4) == OPTIM_MAGIC
        loaded = load_adam(path)
        assert loaded.step == 17
        assert np.isclose(loaded.learning_rate, 0.01)
        assert np.isclose(loaded.beta1, 0.8)
        assert np.array_equal(loaded.m["w"], state.m["w"])
        assert np.array_equal(loaded.v["w"], state.v["w"])

    def test_param_magic_rejected_as_optimizer(self, tmp_path):
        path = tmp_path / "p.sfwt"
        save_arrays(path, {"w": np.zeros(1, dtype=np.float32)}, PARAM_MAGIC)
        with pytest.raises(CheckpointError, match="bad magic"):
            load_adam(path)
