import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from piml_knw.autodiff import ContractError, ParameterVector
from piml_knw.models import (ArchitectureMismatchError, CheckpointChecksumError, CheckpointFormatError,
                             CheckpointVersionError, FixedBasisModel, MHPinnModel, MLPSpec, PiDonModel, extract_basis,
                             init_mlp, load_checkpoint, mh_predict, mlp_forward, pidon_predict, save_checkpoint)
from piml_knw.problems import TaskBatch, TaskFamily, sample_tasks


def dense_forward(spec, values, x):
    """Independent plain-numpy forward pass used as an oracle."""
    act = np.sin if spec.activation == "sine" else np.tanh
    off = 0
    dims = (spec.input_dim, *spec.hidden_widths, spec.output_dim)
    h = np.atleast_2d(x)
    for i in range(len(dims) - 1):
        W = values[off:off + dims[i] * dims[i + 1]].reshape(dims[i], dims[i + 1])
        off += W.size
        last = i == len(dims) - 2
        b = np.zeros(dims[i + 1])
        if not last or spec.output_bias:
            b = values[off:off + dims[i + 1]]
            off += dims[i + 1]
        h = h @ W + b if last else act(h @ W + b)
    return h


class TestMLPSpec:
    def test_defaults(self):
        spec = MLPSpec(1)
        assert spec.hidden_widths == (20, 20)
        assert spec.activation == "sine"

    def test_unknown_activation(self):
        with pytest.raises(ContractError):
            MLPSpec(1, (5,), "relu")

    def test_layout_lengths(self):
        spec = MLPSpec(2, (4, 3), "tanh", 5, output_bias=False)
        assert spec.n_params == 2 * 4 + 4 + 4 * 3 + 3 + 3 * 5

    def test_dict_round_trip(self):
        spec = MLPSpec(2, (4, 3), "tanh", 5, output_bias=False)
        assert MLPSpec.from_dict(spec.to_dict()) == spec


class TestInit:
    def test_glorot_bounds_and_zero_bias(self):
        spec = MLPSpec(3, (40,), "tanh", 2)
        pv = init_mlp(spec, np.random.default_rng(0))
        W0 = pv.values[:120]
        assert np.abs(W0).max() <= math.sqrt(6 / 43)
        np.testing.assert_array_equal(pv.values[120:160], 0.0)

    def test_glorot_bias_option(self):
        spec = MLPSpec(3, (40,), "tanh", 2)
        pv = init_mlp(spec, np.random.default_rng(0), bias_init="glorot")
        b0 = pv.values[120:160]
        assert np.all(b0 != 0.0) and np.abs(b0).max() <= math.sqrt(6 / 43)

    def test_first_layer_omega_scales_only_first_layer(self):
        spec = MLPSpec(1, (5, 5), "sine", 1)
        a = init_mlp(spec, np.random.default_rng(1)).values
        b = init_mlp(spec, np.random.default_rng(1), first_layer_omega=30.0).values
        np.testing.assert_allclose(b[:5], 30.0 * a[:5])
        np.testing.assert_array_equal(b[5:], a[5:])


class TestForward:
    def test_zero_output_layer(self):
        spec = MLPSpec(1, (6,), "sine", 2)
        pv = init_mlp(spec, np.random.default_rng(0))
        vals = pv.values.copy()
        vals[12:] = 0.0
        _, out = mlp_forward(spec, vals, np.linspace(-1, 1, 9)[:, None])
        np.testing.assert_array_equal(out, 0.0)

    def test_one_neuron_sine(self):
        spec = MLPSpec(1, (1,), "sine", 1)
        _, out = mlp_forward(spec, np.array([2.0, 0.0, 1.0, 0.0]), [math.pi / 4])
        assert out[0] == pytest.approx(1.0, abs=1e-15)

    @pytest.mark.parametrize("activation", ["sine", "tanh"])
    def test_matches_dense_oracle(self, activation):
        rng = np.random.default_rng(5)
        spec = MLPSpec(2, (7, 4), activation, 3)
        pv = init_mlp(spec, rng)
        x = rng.uniform(-1, 1, (11, 2))
        hidden, out = mlp_forward(spec, pv, x)
        np.testing.assert_allclose(out, dense_forward(spec, pv.values, x), rtol=0, atol=1e-14)
        W = pv.values[2 * 7 + 7 + 7 * 4 + 4:].reshape(-1)[:12].reshape(4, 3)
        np.testing.assert_allclose(out, hidden @ W + pv.values[-3:], rtol=0, atol=1e-14)

    def test_dimension_mismatch(self):
        spec = MLPSpec(2, (3,), "tanh", 1)
        with pytest.raises(ContractError):
            mlp_forward(spec, init_mlp(spec, np.random.default_rng(0)), [0.1, 0.2, 0.3])


class TestExtractBasis:
    def test_poisson_shape(self):
        fam = TaskFamily("poisson1d")
        model = MHPinnModel.create(1, 20, rng=np.random.default_rng(0))
        b = extract_basis(model, grid=fam.residual_points(), grid_shape=fam.grid_shape)
        assert b.shape == (20, 512)

    def test_allen_cahn_shape(self):
        fam = TaskFamily("allen_cahn2d")
        model = MHPinnModel.create(2, 20, rng=np.random.default_rng(0))
        b = extract_basis(model, grid=fam.residual_points(), grid_shape=fam.grid_shape)
        assert b.shape == (20, 2601)
        assert b.grid_shape == (51, 51)

    def test_rows_are_hidden_activations_bit_identical(self):
        spec = MLPSpec(1, (8, 8), "tanh", 3)
        pv = init_mlp(spec, np.random.default_rng(2))
        grid = np.linspace(-1, 1, 33)[:, None]
        b = extract_basis(spec, pv, grid)
        hidden, _ = mlp_forward(spec, pv, grid)
        assert np.array_equal(b.values, hidden.T)
        # single-point evaluation differs from the batched product only by round-off
        for k, x in enumerate(grid):
            np.testing.assert_allclose(b.values[:, k], mlp_forward(spec, pv, x)[0], rtol=0, atol=1e-15)

    def test_zero_weights_give_activation_of_bias(self):
        spec = MLPSpec(1, (4, 3), "tanh", 1)
        vals = np.zeros(spec.n_params)
        vals[8 + 12:8 + 12 + 3] = [0.5, -1.0, 0.0]  # second hidden bias
        b = extract_basis(spec, vals, np.linspace(-1, 1, 5)[:, None])
        np.testing.assert_array_equal(b.values, np.tanh(np.array([0.5, -1.0, 0.0]))[:, None] * np.ones(5))

    def test_empty_grid(self):
        with pytest.raises(ContractError):
            extract_basis(MLPSpec(1, (2,)), np.zeros(MLPSpec(1, (2,)).n_params), np.zeros((0, 1)))


class TestMHPinn:
    model = MHPinnModel.create(1, 4, (6, 6), "tanh", np.random.default_rng(3))

    def test_zero_head(self):
        vals = self.model.params.values.copy()
        heads = self.model.heads(vals)
        n = heads.size
        vals[-n:] = 0.0
        assert mh_predict(self.model.with_params(vals), 2, [0.3]) == 0.0

    def test_identical_heads_identical_predictions(self):
        vals = self.model.params.values.copy()
        H = vals[-24:].reshape(6, 4)
        H[:, 1] = H[:, 0]
        vals[-24:] = H.ravel()
        m = self.model.with_params(vals)
        for x in np.linspace(-1, 1, 7):
            assert mh_predict(m, 1, [x]) == mh_predict(m, 2, [x])

    def test_prediction_equals_basis_dot_head(self):
        grid = np.linspace(-1, 1, 21)[:, None]
        b = extract_basis(self.model, grid=grid)
        H = self.model.heads()
        for k in range(21):
            for i in range(4):
                assert abs(mh_predict(self.model, i + 1, grid[k]) - b.values[:, k] @ H[:, i]) < 1e-14

    @settings(max_examples=40, deadline=None)
    @given(st.floats(-2, 2), st.floats(-2, 2), st.floats(-1, 1))
    def test_linear_in_head_weights(self, alpha, beta, x):
        rng = np.random.default_rng(0)
        w1, w2 = rng.standard_normal(6), rng.standard_normal(6)

        def with_head(w):
            vals = self.model.params.values.copy()
            H = vals[-24:].reshape(6, 4)
            H[:, 0] = w
            vals[-24:] = H.ravel()
            return mh_predict(self.model.with_params(vals), 1, [x])

        combined = with_head(alpha * w1 + beta * w2)
        assert combined == pytest.approx(alpha * with_head(w1) + beta * with_head(w2), abs=1e-12)

    def test_task_index_range(self):
        with pytest.raises(ContractError):
            mh_predict(self.model, 0, [0.0])
        with pytest.raises(ContractError):
            mh_predict(self.model, 5, [0.0])


class TestPiDon:
    fam = TaskFamily("poisson1d")
    model = PiDonModel.create(1, 50, 6, (5, 5), "sine", np.random.default_rng(4), input_scale=100.0)

    def branch_layer_slice(self):
        off = self.model.params.offsets()
        start, _ = off["branch.2.W"]
        end, shape = off["branch.2.b"]
        return start, end + shape[0]

    def test_zero_branch_output_layer(self):
        vals = self.model.params.values.copy()
        s, e = self.branch_layer_slice()
        vals[s:e] = 0.0
        f = np.random.default_rng(0).standard_normal(50)
        assert pidon_predict(self.model.with_params(vals), f, [0.2]) == 0.0

    def test_one_hot_branch_selects_trunk_basis(self):
        vals = self.model.params.values.copy()
        s, e = self.branch_layer_slice()
        vals[s:e] = 0.0
        vals[e - 6 + 3] = 1.0  # output bias e_4
        m = self.model.with_params(vals)
        x = np.array([[0.37]])
        assert pidon_predict(m, np.zeros(50), x[0]) == m.basis(m.params.values, x)[0, 3]

    def test_matches_two_network_composition(self):
        rng = np.random.default_rng(9)
        f = rng.standard_normal(50) * 100
        vals = self.model.params.values
        nb = self.model.n_branch_params
        coeffs = dense_forward(self.model.branch, vals[:nb], f / 100.0)[0]
        trunk = dense_forward(self.model.trunk, vals[nb:], np.array([[0.61]]))[0]
        assert abs(pidon_predict(self.model, f, [0.61]) - coeffs @ trunk) < 1e-14

    def test_bilinear(self):
        p = self.model.params.values
        x = np.array([[0.1]])
        c = self.model.branch_output(p, np.ones((1, 50)))[0]
        phi = self.model.basis(p, x)[0]
        assert pidon_predict(self.model, np.ones(50), x[0]) == pytest.approx(float(c @ phi), abs=1e-14)

    def test_sensor_count_mismatch(self):
        with pytest.raises(ContractError):
            pidon_predict(self.model, np.zeros(49), [0.0])


class TestFixedBasis:
    def test_reproduces_solutions(self):
        fam = TaskFamily("poisson1d")
        batch = TaskBatch(sample_tasks(fam, 3, 0))
        m = FixedBasisModel.create(fam, batch.coefficients)
        U = m.basis(m.params.values, batch.points) @ m.coefficient_matrix(m.params.values)
        np.testing.assert_allclose(U, batch.solutions, atol=1e-14)

    def test_wrong_mode_count(self):
        with pytest.raises(ContractError):
            FixedBasisModel.create(TaskFamily("poisson1d"), np.ones((2, 4)))


class TestCheckpoint:
    def test_round_trip_mh(self, tmp_path):
        m = MHPinnModel.create(2, 5, (7, 7), "tanh", np.random.default_rng(1))
        path = save_checkpoint(m, tmp_path / "m.ckpt")
        back = load_checkpoint(path)
        assert back.params.values.tobytes() == m.params.values.tobytes()
        assert back.descriptor() == m.descriptor()
        assert back.params.layout == m.params.layout

    def test_round_trip_pidon_and_fixed(self, tmp_path):
        d = PiDonModel.create(1, 50, rng=np.random.default_rng(1), input_scale=3.5)
        back = load_checkpoint(save_checkpoint(d, tmp_path / "d.ckpt"))
        assert back.params.values.tobytes() == d.params.values.tobytes()
        assert back.input_scale == 3.5
        f = FixedBasisModel.create(TaskFamily("allen_cahn2d"), np.ones((2, 5)))
        back = load_checkpoint(save_checkpoint(f, tmp_path / "f.ckpt"))
        assert back.family == f.family

    def test_bad_magic(self, tmp_path):
        path = save_checkpoint(MHPinnModel.create(1, 2, (3,)), tmp_path / "m.ckpt")
        data = bytearray(path.read_bytes())
        data[0] ^= 0xFF
        path.write_bytes(bytes(data))
        with pytest.raises(CheckpointFormatError):
            load_checkpoint(path)

    def test_truncated(self, tmp_path):
        path = save_checkpoint(MHPinnModel.create(1, 2, (3,)), tmp_path / "m.ckpt")
        path.write_bytes(path.read_bytes()[:-20])
        with pytest.raises(CheckpointFormatError):
            load_checkpoint(path)

    def test_corrupted_payload(self, tmp_path):
        path = save_checkpoint(MHPinnModel.create(1, 2, (3,)), tmp_path / "m.ckpt")
        data = bytearray(path.read_bytes())
        data[-12] ^= 0x01
        path.write_bytes(bytes(data))
        with pytest.raises(CheckpointChecksumError):
            load_checkpoint(path)

    def test_version(self, tmp_path):
        path = save_checkpoint(MHPinnModel.create(1, 2, (3,)), tmp_path / "m.ckpt")
        data = bytearray(path.read_bytes())
        data[8] = 99
        path.write_bytes(bytes(data))
        with pytest.raises(CheckpointVersionError):
            load_checkpoint(path)

    def test_architecture_mismatch(self, tmp_path):
        path = save_checkpoint(MHPinnModel.create(1, 20, (20, 20)), tmp_path / "m.ckpt")
        wider = MHPinnModel.create(1, 20, (40, 40))
        with pytest.raises(ArchitectureMismatchError):
            load_checkpoint(path, expect=wider.descriptor())

    def test_byte_layout(self, tmp_path):
        m = MHPinnModel.create(1, 2, (3,))
        data = save_checkpoint(m, tmp_path / "m.ckpt").read_bytes()
        assert data[:8] == b"PIMLKNW\x00"
        n = len(m.params)
        assert np.array_equal(np.frombuffer(data[-8 - 8 * n:-8], dtype="<f8"), m.params.values)
