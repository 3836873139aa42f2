"""MLP blocks, optimizer behavior, and parameter serialization."""

import numpy as np
import pytest

from journeyrank import nn
from journeyrank.errors import ConfigError, ContractError, SchemaMismatchError, ShapeError


class TestMlpSpec:
    def test_parameter_count_formula(self):
        spec = nn.MlpSpec(input_dim=7, hidden_dims=(5, 3), output_dim=2)
        # (7+1)*5 + (5+1)*3 + (3+1)*2
        assert spec.n_params == 40 + 18 + 8

    def test_zero_hidden_layers_is_single_affine(self):
        spec = nn.MlpSpec(input_dim=4, hidden_dims=(), output_dim=2)
        assert spec.layer_dims == [(4, 2)]
        assert spec.n_params == 10

    def test_rejects_nonpositive_widths(self):
        with pytest.raises(ConfigError):
            nn.MlpSpec(input_dim=0, hidden_dims=(), output_dim=1)
        with pytest.raises(ConfigError):
            nn.MlpSpec(input_dim=2, hidden_dims=(0,), output_dim=1)

    def test_rejects_unknown_activation(self):
        with pytest.raises(ConfigError):
            nn.MlpSpec(input_dim=2, hidden_dims=(), output_dim=1, activation="gelu")


class TestForwardMlp:
    def test_identity_case(self):
        # zero hidden layers, identity weight, zero bias: output equals input
        store = nn.ParameterStore()
        store.add("id.w0", np.eye(3))
        store.add("id.b0", np.zeros(3))
        spec = nn.MlpSpec(input_dim=3, hidden_dims=(), output_dim=3)
        x = np.random.default_rng(0).normal(size=(5, 3))
        out = nn.forward_mlp(store, "id", spec, nn.Tensor(x))
        np.testing.assert_array_equal(out.values, x)

    def test_all_zero_weights_give_zero_output(self):
        store = nn.ParameterStore()
        store.add("z.w0", np.zeros((4, 3)))
        store.add("z.b0", np.zeros(3))
        store.add("z.w1", np.zeros((3, 2)))
        store.add("z.b1", np.zeros(2))
        spec = nn.MlpSpec(input_dim=4, hidden_dims=(3,), output_dim=2)
        x = np.random.default_rng(1).normal(size=(6, 4))
        out = nn.forward_mlp(store, "z", spec, nn.Tensor(x))
        np.testing.assert_array_equal(out.values, np.zeros((6, 2)))

    def test_matches_hand_rolled_matrix_oracle(self):
        rng = np.random.default_rng(2)
        spec = nn.MlpSpec(input_dim=2, hidden_dims=(3,), output_dim=1)
        store = nn.ParameterStore()
        nn.init_mlp_params(store, "net", spec, rng)
        x = rng.normal(size=(5, 2))
        got = nn.forward_mlp(store, "net", spec, nn.Tensor(x)).values
        h = x @ store["net.w0"].values + store["net.b0"].values
        h = np.maximum(h, 0.0)
        want = h @ store["net.w1"].values + store["net.b1"].values
        np.testing.assert_allclose(got, want, rtol=1e-15)

    def test_width_mismatch_names_layer(self):
        rng = np.random.default_rng(3)
        spec = nn.MlpSpec(input_dim=4, hidden_dims=(), output_dim=1)
        store = nn.ParameterStore()
        nn.init_mlp_params(store, "net", spec, rng)
        with pytest.raises(ShapeError, match="layer 0"):
            nn.forward_mlp(store, "net", spec, nn.Tensor(np.zeros((2, 3))))

    def test_batch_row_independence(self):
        rng = np.random.default_rng(4)
        spec = nn.MlpSpec(input_dim=3, hidden_dims=(4,), output_dim=2)
        store = nn.ParameterStore()
        nn.init_mlp_params(store, "net", spec, rng)
        batch = rng.normal(size=(8, 3))
        full = nn.forward_mlp(store, "net", spec, nn.Tensor(batch)).values
        row0 = nn.forward_mlp(store, "net", spec, nn.Tensor(batch[:1])).values
        np.testing.assert_array_equal(full[0], row0[0])


class TestInitialization:
    def test_deterministic_per_seed(self):
        spec = nn.MlpSpec(input_dim=6, hidden_dims=(5,), output_dim=2)
        stores = []
        for _ in range(2):
            store = nn.ParameterStore()
            nn.init_mlp_params(store, "net", spec, np.random.default_rng(99))
            stores.append(store)
        for name in stores[0].names():
            np.testing.assert_array_equal(stores[0][name].values,
                                          stores[1][name].values)

    def test_glorot_bounds(self):
        spec = nn.MlpSpec(input_dim=10, hidden_dims=(), output_dim=20)
        store = nn.ParameterStore()
        nn.init_mlp_params(store, "net", spec, np.random.default_rng(5))
        limit = np.sqrt(6.0 / 30.0)
        w = store["net.w0"].values
        assert np.all(np.abs(w) <= limit)
        np.testing.assert_array_equal(store["net.b0"].values, np.zeros(20))

    def test_store_value_count(self):
        spec = nn.MlpSpec(input_dim=7, hidden_dims=(5, 3), output_dim=2)
        store = nn.ParameterStore()
        nn.init_mlp_params(store, "net", spec, np.random.default_rng(6))
        assert store.n_values == spec.n_params

    def test_duplicate_name_rejected(self):
        store = nn.ParameterStore()
        store.add("w", np.zeros(1))
        with pytest.raises(ConfigError):
            store.add("w", np.zeros(1))


class TestOptimizer:
    def test_zero_gradient_leaves_parameters_unchanged(self):
        store = nn.ParameterStore()
        w = store.add("w", np.array([1.0, -2.0, 3.0]))
        state = nn.init_adam(store)
        before = w.values.copy()
        store.zero_grads()
        nn.optimizer_step(store, state)
        np.testing.assert_array_equal(w.values, before)
        assert state.step == 1

    def test_moves_opposite_gradient_sign(self):
        store = nn.ParameterStore()
        w = store.add("w", np.array([0.0]))
        state = nn.init_adam(store)
        w.grad = np.array([2.5])
        nn.optimizer_step(store, state)
        assert w.values[0] < 0.0

    def test_clears_gradients_after_step(self):
        store = nn.ParameterStore()
        w = store.add("w", np.array([1.0]))
        state = nn.init_adam(store)
        w.grad = np.array([1.0])
        nn.optimizer_step(store, state)
        assert w.grad is None

    def test_missing_gradient_is_a_contract_error(self):
        store = nn.ParameterStore()
        store.add("w", np.array([1.0]))
        state = nn.init_adam(store)
        with pytest.raises(ContractError, match="w"):
            nn.optimizer_step(store, state)

    def test_quadratic_bowl_converges(self):
        # f(w) = ||w||^2 from ||w0|| = 1: 200 steps at lr 0.05 reach <1e-3
        store = nn.ParameterStore()
        w = store.add("w", np.full(4, 0.5))
        assert abs(np.linalg.norm(w.values) - 1.0) < 1e-12
        state = nn.init_adam(store, nn.AdamConfig(learning_rate=0.05))
        for _ in range(200):
            with nn.Tape() as tape:
                loss = (w * w).sum()
            store.zero_grads()
            nn.backward(tape, loss)
            nn.optimizer_step(store, state)
        assert np.linalg.norm(w.values) < 1e-3


class TestSerialization:
    def _random_store(self):
        rng = np.random.default_rng(8)
        store = nn.ParameterStore()
        store.add("tower.w0", rng.normal(size=(5, 4)))
        store.add("tower.b0", rng.normal(size=4))
        store.add("head.w0", rng.normal(size=(4, 1)))
        store.add("scalar", np.asarray(rng.normal()))
        return store

    def test_roundtrip_is_bit_exact(self, tmp_path):
        store = self._random_store()
        nn.save_params(store, tmp_path)
        loaded, manifest = nn.load_params(tmp_path)
        assert loaded.names() == store.names()
        for name in store.names():
            np.testing.assert_array_equal(loaded[name].values, store[name].values)
            assert loaded[name].values.shape == store[name].values.shape
        assert manifest["format"] == "journeyrank-params-v1"

    def test_extra_manifest_fields_survive(self, tmp_path):
        store = self._random_store()
        nn.save_params(store, tmp_path, extra={"note": "golden"})
        _, manifest = nn.load_params(tmp_path)
        assert manifest["note"] == "golden"

    def test_corrupt_blob_is_rejected(self, tmp_path):
        store = self._random_store()
        nn.save_params(store, tmp_path)
        blob = bytearray((tmp_path / "params.bin").read_bytes())
        blob[3] ^= 0xFF
        (tmp_path / "params.bin").write_bytes(bytes(blob))
        with pytest.raises(SchemaMismatchError):
            nn.load_params(tmp_path)

    def test_saved_files_are_deterministic(self, tmp_path):
        store = self._random_store()
        nn.save_params(store, tmp_path / "a")
        nn.save_params(store, tmp_path / "b")
        assert (tmp_path / "a/params.bin").read_bytes() == (tmp_path / "b/params.bin").read_bytes()
        assert (tmp_path / "a/params.json").read_bytes() == (tmp_path / "b/params.json").read_bytes()
