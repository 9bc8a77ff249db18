"""Layer contracts: linear, batchnorm statistics, GRU semantics, bi-GRU
symmetries, the residual projector, and the embedding loader."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ramen import gradcheck as gc
from ramen import nn
from ramen import tensor as T
from ramen.tensor import Tensor


def rng64(seed=0):
    return np.random.Generator(np.random.PCG64(seed))


def zero_cell(in_size, hidden, dtype=np.float64):
    z = lambda shape: Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)
    return nn.GruCell(
        z((hidden, in_size)), z((hidden, in_size)), z((hidden, in_size)),
        z((hidden, hidden)), z((hidden, hidden)), z((hidden, hidden)),
        z((hidden,)), z((hidden,)), z((hidden,)),
    )


class TestLinear:
    def test_identity_weight(self):
        layer = nn.LinearLayer(
            Tensor(np.eye(3, dtype=np.float64), requires_grad=True),
            Tensor(np.zeros(3, dtype=np.float64), requires_grad=True),
        )
        x = Tensor(rng64(1).standard_normal((4, 3)))
        out = nn.linear_forward(layer, x)
        np.testing.assert_array_equal(out.data, x.data)

    def test_zero_weight_gives_bias_rows(self):
        bias = np.array([1.0, -2.0])
        layer = nn.LinearLayer(
            Tensor(np.zeros((2, 3), dtype=np.float64), requires_grad=True),
            Tensor(bias, dtype=np.float64, requires_grad=True),
        )
        out = nn.linear_forward(layer, Tensor(rng64(2).standard_normal((5, 3))))
        for row in out.data:
            np.testing.assert_array_equal(row, bias)

    def test_gradients(self):
        layer = nn.LinearLayer.create(rng64(3), 4, 3, dtype=np.float64)
        x = Tensor(rng64(4).standard_normal((5, 4)), requires_grad=True)
        w = rng64(5).standard_normal((5, 3))

        def loss():
            return T.sum_all(T.mul(nn.linear_forward(layer, x), Tensor(w, dtype=np.float64)))

        report = gc.check_gradients(
            loss, [("x", x), ("w", layer.weight), ("b", layer.bias)]
        )
        assert max(report.values()) < 1e-6

    def test_shape_mismatch(self):
        layer = nn.LinearLayer.create(rng64(6), 4, 3)
        with pytest.raises(ValueError):
            nn.linear_forward(layer, Tensor(np.zeros((2, 5), dtype=np.float32)))


class TestBatchNorm:
    def test_constant_column_maps_to_zero(self):
        bn = nn.BatchNorm(2, dtype=np.float64)
        x = Tensor(np.full((6, 2), 3.7))
        out = nn.batchnorm_forward(bn, x)
        np.testing.assert_allclose(out.data, 0.0, atol=1e-9)

    def test_two_row_standardization(self):
        bn = nn.BatchNorm(1, eps=1e-12, dtype=np.float64)
        out = nn.batchnorm_forward(bn, Tensor(np.array([[1.0], [3.0]])))
        np.testing.assert_allclose(out.data, [[-1.0], [1.0]], atol=1e-6)

    def test_random_batch_statistics(self):
        bn = nn.BatchNorm(8, dtype=np.float64)
        x = Tensor(rng64(7).standard_normal((64, 8)) * 3.0 + 1.5)
        out = nn.batchnorm_forward(bn, x)
        assert np.abs(out.data.mean(axis=0)).max() < 1e-6
        assert np.abs(out.data.var(axis=0) - 1.0).max() < 1e-4

    def test_batch_of_16_property(self):
        for seed in range(5):
            bn = nn.BatchNorm(5, dtype=np.float64)
            x = Tensor(rng64(seed).standard_normal((16, 5)) * 2.0)
            out = nn.batchnorm_forward(bn, x)
            assert np.abs(out.data.mean(axis=0)).max() < 1e-6
            assert np.abs(out.data.var(axis=0) - 1.0).max() < 1e-4

    def test_running_stats_converge(self):
        bn = nn.BatchNorm(3, dtype=np.float64)
        x = Tensor(rng64(8).standard_normal((32, 3)) + 2.0)
        for _ in range(100):
            nn.batchnorm_forward(bn, x)
        np.testing.assert_allclose(bn.running_mean, x.data.mean(axis=0), atol=1e-3)

    def test_eval_mode_uses_running_stats(self):
        bn = nn.BatchNorm(2, dtype=np.float64)
        bn.running_mean = np.array([1.0, -1.0])
        bn.running_var = np.array([4.0, 0.25])
        bn.mode = "eval"
        out = nn.batchnorm_forward(bn, Tensor(np.array([[3.0, 0.0]])))
        np.testing.assert_allclose(out.data, [[2.0 / np.sqrt(4.0 + bn.eps), 1.0 / np.sqrt(0.25 + bn.eps)]])

    def test_train_mode_needs_two_rows(self):
        bn = nn.BatchNorm(2)
        with pytest.raises(ValueError, match=">= 2 rows"):
            nn.batchnorm_forward(bn, Tensor(np.zeros((1, 2), dtype=np.float32)))

    def test_invalid_hyperparameters(self):
        with pytest.raises(ValueError):
            nn.BatchNorm(2, momentum=0.0)
        with pytest.raises(ValueError):
            nn.BatchNorm(2, eps=0.0)


class TestGruStep:
    def test_zero_weights_halve_state(self):
        cell = zero_cell(3, 4)
        h = Tensor(rng64(9).standard_normal(4))
        x = Tensor(rng64(10).standard_normal(3))
        out = nn.gru_step(cell, x, h)
        np.testing.assert_allclose(out.data, 0.5 * h.data, rtol=1e-12)

    def test_zero_state_and_weights_stay_zero(self):
        cell = zero_cell(3, 4)
        out = nn.gru_step(cell, Tensor(np.ones(3, dtype=np.float64)), Tensor(np.zeros(4, dtype=np.float64)))
        np.testing.assert_array_equal(out.data, np.zeros(4))

    def test_gradients_wrt_everything(self):
        cell = nn.GruCell.create(rng64(11), 3, 4, dtype=np.float64)
        x = Tensor(rng64(12).standard_normal((2, 3)), requires_grad=True)
        h = Tensor(rng64(13).standard_normal((2, 4)), requires_grad=True)
        w = rng64(14).standard_normal((2, 4))
        named = [("x", x), ("h", h)] + [
            (n, getattr(cell, n))
            for n in ("W_z", "W_r", "W_h", "U_z", "U_r", "U_h", "b_z", "b_r", "b_h")
        ]

        def loss():
            return T.sum_all(T.mul(nn.gru_step(cell, x, h), Tensor(w, dtype=np.float64)))

        report = gc.check_gradients(loss, named)
        assert max(report.values()) < 1e-6

    @given(st.integers(min_value=0, max_value=10_000))
    @settings(max_examples=40, deadline=None)
    def test_output_bounded_by_state_and_one(self, seed):
        rng = rng64(seed)
        cell = nn.GruCell.create(rng, 3, 5, dtype=np.float64)
        x = Tensor(rng.standard_normal(3) * 3.0)
        h = Tensor(rng.standard_normal(5) * 2.0)
        out = nn.gru_step(cell, x, h)
        bound = np.maximum(np.abs(h.data), 1.0) + 1e-12
        assert np.all(np.abs(out.data) <= bound)


class TestGruSequence:
    def test_matches_stepwise_composition(self):
        rng = rng64(15)
        cell = nn.GruCell.create(rng, 4, 3, dtype=np.float64)
        xs = [Tensor(rng.standard_normal((2, 4))) for _ in range(5)]
        masks = [np.array([1.0, 1.0]), np.array([1.0, 1.0]), np.array([1.0, 0.0]),
                 np.array([0.0, 0.0]), np.array([1.0, 0.0])]
        fused = nn.gru_sequence(cell, xs, masks)
        h = Tensor(np.zeros((2, 3), dtype=np.float64))
        for x, m in zip(xs, masks):
            stepped = nn.gru_step(cell, x, h)
            h = T.add(T.scale_rows(stepped, m), T.scale_rows(h, 1.0 - m))
        np.testing.assert_allclose(fused.data, h.data, atol=1e-14)

    def test_gradients_with_masks(self):
        rng = rng64(16)
        cell = nn.GruCell.create(rng, 3, 2, dtype=np.float64)
        xs = [Tensor(rng.standard_normal((2, 3)), requires_grad=True) for _ in range(3)]
        masks = [np.array([1.0, 1.0]), np.array([1.0, 0.0]), np.array([0.0, 0.0])]
        w = rng.standard_normal((2, 2))
        named = [(f"x{i}", x) for i, x in enumerate(xs)]
        named += [(n, getattr(cell, n)) for n in ("W_z", "U_h", "b_r")]

        def loss():
            return T.sum_all(T.mul(nn.gru_sequence(cell, xs, masks), Tensor(w, dtype=np.float64)))

        report = gc.check_gradients(loss, named)
        assert max(report.values()) < 1e-6

    def test_empty_sequence_rejected(self):
        cell = nn.GruCell.create(rng64(17), 3, 2)
        with pytest.raises(ValueError, match="empty"):
            nn.gru_sequence(cell, [])


class TestBigru:
    def test_paper_width(self):
        # hidden 1024 per direction -> 2048-wide scene embedding
        rng = rng64(18)
        fwd = nn.GruCell.create(rng, 8, 1024)
        bwd = nn.GruCell.create(rng, 8, 1024)
        seq = [Tensor(rng.standard_normal((1, 8)).astype(np.float32)) for _ in range(2)]
        out = nn.bigru_final(fwd, bwd, seq)
        assert out.shape == (1, 2048)

    def test_length_one_shared_cells_symmetric(self):
        rng = rng64(19)
        cell = nn.GruCell.create(rng, 4, 3, dtype=np.float64)
        x = Tensor(rng.standard_normal(4))
        out = nn.bigru_final(cell, cell, [x])
        np.testing.assert_array_equal(out.data[:3], out.data[3:])

    def test_reversal_swaps_roles(self):
        rng = rng64(20)
        cell = nn.GruCell.create(rng, 4, 3, dtype=np.float64)
        seq = [Tensor(rng.standard_normal(4)) for _ in range(3)]
        fwd_then = nn.bigru_final(cell, cell, seq)
        rev_then = nn.bigru_final(cell, cell, list(reversed(seq)))
        np.testing.assert_allclose(fwd_then.data[:3], rev_then.data[3:], atol=1e-14)

    def test_empty_rejected(self):
        cell = nn.GruCell.create(rng64(21), 4, 3)
        with pytest.raises(ValueError, match="empty"):
            nn.bigru_final(cell, cell, [])


class TestResidualMlp:
    def test_zeroed_tail_collapses_to_first_layer(self):
        rng = rng64(22)
        mlp = nn.ResidualMlp.create(rng, 5, 4, dtype=np.float64)
        for layer in mlp.layers[1:]:
            layer.weight.data[...] = 0.0
            layer.bias.data[...] = 0.0
        c = Tensor(rng.standard_normal((3, 5)))
        out = nn.residual_mlp_forward(mlp, c)
        first = T.swish(nn.linear_forward(mlp.layers[0], c))
        np.testing.assert_allclose(out.data, first.data, atol=1e-14)

    def test_output_width_is_trunk_width(self):
        mlp = nn.ResidualMlp.create(rng64(23), 3584, 1024)
        c = Tensor(rng64(24).standard_normal((2, 3584)).astype(np.float32))
        assert nn.residual_mlp_forward(mlp, c).shape == (2, 1024)

    def test_gradients_through_all_layers(self):
        rng = rng64(25)
        mlp = nn.ResidualMlp.create(rng, 4, 3, dtype=np.float64)
        c = Tensor(rng.standard_normal((2, 4)), requires_grad=True)
        w = rng.standard_normal((2, 3))
        named = [("c", c)]
        for i, layer in enumerate(mlp.layers, start=1):
            named += [(f"l{i}.w", layer.weight), (f"l{i}.b", layer.bias)]

        def loss():
            return T.sum_all(T.mul(nn.residual_mlp_forward(mlp, c), Tensor(w, dtype=np.float64)))

        report = gc.check_gradients(loss, named)
        assert max(report.values()) < 1e-4

    def test_layer_count_enforced(self):
        layers = [nn.LinearLayer.create(rng64(26), 4, 4) for _ in range(3)]
        with pytest.raises(ValueError, match="4 layers"):
            nn.ResidualMlp(layers)


class TestEmbedding:
    def test_lookup_and_unknown_id(self):
        emb = nn.Embedding.create(rng64(27), 5, 3)
        out = nn.embedding_lookup(emb, [0, 4, 2])
        assert out.shape == (3, 3)
        with pytest.raises(ValueError, match="out of range"):
            nn.embedding_lookup(emb, [5])

    def test_text_file_loader(self, tmp_path):
        path = tmp_path / "vectors.txt"
        path.write_text("cat 1.0 2.0 3.0\ndog 4.0 5.0 6.0\n")
        out = nn.load_embedding_text(path, ["cat", "bird", "dog"], 3, rng64(28))
        np.testing.assert_array_equal(out[0], [1.0, 2.0, 3.0])
        np.testing.assert_array_equal(out[2], [4.0, 5.0, 6.0])
        assert not np.allclose(out[1], 0.0)  # random fallback

    def test_malformed_line_rejected(self, tmp_path):
        path = tmp_path / "vectors.txt"
        path.write_text("cat 1.0 2.0\n")
        with pytest.raises(ValueError, match="line 1"):
            nn.load_embedding_text(path, ["cat"], 3, rng64(29))


class TestInit:
    def test_orthogonal_is_orthogonal(self):
        q = nn.orthogonal(rng64(30), 16, np.float64)
        np.testing.assert_allclose(q @ q.T, np.eye(16), atol=1e-10)

    def test_glorot_bounds(self):
        w = nn.glorot_uniform(rng64(31), 20, 30, np.float64)
        limit = np.sqrt(6.0 / 50.0)
        assert np.abs(w).max() <= limit
