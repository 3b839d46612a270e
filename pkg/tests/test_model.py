import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import central_diff, naive_distance, naive_score
from tinysiamese.errors import BadMagicError, BadVersionError, DimMismatchError, TruncatedError
from tinysiamese.model import (
    StaleActivationsError,
    TinyModel,
    backward_pair,
    distance_vector,
    embed,
    expected_parameter_count,
    init_model,
    load_model,
    parameter_count,
    save_model,
    score_embeddings,
    score_pair,
)
from tinysiamese.numerics import DimensionError, LinearLayer
from tinysiamese.training import bce_loss


def zero_model(n):
    h = n // 2
    return TinyModel(
        [LinearLayer(np.zeros((h, n)), np.zeros(h)), LinearLayer(np.zeros((n, h)), np.zeros(n))],
        LinearLayer(np.zeros((1, 2 * n)), np.zeros(1)),
    )


def randomized(n, seed, bias_scale=0.5):
    """init_model plus nonzero biases, so every parameter path is exercised."""
    rng = np.random.default_rng(seed + 1)
    model = init_model(n, seed)
    for layer in model.layers():
        layer.bias[:] = rng.uniform(-bias_scale, bias_scale, layer.bias.shape)
    return model


class TestEmbed:
    def test_zero_network(self):
        assert embed(zero_model(2), [1.0, 1.0]).tolist() == [0.5, 0.5]

    @pytest.mark.parametrize("n", [2, 4, 8, 64])
    def test_shape(self, n, rng):
        e = embed(init_model(n, 0), rng.normal(size=n))
        assert e.shape == (n,)
        assert np.all((e > 0) & (e < 1))

    def test_hand_set_weights(self):
        model = TinyModel(
            [LinearLayer([[1.0, 1.0]], [0.0]), LinearLayer([[1.0], [-1.0]], [0.0, 0.0])],
            LinearLayer(np.zeros((1, 4)), np.zeros(1)),
        )
        e = embed(model, [1.0, 2.0])
        # relu(1 + 2) = 3, then sigmoid([3, -3])
        np.testing.assert_allclose(e, [1 / (1 + math.exp(-3)), 1 / (1 + math.exp(3))], rtol=0, atol=1e-15)
        assert f"{e[0]:.6f}" == "0.952574" and f"{e[1]:.6f}" == "0.047426"

    def test_dim_mismatch(self):
        with pytest.raises(DimensionError):
            embed(init_model(4, 0), np.zeros(3))


class TestDistanceVector:
    def test_identical_twins(self):
        np.testing.assert_allclose(distance_vector([0.5, 0.8], [0.5, 0.8]), [0, 0, 0.25, 0.64], rtol=0, atol=1e-15)

    def test_orthogonal(self):
        assert distance_vector([1.0, 0.0], [0.0, 1.0]).tolist() == [1.0, 1.0, 0.0, 0.0]

    def test_bitwise_oracle(self, rng):
        e1, e2 = rng.uniform(size=8), rng.uniform(size=8)
        assert distance_vector(e1, e2).tolist() == naive_distance(e1.tolist(), e2.tolist())

    def test_without_hadamard(self):
        assert distance_vector([1.0, 0.0], [0.0, 1.0], hadamard=False).tolist() == [1.0, 1.0]

    def test_length_mismatch(self):
        with pytest.raises(DimensionError):
            distance_vector([1.0, 2.0], [1.0])


class TestScorePair:
    def test_self_pair_consistency(self, rng):
        model = randomized(8, 3)
        x = rng.normal(size=8)
        p, _ = score_pair(model, x, x)
        e = embed(model, x)
        d = np.concatenate([np.zeros(8), e * e])
        z = float(model.head.weight[0] @ d + model.head.bias[0])
        assert p == pytest.approx(1 / (1 + math.exp(-z)), abs=1e-15)

    def test_zero_network_is_one_half(self, rng):
        p, _ = score_pair(zero_model(6), rng.normal(size=6), rng.normal(size=6))
        assert p == 0.5

    def test_matches_naive_forward(self, rng):
        model = randomized(6, 11)
        for _ in range(10):
            x1, x2 = rng.normal(size=6), rng.normal(size=6)
            p, _ = score_pair(model, x1, x2)
            assert p == pytest.approx(naive_score(model, x1, x2), abs=1e-13)

    def test_symmetric(self, rng):
        model = randomized(16, 5)
        for _ in range(50):
            x1, x2 = rng.normal(size=16), rng.normal(size=16)
            assert score_pair(model, x1, x2)[0] == score_pair(model, x2, x1)[0]

    def test_batch_matches_single(self, rng):
        model = randomized(8, 2)
        xs1, xs2 = rng.normal(size=(5, 8)), rng.normal(size=(5, 8))
        ps, _ = score_pair(model, xs1, xs2)
        for p, a, b in zip(ps, xs1, xs2):
            assert p == pytest.approx(score_pair(model, a, b)[0], abs=1e-14)

    def test_cached_embeddings_agree(self, rng):
        model = randomized(8, 4)
        x1, x2 = rng.normal(size=8), rng.normal(size=8)
        p_full, _ = score_pair(model, x1, x2)
        assert score_embeddings(model, embed(model, x1), embed(model, x2)) == pytest.approx(p_full, abs=1e-15)

    def test_dim_mismatch(self):
        with pytest.raises(DimensionError):
            score_pair(init_model(4, 0), np.zeros(4), np.zeros(6))

    @settings(max_examples=50, deadline=None)
    @given(st.sampled_from([2, 4, 8]), st.integers(0, 2**31), st.floats(0.1, 20))
    def test_probability_in_open_interval(self, n, seed, scale):
        rng = np.random.default_rng(seed)
        p, _ = score_pair(randomized(n, seed), rng.normal(scale=scale, size=n), rng.normal(scale=scale, size=n))
        assert 0 < p < 1


def loss_of(model, x1, x2, y):
    return bce_loss([score_pair(model, x1, x2)[0]], [y])[0]


def analytic_grads(model, x1, x2, y):
    p, acts = score_pair(model, x1, x2)
    _, d = bce_loss([p], [y])
    return backward_pair(model, acts, float(d[0]))


class TestBackward:
    def test_zero_upstream(self, rng):
        model = randomized(4, 0)
        _, acts = score_pair(model, rng.normal(size=4), rng.normal(size=4))
        assert all(not g.any() for g in backward_pair(model, acts, 0.0))

    def test_shapes(self):
        model = init_model(6, 0)
        _, acts = score_pair(model, np.ones(6), np.zeros(6))
        grads = backward_pair(model, acts, 1.0)
        assert [g.shape for g in grads] == [p.shape for p in model.parameters()]

    def test_hand_set_n2_finite_differences(self):
        model = TinyModel(
            [LinearLayer([[0.7, -0.4]], [0.3]), LinearLayer([[1.3], [-0.6]], [0.2, -0.1])],
            LinearLayer([[0.5, -1.5, 2.0, 0.8]], [-0.3]),
        )
        x1, x2 = np.array([1.0, 2.0]), np.array([-0.5, 0.3])
        _, acts = score_pair(model, x1, x2)
        grads = backward_pair(model, acts, 1.0)  # dp/dtheta
        for param, g in zip(model.parameters(), grads):
            num = central_diff(lambda: score_pair(model, x1, x2)[0], param)
            assert np.max(np.abs(g - num) / np.maximum(np.abs(num), 1e-6)) <= 1e-6

    def test_weight_sharing_directional_derivative(self, rng):
        # Both twins feed l1; the directional derivative must see the sum of their contributions.
        model = randomized(6, 9)
        x1, x2 = rng.normal(size=6), rng.normal(size=6)
        p0, acts = score_pair(model, x1, x2)
        g = backward_pair(model, acts, 1.0)[0]
        direction = rng.normal(size=model.l1.weight.shape)
        for eps in (1e-3, 1e-4):
            model.l1.weight += eps * direction
            p1, _ = score_pair(model, x1, x2)
            model.l1.weight -= eps * direction
            predicted = eps * float(np.sum(g * direction))
            assert abs((p1 - p0) - predicted) <= 50 * eps**2

    def test_stale_cache_rejected(self, rng):
        model = init_model(4, 0)
        _, acts = score_pair(model, rng.normal(size=4), rng.normal(size=4))
        model.touch()
        with pytest.raises(StaleActivationsError):
            backward_pair(model, acts, 1.0)
        with pytest.raises(StaleActivationsError):
            backward_pair(init_model(4, 0), acts, 1.0)

    @pytest.mark.parametrize("n", [2, 4, 8])
    def test_full_model_gradcheck(self, n):
        rng = np.random.default_rng(n)
        for trial in range(20):
            model = randomized(n, 100 * n + trial)
            x1, x2 = rng.normal(size=n), rng.normal(size=n)
            y = int(rng.integers(2))
            grads = analytic_grads(model, x1, x2, y)
            for param, g in zip(model.parameters(), grads):
                num = central_diff(lambda: loss_of(model, x1, x2, y), param)
                assert np.linalg.norm(g - num) <= 1e-5 * max(np.linalg.norm(g), np.linalg.norm(num), 1e-12)

    def test_ablated_model_gradcheck(self, rng):
        model = init_model(4, 1, hadamard=False)
        x1, x2 = rng.normal(size=4), rng.normal(size=4)
        grads = analytic_grads(model, x1, x2, 1)
        for param, g in zip(model.parameters(), grads):
            num = central_diff(lambda: loss_of(model, x1, x2, 1), param)
            assert np.linalg.norm(g - num) <= 1e-5 * max(np.linalg.norm(g), 1e-12)

    def test_deeper_backbone_gradcheck(self, rng):
        model = init_model(4, 2, extra_layers=2)
        for layer in model.layers():
            layer.bias[:] = rng.uniform(0.1, 0.5, layer.bias.shape)  # keep pre-activations off the ReLU kink
        x1, x2 = rng.normal(size=4), rng.normal(size=4)
        grads = analytic_grads(model, x1, x2, 0)
        for param, g in zip(model.parameters(), grads):
            num = central_diff(lambda: loss_of(model, x1, x2, 0), param)
            assert np.linalg.norm(g - num) <= 1e-5 * max(np.linalg.norm(g), 1e-12)


class TestInit:
    def test_deterministic(self):
        a, b = init_model(8, 42), init_model(8, 42)
        assert all(np.array_equal(x, y) for x, y in zip(a.parameters(), b.parameters()))

    def test_seed_matters(self):
        assert not np.array_equal(init_model(8, 1).l1.weight, init_model(8, 2).l1.weight)

    def test_bounds_and_zero_bias(self):
        model = init_model(16, 0)
        for layer in model.layers():
            assert np.all(np.abs(layer.weight) <= 1 / math.sqrt(layer.in_dim))
            assert not layer.bias.any()

    def test_shapes(self):
        model = init_model(8, 0)
        assert model.l1.weight.shape == (4, 8)
        assert model.l2.weight.shape == (8, 4)
        assert model.head.weight.shape == (1, 16)

    def test_parameter_count_small(self):
        assert parameter_count(init_model(4, 0)) == 31 == expected_parameter_count(4)

    @pytest.mark.parametrize("n", [0, 3, -2, 7])
    def test_rejects_bad_n(self, n):
        with pytest.raises(ValueError):
            init_model(n, 0)


class TestCheckpoint:
    def test_round_trip_bitwise(self, tmp_path, rng):
        model = randomized(8, 3)
        path = tmp_path / "m.tsmd"
        save_model(model, path)
        loaded = load_model(path)
        assert all(np.array_equal(a, b) for a, b in zip(model.parameters(), loaded.parameters()))
        for _ in range(100):
            x1, x2 = rng.normal(size=8), rng.normal(size=8)
            assert score_pair(model, x1, x2)[0] == score_pair(loaded, x1, x2)[0]
        save_model(loaded, tmp_path / "again.tsmd")
        assert path.read_bytes() == (tmp_path / "again.tsmd").read_bytes()

    def test_header_layout(self, tmp_path):
        path = tmp_path / "m.tsmd"
        model = init_model(4, 0)
        save_model(model, path)
        raw = path.read_bytes()
        assert raw[:4] == b"TSMD"
        assert raw[4:6] == (1).to_bytes(2, "little")
        assert raw[6:10] == (4).to_bytes(4, "little")
        assert len(raw) == 10 + 8 * 31
        assert np.frombuffer(raw, "<f8", count=8, offset=10).tolist() == model.l1.weight.ravel().tolist()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "m.tsmd"
        save_model(init_model(4, 0), path)
        raw = bytearray(path.read_bytes())
        raw[0] ^= 0xFF
        path.write_bytes(bytes(raw))
        with pytest.raises(BadMagicError, match="bad magic"):
            load_model(path)

    def test_bad_version(self, tmp_path):
        path = tmp_path / "m.tsmd"
        save_model(init_model(4, 0), path)
        raw = bytearray(path.read_bytes())
        raw[4] = 9
        path.write_bytes(bytes(raw))
        with pytest.raises(BadVersionError):
            load_model(path)

    def test_truncation_at_every_offset(self, tmp_path):
        path = tmp_path / "m.tsmd"
        save_model(init_model(2, 0), path)
        raw = path.read_bytes()
        cut = tmp_path / "cut.tsmd"
        for k in range(len(raw)):
            cut.write_bytes(raw[:k])
            with pytest.raises(TruncatedError, match="truncated"):
                load_model(cut)

    def test_dim_mismatch(self, tmp_path):
        path = tmp_path / "m.tsmd"
        save_model(init_model(4, 0), path)
        with pytest.raises(DimMismatchError):
            load_model(path, expected_dim=8)
        path.write_bytes(path.read_bytes() + b"\0" * 8)
        with pytest.raises(DimMismatchError):
            load_model(path)

    def test_unsupported_layouts_refused(self, tmp_path):
        with pytest.raises(ValueError):
            save_model(init_model(4, 0, hadamard=False), tmp_path / "a")
        with pytest.raises(ValueError):
            save_model(init_model(4, 0, extra_layers=1), tmp_path / "b")
