"""Additive approximation and the Shapley oracle: game-theory axioms by
enumeration, kernel-weighting equivalence, and exact-fit cases."""

import numpy as np
import pytest

from lalign.additive import (
    AdditiveModel,
    additive_objective,
    enumerate_masks,
    fit_additive,
    shapley_brute_force,
    shapley_kernel_weight,
)


def table_game(rng, n, d):
    table = rng.normal(size=(2**n, d))

    def fn(bits):
        idx = int(sum(int(b) << i for i, b in enumerate(bits)))
        return table[idx]

    return fn


class TestShapleyBruteForce:
    def test_additive_game_recovers_weights(self):
        w = np.array([1.0, -2.0, 0.5, 3.0])
        phi = shapley_brute_force(lambda b: np.array([b.astype(float) @ w]), 4)
        assert np.allclose(phi[:, 0], w, atol=1e-12)

    def test_symmetric_players_equal_values(self):
        phi = shapley_brute_force(lambda b: np.array([float(b.sum() ** 2)]), 5)
        assert np.allclose(phi, phi[0], atol=1e-12)

    def test_efficiency_axiom_random_game(self, rng):
        fn = table_game(rng, 5, 3)
        phi = shapley_brute_force(fn, 5)
        total = fn(np.ones(5, dtype=np.uint8)) - fn(np.zeros(5, dtype=np.uint8))
        assert np.abs(phi.sum(axis=0) - total).max() < 1e-10

    def test_null_player_gets_zero(self, rng):
        # player 3 never affects the value
        w = np.array([1.0, 2.0, -1.0, 0.0])
        phi = shapley_brute_force(lambda b: np.array([b.astype(float) @ w]), 4)
        assert abs(phi[3, 0]) < 1e-12

    def test_size_limit(self):
        with pytest.raises(ValueError):
            shapley_brute_force(lambda b: np.zeros(1), 13)


class TestKernelWeights:
    def test_symmetry(self):
        for n in (3, 5, 8):
            for k in range(1, n):
                assert shapley_kernel_weight(n, k) == pytest.approx(shapley_kernel_weight(n, n - k))

    def test_boundaries_rejected(self):
        with pytest.raises(ValueError):
            shapley_kernel_weight(5, 0)
        with pytest.raises(ValueError):
            shapley_kernel_weight(5, 5)


class TestExhaustiveFit:
    def test_two_point_interpolation_n1(self):
        fn = lambda b: np.array([2.0 + 3.0 * float(b[0])])
        model = fit_additive(fn, 1)
        assert model.bias[0] == pytest.approx(2.0, abs=1e-10)
        assert model.g[0, 0] == pytest.approx(3.0, abs=1e-10)

    def test_realizable_additive_teacher_recovered(self, rng):
        w = rng.normal(size=(4, 3))
        b = rng.normal(size=3)
        fn = lambda bits: bits.astype(float) @ w + b
        model = fit_additive(fn, 4)
        assert np.allclose(model.g, w, atol=1e-9)
        assert np.allclose(model.bias, b, atol=1e-9)

    def test_exhaustive_solution_is_local_minimum(self, rng):
        fn = table_game(rng, 4, 2)
        model = fit_additive(fn, 4)
        base = additive_objective(model, fn)
        for _ in range(100):
            perturbed = AdditiveModel(
                g=model.g + rng.normal(0.0, 0.05, size=model.g.shape),
                bias=model.bias + rng.normal(0.0, 0.05, size=model.bias.shape),
            )
            assert additive_objective(perturbed, fn) >= base - 1e-12

    def test_shapley_kernel_matches_brute_force(self, rng):
        for trial in range(3):
            fn = table_game(rng, 5, 4)
            model = fit_additive(fn, 5, weighting="shapley_kernel")
            phi = shapley_brute_force(fn, 5)
            assert np.abs(model.g - phi).max() < 1e-6
            assert np.allclose(model.bias, fn(np.zeros(5, dtype=np.uint8)))

    def test_kernel_fit_honors_constraints(self, rng):
        fn = table_game(rng, 4, 2)
        model = fit_additive(fn, 4, weighting="shapley_kernel")
        full = fn(np.ones(4, dtype=np.uint8))
        assert np.allclose(model.bias + model.g.sum(axis=0), full, atol=1e-9)

    def test_custom_weighting_callable(self, rng):
        fn = table_game(rng, 3, 1)
        model = fit_additive(fn, 3, weighting=lambda bits: 1.0)
        assert model.g.shape == (3, 1)

    def test_size_limit(self):
        with pytest.raises(ValueError):
            fit_additive(lambda b: np.zeros(1), 21)


class TestStochasticFit:
    def test_descends_toward_exhaustive_solution(self, rng):
        w = rng.normal(size=(5, 2))
        b = rng.normal(size=2)
        fn = lambda bits: bits.astype(float) @ w + b
        model = fit_additive(fn, 5, exhaustive=False, n_steps=4000, rng=rng)
        assert np.abs(model.g - w).max() < 0.15
        assert np.abs(model.bias - b).max() < 0.15

    def test_needs_steps_and_rng(self):
        with pytest.raises(ValueError):
            fit_additive(lambda b: np.zeros(1), 4, exhaustive=False)


class TestEnumeration:
    def test_bit_order_matches_indices(self):
        masks = enumerate_masks(3)
        assert masks.shape == (8, 3)
        assert tuple(masks[5]) == (1.0, 0.0, 1.0)  # 0b101: patches 0 and 2
