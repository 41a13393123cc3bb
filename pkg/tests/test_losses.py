import math

import numpy as np
import pytest
from scipy.special import log_softmax

from itd_tool.errors import ErrorKind, ItdError
from itd_tool.losses import affinity, crw_loss, monoclr_loss, zero_loss


def numeric_grad(f, x, h=1e-5):
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        original = x[idx]
        x[idx] = original + h
        up = f()
        x[idx] = original - h
        down = f()
        x[idx] = original
        grad[idx] = (up - down) / (2 * h)
    return grad


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)


class TestAffinity:
    """Transition matrices from embedding similarities."""

    def test_singleton(self):
        np.testing.assert_array_equal(affinity(np.ones((1, 3)) / np.sqrt(3), np.ones((1, 3)) / np.sqrt(3)).values,
                                      [[1.0]])

    def test_orthogonal_one_hot(self):
        a = affinity(np.eye(2), np.eye(2), 0.05)
        expected = math.exp(20) / (math.exp(20) + 1)
        np.testing.assert_allclose(np.diag(a.values), expected, rtol=0, atol=1e-15)
        assert 1 - a.values[0, 0] == pytest.approx(2.0611536e-9, rel=1e-6)

    def test_identical_rows_are_uniform(self, unit_rows):
        rows = np.tile(unit_rows(1, 5), (4, 1))
        np.testing.assert_allclose(affinity(rows, rows).values, 0.25)

    def test_rows_sum_to_one(self, unit_rows):
        rng = np.random.default_rng(0)
        for k in range(1000):
            n, d = int(rng.integers(1, 12)), int(rng.integers(2, 9))
            a = affinity(unit_rows(n, d, seed=k), unit_rows(n, d, seed=k + 5000), 0.05)
            np.testing.assert_allclose(a.values.sum(axis=1), 1.0, atol=1e-6)

    def test_entries_strictly_inside_unit_interval(self, unit_rows):
        a = affinity(unit_rows(6, 4, seed=1), unit_rows(6, 4, seed=2), 0.5)
        assert np.all(a.values > 0) and np.all(a.values < 1)

    def test_lower_temperature_keeps_argmax(self, unit_rows):
        h1, h2 = unit_rows(10, 8, seed=3), unit_rows(10, 8, seed=4)
        np.testing.assert_array_equal(np.argmax(affinity(h1, h2, 0.05).values, axis=1),
                                      np.argmax(affinity(h1, h2, 1.0).values, axis=1))

    def test_shape_mismatch(self, unit_rows):
        with pytest.raises(ItdError) as err:
            affinity(unit_rows(3, 4), unit_rows(4, 4))
        assert err.value.kind is ErrorKind.SHAPE

    def test_temperature_must_be_positive(self, unit_rows):
        with pytest.raises(ItdError):
            affinity(unit_rows(3, 4), unit_rows(3, 4), 0.0)


class TestCycleLosses:
    """Cycle-consistency and slow-feature losses."""

    def test_perfect_round_trip(self):
        a = affinity(np.eye(4), np.eye(4), 0.05)
        assert crw_loss(a, a).value == pytest.approx(0.0, abs=1e-6)
        assert zero_loss(a).value == pytest.approx(0.0, abs=1e-6)

    def test_uniform_is_log_n(self, unit_rows):
        rows = np.tile(unit_rows(1, 3), (4, 1))
        a = affinity(rows, rows)
        assert crw_loss(a, a).value == pytest.approx(math.log(4))
        assert zero_loss(a).value == pytest.approx(math.log(4))

    def test_non_negative(self, unit_rows):
        for seed in range(200):
            h1, h2 = unit_rows(5, 3, seed=seed), unit_rows(5, 3, seed=seed + 1000)
            assert crw_loss(affinity(h1, h2), affinity(h2, h1)).value >= -1e-12
            assert zero_loss(affinity(h1, h2)).value >= -1e-12

    def test_rotation_invariance(self, unit_rows):
        h1, h2 = unit_rows(6, 8, seed=1), unit_rows(6, 8, seed=2)
        q, _ = np.linalg.qr(np.random.default_rng(3).standard_normal((8, 8)))
        before = crw_loss(affinity(h1, h2), affinity(h2, h1)).value
        after = crw_loss(affinity(h1 @ q, h2 @ q), affinity(h2 @ q, h1 @ q)).value
        assert after == pytest.approx(before, abs=1e-9)
        assert zero_loss(affinity(h1 @ q, h2 @ q)).value == pytest.approx(zero_loss(affinity(h1, h2)).value,
                                                                        abs=1e-9)

    def test_crw_needs_square(self, unit_rows):
        a = affinity(unit_rows(3, 4), unit_rows(3, 4))
        b = affinity(unit_rows(4, 4), unit_rows(4, 4))
        with pytest.raises(ItdError):
            crw_loss(a, b)

    @pytest.mark.parametrize("seed", range(5), ids=[f"seed {s}" for s in range(5)])
    def test_crw_gradient(self, seed, unit_rows):
        h1, h2 = unit_rows(6, 8, seed=seed), unit_rows(6, 8, seed=seed + 100)
        result = crw_loss(affinity(h1, h2), affinity(h2, h1))

        def value():
            return crw_loss(affinity(h1, h2), affinity(h2, h1)).value

        assert rel_err(numeric_grad(value, h1), result.grads[0]) < 1e-3
        assert rel_err(numeric_grad(value, h2), result.grads[1]) < 1e-3

    @pytest.mark.parametrize("seed", range(5), ids=[f"seed {s}" for s in range(5)])
    def test_zero_gradient(self, seed, unit_rows):
        h1, h2 = unit_rows(6, 8, seed=seed), unit_rows(6, 8, seed=seed + 100)
        result = zero_loss(affinity(h1, h2))

        def value():
            return zero_loss(affinity(h1, h2)).value

        assert rel_err(numeric_grad(value, h1), result.grads[0]) < 1e-3
        assert rel_err(numeric_grad(value, h2), result.grads[1]) < 1e-3


class TestMonoClr:
    """Instance discrimination against a shifted view."""

    def test_same_view_orthogonal_rows(self):
        assert monoclr_loss(np.eye(8), np.eye(8), 0, 4).value == pytest.approx(0.0, abs=1e-6)

    def test_identical_rows_is_log_n(self, unit_rows):
        rows = np.tile(unit_rows(1, 4), (5, 1))
        assert monoclr_loss(rows, rows, 0, 4).value == pytest.approx(math.log(5))

    def test_shift_selects_offset_positive(self, unit_rows):
        view = unit_rows(6, 8, seed=1)
        anchors = unit_rows(6, 8, seed=2)
        log_p = log_softmax(anchors[:5] @ view.T / 0.05, axis=1)
        expected = -np.mean(log_p[np.arange(5), np.arange(1, 6)])
        assert monoclr_loss(anchors, view, 4, 4).value == pytest.approx(expected)

    def test_aligned_view_is_easy(self):
        view = np.eye(6)
        anchors = np.roll(view, -1, axis=0)  # anchor t equals view row t + 1
        assert monoclr_loss(anchors, view, 4, 4).value == pytest.approx(0.0, abs=1e-6)

    def test_shift_must_match_step(self, unit_rows):
        with pytest.raises(ItdError, match="multiple"):
            monoclr_loss(unit_rows(6, 4), unit_rows(6, 4), 3, 4)

    def test_shift_leaves_too_few_nodes(self, unit_rows):
        with pytest.raises(ItdError):
            monoclr_loss(unit_rows(3, 4), unit_rows(3, 4), 8, 4)

    @pytest.mark.parametrize("seed", range(5), ids=[f"seed {s}" for s in range(5)])
    def test_gradient(self, seed, unit_rows):
        h, h_aug = unit_rows(6, 8, seed=seed), unit_rows(6, 8, seed=seed + 100)
        shift = 4 * (seed % 3 - 1)
        result = monoclr_loss(h, h_aug, shift, 4)

        def value():
            return monoclr_loss(h, h_aug, shift, 4).value

        assert rel_err(numeric_grad(value, h), result.grads[0]) < 1e-3
        assert rel_err(numeric_grad(value, h_aug), result.grads[1]) < 1e-3
