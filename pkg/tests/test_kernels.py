import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dfgp.errors import ShapeError
from dfgp.kernels import (FAMILIES, KernelSpec, gram, gram_diag, gram_vjp, kernel_grads, kernel_value,
                          relax_bounds, scaled_distance, spatial_bounds)
from dfgp.numeric import cholesky_jittered

# (1 + sqrt 3) exp(-sqrt 3), 30-digit evaluation
MATERN32_AT_ONE = 0.483357724596507650595075082258


def _spec(family, ls=1.0, var=1.0):
    return KernelSpec(family, np.atleast_1d(ls), var, (1e-3, 1e3))


class TestKernelValue:
    @pytest.mark.parametrize("family", FAMILIES)
    def test_zero_distance_is_outputscale(self, family):
        spec = _spec(family, 0.7, 2.5)
        assert kernel_value(spec, [0.3, -1.0], [0.3, -1.0]) == 2.5

    def test_matern32_at_one_lengthscale(self):
        spec = _spec("Matern32", 2.0)
        assert kernel_value(spec, [0.0], [2.0]) == pytest.approx(MATERN32_AT_ONE, abs=1e-15)

    def test_matern12_is_exponential(self):
        rng = np.random.default_rng(11)
        for _ in range(100):
            d, ls = rng.uniform(0, 10), rng.uniform(0.05, 5)
            value = kernel_value(_spec("Matern12", ls), [0.0], [d])
            assert abs(value - np.exp(-d / ls)) < 1e-14

    def test_closed_forms(self):
        d, ls, var = 1.7, 0.9, 1.3
        r = d / ls
        expected = {
            "Matern52": var * (1 + np.sqrt(5) * r + 5 * r * r / 3) * np.exp(-np.sqrt(5) * r),
            "RBF": var * np.exp(-0.5 * r * r),
        }
        for fam, val in expected.items():
            assert kernel_value(_spec(fam, ls, var), [0.0, 0.0], [d, 0.0]) == pytest.approx(val, rel=1e-14)

    def test_ard_scaling(self):
        spec = KernelSpec("RBF", [1.0, 2.0], 1.0)
        assert kernel_value(spec, [0, 0], [1, 2]) == pytest.approx(np.exp(-1.0), rel=1e-14)

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            kernel_value(_spec("RBF"), [0.0, 1.0], [0.0])
        with pytest.raises(ShapeError):
            gram(_spec("RBF"), np.zeros((2, 2)), np.zeros((2, 3)))

    def test_invalid_spec(self):
        with pytest.raises(ValueError):
            KernelSpec("Matern72")
        with pytest.raises(ValueError):
            KernelSpec("RBF", [1.0], 0.0)
        with pytest.raises(ValueError):
            KernelSpec("RBF", [1.0], 1.0, (2.0, 1.0))

    @pytest.mark.parametrize("family", FAMILIES)
    def test_monotone_decay(self, family):
        d = np.sort(np.random.default_rng(2).uniform(0, 20, 200))
        vals = [kernel_value(_spec(family, 1.3), [0.0], [x]) for x in d]
        assert np.all(np.diff(vals) <= 0)


class TestMaternOrdering:
    # The smoother Matern dominates only near the origin: M32 drops below M12
    # past r ~ 2.09 and M52 below M32 past r ~ 1.95 (r = d / l).
    def test_ordering_near_origin(self):
        rng = np.random.default_rng(5)
        ls = rng.uniform(0.1, 10, 500)
        d = ls * rng.uniform(1e-9, 1.9, 500)
        for dist, l in zip(d, ls):
            m12, m32, m52 = (kernel_value(_spec(f, l), [0.0], [dist]) for f in ("Matern12", "Matern32", "Matern52"))
            assert m52 >= m32 >= m12

    def test_ordering_reverses_in_the_tail(self):
        m12, m32, m52 = (kernel_value(_spec(f), [0.0], [3.0]) for f in ("Matern12", "Matern32", "Matern52"))
        assert m52 < m32 < m12


class TestGram:
    @pytest.mark.parametrize("family", FAMILIES)
    def test_symmetric_with_outputscale_diagonal(self, family):
        xs = np.random.default_rng(0).normal(size=(30, 3))
        k = gram(_spec(family, 1.1, 0.7), xs)
        np.testing.assert_array_equal(k, k.T)
        np.testing.assert_array_equal(np.diag(k), 0.7)
        np.testing.assert_array_equal(gram_diag(_spec(family, 1.1, 0.7), xs), 0.7)

    def test_entries_match_kernel_value(self):
        rng = np.random.default_rng(1)
        spec = KernelSpec("Matern52", [0.5, 1.5, 2.0], 1.4)
        a, b = rng.normal(size=(4, 3)), rng.normal(size=(5, 3))
        k = gram(spec, a, b)
        for i in range(4):
            for j in range(5):
                assert k[i, j] == pytest.approx(kernel_value(spec, a[i], b[j]), rel=1e-13, abs=1e-15)

    def test_one_by_one(self):
        spec = _spec("Matern32", 0.8)
        assert gram(spec, [[0.1]], [[0.9]])[0, 0] == pytest.approx(kernel_value(spec, [0.1], [0.9]), rel=1e-15)

    def test_wide_inputs_use_stable_distances(self):
        rng = np.random.default_rng(3)
        xs = rng.normal(size=(40, 12)) + 1e3
        spec = _spec("Matern52", 2.0)
        direct = np.sqrt(((xs[:, None] - xs[None]) ** 2).sum(-1)) / 2.0
        np.testing.assert_allclose(scaled_distance(spec, xs), direct, atol=1e-8)

    @pytest.mark.parametrize("family", FAMILIES)
    def test_psd_with_jitter(self, family):
        rng = np.random.default_rng(7)
        for _ in range(50):
            xs = rng.normal(size=(50, 3))
            spec = _spec(family, rng.uniform(0.2, 3.0), rng.uniform(0.1, 3.0))
            l, _ = cholesky_jittered(gram(spec, xs) + 1e-6 * np.eye(50), jitter0=0.0)
            assert np.all(np.isfinite(l))

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), shift=st.floats(-1e3, 1e3), family=st.sampled_from(FAMILIES))
    def test_translation_invariance(self, seed, shift, family):
        xs = np.random.default_rng(seed).uniform(0, 10, size=(12, 2))
        spec = _spec(family, 1.5)
        np.testing.assert_allclose(gram(spec, xs + shift), gram(spec, xs), atol=1e-10)


class TestKernelGrads:
    @pytest.mark.parametrize("family", FAMILIES)
    def test_outputscale_partial_is_k(self, family):
        xs = np.random.default_rng(0).normal(size=(5, 2))
        spec = _spec(family, 0.9, 1.7)
        g = kernel_grads(spec, xs, xs)
        np.testing.assert_allclose(g["log_outputscale"], gram(spec, xs, xs), rtol=1e-14)

    def test_rbf_lengthscale_partial_vanishes_at_zero_distance(self):
        xs = np.array([[0.5, 0.5]])
        assert kernel_grads(_spec("RBF", 1.2), xs, xs)["log_lengthscale"][0, 0, 0] == 0.0

    @pytest.mark.parametrize("family", FAMILIES)
    @pytest.mark.parametrize("ard", [False, True])
    def test_finite_differences(self, family, ard):
        rng = np.random.default_rng(21)
        a, b = rng.normal(size=(6, 2)), rng.normal(size=(4, 2))
        ls = np.array([0.8, 1.6]) if ard else np.array([1.1])
        spec = KernelSpec(family, ls, 1.3)
        g = kernel_grads(spec, a, b)
        h = 1e-5
        for p in range(ls.size):
            up, dn = ls.copy(), ls.copy()
            up[p] *= np.exp(h)
            dn[p] *= np.exp(-h)
            fd = (gram(KernelSpec(family, up, 1.3), a, b) - gram(KernelSpec(family, dn, 1.3), a, b)) / (2 * h)
            np.testing.assert_allclose(g["log_lengthscale"][p], fd, rtol=1e-6, atol=1e-9)
        fd = (gram(KernelSpec(family, ls, 1.3 * np.exp(h)), a, b)
              - gram(KernelSpec(family, ls, 1.3 * np.exp(-h)), a, b)) / (2 * h)
        np.testing.assert_allclose(g["log_outputscale"], fd, rtol=1e-6, atol=1e-9)

    @pytest.mark.parametrize("family", ["Matern32", "Matern52", "RBF"])
    @pytest.mark.parametrize("ard", [False, True])
    def test_vjp_against_finite_differences(self, family, ard):
        rng = np.random.default_rng(8)
        a, b = rng.normal(size=(5, 2)), rng.normal(size=(3, 2))
        w = rng.normal(size=(5, 3))
        ls = np.array([0.7, 1.4]) if ard else np.array([1.2])
        spec = KernelSpec(family, ls, 0.9)
        out = gram_vjp(spec, a, b, w)

        def f(aa, bb):
            return np.sum(w * gram(spec, aa, bb))

        h = 1e-6
        for name, x in (("xs", a), ("xs2", b)):
            fd = np.zeros_like(x)
            for idx in np.ndindex(x.shape):
                e = np.zeros_like(x)
                e[idx] = h
                fd[idx] = (f(a + e, b) - f(a - e, b)) / (2 * h) if name == "xs" else (f(a, b + e) - f(a, b - e)) / (2 * h)
            np.testing.assert_allclose(out[name], fd, rtol=1e-6, atol=1e-8)
        grads = kernel_grads(spec, a, b)
        np.testing.assert_allclose(out["log_lengthscale"], np.einsum("pij,ij->p", grads["log_lengthscale"], w), rtol=1e-10)


class TestBounds:
    def test_known_sensors(self):
        assert spatial_bounds(1.0) == (3.0, 84.0)
        assert spatial_bounds(0.06) == (0.25, 13.0)

    def test_other_resolution_scales_pixel_rule(self):
        assert spatial_bounds(0.5) == (1.5, 42.0)

    def test_relaxation_rules(self):
        assert relax_bounds((3.0, 84.0)) == (1.5, 84.0)
        assert relax_bounds((3.0, 84.0), "none") == (3.0, 84.0)
        lo, hi = relax_bounds((3.0, 84.0), "half_width")
        assert lo == 1.5 and hi == pytest.approx(124.5)
        with pytest.raises(ValueError):
            relax_bounds((3.0, 84.0), "third")

    def test_clamp_projects_exactly(self):
        spec = KernelSpec("RBF", [0.5, 50.0, 5.0], 1.0, (1.0, 10.0))
        spec.clamp()
        np.testing.assert_array_equal(spec.lengthscale, [1.0, 10.0, 5.0])

    def test_serialization_round_trip(self):
        spec = KernelSpec("Matern32", [1.5, 2.5], 0.3, (0.25, 13.0))
        again = KernelSpec.from_dict(spec.to_dict())
        assert again.family == spec.family and again.bounds == spec.bounds
        np.testing.assert_array_equal(again.lengthscale, spec.lengthscale)
