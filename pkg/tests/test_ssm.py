import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spmamba import tensor as T
from spmamba.gradcheck import check_gradients
from spmamba.ssm import (ContractError, SSMParams, discretize_zoh, init_ssm_params, parallel_scan, scan,
                         selective_scan, sequential_scan, ssm_conv_form, ssm_recurrence, ssm_scan)
from spmamba.tensor import NonFiniteError, Tensor


def random_lti(rng, D=4, N=8):
    A = -np.exp(rng.uniform(-1.0, 1.0, size=(D, N)))
    B, C = rng.normal(size=N), rng.normal(size=N)
    delta = rng.uniform(0.01, 0.5, size=D)
    D_skip = rng.normal(size=D)
    return A, B, C, delta, D_skip


def lti_operators(A, B, C, delta, L):
    A_bar, B_bar = discretize_zoh(A, B[None, :], delta[:, None])
    return np.broadcast_to(A_bar, (L,) + A_bar.shape), B_bar, np.broadcast_to(C, (L, C.size))


def lti_recurrence(A, B, C, delta, D_skip, u):
    A_bar, B_bar, Cs = lti_operators(A, B, C, delta, u.shape[0])
    return ssm_recurrence(A_bar, B_bar[None] * u[:, :, None], Cs, D_skip, u)


def lti_parallel(A, B, C, delta, D_skip, u):
    A_bar, B_bar, Cs = lti_operators(A, B, C, delta, u.shape[0])
    h = parallel_scan(A_bar, B_bar[None] * u[:, :, None])
    return np.einsum("ldn,ln->ld", h, Cs) + D_skip * u


class TestDiscretize:
    def test_scalar_closed_form(self):
        A_bar, B_bar = discretize_zoh(-1.0, 1.0, math.log(2))
        assert A_bar == pytest.approx(0.5, abs=1e-15)
        assert B_bar == pytest.approx(0.5, abs=1e-15)

    def test_small_step_limit(self):
        A_bar, B_bar = discretize_zoh(-2.0, 3.0, 1e-12)
        assert A_bar == pytest.approx(1.0, abs=1e-11)
        assert B_bar == pytest.approx(3e-12, rel=1e-9)

    def test_zero_A_uses_series(self):
        A_bar, B_bar = discretize_zoh(np.zeros(3), np.array([1.0, 2.0, -1.0]), 0.25)
        assert np.all(A_bar == 1.0)
        assert np.array_equal(B_bar, 0.25 * np.array([1.0, 2.0, -1.0]))

    def test_euler_flag(self):
        _, B_bar = discretize_zoh(-1.0, 2.0, 0.3, exact=False)
        assert B_bar == pytest.approx(0.6)

    @pytest.mark.parametrize("delta", [0.0, -0.1])
    def test_domain_error(self, delta):
        with pytest.raises(ValueError):
            discretize_zoh(-1.0, 1.0, delta)


class TestRecurrence:
    def test_hand_unroll(self):
        A_bar = np.full((3, 1, 1), 0.5)
        Bu = np.array([1.0, 2.0, 3.0]).reshape(3, 1, 1)
        C = np.full((3, 1), 2.0)
        u = np.array([[1.0], [2.0], [3.0]])
        # h = 1, 2.5, 4.25 ; y = 2h + 0.1u
        y = ssm_recurrence(A_bar, Bu, C, np.array([0.1]), u)
        assert np.allclose(y[:, 0], [2.1, 5.2, 8.8], atol=1e-15)

    def test_memoryless(self, rng):
        L, D, N = 5, 3, 4
        Bu, C, u, Ds = rng.normal(size=(L, D, N)), rng.normal(size=(L, N)), rng.normal(size=(L, D)), rng.normal(size=D)
        y = ssm_recurrence(np.zeros((L, D, N)), Bu, C, Ds, u)
        assert np.allclose(y, np.einsum("ldn,ln->ld", Bu, C) + Ds * u)

    def test_zero_input(self, rng):
        y = ssm_recurrence(rng.uniform(size=(6, 2, 3)), np.zeros((6, 2, 3)), rng.normal(size=(6, 3)),
                           rng.normal(size=2), np.zeros((6, 2)))
        assert np.all(y == 0)

    def test_nan_reports_step(self):
        Bu = np.zeros((4, 1, 1))
        Bu[2] = np.nan
        with pytest.raises(NonFiniteError, match="step 2"):
            ssm_recurrence(np.ones((4, 1, 1)), Bu, np.ones((4, 1)), np.zeros(1), np.zeros((4, 1)))


class TestConvForm:
    def test_single_tap(self, rng):
        A, B, C, delta, Ds = random_lti(rng)
        u = rng.normal(size=(1, 4))
        _, B_bar = discretize_zoh(A, B[None, :], delta[:, None])
        assert np.allclose(ssm_conv_form(A, B, C, Ds, delta, u), (B_bar @ C) * u[0] + Ds * u[0])

    def test_zero_abar_kernel(self, rng):
        # A -> -inf gives Abar = 0, so only the first tap survives
        A = np.full((2, 3), -1e6)
        B, C, delta = rng.normal(size=3), rng.normal(size=3), np.ones(2)
        u = np.zeros((5, 2))
        u[0] = 1.0
        y = ssm_conv_form(A, B, C, np.zeros(2), delta, u)
        assert np.all(y[1:] == 0) and np.all(y[0] != 0)

    def test_matches_recurrence_L64(self, rng):
        A, B, C, delta, Ds = random_lti(rng)
        u = rng.normal(size=(64, 4))
        assert np.max(np.abs(ssm_conv_form(A, B, C, Ds, delta, u) - lti_recurrence(A, B, C, delta, Ds, u))) < 1e-10

    def test_time_varying_rejected(self, rng):
        A, B, C, delta, Ds = random_lti(rng)
        Bs = np.tile(B, (8, 1))
        Bs[3, 0] += 1.0
        with pytest.raises(ContractError):
            ssm_conv_form(A, Bs, C, Ds, delta, rng.normal(size=(8, 4)))
        # constant per-step values are accepted
        ssm_conv_form(A, np.tile(B, (8, 1)), C, Ds, delta, rng.normal(size=(8, 4)))


class TestParallelScan:
    def test_length_one(self):
        assert parallel_scan(np.array([0.7]), np.array([2.5])).tolist() == [2.5]

    def test_cumsum(self, rng):
        b = rng.normal(size=37)
        assert np.allclose(parallel_scan(np.ones(37), b), np.cumsum(b), atol=1e-13)

    def test_random_1000(self, rng):
        a, b = rng.uniform(-1, 1, size=(1000, 3)), rng.normal(size=(1000, 3))
        p, s = parallel_scan(a, b), sequential_scan(a, b)
        assert np.all(np.abs(p - s) <= 1e-12 * np.maximum(np.abs(s), 1.0))

    @pytest.mark.parametrize("chunk", [1, 3, 4, 64])
    def test_chunked_matches_sequential(self, chunk, rng):
        a, b, h0 = rng.uniform(-1, 1, size=(37, 2)), rng.normal(size=(37, 2)), rng.normal(size=2)
        assert np.allclose(parallel_scan(a, b, h0, chunk=chunk), sequential_scan(a, b, h0), rtol=1e-12, atol=1e-12)

    def test_initial_state_and_axis(self, rng):
        a, b, h0 = rng.uniform(size=(4, 9)), rng.normal(size=(4, 9)), rng.normal(size=4)
        assert np.allclose(parallel_scan(a, b, h0, axis=1), sequential_scan(a.T, b.T, h0).T)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 300), st.integers(0, 2 ** 32 - 1))
    def test_prefix_independent_of_length(self, n, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.uniform(-1, 1, size=n), rng.normal(size=n)
        full = parallel_scan(a, b)
        k = int(rng.integers(1, n + 1))
        assert np.allclose(parallel_scan(a[:k], b[:k]), full[:k], rtol=1e-12, atol=1e-12)

    def test_scan_gradient(self, rng):
        a = Tensor(rng.uniform(-1, 1, size=(2, 7, 3)), requires_grad=True)
        b = Tensor(rng.uniform(-1, 1, size=(2, 7, 3)), requires_grad=True)
        w = Tensor(rng.normal(size=(2, 7, 3)))
        rep = check_gradients(lambda: T.sum_(scan(a, b, axis=1) * w), {"a": a, "b": b}, h=1e-5, tol=1e-6)
        assert rep.passed, rep.summary()


@pytest.mark.parametrize("seed", range(10))
def test_equivalence_triangle(seed):
    rng = np.random.default_rng(seed)
    D, N = int(rng.integers(1, 9)), int(rng.integers(1, 17))
    L = int(rng.integers(1, 257))
    A, B, C, delta, Ds = random_lti(rng, D, N)
    u = rng.normal(size=(L, D))
    rec = lti_recurrence(A, B, C, delta, Ds, u)
    assert np.max(np.abs(ssm_conv_form(A, B, C, Ds, delta, u) - rec)) < 1e-9
    assert np.max(np.abs(lti_parallel(A, B, C, delta, Ds, u) - rec)) < 1e-9


def make_params(rng, E=4, N=6, scale=1.0):
    raw = init_ssm_params(rng, E, N)
    raw["dt_weight"] = rng.uniform(-scale, scale, size=(E, E))
    raw["D_skip"] = rng.uniform(-1, 1, size=E)
    return SSMParams(**{k: Tensor(v, requires_grad=True) for k, v in raw.items()})


class TestSelectiveScan:
    def test_zero_input(self, rng):
        p = make_params(rng)
        assert np.all(selective_scan(p, Tensor(np.zeros((9, 4)))).data == 0)

    def test_init_delta_range(self, rng):
        p = make_params(rng)
        dt = np.logaddexp(0.0, p.dt_bias.data)
        assert np.all((dt >= 1e-3 - 1e-15) & (dt <= 0.1 + 1e-15))
        assert np.allclose(-np.exp(p.A_log.data), -np.arange(1, 7)[None, :].repeat(4, 0))

    def test_frozen_projections_match_conv_form(self, rng):
        A, B, C, delta, Ds = random_lti(rng, 3, 5)
        u = rng.normal(size=(40, 3))
        L = u.shape[0]
        y = ssm_scan(Tensor(u), Tensor(np.tile(delta, (L, 1))), Tensor(A), Tensor(np.tile(B, (L, 1))),
                     Tensor(np.tile(C, (L, 1))), Tensor(Ds)).data
        assert np.max(np.abs(y - ssm_conv_form(A, B, C, Ds, delta, u))) < 1e-9

    def test_frozen_keywords(self, rng):
        A, B, C, delta, Ds = random_lti(rng, 3, 5)
        p = make_params(rng, E=3, N=5)
        p.A_log.data[...] = np.log(-A)
        p.D_skip.data[...] = Ds
        u = rng.normal(size=(2, 30, 3))
        L = u.shape[1]
        y = selective_scan(p, Tensor(u), delta=np.tile(delta, (2, L, 1)), B=np.tile(B, (2, L, 1)),
                           C=np.tile(C, (2, L, 1))).data
        for i in range(2):
            assert np.max(np.abs(y[i] - ssm_conv_form(A, B, C, Ds, delta, u[i]))) < 1e-9

    def test_matches_recurrence_time_varying(self, rng):
        p = make_params(rng)
        u = rng.normal(size=(20, 4))
        y = selective_scan(p, Tensor(u)).data
        delta = np.logaddexp(0.0, u @ p.dt_weight.data + p.dt_bias.data)
        Bt, Ct = u @ p.B_weight.data, u @ p.C_weight.data
        A = -np.exp(p.A_log.data)
        A_bar, B_bar = discretize_zoh(A[None], Bt[:, None, :], delta[:, :, None])
        ref = ssm_recurrence(A_bar, B_bar * u[:, :, None], Ct, p.D_skip.data, u)
        assert np.allclose(y, ref, atol=1e-12)

    def test_causal(self, rng):
        p = make_params(rng)
        u = rng.normal(size=(30, 4))
        y = selective_scan(p, Tensor(u)).data
        for t in (0, 10, 28):
            v = u.copy()
            v[t + 1:] = rng.normal(size=v[t + 1:].shape) * 5
            assert np.array_equal(selective_scan(p, Tensor(v)).data[: t + 1], y[: t + 1])

    def test_batched_rows_independent(self, rng):
        p = make_params(rng)
        u = rng.normal(size=(3, 12, 4))
        y = selective_scan(p, Tensor(u)).data
        for i in range(3):
            assert np.allclose(y[i], selective_scan(p, Tensor(u[i])).data, atol=1e-14)

    def test_stability(self, rng):
        A_log = rng.normal(size=(5, 7))
        delta = rng.uniform(1e-3, 2.0, size=(5, 1))
        A_bar, _ = discretize_zoh(-np.exp(A_log), np.ones((5, 7)), delta)
        assert np.all(np.abs(A_bar) < 1)
        h = rng.normal(size=(5, 7))
        norms = []
        for _ in range(20):
            h = A_bar * h
            norms.append(np.linalg.norm(h))
        assert np.all(np.diff(norms) <= 0)

    @pytest.mark.parametrize("zoh_exact,use_d", [(True, True), (False, False)])
    def test_gradients(self, rng, zoh_exact, use_d):
        p = make_params(rng, E=3, N=4)
        u = Tensor(rng.uniform(-1, 1, size=(2, 9, 3)), requires_grad=True)
        w = Tensor(rng.normal(size=(2, 9, 3)))
        params = {"u": u, **vars(p)}
        rep = check_gradients(lambda: T.sum_(selective_scan(p, u, zoh_exact, use_d) * w), params,
                              h=1e-5, tol=1e-4)
        assert rep.passed, rep.summary()
