"""Diagonal state-space kernels.

Three evaluations of the same linear recurrence ``h_t = Abar_t * h_{t-1} + Bbar_t u_t``
are provided: a strict sequential loop, the global causal-convolution form
for time-invariant systems, and a Blelloch work-efficient parallel scan. The
selective scan builds per-step parameters from the input and runs on the
parallel scan with a differentiable backward.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import NonFiniteError, ShapeError, Tensor, _make

SERIES_THRESHOLD = 1e-8


class ContractError(ValueError):
    """Inputs violate an operation's stated preconditions."""


# -- discretization ----------------------------------------------------------

def discretize_zoh(A, B, delta, exact: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Zero-order hold for a diagonal ``A``.

    Abar = exp(delta*A); Bbar = (delta*A)^-1 (exp(delta*A) - 1) * delta*B, which
    falls back to delta*B*(1 + delta*A/2) when |delta*A| < 1e-8. With
    ``exact=False`` the Euler form Bbar = delta*B is returned instead.
    """
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    if np.any(delta <= 0):
        raise ValueError("discretization step must be positive")
    dA = delta * A
    A_bar = np.exp(dA)
    if not exact:
        return A_bar, delta * B
    small = np.abs(dA) < SERIES_THRESHOLD
    safe = np.where(small, 1.0, dA)
    ratio = np.where(small, 1.0 + dA / 2.0, np.expm1(safe) / safe)
    return A_bar, ratio * delta * B


# -- reference evaluations ----------------------------------------------------

def ssm_recurrence(A_bar, Bu, C, D_skip, u, h0=None) -> np.ndarray:
    """Strict left-to-right evaluation.

    Shapes: A_bar, Bu ``[L, D, N]``; C ``[L, N]``; D_skip ``[D]``; u ``[L, D]``.
    ``Bu`` is the per-step input injection ``Bbar_t * u_t``.
    """
    A_bar = np.asarray(A_bar, dtype=np.float64)
    Bu = np.asarray(Bu, dtype=np.float64)
    C = np.asarray(C, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    L, D, N = A_bar.shape
    if Bu.shape != (L, D, N) or C.shape != (L, N) or u.shape != (L, D):
        raise ShapeError("inconsistent recurrence shapes")
    h = np.zeros((D, N)) if h0 is None else np.array(h0, dtype=np.float64)
    y = np.empty((L, D))
    for k in range(L):
        h = A_bar[k] * h + Bu[k]
        y[k] = h @ C[k] + D_skip * u[k]
        if not (np.all(np.isfinite(h)) and np.all(np.isfinite(y[k]))):
            raise NonFiniteError(f"non-finite state at step {k}")
    return y


def _static(x: np.ndarray, name: str, trailing: int) -> np.ndarray:
    """Collapse a per-step parameter to one value, rejecting genuine time variation."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == trailing + 1:
        if not np.all(x == x[:1]):
            raise ContractError(f"{name} varies over time; the convolution form needs a time-invariant system")
        x = x[0]
    if x.ndim != trailing:
        raise ShapeError(f"{name} has unexpected rank {x.ndim}")
    return x


def conv_kernel(A, B, C, delta, length: int, exact: bool = True) -> np.ndarray:
    """``K[k, d] = sum_n C_n Abar_dn^k Bbar_dn`` for k < length."""
    A_bar, B_bar = discretize_zoh(A, B[None, :], delta[:, None], exact=exact)
    powers = A_bar[None, :, :] ** np.arange(length)[:, None, None]
    return (powers * B_bar[None]) @ C


def ssm_conv_form(A, B, C, D_skip, delta, u, exact: bool = True) -> np.ndarray:
    """Time-invariant SSM as a causal convolution with the length-L kernel.

    Shapes: A ``[D, N]`` (diagonal entries per channel), B and C ``[N]``,
    delta and D_skip ``[D]``, u ``[L, D]``. B, C, delta may also be given per
    step (leading L axis) provided every step is identical.
    """
    u = np.asarray(u, dtype=np.float64)
    L, D = u.shape
    B = _static(B, "B", 1)
    C = _static(C, "C", 1)
    delta = _static(delta, "delta", 1)
    K = conv_kernel(np.asarray(A, dtype=np.float64), B, C, delta, L, exact=exact)
    y = np.zeros((L, D))
    for k in range(L):
        y[k:] += K[k] * u[: L - k]
    return y + np.asarray(D_skip) * u


# -- parallel scan -----------------------------------------------------------

def _blelloch(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Inclusive scan of ``(a, b)`` pairs over axis 0 under
    ``(a1, b1) o (a2, b2) = (a1*a2, a2*b1 + b2)``.

    The length is padded to a power of two with the identity (1, 0); combining
    with the identity is exact, so prefixes do not depend on the padded length.
    """
    L = a.shape[0]
    n = 1 << max(0, (L - 1).bit_length())
    A = np.ones((n,) + a.shape[1:])
    B = np.zeros((n,) + b.shape[1:])
    A[:L] = a
    B[:L] = b
    d = 1
    while d < n:
        left, right = slice(d - 1, n, 2 * d), slice(2 * d - 1, n, 2 * d)
        B[right] = A[right] * B[left] + B[right]
        A[right] = A[left] * A[right]
        d *= 2
    A[n - 1] = 1.0
    B[n - 1] = 0.0
    d = n // 2
    while d >= 1:
        left, right = slice(d - 1, n, 2 * d), slice(2 * d - 1, n, 2 * d)
        tA, tB = A[left].copy(), B[left].copy()
        pA, pB = A[right].copy(), B[right].copy()
        A[left], B[left] = pA, pB
        A[right] = pA * tA
        B[right] = tA * pB + tB
        d //= 2
    return A[:L] * a, a * B[:L] + b


SCAN_CHUNK = 256


def parallel_scan(a, b, h0=None, axis: int = 0, chunk: int = SCAN_CHUNK) -> np.ndarray:
    """``h_t = a_t * h_{t-1} + b_t`` along ``axis`` (h_{-1} = h0 or 0).

    Blocked Blelloch scan: each run of ``chunk`` steps is scanned with the tree,
    and the carried state enters each block through its cumulative coefficients.
    Blocks start at fixed offsets, so every prefix is computed identically no
    matter how long the sequence is, and the working set stays cache-sized.
    """
    a = np.moveaxis(np.asarray(a, dtype=np.float64), axis, 0)
    b = np.moveaxis(np.asarray(b, dtype=np.float64), axis, 0)
    if a.shape != b.shape:
        raise ShapeError("scan coefficients and inputs must share a shape")
    if a.shape[0] < 1:
        raise ValueError("scan needs at least one step")
    out = np.empty_like(b)
    carry = None if h0 is None else np.asarray(h0, dtype=np.float64)
    for start in range(0, a.shape[0], chunk):
        acc_a, acc_b = _blelloch(a[start:start + chunk], b[start:start + chunk])
        h = acc_b if carry is None else acc_a * carry + acc_b
        out[start:start + chunk] = h
        carry = h[-1]
    return np.moveaxis(out, 0, axis)


def sequential_scan(a, b, h0=None, axis: int = 0) -> np.ndarray:
    a = np.moveaxis(np.asarray(a, dtype=np.float64), axis, 0)
    b = np.moveaxis(np.asarray(b, dtype=np.float64), axis, 0)
    h = np.zeros(a.shape[1:]) if h0 is None else np.array(h0, dtype=np.float64)
    out = np.empty_like(b)
    for t in range(a.shape[0]):
        h = a[t] * h + b[t]
        out[t] = h
    return np.moveaxis(out, 0, axis)


def scan(a: Tensor, b: Tensor, axis: int) -> Tensor:
    """Differentiable ``parallel_scan`` from a zero initial state.

    The adjoint is itself a reversed linear recurrence:
    lam_t = g_t + a_{t+1} lam_{t+1}; db = lam; da_t = lam_t h_{t-1}.
    """
    axis = axis % a.ndim
    h = parallel_scan(a.data, b.data, axis=axis)

    def backward(g):
        a0 = np.moveaxis(a.data, axis, 0)
        g0 = np.moveaxis(g, axis, 0)
        h0 = np.moveaxis(h, axis, 0)
        a_next = np.concatenate([a0[1:], np.zeros_like(a0[:1])], axis=0)
        lam = parallel_scan(a_next[::-1], g0[::-1], axis=0)[::-1]
        h_prev = np.concatenate([np.zeros_like(h0[:1]), h0[:-1]], axis=0)
        da = np.moveaxis(lam * h_prev, 0, axis)
        db = np.moveaxis(np.ascontiguousarray(lam), 0, axis)
        return da, db

    return _make(h, (a, b), backward, "scan")


# -- selective scan ----------------------------------------------------------

@dataclass
class SSMParams:
    """Learnable parameters of one selective SSM over ``E`` channels and ``N`` states."""

    A_log: Tensor  # [E, N]; A = -exp(A_log)
    D_skip: Tensor  # [E]
    dt_weight: Tensor  # [E, E]
    dt_bias: Tensor  # [E]
    B_weight: Tensor  # [E, N]
    C_weight: Tensor  # [E, N]

    @property
    def channels(self) -> int:
        return self.A_log.shape[0]

    @property
    def state_dim(self) -> int:
        return self.A_log.shape[1]

    @classmethod
    def from_mapping(cls, m) -> "SSMParams":
        return cls(m["A_log"], m["D_skip"], m["dt_weight"], m["dt_bias"], m["B_weight"], m["C_weight"])


def init_ssm_params(rng: np.random.Generator, channels: int, state_dim: int,
                    dt_min: float = 1e-3, dt_max: float = 0.1) -> dict[str, np.ndarray]:
    """S4D-real A (A_n = -(n+1)) and a dt bias placing softplus(bias) in [dt_min, dt_max]."""
    A = np.tile(np.arange(1, state_dim + 1, dtype=np.float64), (channels, 1))
    dt = np.exp(rng.uniform(np.log(dt_min), np.log(dt_max), size=channels))
    scale = channels ** -0.5
    return {
        "A_log": np.log(A),
        "D_skip": np.ones(channels),
        "dt_weight": rng.uniform(-scale, scale, size=(channels, channels)) * 0.1,
        "dt_bias": dt + np.log(-np.expm1(-dt)),  # inverse softplus
        "B_weight": rng.uniform(-scale, scale, size=(channels, state_dim)),
        "C_weight": rng.uniform(-scale, scale, size=(channels, state_dim)),
    }


def selective_scan(params: SSMParams, u: Tensor, zoh_exact: bool = True, use_d_skip: bool = True, *,
                   delta: Tensor | None = None, B: Tensor | None = None, C: Tensor | None = None) -> Tensor:
    """Input-dependent SSM over ``u[..., L, E]`` (leading axes are independent sequences).

    delta_t = softplus(u_t W_dt + b_dt); B_t = u_t W_B; C_t = u_t W_C;
    per-channel ZOH with the step's delta; y_t = C_t . h_t + D_skip * u_t.
    Passing ``delta``, ``B`` or ``C`` freezes that quantity to the given
    per-step values instead of projecting it from ``u``.
    """
    if u.shape[-1] != params.channels:
        raise ShapeError(f"input has {u.shape[-1]} channels, SSM expects {params.channels}")
    if delta is None:
        delta = T.softplus(T.matmul(u, params.dt_weight) + params.dt_bias)  # [..., L, E]
    if B is None:
        B = T.matmul(u, params.B_weight)  # [..., L, N]
    if C is None:
        C = T.matmul(u, params.C_weight)
    A = -T.exp(params.A_log)  # [E, N]
    return ssm_scan(u, T.as_tensor(delta), A, T.as_tensor(B), T.as_tensor(C),
                    params.D_skip if use_d_skip else None, zoh_exact)


def ssm_scan(u: Tensor, delta: Tensor, A: Tensor, B: Tensor, C: Tensor, D_skip: Tensor | None = None,
             zoh_exact: bool = True) -> Tensor:
    """Differentiable diagonal SSM with per-step parameters.

    Shapes: u and delta ``[..., L, E]``; A ``[E, N]``; B and C ``[..., L, N]``.
    This is the core of :func:`selective_scan` once the projections are taken.
    """
    lead = u.shape[:-1]
    e, n = A.shape
    if delta.shape != u.shape or B.shape != lead + (n,) or C.shape != lead + (n,):
        raise ShapeError("inconsistent selective-scan shapes")
    delta4 = T.reshape(delta, lead + (e, 1))
    dA = delta4 * A  # [..., L, E, N]
    A_bar = T.exp(dA)
    step = delta4 * T.expm1_ratio(dA) if zoh_exact else delta4
    Bu = step * T.reshape(B, lead + (1, n)) * T.reshape(u, lead + (e, 1))
    h = scan(A_bar, Bu, axis=-3)
    y = T.sum_(h * T.reshape(C, lead + (1, n)), axis=-1)
    if D_skip is not None:
        y = y + u * D_skip
    return y
