"""Finite-state hidden-chain machinery.

Scaled forward-backward smoothing, stationary distributions, MAP decoding
and the exact posterior entropy of the hidden state sequence. The forward
and backward sweeps run under numba; everything else is plain numpy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit
from scipy.special import xlogy

from .errors import ChainStructureError

ROW_SUM_TOL = 1e-12


@dataclass(eq=False)
class ChainPosterior:
    """Smoothing output of one forward-backward pass.

    ``tau[t, d]`` is the posterior probability of state ``d`` at time ``t``,
    ``eta[t, d, e]`` the posterior probability of the pair ``(d, e)`` at times
    ``(t, t+1)``, and ``loglik`` the observed log-likelihood.
    """

    tau: np.ndarray
    eta: np.ndarray
    loglik: float

    @property
    def n_obs(self) -> int:
        return self.tau.shape[0]

    @property
    def n_states(self) -> int:
        return self.tau.shape[1]


def validate_transition_matrix(trans: np.ndarray) -> np.ndarray:
    trans = np.ascontiguousarray(trans, dtype=float)
    if trans.ndim != 2 or trans.shape[0] != trans.shape[1]:
        raise ValueError(f"transition matrix must be square, got {trans.shape}")
    if np.any(trans < 0.0) or np.any(trans > 1.0):
        raise ValueError("transition probabilities must lie in [0, 1]")
    if np.max(np.abs(trans.sum(axis=1) - 1.0)) > 1e-9:
        raise ValueError("transition matrix rows must sum to 1")
    return trans


def _validate_prob_vector(p: np.ndarray, d: int) -> np.ndarray:
    p = np.ascontiguousarray(p, dtype=float)
    if p.shape != (d,) or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
        raise ValueError("initial distribution must be a probability vector")
    return p


def _emission_weights(log_emission: np.ndarray):
    """Shift log emissions row-wise and exponentiate.

    Entries may be -inf (zero density) provided every row keeps at least one
    finite entry. Returns the positive weights and the total shift.
    """
    le = np.ascontiguousarray(log_emission, dtype=float)
    if le.ndim != 2 or le.shape[0] < 1:
        raise ValueError("log_emission must be an (n, D) matrix with n >= 1")
    if np.any(np.isnan(le)) or np.any(np.isposinf(le)):
        raise ValueError("log emissions must not contain NaN or +inf")
    shift = le.max(axis=1)
    if np.any(np.isneginf(shift)):
        raise ValueError("every observation needs positive density under some state")
    return np.exp(le - shift[:, None]), float(shift.sum())


@njit(cache=True)
def _forward(b, trans, init, alpha, c):
    n, d = b.shape
    tot = 0.0
    for j in range(d):
        alpha[0, j] = init[j] * b[0, j]
        tot += alpha[0, j]
    if tot <= 0.0:
        return 0
    c[0] = tot
    for j in range(d):
        alpha[0, j] /= tot
    for t in range(1, n):
        tot = 0.0
        for j in range(d):
            acc = 0.0
            for i in range(d):
                acc += alpha[t - 1, i] * trans[i, j]
            acc *= b[t, j]
            alpha[t, j] = acc
            tot += acc
        if tot <= 0.0:
            return t
        c[t] = tot
        for j in range(d):
            alpha[t, j] /= tot
    return -1


@njit(cache=True)
def _backward(b, trans, c, beta):
    n, d = b.shape
    for j in range(d):
        beta[n - 1, j] = 1.0
    for t in range(n - 2, -1, -1):
        for i in range(d):
            acc = 0.0
            for j in range(d):
                acc += trans[i, j] * b[t + 1, j] * beta[t + 1, j]
            beta[t, i] = acc / c[t + 1]


@njit(cache=True)
def _pairwise(alpha, beta, b, trans, c, eta):
    n, d = b.shape
    for t in range(n - 1):
        for i in range(d):
            ai = alpha[t, i]
            for j in range(d):
                eta[t, i, j] = ai * trans[i, j] * b[t + 1, j] * beta[t + 1, j] / c[t + 1]


def _run_forward(log_emission, trans, init):
    trans = validate_transition_matrix(trans)
    b, shift = _emission_weights(log_emission)
    init = _validate_prob_vector(init, b.shape[1])
    alpha = np.empty_like(b)
    c = np.empty(b.shape[0])
    bad = _forward(b, trans, init, alpha, c)
    if bad >= 0:
        raise FloatingPointError(
            f"forward recursion underflowed at t={bad}: no state can produce the observation"
        )
    return b, trans, init, alpha, c, shift


def forward_loglik(log_emission: np.ndarray, trans: np.ndarray, init: np.ndarray) -> float:
    """Observed log-likelihood from the forward sweep alone."""
    _, _, _, _, c, shift = _run_forward(log_emission, trans, init)
    return float(np.log(c).sum() + shift)


def forward_backward(
    log_emission: np.ndarray, trans: np.ndarray, init: np.ndarray
) -> ChainPosterior:
    """Exact smoothing posteriors and log-likelihood of a hidden chain.

    Uses the normalized-alpha scaling, so arbitrarily long sequences neither
    overflow nor underflow. ``log_emission[t, d]`` is the log density of
    observation ``t`` under state ``d``.
    """
    b, trans, init, alpha, c, shift = _run_forward(log_emission, trans, init)
    n, d = b.shape
    beta = np.empty_like(b)
    _backward(b, trans, c, beta)
    tau = alpha * beta
    eta = np.empty((n - 1, d, d))
    _pairwise(alpha, beta, b, trans, c, eta)
    loglik = float(np.log(c).sum() + shift)
    return ChainPosterior(tau=tau, eta=eta, loglik=loglik)


def _is_primitive(trans: np.ndarray) -> bool:
    if np.all(trans > 0.0):
        return True
    d = trans.shape[0]
    reach = (trans > 0.0).astype(float)
    # A primitive matrix is strictly positive at some power <= (d-1)^2 + 1
    # (Wielandt), and stays positive afterwards; boolean squaring reaches it.
    target = (d - 1) ** 2 + 1
    power = 1
    while power < target:
        reach = ((reach @ reach) > 0.0).astype(float)
        power *= 2
        if np.all(reach > 0.0):
            return True
    return bool(np.all(reach > 0.0))


def stationary_distribution(trans: np.ndarray) -> np.ndarray:
    """Probability vector q with q @ trans == q.

    Requires an irreducible aperiodic chain, checked through primitivity of
    the transition matrix.
    """
    trans = validate_transition_matrix(trans)
    d = trans.shape[0]
    if d == 1:
        return np.ones(1)
    if not _is_primitive(trans):
        raise ChainStructureError("chain is reducible or periodic")
    a = trans.T - np.eye(d)
    a[-1, :] = 1.0
    rhs = np.zeros(d)
    rhs[-1] = 1.0
    try:
        q = np.linalg.solve(a, rhs)
    except np.linalg.LinAlgError:
        q, *_ = np.linalg.lstsq(a, rhs, rcond=None)
    q = np.maximum(q, 0.0)
    return q / q.sum()


def map_classify(tau: np.ndarray) -> np.ndarray:
    """Per-observation MAP state labels; ties go to the lowest index."""
    tau = np.asarray(tau, dtype=float)
    if tau.ndim != 2:
        raise ValueError("tau must be an (n, D) matrix")
    return np.argmax(tau, axis=1)


def posterior_entropy(post: ChainPosterior) -> float:
    """Exact entropy of the state sequence under the smoothing posterior.

    The posterior of the chain given the data is itself Markov, so the
    entropy decomposes over consecutive pairs; with h(p) = -sum p log p this
    is h(tau_1) + sum_t [h(eta_t) - h(tau_t)] for t = 1..n-1.
    """
    tau, eta = post.tau, post.eta
    h = -xlogy(tau[0], tau[0]).sum()
    if eta.shape[0]:
        h += -xlogy(eta, eta).sum() + xlogy(tau[:-1], tau[:-1]).sum()
    return max(float(h), 0.0)
