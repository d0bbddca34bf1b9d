"""Hidden Markov model whose emission distributions are Gaussian mixtures.

The model has D hidden states; state d emits from a mixture of K_d Gaussian
components. Inference runs EM over the two latent layers (state sequence and
within-state component labels). The initial state law is tied to the
stationary distribution of the transition matrix throughout.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp, xlogy

from .chain import (
    ChainPosterior,
    forward_backward,
    stationary_distribution,
    validate_transition_matrix,
)
from .errors import EmptyStateError
from .gaussian import CovStructure, GaussianParams, log_density, weighted_mle

EMPTY_STATE_TOL = 1e-8
VARIANCE_FLOOR_SCALE = 1e-6
DEFAULT_TOL = 1e-6
DEFAULT_MAX_ITER = 500
WEIGHT_SUM_TOL = 1e-12


@dataclass(eq=False)
class MixtureHMM:
    """Transition matrix plus per-state mixture weights and Gaussian components.

    ``weights[d]`` holds the K_d mixing proportions of state d and
    ``components[d]`` the matching Gaussian parameters. ``loglik`` caches the
    observed log-likelihood of the last fit when one is known.
    """

    trans: np.ndarray
    weights: list
    components: list
    cov_structure: CovStructure = CovStructure.FULL
    loglik: float | None = None

    def __post_init__(self):
        self.trans = validate_transition_matrix(self.trans)
        d = self.trans.shape[0]
        if len(self.weights) != d or len(self.components) != d:
            raise ValueError("weights/components must have one entry per state")
        self.weights = [np.asarray(w, dtype=float) for w in self.weights]
        self.components = [list(comps) for comps in self.components]
        for w, comps in zip(self.weights, self.components):
            if w.ndim != 1 or w.size == 0 or w.size != len(comps):
                raise ValueError("each state needs matching weights and components")
            if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
                raise ValueError("mixing weights must be nonnegative and sum to 1")

    @property
    def n_states(self) -> int:
        return self.trans.shape[0]

    @property
    def component_counts(self) -> tuple:
        return tuple(len(c) for c in self.components)

    @property
    def total_components(self) -> int:
        return sum(self.component_counts)

    @property
    def dim(self) -> int:
        return self.components[0][0].dim

    def state_slices(self) -> list:
        """Column ranges of each state's block in flat component order."""
        out, start = [], 0
        for k in self.component_counts:
            out.append(slice(start, start + k))
            start += k
        return out

    def flat_components(self) -> list:
        return [g for comps in self.components for g in comps]


@dataclass(eq=False)
class FullPosterior:
    """Chain posterior plus within-state component responsibilities.

    ``delta[d][t, k]`` is the probability of component k given state d at
    observation t.
    """

    chain: ChainPosterior
    delta: list


def _observations(data) -> np.ndarray:
    obs = getattr(data, "observations", data)
    return np.ascontiguousarray(obs, dtype=float)


def variance_floor(observations: np.ndarray) -> float:
    """Eigenvalue floor used in M-steps, relative to the data variance scale."""
    scale = float(np.mean(np.var(observations, axis=0)))
    return VARIANCE_FLOOR_SCALE * max(scale, 1e-12)


def _log_weights(w: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(w)


def component_log_densities(model: MixtureHMM, data) -> np.ndarray:
    """Per-component log densities, (n, K) in flat component order."""
    x = _observations(data)
    out = np.empty((x.shape[0], model.total_components))
    col = 0
    for comps in model.components:
        for g in comps:
            out[:, col] = log_density(x, g)
            col += 1
    return out


def state_log_emissions(
    model: MixtureHMM, data, comp_log_dens: np.ndarray | None = None
) -> np.ndarray:
    """Per-state mixture log densities, (n, D)."""
    if comp_log_dens is None:
        comp_log_dens = component_log_densities(model, data)
    out = np.empty((comp_log_dens.shape[0], model.n_states))
    for d, sl in enumerate(model.state_slices()):
        out[:, d] = logsumexp(
            comp_log_dens[:, sl] + _log_weights(model.weights[d])[None, :], axis=1
        )
    return out


def emission_log_density(model: MixtureHMM, x: np.ndarray, state: int):
    """Log density of observation(s) ``x`` under the mixture of ``state``."""
    if not 0 <= state < model.n_states:
        raise ValueError(f"state {state} out of range")
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    pts = np.atleast_2d(x)
    lw = _log_weights(model.weights[state])
    per_comp = np.stack(
        [log_density(pts, g) for g in model.components[state]], axis=1
    )
    out = logsumexp(per_comp + lw[None, :], axis=1)
    return float(out[0]) if single else out


def expand_to_component_chain(model: MixtureHMM):
    """Lumped Markov chain over the K component labels.

    Transition from (d, k) to (d', k') is trans[d, d'] * weights[d'][k'];
    the initial law is the blockwise stationary product q_d * weights[d][k].
    Returns (omega, flat components, initial distribution).
    """
    lam = np.concatenate(model.weights)
    state_of = np.repeat(np.arange(model.n_states), model.component_counts)
    omega = model.trans[np.ix_(state_of, state_of)] * lam[None, :]
    q = stationary_distribution(model.trans)
    init = q[state_of] * lam
    return omega, model.flat_components(), init


def e_step(model: MixtureHMM, data, comp_log_dens: np.ndarray | None = None) -> FullPosterior:
    """Posterior of both latent layers given the data.

    The state posterior comes from forward-backward on the per-state mixture
    log densities; the component responsibilities are softmax weights within
    each state, computed in log space.
    """
    if comp_log_dens is None:
        comp_log_dens = component_log_densities(model, data)
    n = comp_log_dens.shape[0]
    log_emis = np.empty((n, model.n_states))
    delta = []
    for d, sl in enumerate(model.state_slices()):
        logw = comp_log_dens[:, sl] + _log_weights(model.weights[d])[None, :]
        log_emis[:, d] = logsumexp(logw, axis=1)
        delta.append(np.exp(logw - log_emis[:, d][:, None]))
    init = stationary_distribution(model.trans)
    chain = forward_backward(log_emis, model.trans, init)
    return FullPosterior(chain=chain, delta=delta)


def m_step(data, post: FullPosterior, model: MixtureHMM, independent: bool = False) -> MixtureHMM:
    """Maximize the expected complete log-likelihood given the posterior.

    Transition rows are renormalized pairwise-posterior sums (or, in
    independent mode, every row becomes the mean state posterior). Component
    parameters are weighted Gaussian fits with weights tau * delta.
    """
    x = _observations(data)
    tau, eta = post.chain.tau, post.chain.eta
    d_states = model.n_states
    state_mass = tau.sum(axis=0)
    weakest = int(np.argmin(state_mass))
    if state_mass[weakest] < EMPTY_STATE_TOL:
        raise EmptyStateError(weakest, float(state_mass[weakest]))
    if independent:
        rho = tau.mean(axis=0)
        trans = np.tile(rho / rho.sum(), (d_states, 1))
    else:
        counts = eta.sum(axis=0)
        trans = counts / counts.sum(axis=1, keepdims=True)
    floor = variance_floor(x)
    new_weights, new_components = [], []
    for d in range(d_states):
        resp = tau[:, d][:, None] * post.delta[d]
        lam = resp.sum(axis=0) / state_mass[d]
        new_weights.append(lam / lam.sum())
        comps = []
        for k in range(resp.shape[1]):
            if resp[:, k].sum() <= 0.0:
                comps.append(model.components[d][k])  # dead component, keep as is
            else:
                comps.append(weighted_mle(x, resp[:, k], model.cov_structure, floor))
        new_components.append(comps)
    return MixtureHMM(
        trans=trans,
        weights=new_weights,
        components=new_components,
        cov_structure=model.cov_structure,
    )


def run_em(
    model: MixtureHMM,
    data,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    independent: bool = False,
):
    """Alternate E and M steps until the relative improvement drops below tol.

    Returns (model, trace) where trace holds the observed log-likelihood at
    every E-step; the trace is non-decreasing up to numerical noise.
    """
    if tol <= 0 or max_iter < 1:
        raise ValueError("tol must be positive and max_iter >= 1")
    trace = []
    prev = None
    for _ in range(max_iter):
        post = e_step(model, data)
        ll = post.chain.loglik
        trace.append(ll)
        if prev is not None and ll - prev <= tol * abs(prev):
            model.loglik = ll
            return model, trace
        prev = ll
        model = m_step(data, post, model, independent=independent)
    model.loglik = None  # final M-step left the model unevaluated
    return model, trace


def entropy_within_states(post: FullPosterior) -> float:
    """Expected entropy of the component label given the state, summed over t."""
    tau = post.chain.tau
    total = 0.0
    for d, delta_d in enumerate(post.delta):
        rows = -xlogy(delta_d, delta_d).sum(axis=1)
        total += float(tau[:, d] @ rows)
    return max(total, 0.0)


def _kmeans_centers(x: np.ndarray, k: int, rng: np.random.Generator, sweeps: int):
    """k-means++ seeding plus a fixed number of Lloyd sweeps."""
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    closest = np.sum((x - centers[0]) ** 2, axis=1)
    for j in range(1, k):
        total = closest.sum()
        if total <= 0.0:
            centers[j] = x[rng.integers(n)]
        else:
            centers[j] = x[rng.choice(n, p=closest / total)]
        closest = np.minimum(closest, np.sum((x - centers[j]) ** 2, axis=1))
    labels = None
    for _ in range(max(sweeps, 1)):
        dist = np.sum((x[:, None, :] - centers[None, :, :]) ** 2, axis=2)
        labels = np.argmin(dist, axis=1)
        for j in range(k):
            mask = labels == j
            if mask.any():
                centers[j] = x[mask].mean(axis=0)
            else:
                # re-seed an empty cluster on the point worst served so far
                worst = int(np.argmax(dist[np.arange(n), labels]))
                centers[j] = x[worst]
                labels[worst] = j
    return centers, labels


def init_k_components(
    data,
    n_components: int,
    structure: CovStructure = CovStructure.FULL,
    seed: int = 0,
    kmeans_sweeps: int = 10,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    independent: bool = False,
) -> MixtureHMM:
    """Fit a K-state model with one Gaussian component per state.

    Centers come from k-means++ seeding refined by ``kmeans_sweeps`` Lloyd
    sweeps; covariances from within-cluster scatter; the transition matrix
    starts at 0.8 on the diagonal with the rest spread uniformly. The model
    is then polished by EM to convergence. Deterministic given ``seed``.
    """
    x = _observations(data)
    n = x.shape[0]
    if n_components < 1:
        raise ValueError("n_components must be >= 1")
    if n < n_components:
        raise ValueError(f"need at least {n_components} observations, got {n}")
    rng = np.random.default_rng(seed)
    floor = variance_floor(x)
    if n_components == 1:
        labels = np.zeros(n, dtype=int)
    else:
        _, labels = _kmeans_centers(x, n_components, rng, kmeans_sweeps)
    comps = [
        [weighted_mle(x, (labels == j).astype(float), structure, floor)]
        for j in range(n_components)
    ]
    if independent:
        trans = np.full((n_components, n_components), 1.0 / n_components)
    elif n_components == 1:
        trans = np.ones((1, 1))
    else:
        off = 0.2 / (n_components - 1)
        trans = np.full((n_components, n_components), off)
        np.fill_diagonal(trans, 0.8)
    model = MixtureHMM(
        trans=trans,
        weights=[np.ones(1) for _ in range(n_components)],
        components=comps,
        cov_structure=structure,
    )
    model, trace = run_em(model, data, tol=tol, max_iter=max_iter, independent=independent)
    if model.loglik is None:
        model.loglik = trace[-1]
    return model


def model_to_dict(model: MixtureHMM) -> dict:
    """JSON-ready document; floats survive a round trip at full precision."""
    return {
        "D": model.n_states,
        "component_counts": list(model.component_counts),
        "trans": [float(v) for v in model.trans.ravel()],
        "weights": [[float(v) for v in w] for w in model.weights],
        "means": [
            [[float(v) for v in g.mean] for g in comps] for comps in model.components
        ],
        "covariances": [
            [[float(v) for v in g.covariance.ravel()] for g in comps]
            for comps in model.components
        ],
        "cov_structure": model.cov_structure.value,
        "loglik": None if model.loglik is None else float(model.loglik),
    }


def model_from_dict(doc: dict) -> MixtureHMM:
    d = int(doc["D"])
    counts = [int(k) for k in doc["component_counts"]]
    trans = np.array(doc["trans"], dtype=float).reshape(d, d)
    weights = [np.array(w, dtype=float) for w in doc["weights"]]
    components = []
    for means, covs, k in zip(doc["means"], doc["covariances"], counts):
        if len(means) != k:
            raise ValueError("component_counts inconsistent with means")
        q = len(means[0])
        components.append(
            [
                GaussianParams(np.array(m, dtype=float), np.array(c, dtype=float).reshape(q, q))
                for m, c in zip(means, covs)
            ]
        )
    return MixtureHMM(
        trans=trans,
        weights=weights,
        components=components,
        cov_structure=CovStructure(doc["cov_structure"]),
        loglik=doc.get("loglik"),
    )


def save_model(model: MixtureHMM, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model_to_dict(model), fh, indent=1)
        fh.write("\n")


def load_model(path) -> MixtureHMM:
    with open(path, encoding="utf-8") as fh:
        return model_from_dict(json.load(fh))
