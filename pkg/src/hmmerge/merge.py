"""Hierarchical combination of hidden states.

Starting from a model with one component per state, repeatedly score every
pair of states with a likelihood-based criterion, merge the best pair, and
refine the reduced model with a few EM iterations, recording the whole path
down to a single state.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .chain import forward_backward, forward_loglik, posterior_entropy, stationary_distribution
from .errors import EmptyStateError
from .mixture import (
    MixtureHMM,
    component_log_densities,
    e_step,
    entropy_within_states,
    expand_to_component_chain,
    m_step,
    model_from_dict,
    model_to_dict,
    state_log_emissions,
)

DEFAULT_REFINE_ITERS = 10
REFINE_TOL = 1e-6


class MergeCriterion(Enum):
    """Score used to pick the pair of states to combine.

    X ranks pairs by the observed log-likelihood of the merged model, XS
    additionally discounts the state-sequence entropy, XZ discounts the
    entropy of the full component-label sequence.
    """

    X = "X"
    XS = "XS"
    XZ = "XZ"


@dataclass(eq=False)
class MergeStep:
    """One point of the merge path: the model with ``n_clusters`` states."""

    n_clusters: int
    model: MixtureHMM
    merged_pair: tuple | None
    criterion_value: float | None
    loglik: float
    entropy_states: float
    entropy_within: float
    n_candidates: int


@dataclass(eq=False)
class MergePath:
    """Ordered models from the initial state count down to one."""

    criterion: MergeCriterion
    steps: list

    def step_at(self, n_clusters: int) -> MergeStep:
        for step in self.steps:
            if step.n_clusters == n_clusters:
                return step
        raise KeyError(f"no step with {n_clusters} clusters")

    @property
    def cluster_counts(self) -> list:
        return [s.n_clusters for s in self.steps]


def _merge_pair(model: MixtureHMM, k: int, l: int, q: np.ndarray) -> MixtureHMM:
    a, b = sorted((k, l))
    qa, qb = q[a], q[b]
    pooled = qa + qb
    new_weights, new_components = [], []
    for d in range(model.n_states):
        if d == b:
            continue
        if d == a:
            new_weights.append(
                np.concatenate([qa * model.weights[a], qb * model.weights[b]]) / pooled
            )
            new_components.append(list(model.components[a]) + list(model.components[b]))
        else:
            new_weights.append(model.weights[d])
            new_components.append(list(model.components[d]))
    trans = model.trans.copy()
    trans[:, a] += trans[:, b]
    trans[a, :] = (qa * trans[a, :] + qb * trans[b, :]) / pooled
    trans = np.delete(np.delete(trans, b, axis=0), b, axis=1)
    return MixtureHMM(
        trans=trans,
        weights=new_weights,
        components=new_components,
        cov_structure=model.cov_structure,
    )


def merge_pair(model: MixtureHMM, k: int, l: int) -> MixtureHMM:
    """Plug-in model after combining states ``k`` and ``l``.

    The merged state keeps both states' components; its mixing weights pool
    the originals proportionally to the stationary mass of each state.
    Incoming transition probabilities add, outgoing ones pool with the same
    stationary weights. Gaussian parameters are untouched.
    """
    d = model.n_states
    if d < 2:
        raise ValueError("need at least two states to merge")
    if k == l or not (0 <= k < d) or not (0 <= l < d):
        raise ValueError(f"invalid state pair ({k}, {l})")
    return _merge_pair(model, k, l, stationary_distribution(model.trans))


def criterion_value(
    model: MixtureHMM,
    data,
    kind: MergeCriterion,
    comp_log_dens: np.ndarray | None = None,
) -> float:
    """Merging score of an already-merged model on the data.

    X is the observed log-likelihood; XS subtracts the posterior entropy of
    the state sequence; XZ subtracts the posterior entropy of the expanded
    component chain. ``comp_log_dens`` can inject precomputed per-component
    log densities (flat component order) to avoid recomputation.
    """
    if comp_log_dens is None:
        comp_log_dens = component_log_densities(model, data)
    log_emis = state_log_emissions(model, data, comp_log_dens)
    init = stationary_distribution(model.trans)
    if kind is MergeCriterion.X:
        return forward_loglik(log_emis, model.trans, init)
    if kind is MergeCriterion.XS:
        post = forward_backward(log_emis, model.trans, init)
        return post.loglik - posterior_entropy(post)
    omega, _, z_init = expand_to_component_chain(model)
    z_post = forward_backward(comp_log_dens, omega, z_init)
    return z_post.loglik - posterior_entropy(z_post)


def _merged_column_order(slices: list, a: int, b: int) -> np.ndarray:
    order = []
    for d, sl in enumerate(slices):
        if d == b:
            continue
        order.extend(range(sl.start, sl.stop))
        if d == a:
            order.extend(range(slices[b].start, slices[b].stop))
    return np.array(order, dtype=int)


def _scan_pairs(model, data, kind, comp_log_dens, must_include, pair_filter):
    q = stationary_distribution(model.trans)
    slices = model.state_slices()
    best = None
    scored = 0
    for k in range(model.n_states - 1):
        for l in range(k + 1, model.n_states):
            if must_include is not None and must_include not in (k, l):
                continue
            if pair_filter is not None and not pair_filter(k, l):
                continue
            merged = _merge_pair(model, k, l, q)
            cols = _merged_column_order(slices, k, l)
            value = criterion_value(merged, data, kind, comp_log_dens[:, cols])
            scored += 1
            if best is None or value > best[2]:
                best = (k, l, value)
    if best is None:
        raise ValueError("no candidate pair to score")
    return best, scored


def best_pair(
    model: MixtureHMM,
    data,
    kind: MergeCriterion,
    comp_log_dens: np.ndarray | None = None,
    must_include: int | None = None,
    pair_filter=None,
):
    """Highest-scoring unordered state pair under ``kind``.

    Every candidate is scored on its plug-in merged model, without any EM
    refit. Ties break toward the lexicographically smallest pair.
    ``must_include`` restricts candidates to pairs containing that state;
    ``pair_filter`` is an optional screening predicate on (k, l).
    """
    if model.n_states < 2:
        raise ValueError("need at least two states")
    if comp_log_dens is None:
        comp_log_dens = component_log_densities(model, data)
    best, _ = _scan_pairs(model, data, kind, comp_log_dens, must_include, pair_filter)
    return best


def _refine(model, data, iters, tol, independent):
    """A few EM iterations; on a vanished state, stop and report it."""
    prev = None
    for _ in range(iters):
        post = e_step(model, data)
        ll = post.chain.loglik
        if prev is not None and ll - prev <= tol * abs(prev):
            break
        prev = ll
        try:
            model = m_step(data, post, model, independent=independent)
        except EmptyStateError as err:
            return model, err.state
    return model, None


def _record_step(model, data, n_clusters, pair, value, scored) -> MergeStep:
    post = e_step(model, data)
    model.loglik = post.chain.loglik
    return MergeStep(
        n_clusters=n_clusters,
        model=model,
        merged_pair=pair,
        criterion_value=value,
        loglik=post.chain.loglik,
        entropy_states=posterior_entropy(post.chain),
        entropy_within=entropy_within_states(post),
        n_candidates=scored,
    )


def hierarchical_merge(
    initial: MixtureHMM,
    data,
    kind: MergeCriterion = MergeCriterion.X,
    refine_iters: int = DEFAULT_REFINE_ITERS,
    refine_tol: float = REFINE_TOL,
    stop_at: int = 1,
    independent: bool = False,
    pair_filter=None,
) -> MergePath:
    """Merge states one pair at a time, from the initial count down to ``stop_at``.

    After each merge the reduced model is polished with at most
    ``refine_iters`` EM iterations. If a state empties during refinement it
    is forced into the next merge. The total component budget is conserved
    along the whole path.
    """
    if stop_at < 1:
        raise ValueError("stop_at must be >= 1")
    model = initial
    steps = [_record_step(model, data, model.n_states, None, None, 0)]
    forced = None
    while model.n_states > stop_at:
        comp_ld = component_log_densities(model, data)
        (k, l, value), scored = _scan_pairs(
            model, data, kind, comp_ld, forced, pair_filter
        )
        forced = None
        merged = _merge_pair(model, k, l, stationary_distribution(model.trans))
        if refine_iters > 0:
            merged, forced = _refine(merged, data, refine_iters, refine_tol, independent)
        model = merged
        steps.append(_record_step(model, data, model.n_states, (k, l), value, scored))
    return MergePath(criterion=kind, steps=steps)


def merge_path_to_dict(path: MergePath) -> dict:
    from .selection import count_free_parameters

    return {
        "criterion": path.criterion.value,
        "steps": [
            {
                "n_clusters": s.n_clusters,
                "merged_pair": None if s.merged_pair is None else list(s.merged_pair),
                "criterion_value": None if s.criterion_value is None else float(s.criterion_value),
                "loglik": float(s.loglik),
                "entropy_states": float(s.entropy_states),
                "entropy_within": float(s.entropy_within),
                "n_free_parameters": count_free_parameters(s.model),
                "n_candidates": s.n_candidates,
                "model": model_to_dict(s.model),
            }
            for s in path.steps
        ],
    }


def merge_path_from_dict(doc: dict) -> MergePath:
    steps = [
        MergeStep(
            n_clusters=int(s["n_clusters"]),
            model=model_from_dict(s["model"]),
            merged_pair=None if s["merged_pair"] is None else tuple(s["merged_pair"]),
            criterion_value=s["criterion_value"],
            loglik=float(s["loglik"]),
            entropy_states=float(s["entropy_states"]),
            entropy_within=float(s["entropy_within"]),
            n_candidates=int(s.get("n_candidates", 0)),
        )
        for s in doc["steps"]
    ]
    return MergePath(criterion=MergeCriterion(doc["criterion"]), steps=steps)


def save_merge_path(path: MergePath, file_path) -> None:
    with open(file_path, "w", encoding="utf-8") as fh:
        json.dump(merge_path_to_dict(path), fh, indent=1)
        fh.write("\n")


def load_merge_path(file_path) -> MergePath:
    with open(file_path, encoding="utf-8") as fh:
        return merge_path_from_dict(json.load(fh))
