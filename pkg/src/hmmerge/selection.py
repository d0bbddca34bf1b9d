"""Model-selection criteria and choice of the number of clusters.

BIC penalizes the observed log-likelihood by half the free-parameter count
times log(n). The two ICL variants further subtract posterior entropies: the
full one uses the joint entropy of states and component labels, the
state-only one just the state-sequence entropy.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import TYPE_CHECKING

from .chain import posterior_entropy
from .gaussian import CovStructure
from .mixture import FullPosterior, MixtureHMM, e_step, entropy_within_states, _observations

if TYPE_CHECKING:  # pragma: no cover
    from .merge import MergePath

SELECTION_NAMES = ("BIC", "ICL", "ICL_S")


def count_free_parameters(model: MixtureHMM) -> int:
    """Free parameters: transitions, mixing weights, and component parameters.

    The initial law is tied to the stationary distribution and contributes
    nothing. A full-covariance Gaussian in dimension Q has Q(Q+3)/2 free
    parameters, a spherical one Q+1.
    """
    d = model.n_states
    k = model.total_components
    q = model.dim
    if model.cov_structure is CovStructure.SPHERICAL:
        per_comp = q + 1
    else:
        per_comp = q * (q + 3) // 2
    return d * (d - 1) + (k - d) + k * per_comp


@dataclass(eq=False)
class CriterionRecord:
    n_clusters: int
    loglik: float
    n_params: int
    bic: float
    icl: float
    icl_s: float
    entropy_states: float
    entropy_within: float


@dataclass(eq=False)
class CriteriaReport:
    """Per-cluster-count criterion values along a merge path."""

    records: list

    def best(self, criterion: str = "ICL_S") -> int:
        """Cluster count maximizing the named criterion; ties go to fewer clusters."""
        key = {"BIC": "bic", "ICL": "icl", "ICL_S": "icl_s"}[criterion]
        chosen = None
        for rec in self.records:
            value = getattr(rec, key)
            if (
                chosen is None
                or value > chosen[0]
                or (value == chosen[0] and rec.n_clusters < chosen[1])
            ):
                chosen = (value, rec.n_clusters)
        if chosen is None:
            raise ValueError("empty report")
        return chosen[1]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["G", "loglik", "nu", "BIC", "ICL", "ICL_S", "H_S", "H_Z_given_S"])
            for r in self.records:
                writer.writerow(
                    [
                        r.n_clusters,
                        repr(float(r.loglik)),
                        r.n_params,
                        repr(float(r.bic)),
                        repr(float(r.icl)),
                        repr(float(r.icl_s)),
                        repr(float(r.entropy_states)),
                        repr(float(r.entropy_within)),
                    ]
                )


def _n_obs(data) -> int:
    return _observations(data).shape[0]


def _summaries(model, data, posterior):
    if posterior is None:
        posterior = e_step(model, data)
    loglik = posterior.chain.loglik
    h_states = posterior_entropy(posterior.chain)
    h_within = entropy_within_states(posterior)
    return loglik, h_states, h_within


def bic(model: MixtureHMM, data, posterior: FullPosterior | None = None) -> float:
    """Observed log-likelihood minus (nu/2) log n."""
    loglik, _, _ = _summaries(model, data, posterior)
    return loglik - 0.5 * count_free_parameters(model) * math.log(_n_obs(data))


def icl(model: MixtureHMM, data, posterior: FullPosterior | None = None) -> float:
    """BIC further penalized by the joint entropy of states and components.

    The joint entropy splits as the state-sequence entropy plus the expected
    within-state component entropy; both terms use the soft (conditional
    expectation) form.
    """
    loglik, h_states, h_within = _summaries(model, data, posterior)
    penalty = 0.5 * count_free_parameters(model) * math.log(_n_obs(data))
    return loglik - (h_states + h_within) - penalty


def icl_s(model: MixtureHMM, data, posterior: FullPosterior | None = None) -> float:
    """BIC further penalized by the state-sequence entropy only."""
    loglik, h_states, _ = _summaries(model, data, posterior)
    penalty = 0.5 * count_free_parameters(model) * math.log(_n_obs(data))
    return loglik - h_states - penalty


def criteria_report(path: "MergePath", data) -> CriteriaReport:
    """All three criteria at every cluster count of a merge path."""
    n = _n_obs(data)
    records = []
    for step in path.steps:
        post = e_step(step.model, data)
        loglik, h_states, h_within = _summaries(step.model, data, post)
        nu = count_free_parameters(step.model)
        penalty = 0.5 * nu * math.log(n)
        records.append(
            CriterionRecord(
                n_clusters=step.n_clusters,
                loglik=loglik,
                n_params=nu,
                bic=loglik - penalty,
                icl=loglik - (h_states + h_within) - penalty,
                icl_s=loglik - h_states - penalty,
                entropy_states=h_states,
                entropy_within=h_within,
            )
        )
    return CriteriaReport(records=records)


def select_clusters(path: "MergePath", data, criterion: str = "ICL_S"):
    """Chosen cluster count along the path plus the full criterion report.

    The default choice maximizes the state-entropy ICL variant; the report
    carries BIC and full ICL as well so other rules can be inspected.
    """
    if not path.steps:
        raise ValueError("empty merge path")
    report = criteria_report(path, data)
    return report.best(criterion), report
