"""Latent scores on the transformed (normal-marginal) scale.

EAP scores are posterior means over the quadrature grid with the normal
quantile applied at the nodes. Predictive precision follows the bootstrap
reading: the predictive posterior is the uniform mixture of replicate
posteriors, and its inverse variance accounts for parameter uncertainty on
top of the plug-in posterior spread. Note the two precisions are both
reported and neither dominates the other by construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri

from .exceptions import ConfigurationError, InsufficientEnsembleError
from .inference import BootstrapEnsemble
from .likelihood import (
    FACTOR_ABILITY,
    FACTOR_SPEED,
    FactorModel,
    ModelTables,
    posterior_weights,
)


@dataclass
class ScoreRecord:
    """Joint EAP scores for one record, plus optional precision entries."""

    eap_slowness: float
    eap_ability: float
    sd_slowness: float
    sd_ability: float
    precision_joint: float | None = None
    precision_marginal: float | None = None


def _grid_moments(grid: np.ndarray, zstar: np.ndarray):
    w1 = grid.sum(axis=1)
    w2 = grid.sum(axis=0)
    m1 = float(w1 @ zstar)
    m2 = float(w2 @ zstar)
    s1 = float(w1 @ (zstar * zstar))
    s2 = float(w2 @ (zstar * zstar))
    return (m1, m2), (s1, s2)


def eap_joint(model: FactorModel, y_row) -> ScoreRecord:
    """Posterior means and SDs of both factors given a full record."""
    zstar = ndtri(model.quad.nodes)
    grid = posterior_weights(model, y_row)
    (m1, m2), (s1, s2) = _grid_moments(grid, zstar)
    return ScoreRecord(
        eap_slowness=m1,
        eap_ability=m2,
        sd_slowness=float(np.sqrt(max(s1 - m1 * m1, 0.0))),
        sd_ability=float(np.sqrt(max(s2 - m2 * m2, 0.0))),
    )


def _marginal_posterior(model: FactorModel, responses) -> np.ndarray:
    """Posterior over the ability grid using responses only (flat latent
    marginal, which is exactly the model-implied one)."""
    idx = model.indices_for(FACTOR_ABILITY)
    if not idx:
        raise ConfigurationError("model has no ability-block items")
    responses = np.asarray(responses, dtype=float).ravel()
    if responses.size != len(idx):
        raise ConfigurationError(
            f"expected {len(idx)} response entries, got {responses.size}"
        )
    row = np.zeros((1, len(model.items)))
    row[0, idx] = responses
    tables = ModelTables(model, row)
    loglik = np.zeros(len(model.quad))
    for pos, j in enumerate(idx):
        loglik += tables.logf[j][0]
    post = model.quad.weights * np.exp(loglik - loglik.max())
    return post / post.sum()


def eap_marginal(model: FactorModel, responses):
    """Response-only EAP and posterior SD of the ability factor."""
    zstar = ndtri(model.quad.nodes)
    post = _marginal_posterior(model, responses)
    m = float(post @ zstar)
    s = float(post @ (zstar * zstar))
    return m, float(np.sqrt(max(s - m * m, 0.0)))


def _record_moments(model: FactorModel, y_row, which: str):
    zstar = ndtri(model.quad.nodes)
    if which == "joint":
        grid = posterior_weights(model, y_row)
        return _grid_moments(grid, zstar)
    idx = model.indices_for(FACTOR_ABILITY)
    responses = np.asarray(y_row, dtype=float)[idx]
    post = _marginal_posterior(model, responses)
    m = float(post @ zstar)
    s = float(post @ (zstar * zstar))
    return (m,), (s,)


def predictive_precision(ensemble: BootstrapEnsemble, y_row, which: str = "joint"):
    """Inverse variance of the replicate-mixture posterior for one record.

    ``which`` selects the joint two-factor posterior (returns a precision
    pair, slowness then ability) or the response-only marginal (returns a
    scalar). Uses the law of total variance over the uniform mixture of
    replicate posteriors.
    """
    if which not in ("joint", "marginal"):
        raise ConfigurationError(f"unknown posterior kind {which!r}")
    if ensemble.n_success < 2:
        raise InsufficientEnsembleError(
            f"predictive precision needs >= 2 replicates, have {ensemble.n_success}"
        )
    firsts = []
    seconds = []
    for fit in ensemble.replicates:
        m, s = _record_moments(fit.model, y_row, which)
        firsts.append(m)
        seconds.append(s)
    firsts = np.asarray(firsts)
    seconds = np.asarray(seconds)
    var = seconds.mean(axis=0) - firsts.mean(axis=0) ** 2
    prec = 1.0 / var
    if which == "joint":
        return float(prec[0]), float(prec[1])
    return float(prec[0])


def score_records(model: FactorModel, values, ensemble: BootstrapEnsemble = None):
    """EAP/SD for every record, with predictive precisions when an ensemble
    is supplied. Returns a list of ScoreRecord."""
    values = np.asarray(values, dtype=float)
    out = []
    for i in range(values.shape[0]):
        rec = eap_joint(model, values[i])
        if ensemble is not None:
            rec.precision_joint = predictive_precision(ensemble, values[i], "joint")[1]
            rec.precision_marginal = predictive_precision(ensemble, values[i], "marginal")
        out.append(rec)
    return out


def precision_by_quantile(scores, groups: int = 5):
    """Group records by joint-model ability EAP and summarize precisions.

    Groups are rank-based (sizes differ by at most one, lowest EAP first).
    Each row reports group size, mean/median/quartiles of both precision
    variants, and the percent improvement of the joint over the marginal
    mean.
    """
    if groups < 2:
        raise ConfigurationError("need at least 2 quantile groups")
    recs = [s for s in scores if s.precision_joint is not None]
    if not recs:
        raise ConfigurationError("scores carry no precision entries")
    eap = np.array([s.eap_ability for s in recs])
    pj = np.array([s.precision_joint for s in recs])
    pm = np.array([s.precision_marginal for s in recs])
    order = np.argsort(eap, kind="stable")
    rows = []
    for g, chunk in enumerate(np.array_split(order, groups)):
        j, m = pj[chunk], pm[chunk]
        rows.append(
            {
                "group": g + 1,
                "n": int(chunk.size),
                "mean_joint": float(j.mean()),
                "median_joint": float(np.median(j)),
                "q25_joint": float(np.quantile(j, 0.25)),
                "q75_joint": float(np.quantile(j, 0.75)),
                "mean_marginal": float(m.mean()),
                "median_marginal": float(np.median(m)),
                "q25_marginal": float(np.quantile(m, 0.25)),
                "q75_marginal": float(np.quantile(m, 0.75)),
                "improvement_pct": float(100.0 * (j.mean() - m.mean()) / m.mean()),
            }
        )
    return rows
