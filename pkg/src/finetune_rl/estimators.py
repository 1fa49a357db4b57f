"""scikit-learn style front ends for the learners and verifiers.

The "data" an RL estimator fits on is an environment plus optional
offline records, so ``fit`` takes a :class:`LinearMdp` (used as a
simulator) rather than a feature matrix. ``predict`` maps
``(step, state)`` rows to actions.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from ._validation import check_random_state
from .design import EpisodicEnv, opt_cov
from .ftpedel import ftpedel
from .mdp import LinearMdp, Policy
from .offline import OfflineDataset
from .verify import offline_verify, verify_policy
from .visitation import PolicyClass, enumerate_det_policies


def _check_mdp(mdp):
    if not isinstance(mdp, LinearMdp):
        raise TypeError(f"expected a LinearMdp environment, got {type(mdp).__name__}")
    report = mdp.validate()
    if not report.ok:
        raise ValueError("invalid MDP: " + "; ".join(report.issues))
    return mdp


def _policy_class(mdp, policy_class, prune):
    return enumerate_det_policies(mdp, prune=prune) if policy_class is None else policy_class


class _PolicyPredictor:
    """``predict`` for estimators that end with a fitted ``policy_``."""

    def predict(self, X):
        check_is_fitted(self, "policy_")
        if self.policy_ is None:
            raise ValueError("no policy was returned by the last fit")
        X = check_array(X, dtype=np.int64)
        if X.shape[1] != 2:
            raise ValueError("predict expects rows of (step, state) with 1-based steps")
        table = self.policy_.table(self.mdp_)
        return table[X[:, 0] - 1, X[:, 1]].argmax(axis=1)

    def predict_proba(self, X):
        check_is_fitted(self, "policy_")
        X = check_array(X, dtype=np.int64)
        return self.policy_.table(self.mdp_)[X[:, 0] - 1, X[:, 1]]


class FTPedel(_PolicyPredictor, BaseEstimator):
    """Learn a near-optimal policy from offline records plus online episodes.

    Attributes set by ``fit``: ``policy_``, ``policy_index_``,
    ``online_episodes_``, ``diagnostics_``.
    """

    def __init__(self, eps=0.05, delta=0.1, beta_scale=1.0, regret_minimizer="policy_ucb",
                 policy_class: PolicyClass | None = None, prune=True, random_state=None):
        self.eps = eps
        self.delta = delta
        self.beta_scale = beta_scale
        self.regret_minimizer = regret_minimizer
        self.policy_class = policy_class
        self.prune = prune
        self.random_state = random_state

    def fit(self, mdp, offline: OfflineDataset | None = None):
        mdp = _check_mdp(mdp)
        pclass = _policy_class(mdp, self.policy_class, self.prune)
        env = EpisodicEnv(mdp, check_random_state(self.random_state))
        res = ftpedel(env, self.eps, self.delta, pclass, offline, beta_scale=self.beta_scale,
                      regmin=self.regret_minimizer)
        self.mdp_ = mdp
        self.policy_class_ = pclass
        self.policy_ = res.policy
        self.policy_index_ = res.index
        self.online_episodes_ = res.online_episodes
        self.diagnostics_ = res.diagnostics
        return self


class OfflineVerifier(_PolicyPredictor, BaseEstimator):
    """Certified learning from offline data only; ``policy_`` is None when coverage fails."""

    def __init__(self, eps=0.05, delta=0.1, beta_scale=1.0, policy_class: PolicyClass | None = None, prune=True):
        self.eps = eps
        self.delta = delta
        self.beta_scale = beta_scale
        self.policy_class = policy_class
        self.prune = prune

    def fit(self, mdp, offline: OfflineDataset):
        mdp = _check_mdp(mdp)
        pclass = _policy_class(mdp, self.policy_class, self.prune)
        self.mdp_ = mdp
        self.policy_, self.report_ = offline_verify(offline, mdp, pclass, self.eps, self.delta,
                                                    beta_scale=self.beta_scale)
        return self


class PolicyVerifier(BaseEstimator):
    """Decide whether a candidate policy is ``eps``-optimal; sets ``verdict_``."""

    def __init__(self, eps=0.05, delta=0.1, beta_scale=1.0, regret_minimizer="policy_ucb",
                 policy_class: PolicyClass | None = None, prune=True, random_state=None):
        self.eps = eps
        self.delta = delta
        self.beta_scale = beta_scale
        self.regret_minimizer = regret_minimizer
        self.policy_class = policy_class
        self.prune = prune
        self.random_state = random_state

    def fit(self, mdp, candidate: Policy, offline: OfflineDataset | None = None):
        mdp = _check_mdp(mdp)
        candidate.check_compatible(mdp)
        pclass = _policy_class(mdp, self.policy_class, self.prune)
        env = EpisodicEnv(mdp, check_random_state(self.random_state))
        self.verdict_ = verify_policy(env, offline, candidate, pclass, self.eps, self.delta,
                                      beta_scale=self.beta_scale, regmin=self.regret_minimizer)
        return self

    def predict(self, X=None):
        check_is_fitted(self, "verdict_")
        return self.verdict_.outcome


class CovariateDesigner(BaseEstimator):
    """Collect online covariates that cover ``targets`` at one step to resolution ``eps_exp``."""

    def __init__(self, eps_exp=0.01, delta=0.1, lam_floor=0.0, lam_reg=None, bootstrap=False,
                 regret_minimizer="policy_ucb", step=1, random_state=None):
        self.eps_exp = eps_exp
        self.delta = delta
        self.lam_floor = lam_floor
        self.lam_reg = lam_reg
        self.bootstrap = bootstrap
        self.regret_minimizer = regret_minimizer
        self.step = step
        self.random_state = random_state

    def fit(self, mdp, targets, offline_cov=None):
        mdp = _check_mdp(mdp)
        targets = check_array(np.atleast_2d(targets), dtype=float)
        if targets.shape[1] != mdp.d:
            raise ValueError(f"targets have {targets.shape[1]} columns, features have {mdp.d}")
        env = EpisodicEnv(mdp, check_random_state(self.random_state))
        lam_reg = 1.0 / mdp.d if self.lam_reg is None else self.lam_reg
        res = opt_cov(env, targets, self.eps_exp, self.delta, self.lam_floor, lam_reg, self.bootstrap,
                      step=self.step, offline=offline_cov, regmin=self.regret_minimizer,
                      basis=mdp.reachable_basis(self.step))
        self.result_ = res
        self.covariance_ = res.sigma + res.base
        self.episodes_ = res.episodes
        return self

    def transform(self, targets):
        """Coverage ``||phi||^2`` of each target under the collected covariates."""
        check_is_fitted(self, "covariance_")
        targets = check_array(np.atleast_2d(targets), dtype=float)
        return np.einsum("nd,dn->n", targets, np.linalg.solve(self.covariance_, targets.T))
