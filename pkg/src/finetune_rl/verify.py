"""Verification: offline-only certified learning, coverage diagnostics, verifying a
candidate policy with extra online data, and finite covers of softmax classes."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from ._validation import BudgetExceededError, check_positive, check_probability, min_eig
from .design import EpisodicEnv
from .ftpedel import (
    _propagate_from_stats,
    _reward_from_stats,
    beta_threshold,
    eliminate,
    min_eig_floor,
    n_epochs,
    run_elimination,
    step_features,
)
from .mdp import LinearMdp, Policy, SoftmaxPolicy
from .offline import OfflineDataset, StepCovariates, TransitionStats
from .visitation import ClassProfiles, PolicyClass

COVER_CAP = 10**6
VERIFY_CAP = 2**26


@dataclass
class CoverageReport:
    """Outcome of the offline coverage test, one entry per checked (epoch, step)."""

    passed: bool
    checks: list = field(default_factory=list)  # dicts: epoch, step, coverage_ok, min_eig_ok, ...
    worst: dict | None = None  # first failing check of the failing epoch
    weak_directions: list = field(default_factory=list)  # (step, feature index) below the floor

    def to_dict(self) -> dict:
        return {"passed": self.passed, "checks": self.checks, "worst": self.worst,
                "weak_directions": [list(map(int, w)) for w in self.weak_directions]}


def _weak_directions(A, basis, floor):
    """Coordinates of basis directions whose Rayleigh quotient is below ``floor``."""
    vals = np.einsum("dk,de,ek->k", basis, A, basis)
    out = []
    for k in np.flatnonzero(vals < floor):
        out.append(int(np.argmax(np.abs(basis[:, k]))))
    return out


def offline_verify(offline: OfflineDataset, mdp: LinearMdp, pclass: PolicyClass, eps, delta, *,
                   beta_scale: float = 1.0) -> tuple[Policy | None, CoverageReport]:
    """Certified learning from offline data alone.

    Estimates are formed once with ridge ``1/d``; each epoch first checks that
    the data covers every active policy to the epoch's resolution and that
    the covariates are well conditioned on the reachable directions. Any
    failed check returns ``None`` together with the report.
    """
    eps = check_positive(eps, "eps")
    delta = check_probability(delta, "delta")
    H, d, n_pol = mdp.H, mdp.d, len(pclass)
    offline.check_against(mdp)
    stats = TransitionStats.from_dataset(offline, mdp)
    T_off = int(max(stats.visits(h).sum() for h in range(1, H + 1)))
    tables = pclass.tables(mdp)
    ridge = np.eye(d) / d
    lams = [stats.covariance(h, mdp) + ridge for h in range(1, H + 1)]
    phi_hat = np.zeros((n_pol, H, d))
    phi_hat[:, 0] = step_features(mdp, tables, 1)[:, mdp.s1]
    theta_hat = np.zeros((H, d))
    for h in range(1, H + 1):
        theta_hat[h - 1] = _reward_from_stats(stats, h, lams[h - 1], mdp)
        if h < H:
            phi_hat[:, h] = _propagate_from_stats(stats, h, lams[h - 1], phi_hat[:, h - 1],
                                                  step_features(mdp, tables, h + 1), mdp)
    values = np.einsum("nhd,hd->n", phi_hat, theta_hat)

    report = CoverageReport(True)
    active = np.arange(n_pol)
    for ell in range(1, n_epochs(eps) + 1):
        eps_l = 2.0**-ell
        beta = beta_threshold(H, d, T_off, 0, n_pol, ell, delta, scale=beta_scale)
        floor = min_eig_floor(H, n_pol, ell, delta)
        failed = []
        for h in range(1, H + 1):
            A = lams[h - 1]
            basis = mdp.reachable_basis(h)
            norms = np.einsum("nd,dn->n", phi_hat[active, h - 1], np.linalg.solve(A, phi_hat[active, h - 1].T))
            i = int(np.argmax(norms))
            low = min_eig(A, basis)
            check = {
                "epoch": ell, "step": h,
                "coverage_ok": bool(norms[i] <= eps_l**2 / beta),
                "min_eig_ok": bool(low >= floor),
                "worst_policy": int(active[i]), "worst_coverage": float(norms[i]),
                "coverage_target": eps_l**2 / beta, "min_eig": float(low), "min_eig_floor": floor,
            }
            report.checks.append(check)
            if not (check["coverage_ok"] and check["min_eig_ok"]):
                failed.append(check)
                report.weak_directions += [(h, j) for j in _weak_directions(A, basis, floor)]
        if failed:
            # every step of the failing epoch is reported, not only the first
            report.passed = False
            report.worst = failed[0]
            return None, report
        keep = eliminate(values[active], eps_l)
        active = active[keep]
        if len(active) == 1:
            break
    best = active[np.lexsort((active, -values[active]))[0]]
    return pclass[int(best)], report


# ------------------------------------------------------- coverage condition


def default_verifiability_beta(d, H, T_off, eps, delta, c: float = 1.0) -> float:
    """``d H^5 logs(...) + c log(1/delta)`` with ``logs`` taken as a single log of the product."""
    logs = math.log(max(d * H * max(T_off, 1) / eps * max(math.log(1 / delta), 1.0), math.e))
    return d * H**5 * logs + c * math.log(1 / delta)


@dataclass
class VerifiabilityMargins:
    ok: bool
    coverage_margin: np.ndarray  # per step: 1/beta - worst gap-weighted coverage
    eigen_margin: np.ndarray  # per step: lambda_min - d^2 beta / H^2
    worst_policy: np.ndarray  # per step

    @property
    def coverage_ok(self) -> bool:
        return bool((self.coverage_margin >= 0).all())

    @property
    def eigen_ok(self) -> bool:
        return bool((self.eigen_margin >= 0).all())

    def to_dict(self) -> dict:
        return {"ok": self.ok, "coverage_ok": self.coverage_ok, "eigen_ok": self.eigen_ok,
                "coverage_margin": self.coverage_margin.tolist(), "eigen_margin": self.eigen_margin.tolist(),
                "worst_policy": self.worst_policy.tolist()}


def check_verifiability_condition(cov: StepCovariates, profiles: ClassProfiles, eps, beta, *,
                                  basis=None) -> VerifiabilityMargins:
    """Evaluate both coverage clauses on exact visitations.

    Singular covariates should be regularized by the caller (ridge ``1/d``).
    ``basis`` optionally maps a step to the subspace used for the eigenvalue
    clause.
    """
    eps = check_positive(eps, "eps")
    beta = check_positive(beta, "beta")
    H, N, d = profiles.phi.shape[1], profiles.phi.shape[0], profiles.phi.shape[2]
    den = np.maximum(profiles.gaps, eps) ** 2
    cm, em, worst = np.zeros(H), np.zeros(H), np.zeros(H, dtype=int)
    for h in range(1, H + 1):
        x = profiles.phi[:, h - 1]
        ratio = np.einsum("nd,dn->n", x, np.linalg.solve(cov[h], x.T)) / den
        worst[h - 1] = int(np.argmax(ratio))
        cm[h - 1] = 1.0 / beta - ratio[worst[h - 1]]
        U = basis(h) if callable(basis) else basis
        em[h - 1] = min_eig(cov[h], U) - d**2 / H**2 * beta
    return VerifiabilityMargins(bool((cm >= 0).all() and (em >= 0).all()), cm, em, worst)


# ------------------------------------------------------- policy verification


@dataclass
class VerificationVerdict:
    outcome: str  # certified | refuted | budget-exhausted
    online_episodes: int
    eps_ver: float
    witness: Policy | None = None
    epochs: int = 0
    attempts: int = 0

    def to_dict(self) -> dict:
        return {"outcome": self.outcome, "online_episodes": self.online_episodes, "eps_ver": self.eps_ver,
                "witness": None if self.witness is None else self.witness.to_dict(),
                "epochs": self.epochs, "attempts": self.attempts}


def verify_policy(env: EpisodicEnv, offline: OfflineDataset | None, candidate: Policy, pclass: PolicyClass,
                  eps, delta, rng=None, *, beta_scale: float = 1.0, regmin="policy_ucb",
                  cap: int = VERIFY_CAP) -> VerificationVerdict:
    """Decide whether ``candidate`` is ``eps``-optimal within ``pclass``.

    Runs the elimination loop over the class plus the candidate under a
    doubling online budget. After each epoch the candidate is certified when
    its estimated gap leaves room for the confidence width
    (``max V - V_cand <= eps - 2 eps_l``, or it is the sole survivor, or
    ``4 eps_l <= eps``), and refuted as soon as it is eliminated.
    """
    eps = check_positive(eps, "eps")
    delta = check_probability(delta, "delta")
    offline = OfflineDataset.empty() if offline is None else offline
    members = list(pclass)
    try:
        j = members.index(candidate)
        full = pclass
    except ValueError:
        full = pclass.with_member(candidate)
        j = len(members)
    start = env.episodes
    eps_ver = eps
    i = 0
    while True:
        i += 1
        if 2**i > cap:
            return VerificationVerdict("budget-exhausted", env.episodes - start, eps_ver, attempts=i - 1)
        state_box = {}

        def hook(state, survivors, j=j):
            pos = np.flatnonzero(state.active == j)
            vals = state.values
            top = int(state.active[np.argmax(vals)])
            if pos.size == 0 or j not in survivors:
                return "refuted", top
            gap = float(vals.max() - vals[pos[0]])
            state_box["eps_ver"] = max(eps, gap - 2 * state.eps)
            if gap <= eps - 2 * state.eps or 4 * state.eps <= eps or list(survivors) == [j]:
                return "certified", j
            return None

        res = run_elimination(env, eps, delta / (2 * i * i), full, 2**i, offline,
                              beta_scale=beta_scale, regmin=regmin, epoch_hook=hook)
        eps_ver = state_box.get("eps_ver", eps_ver)
        if res.stopped == "certified":
            return VerificationVerdict("certified", env.episodes - start, eps_ver, None, len(res.history), i)
        if res.stopped == "refuted":
            return VerificationVerdict("refuted", env.episodes - start, eps_ver, full[res.index],
                                       len(res.history), i)
        if res.stopped != "budget":
            # epochs ran out or a single survivor other than the hook's verdict
            outcome = "certified" if res.index == j else "refuted"
            return VerificationVerdict(outcome, env.episodes - start, eps_ver,
                                       None if outcome == "certified" else full[res.index], len(res.history), i)


# ------------------------------------------------------------------- covers


def cover_softmax_class(eta: float, box, gamma: float, d: int, H: int, *, cap: int = COVER_CAP) -> PolicyClass:
    """Grid of softmax policies whose per-state mean features are ``gamma``-close to any box member.

    Adjacent grid points are ``gamma / (2 eta sqrt(H))`` apart in each
    coordinate of the (H, d) weight array. For ``gamma >= 2`` the box centre
    alone suffices since mean features have diameter at most 2.
    """
    eta = check_positive(eta, "eta")
    gamma = check_positive(gamma, "gamma")
    lo, hi = float(box[0]), float(box[1])
    if hi < lo:
        raise ValueError("weight box must satisfy low <= high")
    if gamma >= 2:
        return PolicyClass([SoftmaxPolicy(np.full((H, d), (lo + hi) / 2), eta)], label="softmax_grid")
    spacing = gamma / (2 * eta * math.sqrt(H))
    n = int(math.floor((hi - lo) / spacing + 1e-9)) + 1
    axis = lo + spacing * np.arange(n)
    if axis[-1] < hi - 1e-12:
        axis = np.append(axis, hi)
    count = len(axis) ** (d * H)
    if count > cap:
        raise BudgetExceededError(f"softmax cover needs {count} policies, above the cap {cap}")
    members = [SoftmaxPolicy(np.array(p).reshape(H, d), eta) for p in itertools.product(axis, repeat=d * H)]
    return PolicyClass(members, label="softmax_grid")
