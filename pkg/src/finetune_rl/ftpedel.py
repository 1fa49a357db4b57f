"""Policy elimination with experiment design on mixed offline + online data."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from ._validation import BudgetExceededError, check_positive, check_probability, min_eig
from .design import EpisodicEnv, make_regret_minimizer, opt_cov
from .mdp import LinearMdp, Policy
from .offline import OfflineDataset, TransitionStats
from .visitation import PolicyClass, class_profiles, enumerate_det_policies

GLOBAL_CAP = 2**30
DIAGNOSTIC_COLUMNS = ["epoch", "step", "active", "episodes", "f_value", "max_coverage_ratio", "eliminated"]


def beta_threshold(H, d, T_off, T_bar, n_policies, epoch, delta, lam=None, scale=1.0) -> float:
    """Confidence radius used to set the per-epoch coverage target."""
    lam = 1.0 / d if lam is None else lam
    inner = d * math.log((lam + (T_off + T_bar) / d) / lam) + 2 * math.log(2 * H**2 * n_policies * epoch**2 / delta)
    return scale * H**4 * (2 * math.sqrt(inner) + math.sqrt(d * lam)) ** 2


def min_eig_floor(H, n_policies, epoch, delta) -> float:
    return math.log(4 * H**2 * n_policies * epoch**2 / delta)


def n_epochs(eps: float) -> int:
    return max(1, math.ceil(math.log2(4.0 / eps)))


# ----------------------------------------------------------------- estimators


def step_features(mdp: LinearMdp, tables: np.ndarray, h: int) -> np.ndarray:
    """``E_{a~pi_h(.|s)} phi(s, a)`` for every policy and state: shape (N, S, d)."""
    return np.einsum("nsa,sad->nsd", tables[:, h - 1], mdp.features)


def _reward_from_stats(stats: TransitionStats, h: int, lam: np.ndarray, mdp: LinearMdp) -> np.ndarray:
    return np.linalg.solve(lam, stats.feature_reward_sum(h, mdp))


def _propagate_from_stats(stats, h, lam, phi_hat, next_feats, mdp):
    """Apply the ridge transition estimate to a stack of step-h visitations."""
    W = np.linalg.solve(lam, stats.next_state_features(h, mdp).T)  # (d, S+1)
    coef = np.atleast_2d(phi_hat) @ W[:, : mdp.S]
    return np.einsum("ns,nsd->nd", coef, next_feats)


def estimate_reward(data_h: OfflineDataset, lam, mdp: LinearMdp) -> np.ndarray:
    """Ridge estimate ``lam^{-1} sum phi_tau r_tau`` from step-h records."""
    lam = np.asarray(lam, dtype=float)
    if len(data_h) == 0:
        return np.zeros(mdp.d)
    h = int(data_h.h[0])
    return _reward_from_stats(TransitionStats.from_dataset(data_h, mdp), h, lam, mdp)


def propagate_visitation(data_h: OfflineDataset, lam, policy: Policy, phi_hat, mdp: LinearMdp) -> np.ndarray:
    """One step of the estimated transition operator applied to ``phi_hat``."""
    if len(data_h) == 0:
        return np.zeros(mdp.d)
    h = int(data_h.h[0])
    if h >= mdp.H:
        raise ValueError("cannot propagate past the horizon")
    nxt = step_features(mdp, policy.table(mdp)[None], h + 1)
    stats = TransitionStats.from_dataset(data_h, mdp)
    return _propagate_from_stats(stats, h, np.asarray(lam, dtype=float), phi_hat, nxt, mdp)[0]


def eliminate(values, eps_l: float) -> np.ndarray:
    """Indices whose value is not strictly below ``max - 2 eps_l``."""
    values = np.asarray(values, dtype=float)
    return np.flatnonzero(~(values < values.max() - 2 * eps_l))


# -------------------------------------------------------------------- state


@dataclass
class EpochState:
    epoch: int
    eps: float
    beta: float
    active: np.ndarray  # indices into the policy class
    phi_hat: np.ndarray  # (N_active, H, d)
    theta_hat: np.ndarray  # (H, d)
    online_cov: np.ndarray  # (H, d, d), ridge included
    online_episodes: int

    @property
    def values(self) -> np.ndarray:
        return np.einsum("nhd,hd->n", self.phi_hat, self.theta_hat)


@dataclass
class SEResult:
    policy: Policy | None
    index: int | None
    online_episodes: int
    history: list = field(default_factory=list)  # EpochState per finished epoch
    diagnostics: list = field(default_factory=list)
    stopped: str = ""
    guarantee_checks: list = field(default_factory=list)


def _coverage(phis, A):
    if not len(phis):
        return 0.0
    return float(np.einsum("nd,dn->n", phis, np.linalg.solve(A, phis.T)).max())


def run_elimination(env: EpisodicEnv, eps, delta, pclass: PolicyClass, T_bar, offline: OfflineDataset, *,
                    beta_scale=1.0, regmin="policy_ucb", oracle=False, extra_targets=None,
                    epoch_hook=None) -> SEResult:
    """Shared epoch loop behind the learner and the policy verifier.

    ``epoch_hook(state, survivors)`` may return a (stopped, index) pair to end
    the run after an epoch's elimination. ``extra_targets(h)`` adds rows to
    the design targets at step h.
    """
    mdp = env.mdp
    H, d = mdp.H, mdp.d
    n_pol = len(pclass)
    tables = pclass.tables(mdp)
    feats = [step_features(mdp, tables, h) for h in range(1, H + 1)]
    offline.check_against(mdp)
    off_stats = TransitionStats.from_dataset(offline, mdp)
    T_off = int(max(off_stats.visits(h).sum() for h in range(1, H + 1)))
    off_cov = np.stack([off_stats.covariance(h, mdp) for h in range(1, H + 1)])
    exact = class_profiles(mdp, pclass).phi if oracle else None
    learner = make_regret_minimizer(regmin, mdp)
    ridge = np.eye(d) / d
    start = env.episodes
    active = np.arange(n_pol)
    result = SEResult(None, None, 0)

    for ell in range(1, n_epochs(eps) + 1):
        eps_l = 2.0**-ell
        beta = beta_threshold(H, d, T_off, T_bar, n_pol, ell, delta, scale=beta_scale)
        eps_exp = eps_l**2 / beta
        floor = min_eig_floor(H, n_pol, ell, delta)
        phi_hat = np.zeros((len(active), H, d))
        phi_hat[:, 0] = feats[0][active, mdp.s1]
        theta_hat = np.zeros((H, d))
        online_cov = np.zeros((H, d, d))
        rows = []
        result.stopped = ""
        for h in range(1, H + 1):
            basis = mdp.reachable_basis(h)
            targets = (exact[active, h - 1] if oracle else phi_hat[:, h - 1])
            if extra_targets is not None:
                targets = np.vstack([targets, extra_targets(h)])
            A_off = off_cov[h - 1] + ridge
            on_stats = TransitionStats.zeros(mdp)
            used = 0
            f_value = float("nan")
            ready = _coverage(targets, A_off) <= eps_exp and min_eig(A_off, basis) >= floor
            if not ready:
                remaining = T_bar - (env.episodes - start)
                res = opt_cov(env, targets, eps_exp, delta / (2 * H * ell**2), floor, 1.0 / d, True,
                              step=h, offline=off_cov[h - 1], regmin=learner, budget=max(remaining, 0),
                              basis=basis)
                used = res.episodes
                on_stats = res.stats
                f_value = res.f_value
                if res.capped:
                    result.stopped = "budget"
                    break
                result.guarantee_checks.append(
                    res.guarantee(targets, off_cov[h - 1], eps_exp, floor, basis)[0])
            if env.episodes - start >= T_bar:
                result.stopped = "budget"
                break
            lam = on_stats.covariance(h, mdp) + ridge + off_cov[h - 1]
            online_cov[h - 1] = on_stats.covariance(h, mdp) + ridge
            stats = on_stats + _step_only(off_stats, h)
            theta_hat[h - 1] = _reward_from_stats(stats, h, lam, mdp)
            if h < H:
                phi_hat[:, h] = _propagate_from_stats(stats, h, lam, phi_hat[:, h - 1], feats[h][active], mdp)
            rows.append({
                "epoch": ell, "step": h, "active": len(active), "episodes": used, "f_value": f_value,
                "max_coverage_ratio": _coverage(targets, lam) / eps_exp, "eliminated": 0,
            })
        if result.stopped:
            result.diagnostics.extend(rows)
            break
        state = EpochState(ell, eps_l, beta, active.copy(), phi_hat, theta_hat, online_cov, env.episodes - start)
        keep = eliminate(state.values, eps_l)
        for r in rows:
            r["eliminated"] = len(active) - len(keep)
        result.diagnostics.extend(rows)
        result.history.append(state)
        survivors = active[keep]
        vals = state.values[keep]
        if epoch_hook is not None:
            verdict = epoch_hook(state, survivors)
            if verdict is not None:
                result.stopped, result.index = verdict
                break
        active = survivors
        if len(active) == 1:
            result.index = int(active[0])
            result.stopped = "single"
            break
        # highest estimated value, then lowest index
        result.index = int(active[np.lexsort((active, -vals))[0]])
        result.stopped = "epochs"

    result.online_episodes = env.episodes - start
    if result.stopped == "budget":
        result.index = None
    result.policy = None if result.index is None else pclass[result.index]
    return result


def _step_only(stats: TransitionStats, h: int) -> TransitionStats:
    out = TransitionStats(np.zeros_like(stats.counts), np.zeros_like(stats.reward_sum))
    out.counts[h - 1] = stats.counts[h - 1]
    out.reward_sum[h - 1] = stats.reward_sum[h - 1]
    return out


def ftpedel_se(env: EpisodicEnv, eps, delta, pclass: PolicyClass, T_bar, offline: OfflineDataset | None = None,
               rng=None, **kwargs) -> SEResult:
    """One elimination run under an online budget ``T_bar``; ``policy`` is None on budget exit."""
    eps = check_positive(eps, "eps")
    delta = check_probability(delta, "delta")
    offline = OfflineDataset.empty() if offline is None else offline
    return run_elimination(env, eps, delta, pclass, int(T_bar), offline, **kwargs)


@dataclass
class FTPedelResult:
    policy: Policy
    index: int
    online_episodes: int
    attempts: int
    diagnostics: list
    history: list
    guarantee_checks: list = field(default_factory=list)  # opt_cov post-conditions, every attempt


def ftpedel(env: EpisodicEnv, eps, delta, pclass: PolicyClass | None = None, offline: OfflineDataset | None = None,
            rng=None, *, cap: int = GLOBAL_CAP, **kwargs) -> FTPedelResult:
    """Budget doubling around :func:`ftpedel_se`: attempt i gets ``2^i`` episodes and ``delta / (2 i^2)``."""
    pclass = enumerate_det_policies(env.mdp, prune=True) if pclass is None else pclass
    start = env.episodes
    diagnostics, checks = [], []
    i = 0
    while True:
        i += 1
        if 2**i > cap:
            raise BudgetExceededError(f"online episode cap {cap} reached after {env.episodes - start} episodes")
        res = ftpedel_se(env, eps, delta / (2 * i * i), pclass, 2**i, offline, rng, **kwargs)
        for row in res.diagnostics:
            diagnostics.append({"attempt": i, **row})
        checks.extend(res.guarantee_checks)
        if res.policy is not None:
            return FTPedelResult(res.policy, res.index, env.episodes - start, i, diagnostics, res.history, checks)


def write_diagnostics(rows, path) -> None:
    cols = (["attempt"] if rows and "attempt" in rows[0] else []) + DIAGNOSTIC_COLUMNS
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow(r)
