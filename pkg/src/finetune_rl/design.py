"""Online experiment design: smoothed-max coverage objective, online Frank-Wolfe
driven by a regret minimizer, and the doubling covariate collector built on it."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from ._validation import (
    BudgetExceededError,
    DimensionMismatchError,
    UnsatisfiableCoverageError,
    check_positive,
    check_random_state,
    min_eig,
)
from .mdp import (
    EpisodeBatch,
    LinearMdp,
    Policy,
    _rollout_markov,
    deterministic_actions,
    rollout,
    uniform_policy,
)
from .offline import TransitionStats
from .visitation import PolicyClass, covariance_best_response, enumerate_det_policies

MAX_ROUNDS = 40


class EpisodicEnv:
    """A simulator that charges every episode it runs to ``episodes``."""

    def __init__(self, mdp: LinearMdp, rng=None):
        self.mdp = mdp
        self.rng = check_random_state(rng)
        self.episodes = 0

    def run(self, policy: Policy, n: int) -> EpisodeBatch:
        n = int(n)
        self.episodes += n
        return rollout(self.mdp, policy, n, self.rng)

    def run_table(self, table: np.ndarray, n: int, det=None) -> EpisodeBatch:
        """Like :meth:`run` for a Markov policy given by its (H, S, A) table.

        ``det`` optionally supplies the (H, S) actions of a deterministic table.
        """
        n = int(n)
        self.episodes += n
        return _rollout_markov(self.mdp, table, n, self.rng, det)


def step_counts(batch: EpisodeBatch, mdp: LinearMdp, h: int) -> np.ndarray:
    return np.bincount(batch.states[:, h - 1] * mdp.A + batch.actions[:, h - 1], minlength=mdp.S * mdp.A)


def step_covariance(batch: EpisodeBatch, mdp: LinearMdp, h: int) -> np.ndarray:
    """Sum of ``phi phi^T`` over the step-``h`` records of a batch."""
    counts = step_counts(batch, mdp, h)
    phi = mdp.flat_features()
    return phi.T @ (counts[:, None] * phi)


# ------------------------------------------------------------------ objective


@dataclass
class DesignObjective:
    """Log-sum-exp smoothing of the worst coverage ``max_phi ||phi||^2_{A^{-1}}``.

    ``A(Lambda) = Lambda + (base + offline) / scale``.
    """

    targets: np.ndarray  # (n, d)
    eta: float
    scale: float
    base: np.ndarray
    offline: np.ndarray

    def __post_init__(self):
        self.targets = np.atleast_2d(np.asarray(self.targets, dtype=float))
        self.eta = check_positive(self.eta, "eta")
        self.scale = check_positive(self.scale, "scale")
        d = self.targets.shape[1]
        self.base = np.asarray(self.base, dtype=float)
        self.offline = np.asarray(self.offline, dtype=float)
        if self.base.shape != (d, d) or self.offline.shape != (d, d):
            raise DimensionMismatchError("offset matrices must be d x d with d matching the targets")
        self._offset = (self.base + self.offline) / self.scale

    def shifted(self, lam) -> np.ndarray:
        return np.asarray(lam, dtype=float) + self._offset

    def coverage(self, lam) -> np.ndarray:
        A = self.shifted(lam)
        sol = np.linalg.solve(A, self.targets.T)
        return np.einsum("nd,dn->n", self.targets, sol)


def objective_eval(obj: DesignObjective, lam) -> tuple[float, np.ndarray]:
    """Value and gradient of the design objective at ``lam``."""
    A = obj.shifted(lam)
    try:
        A_inv = np.linalg.inv(A)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("design matrix A(Lambda) is singular; add a positive offset") from exc
    Y = obj.targets @ A_inv  # rows: A^{-1} phi
    q = np.einsum("nd,nd->n", Y, obj.targets)
    z = obj.eta * q
    top = z.max()
    e = np.exp(z - top)
    total = e.sum()
    value = float((top + np.log(total)) / obj.eta)
    w = e / total
    grad = -(Y.T * w) @ Y
    return value, (grad + grad.T) / 2


# --------------------------------------------------------- regret minimizers


class RegretMinimizer:
    """Plays episodes against a step-``h`` reward ``phi^T G phi`` (values in [0, 1]).

    Subclasses implement :meth:`play`; internal statistics may persist
    across calls because every reward is a linear functional of the
    per-step feature second moments.
    """

    name = "base"

    def play(self, env: EpisodicEnv, h: int, G: np.ndarray, n: int) -> EpisodeBatch:
        raise NotImplementedError


class OraclePlanner(RegretMinimizer):
    """Zero-regret best response computed on the true dynamics.

    Uses knowledge a learner does not have; meant for validating the
    Frank-Wolfe layer, not for honest sample counts.
    """

    name = "oracle"

    def play(self, env, h, G, n):
        policy, _ = covariance_best_response(env.mdp, h, G)
        return env.run(policy, n)


class PolicyUCB(RegretMinimizer):
    """UCB over a finite class of Markov policies treated as arms.

    Each arm keeps per-step visit counts of its own episodes, so its mean
    under any quadratic reward ``phi^T G phi`` is available without replay.
    A call of ``n`` episodes is split into ``chunks`` UCB decisions.
    """

    name = "policy_ucb"

    def __init__(self, arms: PolicyClass, chunks: int = 2):
        self.arms = arms
        self.chunks = int(chunks)
        self._pulls = None
        self._visits = None
        self._tables = None
        self._det = None

    def _pull(self, env, k, n, out):
        mdp = env.mdp
        batch = env.run_table(self._tables[k], n, self._det[k])
        self._pulls[k] += n
        SA = mdp.S * mdp.A
        flat = (np.arange(mdp.H) * SA)[None, :] + batch.states * mdp.A + batch.actions
        self._visits[k] += np.bincount(flat.ravel(), minlength=mdp.H * SA).reshape(mdp.H, SA)
        out.append(batch)

    def play(self, env, h, G, n):
        mdp = env.mdp
        if self._pulls is None:
            self._tables = self.arms.tables(mdp)
            self._det = [deterministic_actions(t) for t in self._tables]
            self._pulls = np.zeros(len(self.arms))
            self._visits = np.zeros((len(self.arms), mdp.H, mdp.S * mdp.A))
        phi = mdp.flat_features()
        rewards = np.einsum("nd,de,ne->n", phi, G, phi)
        out: list[EpisodeBatch] = []
        remaining = n
        for k in np.flatnonzero(self._pulls == 0):
            if remaining == 0:
                break
            self._pull(env, int(k), 1, out)
            remaining -= 1
        size = max(1, math.ceil(remaining / self.chunks))
        while remaining > 0:
            m = min(size, remaining)
            means = self._visits[:, h - 1] @ rewards / self._pulls
            bonus = np.sqrt(2.0 * math.log(max(self._pulls.sum(), 2.0)) / self._pulls)
            k = int(np.argmax(means + bonus))
            self._pull(env, k, m, out)
            remaining -= m
        return _concat(out, mdp.H)


def _concat(batches, H) -> EpisodeBatch:
    if not batches:
        z = np.zeros((0, H), dtype=np.int64)
        return EpisodeBatch(z, z, np.zeros((0, H)), z)
    return EpisodeBatch(*(np.concatenate([getattr(b, f) for b in batches]) for f in ("states", "actions", "rewards", "next_states")))


def make_regret_minimizer(kind, mdp: LinearMdp, arms: PolicyClass | None = None) -> RegretMinimizer:
    if isinstance(kind, RegretMinimizer):
        return kind
    if kind == "oracle":
        return OraclePlanner()
    if kind == "policy_ucb":
        return PolicyUCB(arms if arms is not None else enumerate_det_policies(mdp, prune=True))
    raise ValueError(f"unknown regret minimizer {kind!r}; choose 'policy_ucb' or 'oracle'")


# ---------------------------------------------------------------- FW regret


@dataclass
class FWResult:
    lam: np.ndarray
    sigma: np.ndarray  # sum of collected step-h covariates, warm-up included
    stats: TransitionStats  # step-h records only
    episodes: int
    weights: np.ndarray  # FW weights on K^{-1} Gamma_0 .. K^{-1} Gamma_T
    gammas: list = field(default_factory=list)  # K^{-1} Gamma_t
    f_values: list = field(default_factory=list)


def fw_regret(env: EpisodicEnv, obj: DesignObjective, T: int, K: int, regmin: RegretMinimizer, rng=None,
              *, step: int = 1, keep_iterates: bool = False) -> FWResult:
    """Online Frank-Wolfe: each linearization is handed to ``regmin`` as a reward.

    A uniform warm-up of ``K`` episodes gives the first iterate; afterwards
    ``gamma_t = 1/(t+1)`` so the iterate stays the running average of the
    collected normalized covariates.
    """
    mdp = env.mdp
    if obj.targets.shape[1] != mdp.d:
        raise DimensionMismatchError(f"targets have dimension {obj.targets.shape[1]}, features {mdp.d}")
    T, K = int(T), int(K)
    if T < 0 or K < 1:
        raise ValueError("need T >= 0 iterates and K >= 1 episodes per iterate")
    stats = TransitionStats.zeros(mdp)
    start = env.episodes

    phi = mdp.flat_features()

    def collect(batch):
        stats.add_batch(batch, mdp, steps=[step])
        c = step_counts(batch, mdp, step)
        return phi.T @ (c[:, None] * phi)

    gamma0 = collect(env.run(uniform_policy(mdp), K))
    lam = gamma0 / K
    sigma = gamma0.copy()
    weights = np.array([1.0])
    gammas = [lam.copy()] if keep_iterates else []
    f_values = []
    for t in range(1, T + 1):
        f, grad = objective_eval(obj, lam)
        f_values.append(f)
        xi = -grad
        top = float(np.linalg.eigvalsh(xi)[-1])
        G = xi / top if top > 0 else np.zeros_like(xi)
        g = collect(regmin.play(env, step, G, K))
        sigma += g
        gamma = 1.0 / (t + 1)
        lam = (1 - gamma) * lam + gamma * g / K
        weights = np.append((1 - gamma) * weights, gamma)
        if keep_iterates:
            gammas.append(g / K)
    f_values.append(objective_eval(obj, lam)[0])
    return FWResult(lam, sigma, stats, env.episodes - start, weights, gammas, f_values)


# ------------------------------------------------------------------ OptCov


@dataclass
class OptCovResult:
    sigma: np.ndarray  # terminal-round covariates
    base: np.ndarray  # Lambda_0 used by the terminal round
    episodes: int
    stats: TransitionStats  # every step-h record collected, bootstrap included
    capped: bool = False
    rounds: int = 0
    trace: list = field(default_factory=list)  # (round, t, f, episodes)
    f_value: float = float("nan")

    def guarantee(self, targets, offline, eps_exp, lam_floor, basis=None) -> tuple[bool, float, float]:
        """Post-conditions: worst coverage and (subspace) min eigenvalue."""
        A = self.sigma + self.base + offline
        targets = np.atleast_2d(targets)
        worst = float(np.einsum("nd,dn->n", targets, np.linalg.solve(A, targets.T)).max()) if len(targets) else 0.0
        low = min_eig(A, basis)
        return (worst <= eps_exp * (1 + 1e-9) and low >= lam_floor * (1 - 1e-9)), worst, low


def _round_cost(i):
    return 4**i


def opt_cov(env: EpisodicEnv, targets, eps_exp: float, delta: float, lam_floor: float, lam_reg: float,
            bootstrap: bool, rng=None, *, step: int = 1, offline=None, regmin=None, budget=None,
            basis=None, max_rounds: int = MAX_ROUNDS) -> OptCovResult:
    """Doubling collector: round i runs FW with ``T_i = K_i = 2^i``, ``eta_i = 2^{2i/5}``.

    Stops once the smoothed objective certifies coverage ``eps_exp`` for all
    targets. ``budget`` caps the episodes this call may spend; a round that
    would overrun it is not started and the result comes back ``capped``.
    """
    eps_exp = check_positive(eps_exp, "eps_exp")
    mdp = env.mdp
    d = mdp.d
    targets = np.atleast_2d(np.asarray(targets, dtype=float)).reshape(-1, d)
    offline = np.zeros((d, d)) if offline is None else np.asarray(offline, dtype=float)
    regmin = make_regret_minimizer("policy_ucb" if regmin is None else regmin, mdp)
    start = env.episodes
    stats = TransitionStats.zeros(mdp)
    base = lam_reg * np.eye(d)
    if bootstrap:
        boot = conditioned_cov(env, 1, delta, lam_floor, rng, step=step, lam_reg=lam_reg, offline=offline,
                               regmin=regmin, budget=budget, basis=basis)
        stats = stats + boot.stats
        base = base + boot.sigma
        if boot.capped:
            return OptCovResult(np.zeros((d, d)), base, env.episodes - start, stats, True, 0, boot.trace)
    trace = []
    for i in range(1, max_rounds + 1):
        n_i = 2**i
        if budget is not None and env.episodes - start + _round_cost(i) > budget:
            return OptCovResult(np.zeros((d, d)), base, env.episodes - start, stats, True, i - 1, trace)
        obj = DesignObjective(targets, 2 ** (2 * i / 5), n_i * n_i, base, offline)
        fw = fw_regret(env, obj, n_i - 1, n_i, regmin, rng, step=step)
        stats = stats + fw.stats
        f = objective_eval(obj, fw.lam)[0]
        trace.extend((i, t, fv, env.episodes - start) for t, fv in enumerate(fw.f_values))
        if f <= n_i * n_i * eps_exp:
            return OptCovResult(fw.sigma, base, env.episodes - start, stats, False, i, trace, f)
    raise BudgetExceededError(f"coverage {eps_exp:.3g} not reached within {max_rounds} doubling rounds")


def conditioned_cov(env: EpisodicEnv, N: int, delta: float, lam_floor: float, rng=None, *, step: int = 1,
                    lam_reg: float | None = None, offline=None, regmin=None, budget=None, basis=None) -> OptCovResult:
    """Bootstrap covariates whose (subspace) minimum eigenvalue is at least ``lam_floor``.

    Runs the doubling collector on the basis directions with coverage
    ``1 / (k * max(lam_floor, d log(1/delta)))``; the trace of the inverse
    then bounds its top eigenvalue. With ``lam_floor == 0`` only ``N``
    uniform warm-up episodes are played. ``basis`` (d, k) restricts the
    requirement to a subspace; without it every feature direction must be
    reachable.
    """
    mdp = env.mdp
    d = mdp.d
    lam_reg = 1.0 / d if lam_reg is None else lam_reg
    lam_floor = check_positive(lam_floor, "lam_floor", strict=False)
    stats = TransitionStats.zeros(mdp)
    if lam_floor == 0:
        n = max(int(N), 1)
        if budget is not None and n > budget:
            return OptCovResult(np.zeros((d, d)), lam_reg * np.eye(d), 0, stats, True)
        batch = env.run(uniform_policy(mdp), n)
        stats.add_batch(batch, mdp, steps=[step])
        return OptCovResult(step_covariance(batch, mdp, step), lam_reg * np.eye(d), n, stats)
    if basis is None:
        reach = mdp.reachable_basis(step)
        if reach.shape[1] < d:
            raise UnsatisfiableCoverageError(
                f"features reachable at step {step} span {reach.shape[1]} of {d} dimensions; "
                "the minimum eigenvalue cannot be raised (largest achievable value is 0)"
            )
        basis = np.eye(d)
    basis = np.asarray(basis, dtype=float)
    k = basis.shape[1]
    target = max(lam_floor, d * math.log(1.0 / delta)) if 0 < delta < 1 else lam_floor
    res = opt_cov(env, basis.T, 1.0 / (k * target), delta, 0.0, lam_reg, False, rng, step=step,
                  offline=offline, regmin=regmin, budget=budget)
    return res


def write_trace(trace, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["round", "t", "f_value", "episodes"])
        for row in trace:
            w.writerow([row[0], row[1], repr(float(row[2])), row[3]])
