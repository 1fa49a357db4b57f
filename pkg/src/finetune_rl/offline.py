"""Offline datasets, step covariates and the coverage coefficients built on them."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from ._validation import (
    UnsatisfiableCoverageError,
    check_positive,
    check_random_state,
)
from .mdp import EpisodeBatch, LinearMdp, MixturePolicy, Policy, rollout
from .visitation import ClassProfiles, PolicyClass, class_profiles, covariance_best_response

T_CAP = 2**40


@dataclass
class OfflineDataset:
    """Step-tagged transitions ``(h, s, a, r, s')`` stored column-wise.

    Records need not form full trajectories. ``h`` is 1-based.
    """

    h: np.ndarray
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    sp: np.ndarray
    source_note: str = ""

    def __post_init__(self):
        self.h = np.asarray(self.h, dtype=np.int16)
        self.s = np.asarray(self.s, dtype=np.int32)
        self.a = np.asarray(self.a, dtype=np.int32)
        self.r = np.asarray(self.r, dtype=float)
        self.sp = np.asarray(self.sp, dtype=np.int32)
        n = len(self.h)
        if any(len(col) != n for col in (self.s, self.a, self.r, self.sp)):
            raise ValueError("dataset columns have different lengths")
        if n and ((self.r < 0).any() or (self.r > 1).any()):
            raise ValueError("rewards must lie in [0, 1]")
        if n and (self.h < 1).any():
            raise ValueError("steps are 1-based")

    def __len__(self):
        return len(self.h)

    @classmethod
    def empty(cls, note: str = "") -> "OfflineDataset":
        z = np.zeros(0)
        return cls(z, z, z, z, z, note)

    @classmethod
    def from_batch(cls, batch: EpisodeBatch, steps=None, note: str = "") -> "OfflineDataset":
        """Flatten episodes, optionally keeping only the listed (1-based) steps."""
        H = batch.states.shape[1]
        cols = list(range(H)) if steps is None else [h - 1 for h in steps]
        hh = np.broadcast_to(np.array(cols) + 1, (batch.n, len(cols)))
        return cls(
            hh.reshape(-1),
            batch.states[:, cols].reshape(-1),
            batch.actions[:, cols].reshape(-1),
            batch.rewards[:, cols].reshape(-1),
            batch.next_states[:, cols].reshape(-1),
            note,
        )

    def concat(self, other: "OfflineDataset") -> "OfflineDataset":
        return OfflineDataset(
            *(np.concatenate([getattr(self, c), getattr(other, c)]) for c in ("h", "s", "a", "r", "sp")),
            source_note=self.source_note,
        )

    def at_step(self, h: int) -> "OfflineDataset":
        m = self.h == h
        return OfflineDataset(self.h[m], self.s[m], self.a[m], self.r[m], self.sp[m], self.source_note)

    def check_against(self, mdp: LinearMdp) -> None:
        if not len(self):
            return
        if self.h.max() > mdp.H or self.s.max() >= mdp.S or self.a.max() >= mdp.A or self.sp.max() > mdp.S:
            raise ValueError("dataset indices fall outside the MDP's state/action/step ranges")

    def to_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for row in zip(self.h.tolist(), self.s.tolist(), self.a.tolist(), self.r.tolist(), self.sp.tolist()):
                fh.write(json.dumps(dict(zip(("h", "s", "a", "r", "sp"), row))) + "\n")

    @classmethod
    def from_jsonl(cls, path, note: str = "") -> "OfflineDataset":
        rows = []
        with open(path) as fh:
            for line in fh:
                if line.strip():
                    rec = json.loads(line)
                    rows.append((rec["h"], rec["s"], rec["a"], rec["r"], rec["sp"]))
        if not rows:
            return cls.empty(note)
        return cls(*map(np.array, zip(*rows)), source_note=note)


def generate_offline(mdp: LinearMdp, logging_policy, n_episodes: int, rng) -> OfflineDataset:
    """Roll out a logging policy and flatten the episodes into records.

    ``logging_policy`` may also be a list of policies, played round-robin
    (episode k uses entry ``k % len``); that gives deterministic logging
    schedules.
    """
    rng = check_random_state(rng)
    n_episodes = int(n_episodes)
    if n_episodes == 0:
        return OfflineDataset.empty("empty")
    if isinstance(logging_policy, Policy):
        batch = rollout(mdp, logging_policy, n_episodes, rng)
        return OfflineDataset.from_batch(batch, note=f"{n_episodes} episodes of {logging_policy.kind} logging")
    schedule = list(logging_policy)
    parts = []
    for k, pol in enumerate(schedule):
        count = len(range(k, n_episodes, len(schedule)))
        if count:
            parts.append(OfflineDataset.from_batch(rollout(mdp, pol, count, rng)))
    data = parts[0]
    for p in parts[1:]:
        data = data.concat(p)
    data.source_note = f"{n_episodes} episodes of a {len(schedule)}-policy logging schedule"
    return data


# ------------------------------------------------------ sufficient statistics


@dataclass
class TransitionStats:
    """Per-step tabular sufficient statistics of a set of records.

    ``counts[h-1, s*A + a, s']`` counts transitions (with the sentinel as the
    last column) and ``reward_sum[h-1, s*A + a]`` sums rewards. All ridge
    estimators in this package are functions of these arrays.
    """

    counts: np.ndarray  # (H, S*A, S+1)
    reward_sum: np.ndarray  # (H, S*A)

    @classmethod
    def zeros(cls, mdp: LinearMdp) -> "TransitionStats":
        return cls(np.zeros((mdp.H, mdp.S * mdp.A, mdp.S + 1)), np.zeros((mdp.H, mdp.S * mdp.A)))

    @classmethod
    def from_dataset(cls, data: OfflineDataset, mdp: LinearMdp) -> "TransitionStats":
        stats = cls.zeros(mdp)
        stats.add_records(data.h, data.s, data.a, data.r, data.sp, mdp)
        return stats

    def add_records(self, h, s, a, r, sp, mdp: LinearMdp) -> None:
        SA = mdp.S * mdp.A
        row = (np.asarray(h, dtype=np.int64) - 1) * SA + np.asarray(s, dtype=np.int64) * mdp.A + np.asarray(a, dtype=np.int64)
        flat = row * (mdp.S + 1) + np.asarray(sp, dtype=np.int64)
        self.counts += np.bincount(flat, minlength=self.counts.size).reshape(self.counts.shape)
        self.reward_sum += np.bincount(row, weights=np.asarray(r, dtype=float), minlength=self.reward_sum.size).reshape(self.reward_sum.shape)

    def add_batch(self, batch: EpisodeBatch, mdp: LinearMdp, steps=None) -> None:
        cols = range(batch.states.shape[1]) if steps is None else [h - 1 for h in steps]
        for c in cols:
            self.add_records(
                np.full(batch.n, c + 1), batch.states[:, c], batch.actions[:, c],
                batch.rewards[:, c], batch.next_states[:, c], mdp,
            )

    def __add__(self, other: "TransitionStats") -> "TransitionStats":
        return TransitionStats(self.counts + other.counts, self.reward_sum + other.reward_sum)

    def visits(self, h: int) -> np.ndarray:
        return self.counts[h - 1].sum(axis=1)

    def covariance(self, h: int, mdp: LinearMdp) -> np.ndarray:
        phi = mdp.flat_features()
        return phi.T @ (self.visits(h)[:, None] * phi)

    def feature_reward_sum(self, h: int, mdp: LinearMdp) -> np.ndarray:
        return mdp.flat_features().T @ self.reward_sum[h - 1]

    def next_state_features(self, h: int, mdp: LinearMdp) -> np.ndarray:
        """(S+1, d) matrix whose row s' sums ``phi(s_tau, a_tau)`` over records landing in s'."""
        return self.counts[h - 1].T @ mdp.flat_features()

    @property
    def n_records(self) -> int:
        return int(self.counts.sum())


# ------------------------------------------------------------- covariates


@dataclass
class StepCovariates:
    """``matrices[h-1] = sum_{tau: h(tau)=h} phi phi^T + ridge * I``."""

    matrices: np.ndarray  # (H, d, d)
    ridge: float = 0.0

    def __getitem__(self, h: int) -> np.ndarray:
        return self.matrices[h - 1]

    @property
    def H(self) -> int:
        return self.matrices.shape[0]

    def to_dict(self) -> dict:
        return {"ridge": self.ridge, "matrices": self.matrices.tolist()}


def offline_covariates(data: OfflineDataset, mdp: LinearMdp, ridge: float = 0.0) -> StepCovariates:
    ridge = check_positive(ridge, "ridge", strict=False)
    stats = TransitionStats.from_dataset(data, mdp)
    mats = np.stack([stats.covariance(h, mdp) + ridge * np.eye(mdp.d) for h in range(1, mdp.H + 1)])
    return StepCovariates(mats, ridge)


def _inv_quad(x: np.ndarray, M: np.ndarray) -> np.ndarray:
    """Row-wise ``x_i^T M^{-1} x_i`` for x of shape (n, d) (or (d,))."""
    sol = np.linalg.solve(M, np.atleast_2d(x).T)
    return np.einsum("nd,dn->n", np.atleast_2d(x), sol)


def _require_invertible(M, what):
    eig = np.linalg.eigvalsh(M)
    if eig[0] <= 1e-12 * max(1.0, eig[-1]):
        raise np.linalg.LinAlgError(
            f"{what} is singular (min eigenvalue {eig[0]:.3g}); use a positive ridge or richer data"
        )


def concentrability(phis, cov: StepCovariates) -> float:
    """``sum_h ||phi_{pi,h}||_{(Lambda_off^h)^{-1}}`` for per-step features ``phis`` (H, d)."""
    phis = np.asarray(getattr(phis, "phi", phis), dtype=float)
    total = 0.0
    for h in range(1, cov.H + 1):
        _require_invertible(cov[h], f"offline covariates at step {h}")
        total += float(np.sqrt(max(_inv_quad(phis[h - 1], cov[h])[0], 0.0)))
    return total


# --------------------------------------------- offline-to-online concentrability


@dataclass
class O2OResult:
    value: float
    lower_bound: float
    mixture: MixturePolicy | None
    covariance: np.ndarray | None
    iterations: int = 0
    trace: list[float] = field(default_factory=list)


def _o2o_terms(profiles: ClassProfiles, h: int, eps: float):
    x = profiles.phi[:, h - 1]
    den = np.maximum(profiles.gaps, eps) ** 2
    # identical (x, den) pairs contribute identical terms
    key = np.round(np.column_stack([x, den]), 12)
    _, first = np.unique(key, axis=0, return_index=True)
    first = np.sort(first)
    return x[first], den[first]


def _polish(atoms, x, den, T, B):
    """Minimize the max-term over the convex hull of the discovered atoms."""
    k = len(atoms)
    if k < 2:
        return None
    L = np.stack(atoms)

    def values(w):
        M = T * np.tensordot(w, L, axes=1) + B
        Y = np.linalg.solve(M, x.T)  # (d, n)
        return np.einsum("nd,dn->n", x, Y) / den, Y

    def objective(z):
        return z[-1]

    def obj_grad(z):
        g = np.zeros_like(z)
        g[-1] = 1.0
        return g

    def cons(z):
        q, _ = values(np.clip(z[:-1], 0, None))
        return z[-1] - q

    def cons_jac(z):
        _, Y = values(np.clip(z[:-1], 0, None))
        # d q_n / d w_k = -T y_n^T L_k y_n / den_n
        dq = -T * np.einsum("dn,kde,en->nk", Y, L, Y) / den[:, None]
        return np.column_stack([-dq, np.ones(len(den))])

    w0 = np.full(k, 1.0 / k)
    z0 = np.append(w0, values(w0)[0].max())
    res = minimize(
        objective, z0, jac=obj_grad, method="SLSQP",
        bounds=[(0.0, 1.0)] * k + [(0.0, None)],
        constraints=[
            {"type": "ineq", "fun": cons, "jac": cons_jac},
            {"type": "eq", "fun": lambda z: z[:-1].sum() - 1.0, "jac": lambda z: np.append(np.ones(k), 0.0)},
        ],
        options={"maxiter": 300, "ftol": 1e-12},
    )
    w = np.clip(res.x[:-1], 0, None)
    if not np.isfinite(w).all() or w.sum() <= 0:
        return None
    return w / w.sum()


def c_o2o(
    mdp: LinearMdp,
    cov: StepCovariates,
    pclass: PolicyClass,
    eps: float,
    T: float,
    h: int,
    fw_iters: int = 500,
    *,
    tol: float = 1e-6,
    profiles: ClassProfiles | None = None,
    polish: bool = True,
) -> O2OResult:
    """Offline-to-online concentrability at step ``h`` over a finite class.

    Minimizes ``max_pi ||phi_pi||^2_{(T Lambda + B)^{-1}} / max(gap_pi, eps)^2``
    over the covariance set with Frank-Wolfe (step ``2/(t+2)``, subgradient
    of the lowest-index maximizing term). The optimum over the class is the
    value reference for gaps. The returned value is always attained by a
    feasible mixture, so it upper-bounds the infimum; ``lower_bound`` is the
    best certified lower bound from the linearizations.
    """
    eps = check_positive(eps, "eps")
    T = check_positive(T, "T", strict=False)
    profiles = class_profiles(mdp, pclass) if profiles is None else profiles
    x, den = _o2o_terms(profiles, h, eps)
    B = cov[h]

    if T == 0:
        _require_invertible(B, f"offline covariates at step {h}")
        value = float((_inv_quad(x, B) / den).max())
        return O2OResult(value, value, None, None)

    def evaluate(lam):
        M = T * lam + B
        Y = np.linalg.solve(M, x.T)
        q = np.einsum("nd,dn->n", x, Y) / den
        return q, Y

    pol, lam = covariance_best_response(mdp, h, np.eye(mdp.d))
    atoms = {pol: 1.0}
    atom_cov = {pol: lam}
    best = (np.inf, None, None)
    lower = -np.inf
    trace = []
    t = 0
    for t in range(fw_iters):
        q, Y = evaluate(lam)
        i = int(np.argmax(q))
        g_val = float(q[i])
        trace.append(g_val)
        if g_val < best[0]:
            best = (g_val, lam.copy(), dict(atoms))
        y = Y[:, i]
        G = T * np.outer(y, y) / den[i]
        vertex, vcov = covariance_best_response(mdp, h, G)
        # convexity: g* >= g(lam) - <G, Lambda_v - lam>
        lower = max(lower, g_val - float(np.sum(G * (vcov - lam))))
        if best[0] - max(lower, 0.0) <= tol * best[0]:
            break
        gamma = 2.0 / (t + 2)
        lam = (1 - gamma) * lam + gamma * vcov
        atoms = {p: (1 - gamma) * w for p, w in atoms.items()}
        atoms[vertex] = atoms.get(vertex, 0.0) + gamma
        atom_cov[vertex] = vcov

    value, lam_best, weights = best
    if polish and len(atom_cov) > 1:
        keys = list(atom_cov)
        w = _polish([atom_cov[p] for p in keys], x, den, T, B)
        if w is not None:
            cand = np.tensordot(w, np.stack([atom_cov[p] for p in keys]), axes=1)
            cand_val = float(evaluate(cand)[0].max())
            if cand_val < value:
                value, lam_best = cand_val, cand
                weights = {p: wi for p, wi in zip(keys, w) if wi > 0}
    ws = np.array(list(weights.values()))
    mixture = MixturePolicy(ws / ws.sum(), list(weights))
    return O2OResult(value, max(lower, 0.0), mixture, lam_best, t + 1, trace)


def t_o2o(
    mdp: LinearMdp,
    cov: StepCovariates,
    pclass: PolicyClass,
    eps: float,
    beta: float,
    h: int,
    fw_iters: int = 500,
    *,
    profiles: ClassProfiles | None = None,
    min_eig_basis=None,
) -> int:
    """Smallest integer T with ``c_o2o(T) <= 1/beta`` (0 when offline data suffices).

    Exponential search for a bracket, then integer bisection.
    """
    beta = check_positive(beta, "beta")
    profiles = class_profiles(mdp, pclass) if profiles is None else profiles
    target = 1.0 / beta

    def value(T):
        try:
            return c_o2o(mdp, cov, pclass, eps, T, h, fw_iters, profiles=profiles).value
        except np.linalg.LinAlgError:
            return np.inf

    if value(0) <= target:
        return 0
    hi = 1
    while value(hi) > target:
        hi *= 2
        if hi > T_CAP:
            from .visitation import max_min_eig

            lam = max_min_eig(mdp, h, iters=100, basis=min_eig_basis).lambda_min
            raise UnsatisfiableCoverageError(
                f"no T <= 2^40 reaches C_o2o <= 1/beta at step {h}; "
                f"largest achievable min eigenvalue there is {lam:.3g}"
            )
    lo = hi // 2
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if value(mid) <= target:
            hi = mid
        else:
            lo = mid
    return hi
