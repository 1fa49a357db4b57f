"""Exact dynamic-programming visitations, covariances, values and policy classes."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from ._validation import BudgetExceededError, check_symmetric, min_eig
from .mdp import DeterministicPolicy, LinearMdp, MixturePolicy, Policy, SoftmaxPolicy

DEFAULT_ENUM_CAP = 10**6


@dataclass
class VisitationProfile:
    """Exact per-step quantities of one policy.

    ``occupancy[h-1]`` is the state-action distribution at step h,
    ``phi[h-1]`` the expected feature vector and ``cov[h-1]`` the expected
    feature second moment.
    """

    occupancy: np.ndarray  # (H, S, A)
    phi: np.ndarray  # (H, d)
    cov: np.ndarray  # (H, d, d)
    value: float

    def to_dict(self) -> dict:
        return {
            "occupancy": self.occupancy.tolist(),
            "phi": self.phi.tolist(),
            "cov": self.cov.tolist(),
            "value": self.value,
        }


def occupancies(mdp: LinearMdp, tables: np.ndarray) -> np.ndarray:
    """Forward DP for a stack of Markov policy tables.

    ``tables`` has shape (N, H, S, A); the result has the same shape and holds
    ``Pr_pi[s_h = s, a_h = a]``.
    """
    tables = np.asarray(tables, dtype=float)
    N = tables.shape[0]
    out = np.empty_like(tables)
    rho = np.zeros((N, mdp.S))
    rho[:, mdp.s1] = 1.0
    for h in range(mdp.H):
        out[:, h] = rho[:, :, None] * tables[:, h]
        if h < mdp.H - 1:
            rho = np.einsum("nsa,sat->nt", out[:, h], mdp.transitions[h])
    return out


def _profile_from_occupancy(mdp, occ):
    phi = np.einsum("hsa,sad->hd", occ, mdp.features)
    cov = np.einsum("hsa,sad,sae->hde", occ, mdp.features, mdp.features)
    value = float(np.einsum("hd,hd->", phi, mdp.theta))
    return VisitationProfile(occ, phi, cov, value)


def exact_profile(mdp: LinearMdp, policy: Policy) -> VisitationProfile:
    """Visitation profile of ``policy``; mixtures combine their components linearly."""
    if isinstance(policy, MixturePolicy):
        parts = [exact_profile(mdp, comp) for comp in policy.components]
        w = policy.weights
        return VisitationProfile(
            occupancy=sum(wi * p.occupancy for wi, p in zip(w, parts)),
            phi=sum(wi * p.phi for wi, p in zip(w, parts)),
            cov=sum(wi * p.cov for wi, p in zip(w, parts)),
            value=float(sum(wi * p.value for wi, p in zip(w, parts))),
        )
    occ = occupancies(mdp, policy.table(mdp)[None])[0]
    return _profile_from_occupancy(mdp, occ)


def policy_value(mdp: LinearMdp, policy: Policy) -> float:
    """``V_0`` by backward value iteration (independent of the forward DP)."""
    if isinstance(policy, MixturePolicy):
        return float(sum(w * policy_value(mdp, c) for w, c in zip(policy.weights, policy.components)))
    table = policy.table(mdp)
    v = np.zeros(mdp.S)
    for h in reversed(range(mdp.H)):
        q = mdp.mean_rewards[h].copy()
        if h < mdp.H - 1:
            q += mdp.transitions[h] @ v
        v = (table[h] * q).sum(axis=1)
    return float(v[mdp.s1])


def optimal_policy(mdp: LinearMdp, rewards: np.ndarray | None = None) -> tuple[DeterministicPolicy, float]:
    """Bellman-optimal deterministic policy for ``rewards`` (default: mean rewards).

    Ties go to the lowest action index.
    """
    rewards = mdp.mean_rewards if rewards is None else rewards
    actions = np.zeros((mdp.H, mdp.S), dtype=np.int64)
    v = np.zeros(mdp.S)
    for h in reversed(range(mdp.H)):
        q = rewards[h].copy()
        if h < mdp.H - 1:
            q = q + mdp.transitions[h] @ v
        actions[h] = np.argmax(q, axis=1)
        v = q.max(axis=1)
    return DeterministicPolicy(actions), float(v[mdp.s1])


# ------------------------------------------------------------ policy classes


class PolicyClass:
    """A finite, nonempty set of Markov policies for one MDP.

    ``label`` is one of ``det_enum``, ``softmax_grid`` or ``explicit``.
    Probability tables are stacked lazily and cached per MDP.
    """

    def __init__(self, members, label: str = "explicit"):
        members = list(members)
        if not members:
            raise ValueError("a policy class needs at least one member")
        for m in members:
            if not m.is_markov:
                raise TypeError("policy classes hold Markov policies only")
        self.members = members
        self.label = label
        self._cache: dict[int, np.ndarray] = {}

    def __len__(self):
        return len(self.members)

    def __iter__(self):
        return iter(self.members)

    def __getitem__(self, i):
        return self.members[i]

    def __repr__(self):
        return f"PolicyClass({self.label}, n={len(self)})"

    def tables(self, mdp: LinearMdp) -> np.ndarray:
        key = id(mdp)
        if key not in self._cache:
            self._cache[key] = np.stack([m.table(mdp) for m in self.members])
        return self._cache[key]

    def with_member(self, policy: Policy) -> "PolicyClass":
        return PolicyClass([*self.members, policy], label="explicit")

    def subset(self, idx) -> "PolicyClass":
        return PolicyClass([self.members[i] for i in idx], label=self.label)

    def to_dict(self) -> dict:
        return {"label": self.label, "members": [m.to_dict() for m in self.members]}

    @classmethod
    def from_dict(cls, data) -> "PolicyClass":
        return cls([Policy.from_dict(m) for m in data["members"]], label=data.get("label", "explicit"))


@dataclass
class ClassProfiles:
    """Exact visitations for every member of a policy class, vectorized."""

    phi: np.ndarray  # (N, H, d)
    values: np.ndarray  # (N,)
    occupancy: np.ndarray  # (N, H, S, A)

    def covariances(self, mdp: LinearMdp, h: int) -> np.ndarray:
        return np.einsum("nsa,sad,sae->nde", self.occupancy[:, h - 1], mdp.features, mdp.features)

    @property
    def best_value(self) -> float:
        return float(self.values.max())

    @property
    def gaps(self) -> np.ndarray:
        return self.values.max() - self.values


def class_profiles(mdp: LinearMdp, pclass: PolicyClass) -> ClassProfiles:
    occ = occupancies(mdp, pclass.tables(mdp))
    phi = np.einsum("nhsa,sad->nhd", occ, mdp.features)
    values = np.einsum("nhd,hd->n", phi, mdp.theta)
    return ClassProfiles(phi=phi, values=values, occupancy=occ)


def enumerate_det_policies(mdp: LinearMdp, *, cap: int = DEFAULT_ENUM_CAP, prune: bool = False) -> PolicyClass:
    """All deterministic Markov policies in lexicographic order.

    The order runs over positions ``(h, s)`` with ``h`` major. With ``prune``
    the action at states unreachable at a step is pinned to 0, which removes
    policies that differ only where they can never act.
    """
    free = np.ones((mdp.H, mdp.S), dtype=bool)
    if prune:
        free[:] = False
        for h in range(1, mdp.H + 1):
            free[h - 1, mdp.reachable_states(h)] = True
    positions = np.argwhere(free)
    count = mdp.A ** len(positions)
    if count > cap:
        raise BudgetExceededError(
            f"{count} deterministic policies (A^{len(positions)}) exceed the enumeration cap {cap}; "
            "enable pruning, shrink the instance or raise the cap"
        )
    members = []
    for combo in itertools.product(range(mdp.A), repeat=len(positions)):
        actions = np.zeros((mdp.H, mdp.S), dtype=np.int64)
        if len(positions):
            actions[positions[:, 0], positions[:, 1]] = combo
        members.append(DeterministicPolicy(actions))
    return PolicyClass(members, label="det_enum")


def softmax_grid(mdp: LinearMdp, temperature: float, grid) -> PolicyClass:
    """Softmax policies over the Cartesian product of per-step weight choices.

    ``grid`` is a sequence of length H; entry h is a list of d-vectors.
    """
    if len(grid) != mdp.H or any(len(g) == 0 for g in grid):
        raise ValueError("grid needs a nonempty list of weight vectors for every step")
    members = [
        SoftmaxPolicy(np.asarray(choice, dtype=float), temperature)
        for choice in itertools.product(*grid)
    ]
    return PolicyClass(members, label="softmax_grid")


# ------------------------------------------------- linear optimization on Omega_h


def covariance_best_response(mdp: LinearMdp, h: int, G) -> tuple[DeterministicPolicy, np.ndarray]:
    """Maximize ``tr(G Lambda_{pi,h})`` over Markov policies.

    Solved exactly by DP on the surrogate reward ``phi^T G phi`` placed at
    step ``h``. Returns the deterministic maximizer and its covariance.
    """
    G = check_symmetric(G, "G")
    rewards = np.zeros((mdp.H, mdp.S, mdp.A))
    rewards[h - 1] = np.einsum("sad,de,sae->sa", mdp.features, G, mdp.features)
    policy, _ = optimal_policy(mdp, rewards)
    cov = exact_profile(mdp, policy).cov[h - 1]
    return policy, cov


@dataclass
class MinEigResult:
    mixture: MixturePolicy
    lambda_min: float
    covariance: np.ndarray

    @property
    def full_rank(self) -> bool:
        return self.lambda_min > 1e-9


def max_min_eig(mdp: LinearMdp, h: int, iters: int = 200, basis=None) -> MinEigResult:
    """Frank-Wolfe ascent of ``lambda_min`` over the step-``h`` covariance set.

    ``basis`` (d, k) restricts the eigenvalue to a subspace, e.g. the span of
    features reachable at ``h``.
    """
    d = mdp.d
    U = np.eye(d) if basis is None else np.asarray(basis)
    policy, cov = covariance_best_response(mdp, h, U @ U.T)
    atoms = {policy: 1.0}
    lam = cov
    for t in range(1, iters + 1):
        compressed = U.T @ lam @ U
        _, vecs = np.linalg.eigh((compressed + compressed.T) / 2)
        u = U @ vecs[:, 0]
        vertex, vcov = covariance_best_response(mdp, h, np.outer(u, u))
        gamma = 2.0 / (t + 2)
        lam = (1 - gamma) * lam + gamma * vcov
        atoms = {p: (1 - gamma) * w for p, w in atoms.items()}
        atoms[vertex] = atoms.get(vertex, 0.0) + gamma
    weights = np.array(list(atoms.values()))
    mixture = MixturePolicy(weights / weights.sum(), list(atoms))
    return MinEigResult(mixture, max(min_eig(lam, U), 0.0), lam)
