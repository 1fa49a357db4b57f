"""Tabular-backed linear MDPs, Markov policies and episode simulation.

Steps are 1-based in every public signature and record (``h`` in ``1..H``);
arrays are indexed with ``h - 1``. The terminal sentinel state is ``S``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from typing import ClassVar

import numpy as np

from ._validation import DimensionMismatchError, check_random_state

ROW_TOL = 1e-12
NORM_TOL = 1e-9


@dataclass(frozen=True)
class NoiseModel:
    """Reward noise around the linear mean ``<phi(s,a), theta_h>``.

    ``bernoulli`` draws a coin with the mean as success probability;
    ``gauss`` adds ``N(0, sigma^2)`` noise and clips the draw into [0, 1].
    """

    kind: str = "bernoulli"
    sigma: float = 0.0

    def __post_init__(self):
        if self.kind not in ("bernoulli", "gauss"):
            raise ValueError(f"unknown noise kind {self.kind!r}")
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")

    def sample(self, means: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        if self.kind == "bernoulli":
            return (rng.random(means.shape) < means).astype(float)
        noise = rng.standard_normal(means.shape) * self.sigma
        return np.clip(means + noise, 0.0, 1.0)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "sigma": float(self.sigma)}


@dataclass
class ValidationReport:
    issues: list[str] = field(default_factory=list)
    linearity_residual: float = 0.0
    rank_deficient_steps: list[int] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.issues

    @property
    def exactly_linear(self) -> bool:
        return self.linearity_residual <= 1e-9

    def to_dict(self) -> dict:
        return {
            "ok": self.ok,
            "issues": list(self.issues),
            "linearity_residual": self.linearity_residual,
            "rank_deficient_steps": list(self.rank_deficient_steps),
        }


class LinearMdp:
    """Finite-horizon MDP with a known feature map ``phi(s, a)``.

    Parameters
    ----------
    features : array of shape (S, A, d)
    transitions : array of shape (H - 1, S, A, S)
        ``transitions[h - 1, s, a, s']`` is ``P_h(s' | s, a)``.
    theta : array of shape (H, d)
        Reward vectors; the mean reward at step h is ``phi(s, a) @ theta[h - 1]``.
    noise : NoiseModel
    s1 : int
        Initial state.

    Instances are treated as immutable: the arrays are frozen on construction.
    Use :meth:`validate` to check the model invariants; construction itself
    only enforces shapes.
    """

    def __init__(self, features, transitions, theta, noise=None, s1=0, name=""):
        features = np.array(features, dtype=float)
        theta = np.array(theta, dtype=float)
        if features.ndim != 3:
            raise DimensionMismatchError("features must have shape (S, A, d)")
        S, A, d = features.shape
        if theta.ndim != 2 or theta.shape[1] != d:
            raise DimensionMismatchError(f"theta must have shape (H, {d}), got {theta.shape}")
        H = theta.shape[0]
        transitions = np.array(transitions, dtype=float).reshape(-1, S, A, S) if H > 1 else np.zeros((0, S, A, S))
        if transitions.shape != (H - 1, S, A, S):
            raise DimensionMismatchError(
                f"transitions must have shape {(H - 1, S, A, S)}, got {transitions.shape}"
            )
        if not 0 <= int(s1) < S:
            raise DimensionMismatchError(f"initial state {s1} outside [0, {S})")
        for arr in (features, transitions, theta):
            arr.setflags(write=False)
        self.features = features
        self.transitions = transitions
        self.theta = theta
        self.noise = noise if noise is not None else NoiseModel()
        self.s1 = int(s1)
        self.name = name

    S = property(lambda self: self.features.shape[0])
    A = property(lambda self: self.features.shape[1])
    d = property(lambda self: self.features.shape[2])
    H = property(lambda self: self.theta.shape[0])

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"LinearMdp{label}(S={self.S}, A={self.A}, H={self.H}, d={self.d})"

    @cached_property
    def mean_rewards(self) -> np.ndarray:
        """Array (H, S, A) of ``<phi(s,a), theta_h>``."""
        means = np.einsum("sad,hd->hsa", self.features, self.theta)
        means.setflags(write=False)
        return means

    @cached_property
    def _reachable(self) -> list[np.ndarray]:
        reach = [np.zeros(self.S, dtype=bool)]
        reach[0][self.s1] = True
        for h in range(self.H - 1):
            nxt = (self.transitions[h][reach[-1]] > 0).any(axis=(0, 1))
            reach.append(nxt)
        return reach

    def reachable_states(self, h: int) -> np.ndarray:
        """Indices of states with positive probability at step ``h`` under some policy."""
        return np.flatnonzero(self._reachable[h - 1])

    def reachable_basis(self, h: int) -> np.ndarray:
        """Orthonormal basis (d, k) of the span of features reachable at step ``h``.

        This is structural information (support of the dynamics), not the
        transition probabilities themselves; learners use it to evaluate
        minimum-eigenvalue requirements on the directions that can occur at
        step ``h``.
        """
        phis = self.features[self.reachable_states(h)].reshape(-1, self.d)
        u, sv, _ = np.linalg.svd(phis.T, full_matrices=False)
        rank = int((sv > 1e-10 * max(1.0, sv[0] if sv.size else 0.0)).sum())
        return u[:, :rank]

    def flat_features(self) -> np.ndarray:
        """Features as an (S*A, d) matrix, row index ``s * A + a``."""
        return self.features.reshape(self.S * self.A, self.d)

    def validate(self, *, require_linear: bool = False) -> ValidationReport:
        """Check every model invariant and report violations instead of raising."""
        report = ValidationReport()
        norms = np.linalg.norm(self.features, axis=2)
        if (norms > 1 + NORM_TOL).any():
            s, a = np.unravel_index(np.argmax(norms), norms.shape)
            report.issues.append(f"feature norm {norms[s, a]:.6g} > 1 at (s={s}, a={a})")
        if self.H > 1:
            if (self.transitions < 0).any():
                report.issues.append("negative transition probability")
            sums = self.transitions.sum(axis=3)
            bad = np.abs(sums - 1.0) > ROW_TOL * self.S
            if bad.any():
                h, s, a = np.argwhere(bad)[0]
                report.issues.append(
                    f"transition row (h={h + 1}, s={s}, a={a}) sums to {sums[h, s, a]:.6g}, not 1"
                )
        means = self.mean_rewards
        if (means < -NORM_TOL).any() or (means > 1 + NORM_TOL).any():
            h, s, a = np.argwhere((means < -NORM_TOL) | (means > 1 + NORM_TOL))[0]
            report.issues.append(f"mean reward {means[h, s, a]:.6g} outside [0, 1] at (h={h + 1}, s={s}, a={a})")
        theta_norms = np.linalg.norm(self.theta, axis=1)
        if (theta_norms > np.sqrt(self.d) + NORM_TOL).any():
            report.issues.append(f"||theta_h|| exceeds sqrt(d) at steps {list(np.flatnonzero(theta_norms > np.sqrt(self.d)) + 1)}")
        report.linearity_residual = self.linearity_residual()
        if require_linear and not report.exactly_linear:
            report.issues.append(f"transitions are not linear in the features (residual {report.linearity_residual:.3g})")
        report.rank_deficient_steps = [
            h for h in range(1, self.H + 1) if self.reachable_basis(h).shape[1] == 0
        ]
        return report

    def linearity_residual(self) -> float:
        """Frobenius residual of the best fit ``P_h(s'|s,a) ~ <phi(s,a), mu_h(s')>``, max over h."""
        if self.H == 1:
            return 0.0
        phi = self.flat_features()
        worst = 0.0
        for h in range(self.H - 1):
            target = self.transitions[h].reshape(self.S * self.A, self.S)
            mu, *_ = np.linalg.lstsq(phi, target, rcond=None)
            worst = max(worst, float(np.linalg.norm(phi @ mu - target)))
        return worst

    def to_dict(self) -> dict:
        return {
            "S": self.S,
            "A": self.A,
            "H": self.H,
            "d": self.d,
            "features": self.flat_features().tolist(),
            "transitions": [P.reshape(self.S * self.A, self.S).tolist() for P in self.transitions],
            "theta": self.theta.tolist(),
            "noise": self.noise.to_dict(),
            "s1": self.s1,
            "name": self.name,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "LinearMdp":
        S, A, H, d = (int(data[k]) for k in ("S", "A", "H", "d"))
        features = np.asarray(data["features"], dtype=float).reshape(S, A, d)
        transitions = np.asarray(data["transitions"], dtype=float).reshape(max(H - 1, 0), S, A, S)
        noise = NoiseModel(**data.get("noise", {}))
        return cls(features, transitions, data["theta"], noise=noise, s1=data.get("s1", 0), name=data.get("name", ""))


# ---------------------------------------------------------------- policies


class Policy:
    """Base class for policies; Markov members expose a probability table."""

    kind: ClassVar[str] = ""
    _registry: ClassVar[dict[str, type]] = {}

    def __init_subclass__(cls, **kwargs):
        super().__init_subclass__(**kwargs)
        if cls.kind:
            Policy._registry[cls.kind] = cls

    is_markov: ClassVar[bool] = True

    def table(self, mdp: LinearMdp) -> np.ndarray:
        """Array (H, S, A) with ``pi_h(a | s)``."""
        raise NotImplementedError

    def to_dict(self) -> dict:
        raise NotImplementedError

    @staticmethod
    def from_dict(data: dict) -> "Policy":
        try:
            cls = Policy._registry[data["kind"]]
        except KeyError:
            raise ValueError(f"unknown policy kind {data.get('kind')!r}") from None
        return cls._from_dict(data)

    def check_compatible(self, mdp: LinearMdp) -> None:
        self.table(mdp)


def _frozen(arr, dtype):
    arr = np.array(arr, dtype=dtype)
    arr.setflags(write=False)
    return arr


class DeterministicPolicy(Policy):
    kind = "deterministic"

    def __init__(self, actions):
        self.actions = _frozen(actions, np.int64)
        if self.actions.ndim != 2:
            raise ValueError("actions must have shape (H, S)")

    def table(self, mdp):
        if self.actions.shape != (mdp.H, mdp.S):
            raise DimensionMismatchError(f"policy covers {self.actions.shape}, mdp needs {(mdp.H, mdp.S)}")
        if (self.actions < 0).any() or (self.actions >= mdp.A).any():
            raise DimensionMismatchError("action index out of range")
        tab = np.zeros((mdp.H, mdp.S, mdp.A))
        h, s = np.indices(self.actions.shape)
        tab[h, s, self.actions] = 1.0
        return tab

    def __repr__(self):
        return f"DeterministicPolicy({self.actions.tolist()})"

    def __eq__(self, other):
        return isinstance(other, DeterministicPolicy) and np.array_equal(self.actions, other.actions)

    def __hash__(self):
        return hash(self.actions.tobytes())

    def to_dict(self):
        return {"kind": self.kind, "actions": self.actions.tolist()}

    @classmethod
    def _from_dict(cls, data):
        return cls(data["actions"])


class StochasticPolicy(Policy):
    kind = "stochastic"

    def __init__(self, probs):
        probs = np.array(probs, dtype=float)
        if probs.ndim != 3:
            raise ValueError("probs must have shape (H, S, A)")
        if (probs < 0).any() or not np.allclose(probs.sum(axis=2), 1.0, atol=ROW_TOL * probs.shape[2], rtol=0):
            raise ValueError("policy probability rows must be nonnegative and sum to 1")
        self.probs = _frozen(probs, float)

    def table(self, mdp):
        if self.probs.shape != (mdp.H, mdp.S, mdp.A):
            raise DimensionMismatchError(f"policy table {self.probs.shape} vs mdp {(mdp.H, mdp.S, mdp.A)}")
        return np.array(self.probs)

    def to_dict(self):
        return {"kind": self.kind, "probs": self.probs.tolist()}

    @classmethod
    def _from_dict(cls, data):
        return cls(data["probs"])


class SoftmaxPolicy(Policy):
    """``pi_h(a|s) proportional to exp(temperature * <phi(s,a), w_h>)``."""

    kind = "softmax"

    def __init__(self, weights, temperature: float):
        self.weights = _frozen(weights, float)
        if self.weights.ndim != 2:
            raise ValueError("weights must have shape (H, d)")
        self.temperature = float(temperature)

    def table(self, mdp):
        if self.weights.shape != (mdp.H, mdp.d):
            raise DimensionMismatchError(f"softmax weights {self.weights.shape} vs {(mdp.H, mdp.d)}")
        scores = self.temperature * np.einsum("sad,hd->hsa", mdp.features, self.weights)
        scores -= scores.max(axis=2, keepdims=True)
        expd = np.exp(scores)
        return expd / expd.sum(axis=2, keepdims=True)

    def to_dict(self):
        return {"kind": self.kind, "weights": self.weights.tolist(), "temperature": self.temperature}

    @classmethod
    def _from_dict(cls, data):
        return cls(data["weights"], data["temperature"])


class MixturePolicy(Policy):
    """Draw one component at the start of each episode and follow it for all H steps.

    Not Markov in general, so it has no probability table; visitation
    quantities are the weighted sums of the components'.
    """

    kind = "mixture"
    is_markov = False

    def __init__(self, weights, components):
        weights = np.asarray(weights, dtype=float)
        if len(weights) != len(components) or not len(components):
            raise ValueError("need one weight per component")
        if (weights < 0).any() or not np.isclose(weights.sum(), 1.0, atol=1e-12):
            raise ValueError("mixture weights must be nonnegative and sum to 1")
        self.weights = _frozen(weights, float)
        self.components = tuple(components)

    def table(self, mdp):
        raise TypeError("a mixture policy has no Markov probability table")

    def check_compatible(self, mdp):
        for comp in self.components:
            comp.check_compatible(mdp)

    def to_dict(self):
        return {
            "kind": self.kind,
            "weights": self.weights.tolist(),
            "components": [c.to_dict() for c in self.components],
        }

    @classmethod
    def _from_dict(cls, data):
        return cls(data["weights"], [Policy.from_dict(c) for c in data["components"]])


def uniform_policy(mdp: LinearMdp) -> StochasticPolicy:
    return StochasticPolicy(np.full((mdp.H, mdp.S, mdp.A), 1.0 / mdp.A))


# --------------------------------------------------------------- sampling


@dataclass
class Step:
    h: int
    state: int
    action: int
    reward: float
    next_state: int


@dataclass
class Trajectory:
    steps: list[Step]

    def __len__(self):
        return len(self.steps)


@dataclass
class EpisodeBatch:
    """Columnar record of ``n`` episodes; arrays have shape (n, H)."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray

    @property
    def n(self) -> int:
        return self.states.shape[0]

    def trajectory(self, i: int) -> Trajectory:
        H = self.states.shape[1]
        return Trajectory([
            Step(h + 1, int(self.states[i, h]), int(self.actions[i, h]),
                 float(self.rewards[i, h]), int(self.next_states[i, h]))
            for h in range(H)
        ])


def _categorical(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Row-wise inverse-CDF sampling for an (n, K) matrix of probabilities."""
    u = rng.random(probs.shape[0])
    idx = (np.cumsum(probs, axis=1) < u[:, None]).sum(axis=1)
    return np.minimum(idx, probs.shape[1] - 1)


def deterministic_actions(table: np.ndarray) -> np.ndarray | None:
    """(H, S) action array if every row of ``table`` is one-hot, else None."""
    if np.all((table == 0) | (table == 1)):
        return table.argmax(axis=2)
    return None


def _rollout_markov(mdp, table, n, rng, det=None):
    H, S = mdp.H, mdp.S
    states = np.empty((n, H), dtype=np.int64)
    actions = np.empty((n, H), dtype=np.int64)
    rewards = np.empty((n, H))
    next_states = np.empty((n, H), dtype=np.int64)
    s = np.full(n, mdp.s1, dtype=np.int64)
    for h in range(H):
        a = det[h, s] if det is not None else _categorical(table[h, s], rng)
        states[:, h] = s
        actions[:, h] = a
        rewards[:, h] = mdp.noise.sample(mdp.mean_rewards[h, s, a], rng)
        if h < H - 1:
            s = _categorical(mdp.transitions[h, s, a], rng)
        else:
            s = np.full(n, S, dtype=np.int64)
        next_states[:, h] = s
    return EpisodeBatch(states, actions, rewards, next_states)


def rollout(mdp: LinearMdp, policy: Policy, n: int, rng) -> EpisodeBatch:
    """Simulate ``n`` independent episodes of ``policy`` on ``mdp``."""
    rng = check_random_state(rng)
    if isinstance(policy, MixturePolicy):
        policy.check_compatible(mdp)
        which = rng.choice(len(policy.components), size=n, p=policy.weights)
        out = EpisodeBatch(*(np.empty((n, mdp.H), dtype=dt) for dt in (np.int64, np.int64, float, np.int64)))
        for k, comp in enumerate(policy.components):
            rows = np.flatnonzero(which == k)
            if rows.size == 0:
                continue
            part = rollout(mdp, comp, rows.size, rng)
            out.states[rows] = part.states
            out.actions[rows] = part.actions
            out.rewards[rows] = part.rewards
            out.next_states[rows] = part.next_states
        return out
    return _rollout_markov(mdp, policy.table(mdp), int(n), rng)


def sample_episode(mdp: LinearMdp, policy: Policy, rng) -> Trajectory:
    """Draw one trajectory; the final ``next_state`` is the sentinel ``S``."""
    return rollout(mdp, policy, 1, rng).trajectory(0)


def save_mdp(mdp: LinearMdp, path, metadata: dict | None = None) -> None:
    data = mdp.to_dict()
    if metadata:
        data["metadata"] = metadata
    with open(path, "w") as fh:
        json.dump(data, fh, indent=1, sort_keys=True)


def load_mdp(path) -> LinearMdp:
    with open(path) as fh:
        return LinearMdp.from_dict(json.load(fh))
