"""Benchmark constructions and random tabular instances."""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field

import numpy as np

from ._validation import check_random_state
from .mdp import DeterministicPolicy, LinearMdp, NoiseModel, Policy, StochasticPolicy
from .visitation import optimal_policy

MAX_STATES = 50
MAX_ACTIONS = 50
MAX_HORIZON = 50
MAX_DIM = 64


@dataclass
class InstanceBundle:
    mdp: LinearMdp
    logging_policy: Policy | None = None
    metadata: dict = field(default_factory=dict)

    @property
    def optimal_policy(self) -> DeterministicPolicy:
        return DeterministicPolicy(self.metadata["optimal_actions"])

    @property
    def v_star(self) -> float:
        return self.metadata["v_star"]

    def to_dict(self) -> dict:
        data = self.mdp.to_dict()
        data["metadata"] = dict(self.metadata)
        if self.logging_policy is not None:
            data["metadata"]["logging_policy"] = self.logging_policy.to_dict()
        return data

    @classmethod
    def from_dict(cls, data) -> "InstanceBundle":
        mdp = LinearMdp.from_dict(data)
        meta = dict(data.get("metadata", {}))
        logging = meta.pop("logging_policy", None)
        if "v_star" not in meta:
            meta.update(_ground_truth(mdp))
        return cls(mdp, None if logging is None else Policy.from_dict(logging), meta)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)

    @classmethod
    def load(cls, path) -> "InstanceBundle":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _ground_truth(mdp: LinearMdp) -> dict:
    pol, v = optimal_policy(mdp)
    return {"optimal_actions": pol.actions.tolist(), "v_star": v}


def _bundle(mdp, logging, name, params) -> InstanceBundle:
    meta = {"name": name, "params": params, **_ground_truth(mdp)}
    return InstanceBundle(mdp, logging, meta)


def gen_separation(eps: float, variant: int = 1) -> InstanceBundle:
    """Two-step, three-state instance where offline logging never tries the informative arms.

    From ``s0``: action 0 pays 1 and reaches ``s2`` with probability
    ``p = sqrt(eps)`` (else ``s1``), action 1 goes to ``s1``, action 2 to
    ``s2``. At ``s1`` action 0 pays ``1/2 + 6 eps`` and the others ``1/2``.
    At ``s2`` only the variant's action pays ``1/2``. The logging policy is
    uniform at ``s0`` and ``s1`` and always plays action 2 at ``s2``, so its
    data cannot tell the two variants apart.
    """
    eps = float(eps)
    if not 0 < eps <= 1 / 20:
        raise ValueError(f"eps must lie in (0, 1/20], got {eps}")
    if variant not in (1, 2):
        raise ValueError("variant must be 1 or 2")
    p, gap = math.sqrt(eps), 6 * eps
    S = A = 3
    features = np.eye(S * A).reshape(S, A, S * A)
    P = np.zeros((1, S, A, S))
    P[0, 0, 0, 1], P[0, 0, 0, 2] = 1 - p, p
    P[0, 0, 1, 1] = 1.0
    P[0, 0, 2, 2] = 1.0
    for s in (1, 2):
        P[0, s, :, s] = 1.0  # never reached at step 1
    theta = np.zeros((2, S * A))
    theta[0, 0] = 1.0
    theta[1, 3] = 0.5 + gap
    theta[1, 4] = theta[1, 5] = 0.5
    theta[1, 6 + variant - 1] = 0.5
    mdp = LinearMdp(features, P, theta, NoiseModel("bernoulli"), 0, name=f"separation-{variant}")
    probs = np.zeros((2, S, A))
    probs[:, 0] = probs[:, 1] = 1.0 / 3
    probs[:, 2, 2] = 1.0
    params = {"eps": eps, "p": p, "Delta": gap, "variant": variant, "d": S * A, "H": 2}
    return _bundle(mdp, StochasticPolicy(probs), "separation", params)


def minimax_actions(d: int, grid_size: int) -> np.ndarray:
    """``+-e_j`` first, then normalized sign vectors, then the zero action."""
    if grid_size < 2 * d:
        raise ValueError(f"action grid needs at least 2d = {2 * d} sphere points")
    pts = []
    for j in range(d):
        for sign in (1.0, -1.0):
            e = np.zeros(d)
            e[j] = sign
            pts.append(e)
    if d > 1:
        for signs in itertools.product((1.0, -1.0), repeat=d):
            if len(pts) >= grid_size:
                break
            pts.append(np.array(signs) / math.sqrt(d))
    if len(pts) < grid_size:
        raise ValueError(f"at most {len(pts)} deterministic sphere points are available for d = {d}")
    return np.vstack(pts[:grid_size] + [np.zeros(d)])


def gen_minimax(d: int, H: int, theta_signs, mu: float, action_grid_size: int | None = None) -> InstanceBundle:
    """Single-state instance with ``phi(a) = [a/2, 1/2]`` and mean reward ``<a, theta_h>/2 + 1/2``.

    Actions are a symmetric grid on the unit sphere plus the zero action
    (always the last index). Feature dimension is ``d + 1``.
    """
    signs = np.asarray(theta_signs, dtype=float).reshape(H, d) if np.ndim(theta_signs) else np.full((H, d), float(theta_signs))
    if not np.isin(signs, (-1.0, 1.0)).all():
        raise ValueError("theta signs must be +1 or -1")
    if not 0 < mu <= 1 / (20 * math.sqrt(d)):
        raise ValueError(f"mu must lie in (0, 1/(20 sqrt(d))] = (0, {1 / (20 * math.sqrt(d)):.4g}]")
    grid = 2 * d if action_grid_size is None else int(action_grid_size)
    acts = minimax_actions(d, grid)
    A = len(acts)
    features = np.hstack([acts / 2, np.full((A, 1), 0.5)])[None]  # (1, A, d+1)
    P = np.ones((H - 1, 1, A, 1))
    theta = np.hstack([mu * signs, np.ones((H, 1))])
    mdp = LinearMdp(features, P, theta, NoiseModel("bernoulli"), 0, name="minimax")
    params = {"d": d, "H": H, "mu": mu, "theta_signs": signs.tolist(), "action_grid_size": grid,
              "actions": acts.tolist()}
    return _bundle(mdp, None, "minimax", params)


def minimax_logging_schedule(bundle: InstanceBundle) -> list[DeterministicPolicy]:
    """Round-robin schedule whose step covariates are ``(T/8d) [[I, 1], [1^T, 2d]]``.

    Each ``+e_j`` is played in ``1/(2d)`` of the episodes and the zero action
    in the other half; use a multiple of ``2d`` episodes for exactness.
    """
    d = bundle.metadata["params"]["d"]
    H = bundle.mdp.H
    zero = bundle.mdp.A - 1
    plus = [2 * j for j in range(d)]
    return [DeterministicPolicy(np.full((H, 1), a)) for a in plus + [zero] * d]


def gen_mab_verification(eps: float, A: int) -> InstanceBundle:
    """One-step bandit: arm 0 pays exactly 1, the rest have mean ``1 - 3 eps``."""
    eps = float(eps)
    if not 0 < eps < 1 / 3:
        raise ValueError(f"eps must lie in (0, 1/3), got {eps}")
    if A < 2:
        raise ValueError("need at least two arms")
    features = np.eye(A)[None]
    theta = np.full((1, A), 1 - 3 * eps)
    theta[0, 0] = 1.0
    mdp = LinearMdp(features, np.zeros((0, 1, A, 1)), theta, NoiseModel("bernoulli"), 0, name="mab")
    return _bundle(mdp, None, "mab", {"eps": eps, "A": A, "d": A, "H": 1})


def gen_random_tabular(S: int, A: int, H: int, seed, feature_mode: str = "basis", d: int | None = None) -> InstanceBundle:
    """Random instance with Dirichlet(1) transitions and mean rewards in [0.1, 0.9].

    ``basis`` features are one-hot over (s, a), so the instance is exactly
    linear. ``random_unit`` features are ``[u/sqrt 2, 1/sqrt 2]`` for random
    unit ``u``; transitions are then generally not linear in the features and
    the bundle records the residual.
    """
    if not (1 <= S <= MAX_STATES and 1 <= A <= MAX_ACTIONS and 1 <= H <= MAX_HORIZON):
        raise ValueError(f"sizes must satisfy S <= {MAX_STATES}, A <= {MAX_ACTIONS}, H <= {MAX_HORIZON}")
    rng = check_random_state(seed)
    if feature_mode == "basis":
        dim = S * A
        if dim > MAX_DIM:
            raise ValueError(f"basis features need d = S*A = {dim} > {MAX_DIM}")
        features = np.eye(dim).reshape(S, A, dim)
        theta = rng.uniform(0.1, 0.9, size=(H, dim))
    elif feature_mode == "random_unit":
        dim = d if d is not None else max(2, min(S * A, 8))
        if not 2 <= dim <= MAX_DIM:
            raise ValueError(f"random_unit mode needs 2 <= d <= {MAX_DIM}")
        u = rng.normal(size=(S, A, dim - 1))
        u /= np.linalg.norm(u, axis=2, keepdims=True)
        features = np.concatenate([u / math.sqrt(2), np.full((S, A, 1), 1 / math.sqrt(2))], axis=2)
        v = rng.normal(size=(H, dim - 1))
        v *= 0.4 * math.sqrt(2) * rng.uniform(0, 1, size=(H, 1)) / np.linalg.norm(v, axis=1, keepdims=True)
        theta = np.hstack([v, np.full((H, 1), math.sqrt(2) / 2)])
    else:
        raise ValueError("feature_mode must be 'basis' or 'random_unit'")
    P = rng.dirichlet(np.ones(S), size=(max(H - 1, 0), S, A)).reshape(max(H - 1, 0), S, A, S)
    mdp = LinearMdp(features, P, theta, NoiseModel("bernoulli"), 0, name=f"random-{feature_mode}")
    residual = mdp.linearity_residual()
    params = {"S": S, "A": A, "H": H, "d": dim, "feature_mode": feature_mode,
              "seed": seed if isinstance(seed, int) else None, "linearity_residual": residual,
              "approximate": bool(residual > 1e-9)}
    return _bundle(mdp, None, "random", params)


def build_instance(name: str, **params) -> InstanceBundle:
    """Dispatch by instance name (used by the CLI)."""
    makers = {
        "separation": gen_separation,
        "minimax": gen_minimax,
        "mab": gen_mab_verification,
        "random": gen_random_tabular,
    }
    if name not in makers:
        raise ValueError(f"unknown instance {name!r}; choose from {sorted(makers)}")
    return makers[name](**params)
