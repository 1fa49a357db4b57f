import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import bandit
from finetune_rl import (
    DesignObjective,
    EpisodicEnv,
    OraclePlanner,
    PolicyUCB,
    conditioned_cov,
    enumerate_det_policies,
    fw_regret,
    generate_offline,
    objective_eval,
    offline_covariates,
    opt_cov,
)
from finetune_rl._validation import BudgetExceededError, UnsatisfiableCoverageError, min_eig
from finetune_rl.design import write_trace


def _obj(targets, eta=1.0, scale=1.0, base=None, offline=None):
    targets = np.atleast_2d(targets)
    d = targets.shape[1]
    return DesignObjective(targets, eta, scale, np.zeros((d, d)) if base is None else base,
                           np.zeros((d, d)) if offline is None else offline)


def _random_psd(rng, d, floor=0.2):
    B = rng.normal(size=(d, d))
    return B @ B.T / d + floor * np.eye(d)


def test_single_atom_value_and_gradient():
    f, g = objective_eval(_obj(np.eye(2)[:1]), np.eye(2))
    assert f == pytest.approx(1.0)
    assert np.allclose(g, -np.diag([1.0, 0.0]))


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    targets = rng.normal(size=(8, 4))
    targets /= np.linalg.norm(targets, axis=1, keepdims=True)
    obj = _obj(targets, eta=3.0)
    worst = 0.0
    for _ in range(20):
        lam = _random_psd(rng, 4)
        _, grad = objective_eval(obj, lam)
        fd = np.zeros((4, 4))
        for i in range(4):
            for j in range(4):
                E = np.zeros((4, 4))
                E[i, j] = 1e-5
                fd[i, j] = (objective_eval(obj, lam + E)[0] - objective_eval(obj, lam - E)[0]) / 2e-5
        worst = max(worst, np.abs(fd - grad).max())
    assert worst <= 1e-5


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 100_000), eta=st.floats(0.1, 50.0))
def test_sandwich_bound(seed, eta):
    rng = np.random.default_rng(seed)
    targets = rng.normal(size=(8, 4))
    targets /= np.linalg.norm(targets, axis=1, keepdims=True)
    obj = _obj(targets, eta=eta)
    lam = _random_psd(rng, 4)
    f, grad = objective_eval(obj, lam)
    top = obj.coverage(lam).max()
    assert top - 1e-12 <= f <= top + math.log(8) / eta + 1e-12
    assert np.all(np.linalg.eigvalsh(-grad) >= -1e-12)


def test_singular_design_matrix_raises():
    with pytest.raises(np.linalg.LinAlgError):
        objective_eval(_obj(np.eye(2)), np.diag([1.0, 0.0]))


def _two_atom_inf(eta):
    # at Lambda = I/2 both atoms have coverage 2: f = 2 + log(2)/eta
    return 2.0 + math.log(2) / eta


def test_fw_regret_converges_on_two_atom_bandit():
    mdp = bandit(np.eye(2))
    eta = 1.0
    gaps = []
    for seed in range(10):
        obj = _obj(np.eye(2), eta=eta)
        res = fw_regret(EpisodicEnv(mdp, seed), obj, 256, 64, OraclePlanner())
        gaps.append(objective_eval(obj, res.lam)[0] - _two_atom_inf(eta))
    f_inf = _two_atom_inf(eta)
    assert np.median(gaps) <= 0.1 * f_inf
    assert min(gaps) >= -1e-9


def test_fw_iterate_is_weighted_average():
    mdp = bandit(np.eye(3) * 0.9)
    obj = _obj(np.eye(3), eta=2.0, base=0.1 * np.eye(3))
    res = fw_regret(EpisodicEnv(mdp, 4), obj, 20, 8, OraclePlanner(), keep_iterates=True)
    rebuilt = np.tensordot(res.weights, np.stack(res.gammas), axes=1)
    assert np.allclose(rebuilt, res.lam, atol=1e-10)
    assert res.weights.sum() == pytest.approx(1.0)
    assert res.episodes == 8 * 21


def test_fw_rewards_in_unit_interval(separation):
    mdp = separation.mdp
    seen = []

    class Spy(OraclePlanner):
        def play(self, env, h, G, n):
            r = np.einsum("sad,de,sae->sa", mdp.features, G, mdp.features)
            seen.append((r.min(), r.max()))
            return super().play(env, h, G, n)

    obj = _obj(np.eye(9)[6:8], base=np.eye(9) / 9)
    fw_regret(EpisodicEnv(mdp, 0), obj, 10, 4, Spy(), step=2)
    lo, hi = min(s[0] for s in seen), max(s[1] for s in seen)
    assert lo >= -1e-12 and hi <= 1 + 1e-12


def test_opt_cov_single_feature():
    mdp = bandit(np.ones((1, 1)))
    res = opt_cov(EpisodicEnv(mdp, 0), [[1.0]], 0.01, 0.1, 0.0, 1.0, False, regmin="oracle")
    assert not res.capped
    assert res.sigma[0, 0] >= 99
    ok, worst, _ = res.guarantee([[1.0]], np.zeros((1, 1)), 0.01, 0.0)
    assert ok and worst <= 0.01


def test_opt_cov_schedule():
    mdp = bandit(np.eye(2))
    res = opt_cov(EpisodicEnv(mdp, 0), np.eye(2), 1e-3, 0.1, 0.0, 0.5, False, regmin="oracle")
    for i in range(1, res.rounds + 1):
        rows = [r for r in res.trace if r[0] == i]
        assert len(rows) == 2**i  # T_i - 1 FW steps plus the terminal value
    # episodes: sum over rounds of K_i * T_i
    assert res.episodes == sum(4**i for i in range(1, res.rounds + 1))


def test_opt_cov_budget_cap():
    mdp = bandit(np.eye(2))
    res = opt_cov(EpisodicEnv(mdp, 0), np.eye(2), 1e-6, 0.1, 0.0, 0.5, False, regmin="oracle", budget=100)
    assert res.capped and res.episodes <= 100


def test_opt_cov_routes_to_uncovered_arms(separation):
    mdp = separation.mdp
    data = generate_offline(mdp, separation.logging_policy, 10_000, 0)
    off = offline_covariates(data, mdp)[2]
    targets = np.eye(9)[[6, 7]]
    pc = enumerate_det_policies(mdp, prune=True)

    class Recorder(EpisodicEnv):
        def run(self, policy, n):
            batch = super().run(policy, n)
            self.first_actions.append(batch.actions[:, 0])
            return batch

        def run_table(self, table, n, det=None):
            batch = super().run_table(table, n, det)
            self.first_actions.append(batch.actions[:, 0])
            return batch

    for regmin, share in ((OraclePlanner(), 0.9), (PolicyUCB(pc), 0.8)):
        env = Recorder(mdp, 1)
        env.first_actions = []
        res = opt_cov(env, targets, 1e-3, 0.1, 0.0, 1 / 9, False, step=2, offline=off, regmin=regmin)
        assert res.guarantee(targets, off, 1e-3, 0.0)[0]
        last_round = np.concatenate(env.first_actions)[-(4**res.rounds):]
        assert np.mean(last_round == 2) >= share


def test_conditioned_cov_floor():
    mdp = bandit(np.eye(3))
    res = conditioned_cov(EpisodicEnv(mdp, 0), 1, 0.5, 10.0, regmin="oracle")
    assert min_eig(res.sigma + res.base) >= 10.0


def test_conditioned_cov_warmup_only():
    mdp = bandit(np.eye(2))
    env = EpisodicEnv(mdp, 0)
    res = conditioned_cov(env, 16, 0.1, 0.0, lam_reg=0.5)
    assert res.episodes == 16 == env.episodes
    assert np.allclose(res.base, 0.5 * np.eye(2))
    assert np.trace(res.sigma) == pytest.approx(16)


def test_conditioned_cov_rank_deficient():
    mdp = bandit(np.array([[1.0, 0.0], [0.5, 0.0]]))
    with pytest.raises(UnsatisfiableCoverageError):
        conditioned_cov(EpisodicEnv(mdp, 0), 1, 0.1, 1.0)


def test_opt_cov_round_limit():
    mdp = bandit(np.array([[1.0, 0.0], [0.5, 0.0]]))
    with pytest.raises(BudgetExceededError):
        opt_cov(EpisodicEnv(mdp, 0), [[0.0, 1.0]], 1e-3, 0.1, 0.0, 1.0, False, regmin="oracle", max_rounds=3)


def test_trace_csv(tmp_path):
    mdp = bandit(np.eye(2))
    res = opt_cov(EpisodicEnv(mdp, 0), np.eye(2), 0.05, 0.1, 0.0, 0.5, False, regmin="oracle")
    write_trace(res.trace, tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "round,t,f_value,episodes"
    assert len(lines) == len(res.trace) + 1


def test_policy_ucb_prefers_rewarding_arm(separation):
    mdp = separation.mdp
    pc = enumerate_det_policies(mdp, prune=True)
    ucb = PolicyUCB(pc)
    G = np.zeros((9, 9))
    G[6, 6] = 1.0
    env = EpisodicEnv(mdp, 0)
    ucb.play(env, 2, G, len(pc))
    batch = ucb.play(env, 2, G, 4000)
    assert np.mean((batch.states[:, 1] == 2) & (batch.actions[:, 1] == 0)) > 0.8
