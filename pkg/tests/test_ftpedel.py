import numpy as np
import pytest

from conftest import bandit
from finetune_rl import (
    DeterministicPolicy,
    EpisodicEnv,
    OfflineDataset,
    class_profiles,
    eliminate,
    enumerate_det_policies,
    estimate_reward,
    exact_profile,
    ftpedel,
    ftpedel_se,
    gen_mab_verification,
    gen_separation,
    generate_offline,
    propagate_visitation,
)
from finetune_rl.ftpedel import beta_threshold, n_epochs, write_diagnostics, DIAGNOSTIC_COLUMNS
from finetune_rl import LinearMdp


def test_reward_ridge_closed_form():
    mdp = bandit(np.eye(2), [1.0, 0.0])
    n, lam = 30, 0.5
    data = OfflineDataset(np.ones(n), np.zeros(n), np.zeros(n), np.ones(n), np.ones(n))
    cov = np.diag([n, 0.0]) + lam * np.eye(2)
    assert np.allclose(estimate_reward(data, cov, mdp), [n / (n + lam), 0.0])
    assert np.allclose(estimate_reward(OfflineDataset.empty(), lam * np.eye(2), mdp), 0.0)


def test_propagation_closed_form():
    # state 0 --(action 0)--> state 1 deterministically; phi(1, 0) = v
    feats = np.zeros((2, 1, 2))
    feats[0, 0] = [1.0, 0.0]
    feats[1, 0] = [0.0, 0.8]
    P = np.zeros((1, 2, 1, 2))
    P[0, :, 0, 1] = 1.0
    mdp = LinearMdp(feats, P, np.zeros((2, 2)))
    pol = DeterministicPolicy(np.zeros((2, 2), dtype=int))
    n, lam = 40, 1.0
    data = OfflineDataset(np.ones(n), np.zeros(n), np.zeros(n), np.zeros(n), np.ones(n))
    cov = np.diag([n, 0.0]) + lam * np.eye(2)
    out = propagate_visitation(data, cov, pol, np.array([1.0, 0.0]), mdp)
    assert np.allclose(out, n / (n + lam) * np.array([0.0, 0.8]))
    assert np.allclose(propagate_visitation(OfflineDataset.empty(), cov, pol, np.array([1.0, 0.0]), mdp), 0.0)


def test_propagation_is_exact_with_rich_data(separation):
    mdp = separation.mdp
    n = 100_000
    recs = []
    rng = np.random.default_rng(0)
    for s in range(3):
        for a in range(3):
            sp = rng.choice(3, size=n, p=mdp.transitions[0, s, a])
            recs.append(OfflineDataset(np.ones(n), np.full(n, s), np.full(n, a), np.zeros(n), sp))
    data = recs[0]
    for r in recs[1:]:
        data = data.concat(r)
    cov = np.eye(9) * n + np.eye(9) / 9
    worst = 0.0
    for pol in enumerate_det_policies(mdp, prune=True):
        prof = exact_profile(mdp, pol)
        est = propagate_visitation(data, cov, pol, prof.phi[0], mdp)
        worst = max(worst, np.linalg.norm(est - prof.phi[1]))
    assert worst <= 5e-2


def test_elimination_rule():
    assert eliminate([1.0, 0.9, 0.4], 0.25).tolist() == [0, 1]
    assert eliminate([0.3, 0.3, 0.3], 0.01).tolist() == [0, 1, 2]
    assert eliminate([1.0, 0.5], 0.25).tolist() == [0, 1]


def test_beta_and_epoch_schedule():
    assert n_epochs(0.05) == 7
    b1 = beta_threshold(2, 9, 0, 0, 27, 1, 0.1)
    b2 = beta_threshold(2, 9, 1000, 0, 27, 1, 0.1)
    assert b2 > b1 > 0
    assert beta_threshold(2, 9, 0, 0, 27, 1, 0.1, scale=0.01) == pytest.approx(0.01 * b1)


def test_zero_budget_returns_nothing(separation05):
    mdp = separation05.mdp
    env = EpisodicEnv(mdp, 0)
    res = ftpedel_se(env, 0.05, 0.1, enumerate_det_policies(mdp, prune=True), 0)
    assert res.policy is None
    assert res.stopped == "budget"


def test_geometric_budget_and_determinism():
    bundle = gen_mab_verification(0.1, 3)
    pc = enumerate_det_policies(bundle.mdp)
    runs = []
    for _ in range(2):
        env = EpisodicEnv(bundle.mdp, 5)
        res = ftpedel(env, 0.1, 0.1, pc, beta_scale=0.01)
        assert res.online_episodes == env.episodes
        assert res.online_episodes < 2 ** (res.attempts + 1)
        runs.append((res.index, res.online_episodes))
    assert runs[0] == runs[1]
    assert runs[0][0] == 0


def test_offline_data_is_untouched(separation05):
    mdp = separation05.mdp
    data = generate_offline(mdp, separation05.logging_policy, 20_000, 0)
    before = {c: getattr(data, c).copy() for c in ("h", "s", "a", "r", "sp")}
    ftpedel(EpisodicEnv(mdp, 0), 0.05, 0.1, enumerate_det_policies(mdp, prune=True), data, beta_scale=0.01)
    for c, arr in before.items():
        assert np.array_equal(getattr(data, c), arr)


def test_best_policy_survives_every_epoch(separation05):
    mdp = separation05.mdp
    pc = enumerate_det_policies(mdp, prune=True)
    prof = class_profiles(mdp, pc)
    best = set(np.flatnonzero(prof.values == prof.values.max()))
    data = generate_offline(mdp, separation05.logging_policy, 10**6, 0)
    res = ftpedel(EpisodicEnv(mdp, 3), 0.05, 0.1, pc, data, beta_scale=0.01)
    for state in res.history:
        assert best & set(state.active.tolist())
        err = np.abs(state.values - prof.values[state.active])
        assert np.mean(err <= state.eps) >= 0.9
    assert prof.gaps[res.index] <= 0.05


def test_diagnostics_csv(tmp_path):
    bundle = gen_mab_verification(0.1, 3)
    res = ftpedel(EpisodicEnv(bundle.mdp, 0), 0.1, 0.1, beta_scale=0.01)
    write_diagnostics(res.diagnostics, tmp_path / "d.csv")
    header = (tmp_path / "d.csv").read_text().splitlines()[0].split(",")
    assert header == ["attempt"] + DIAGNOSTIC_COLUMNS


@pytest.mark.slow
def test_separation_success_and_offline_savings():
    bundle = gen_separation(0.05, 1)
    mdp = bundle.mdp
    pc = enumerate_det_policies(mdp, prune=True)
    prof = class_profiles(mdp, pc)
    data = generate_offline(mdp, bundle.logging_policy, 10_000, 0)
    hits, with_off, without = 0, [], []
    for seed in range(20):
        res = ftpedel(EpisodicEnv(mdp, seed), 0.05, 0.1, pc, data, beta_scale=0.01)
        hits += prof.gaps[res.index] <= 0.05
        with_off.append(res.online_episodes)
        bare = ftpedel(EpisodicEnv(mdp, seed), 0.05, 0.1, pc, None, beta_scale=0.01)
        without.append(bare.online_episodes)
    assert hits >= 18
    assert np.median(without) > np.median(with_off)


@pytest.mark.slow
def test_second_variant_is_solved():
    bundle = gen_separation(0.05, 2)
    pc = enumerate_det_policies(bundle.mdp, prune=True)
    data = generate_offline(bundle.mdp, bundle.logging_policy, 10**6, 0)
    res = ftpedel(EpisodicEnv(bundle.mdp, 0), 0.05, 0.1, pc, data, beta_scale=0.01)
    assert bundle.v_star - exact_profile(bundle.mdp, res.policy).value <= 0.05
