from __future__ import annotations

import itertools

import numpy as np
import pytest

from crystalgfn.toy import ToyConfig, ToyEnv, ToyPolicy, l1_to_target, train_toy


def test_enumeration_sizes():
    env = ToyEnv(ToyConfig(n_groups=3, n_tokens=2, T=3))
    assert len(env.terminals) == 3 * 2 ** 3
    assert len(env.states) == 1 + sum(3 * 2 ** t for t in (1, 2, 3))
    assert env.target.sum() == pytest.approx(1.0)


def test_rewards_must_be_positive():
    with pytest.raises(ValueError):
        ToyEnv(ToyConfig(n_groups=2, n_tokens=2, T=1), rewards=np.array([1.0, 0.0, 1.0, 1.0]))


def test_exact_terminal_distribution_matches_sampling():
    env = ToyEnv(ToyConfig(n_groups=2, n_tokens=2, T=2))
    pol = ToyPolicy(env, seed=3)
    for t in pol.params.values():
        t.data = t.data + np.random.default_rng(0).normal(0, 1, t.data.shape)
    exact = pol.terminal_distribution()
    assert exact.sum() == pytest.approx(1.0)
    _, terms = pol.sample(20000, np.random.default_rng(1))
    freq = np.bincount([env.terminal_index[s] for s in terms], minlength=len(env.terminals)) / 20000
    np.testing.assert_allclose(freq, exact, atol=0.015)


def test_log_probs_agree_with_exact_marginal_for_single_path():
    # with T=1 each terminal has exactly one trajectory, so P_F(tau) is the marginal
    env = ToyEnv(ToyConfig(n_groups=3, n_tokens=2, T=1))
    pol = ToyPolicy(env, seed=0)
    trajs = [[(g, v)] for g, v in itertools.product(range(3), range(2))]
    log_pf, log_pb = pol.log_probs(trajs)
    exact = pol.terminal_distribution()
    for tr, lp in zip(trajs, log_pf.data):
        assert np.exp(lp) == pytest.approx(exact[env.terminal_index[(1, tr[0][0], (tr[0][1],))]])
    assert np.all(log_pb.data == 0.0)


def test_training_reaches_target_distribution():
    env, pol, losses = train_toy(ToyConfig(steps=800, seed=0))
    assert l1_to_target(env, pol) < 0.1
    assert np.mean(losses[-50:]) < np.mean(losses[:50])
    # learned log Z approaches the exact log partition value
    assert float(pol.params["logZ"].data) == pytest.approx(np.log(env.rewards.sum()), abs=0.3)
