from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from crystalgfn import autodiff as ad
from crystalgfn.autodiff import Tensor
from crystalgfn.crystal import CrystalStructure, Lattice, build_graph
from crystalgfn.policy import (
    GraphBatch, Policy, PolicyConfig, beta_log_prob, lattice_features, sample_beta, sample_categorical,
)
from helpers import random_structure


def _small(**kw) -> Policy:
    return Policy(PolicyConfig(width=8, head_hidden=8, n_rbf=4, **kw), 12, seed=1)


def _batch(structures, groups=None):
    groups = groups or [1] * len(structures)
    graphs = [build_graph(s, 8.0, 12) for s in structures]
    return GraphBatch.from_graphs(graphs, [s.lattice for s in structures], groups)


def test_lattice_features_of_initial_cube():
    np.testing.assert_allclose(lattice_features(Lattice.cubic(4.0)), [4, 4, 4, 1, 0, 1, 0, 1, 0], atol=1e-15)


def test_empty_graph_embeds_to_zero():
    pol = _small()
    empty = CrystalStructure(Lattice.cubic(4.0), [], np.zeros((0, 3)))
    h = pol.encode_graph(_batch([empty]))
    assert h.shape == (1, 8)
    assert np.all(h.data == 0.0)


@pytest.mark.parametrize("encoder", ["megnet", "gcn"])
def test_graph_embedding_is_permutation_invariant(encoder):
    pol = _small(encoder=encoder)
    rng = np.random.default_rng(0)
    s = random_structure(rng, 5)
    h1 = pol.encode_graph(_batch([s])).data
    h2 = pol.encode_graph(_batch([s.permuted(rng.permutation(len(s)))])).data
    np.testing.assert_allclose(h1, h2, atol=1e-12)


def test_batched_encoding_equals_one_at_a_time():
    pol = _small()
    rng = np.random.default_rng(2)
    structs = [random_structure(rng, 4) for _ in range(3)]
    groups = [1, 14, 225]
    joint = pol.encode(_batch(structs, groups)).data
    for k, s in enumerate(structs):
        np.testing.assert_allclose(pol.encode(_batch([s], [groups[k]])).data[0], joint[k], atol=1e-12)


def test_beta_uniform_density():
    one = Tensor(np.ones(1))
    assert beta_log_prob(np.array([0.3]), one, one).data[0] == pytest.approx(0.0, abs=1e-12)


def test_scaled_beta_log_density_on_length_range():
    # uniform on [2, 12]: density 1/10 after the affine change of variables
    one = Tensor(np.ones(1))
    u = (7.0 - 2.0) / 10.0
    assert beta_log_prob(np.array([u]), one, one).data[0] - math.log(10.0) == pytest.approx(math.log(0.1), abs=1e-12)


def test_beta_log_density_matches_scipy():
    from scipy.stats import beta as scipy_beta
    rng = np.random.default_rng(5)
    a, b = rng.uniform(0.5, 5, 20), rng.uniform(0.5, 5, 20)
    x = rng.uniform(0.01, 0.99, 20)
    np.testing.assert_allclose(beta_log_prob(x, Tensor(a), Tensor(b)).data, scipy_beta.logpdf(x, a, b), rtol=1e-10)


def test_equal_logits_over_all_groups():
    lp = ad.log_softmax(Tensor(np.zeros((1, 230)))).data
    np.testing.assert_allclose(lp, -math.log(230), atol=1e-12)


def test_initial_space_group_head_is_uniform():
    pol = _small()
    h = pol.encode(_batch([CrystalStructure(Lattice.cubic(4.0), [], np.zeros((0, 3)))]))
    np.testing.assert_allclose(ad.log_softmax(pol.sg_logits(h)).data, -math.log(230), atol=1e-12)
    np.testing.assert_allclose(ad.log_softmax(pol.back_sg_logits(h)).data.sum(), -230 * math.log(230), rtol=1e-12)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_masked_probabilities_normalize(seed):
    rng = np.random.default_rng(seed)
    logits = rng.normal(0, 5, (3, 12))
    mask = rng.random((3, 12)) < 0.5
    mask[:, rng.integers(12)] = True
    p = np.exp(ad.log_softmax(Tensor(logits), mask).data)
    assert np.all(p[~mask] == 0.0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)


def test_single_unmasked_element_has_probability_one():
    mask = np.zeros((1, 12), dtype=bool)
    mask[0, 7] = True
    lp = ad.log_softmax(Tensor(np.random.default_rng(0).normal(size=(1, 12))), mask).data
    assert lp[0, 7] == 0.0
    draws = sample_categorical(np.random.default_rng(1), np.repeat(lp, 500, axis=0))
    assert np.all(draws == 7)


def test_all_masked_is_an_error():
    with pytest.raises(ValueError):
        ad.log_softmax(Tensor(np.zeros((1, 4))), np.zeros((1, 4), dtype=bool))


def test_sample_categorical_frequencies():
    p = np.array([0.1, 0.0, 0.6, 0.3])
    with np.errstate(divide="ignore"):
        lp = np.log(np.tile(p, (20000, 1)))
    draws = sample_categorical(np.random.default_rng(3), lp)
    freq = np.bincount(draws, minlength=4) / len(draws)
    assert freq[1] == 0.0
    np.testing.assert_allclose(freq, p, atol=0.015)


def test_sample_beta_stays_inside_unit_interval():
    x = sample_beta(np.random.default_rng(0), np.full(1000, 0.05), np.full(1000, 0.05))
    assert np.all((x > 0) & (x < 1))


def test_fresh_heads_emit_initial_concentration():
    pol = _small(beta_init=3.0)
    h = pol.encode(_batch([random_structure(np.random.default_rng(0), 3)]))
    la, lb, ca, cb, el = pol.atom_lattice(h, [225])
    for t in (la, lb, ca, cb):
        np.testing.assert_allclose(t.data, 3.0, rtol=1e-12)
    assert np.all(el.data == 0.0)


def test_flat_heads_ignore_chosen_group():
    rng = np.random.default_rng(4)
    s = random_structure(rng, 3)
    for hier in (True, False):
        pol = _small(hierarchical=hier)
        for t in pol.params.values():  # break the zero-initialised output layers
            t.data = t.data + 0.1 * rng.standard_normal(t.data.shape)
        h = pol.encode(_batch([s, s]))
        la = pol.atom_lattice(h, [3, 200])[0].data
        assert np.allclose(la[0], la[1]) == (not hier)


def test_checkpoint_round_trip(tmp_path):
    pol = _small(encoder="gcn")
    for t in pol.params.values():
        t.data = t.data + 1.0
    pol.save(tmp_path / "p.ckpt", {"note": 1})
    back, _, meta = Policy.from_checkpoint(tmp_path / "p.ckpt")
    assert meta["note"] == 1 and back.cfg == pol.cfg
    for k, t in pol.params.items():
        np.testing.assert_array_equal(back.params[k].data, t.data)


def test_load_rejects_wrong_shapes():
    pol = _small()
    arrays = pol.arrays()
    arrays["f_elem.W"] = np.zeros((2, 2))
    with pytest.raises(ValueError, match="f_elem.W"):
        pol.load(arrays)
    del arrays["f_elem.W"]
    with pytest.raises(KeyError, match="f_elem.W"):
        pol.load(arrays)


def test_config_validation():
    with pytest.raises(ValueError, match="encoder"):
        PolicyConfig(encoder="transformer").validate()
    with pytest.raises(ValueError):
        PolicyConfig(width=0).validate()
    with pytest.raises(ValueError):
        Policy(PolicyConfig(), 0)
