import json
import pickle
from collections import Counter

import numpy as np
import pytest
from scipy import stats

from encvit import tensor_nn as T
from encvit.crypto_perm import encrypt_image, generate_keyset, serialize_keyset
from encvit.ensemble import (
    EnsembleModel, PlainModel, SelectionPolicy, SubModel, classify, load_manifest, write_manifest,
)
from encvit.errors import FormatError, RejectedInput

CFG = T.ViTConfig(patch_size=4, embed_dim=16, num_blocks=1, heads=2, num_classes=10, channels=3, height=8, width=8)


def make_ensemble(n=5, policy=SelectionPolicy(), seed=0):
    ks = generate_keyset(n, 4, 3, 8, 8, seed=42)
    subs = [SubModel(T.init_params(CFG, i, std=0.5), k) for i, k in enumerate(ks.key_ids)]
    return EnsembleModel(subs, ks, policy, seed)


def x_batch(n=4, seed=0):
    return np.random.default_rng(seed).random((n, 3, 8, 8)).astype(np.float32)


@pytest.mark.parametrize("policy,n", [
    (SelectionPolicy("random", 2), 5),
    (SelectionPolicy("random", 3, 6), 5),
    (SelectionPolicy("random", 4, 3), 5),
    (SelectionPolicy("random", 3), 2),
    (SelectionPolicy("bogus", 3), 5),
])
def test_invalid_policies(policy, n):
    with pytest.raises(RejectedInput):
        policy.resolve(n)


def test_policy_resolution_and_description():
    assert SelectionPolicy().resolve(4) == SelectionPolicy("random", 3, 4)
    assert SelectionPolicy().resolve(4).describe() == "3 or 4"
    assert SelectionPolicy().resolve(5).describe() == "3 or 4 or 5"
    assert SelectionPolicy.simple().resolve(1).describe() == "1"
    assert SelectionPolicy("random", 3, 3).resolve(3).describe() == "3"


def test_subset_sizes_uniform_and_members_fair():
    ens = make_ensemble(5)
    rng = np.random.Generator(np.random.PCG64(1))
    draws = [ens.select_subset(rng) for _ in range(10_000)]
    sizes = Counter(len(d) for d in draws)
    assert set(sizes) == {3, 4, 5}
    assert stats.chisquare([sizes[s] for s in (3, 4, 5)]).pvalue > 0.01
    assert all(len(set(d)) == len(d) and list(d) == sorted(d) for d in draws)
    # given size 3, every 3-subset is equally likely
    triples = Counter(d for d in draws if len(d) == 3)
    assert len(triples) == 10
    assert stats.chisquare(list(triples.values())).pvalue > 0.01


def test_simple_mode_is_plain_average():
    ens = make_ensemble(4, SelectionPolicy.simple())
    x = x_batch()
    manual = np.mean([T.softmax(T.forward(sm.params, encrypt_image(x, ens.keyset[sm.key_id], 4)).astype(np.float64))
                      for sm in ens.submodels], axis=0)
    np.testing.assert_allclose(ens.predict_proba(x), manual, rtol=1e-12)
    np.testing.assert_allclose(ens.predict_proba(x), ens.predict_proba(x))


def test_random_mode_matches_recorded_subsets():
    ens = make_ensemble(5)
    x = x_batch(6)
    probs, rec = ens.predict_random(x)
    per = np.stack([ens.predict_submodel(i, x) for i in range(5)])
    for b, sub in enumerate(rec.subsets):
        np.testing.assert_allclose(probs[b], per[list(sub), b].mean(0), rtol=1e-10)
    np.testing.assert_allclose(probs.sum(1), 1.0)


def test_single_image_and_replay():
    ens = make_ensemble(5, seed=9)
    x = x_batch(3)
    first = [ens.predict_proba(x) for _ in range(4)]
    ens.reseed(9)
    again = [ens.predict_proba(x) for _ in range(4)]
    assert all(np.array_equal(a, b) for a, b in zip(first, again))
    assert ens.predict_proba(x[0]).shape == (10,)


def test_random_ensemble_is_stochastic():
    ens = make_ensemble(5)
    x = x_batch(1)
    outs = {ens.predict_proba(x).tobytes() for _ in range(30)}
    assert len(outs) > 3


def test_only_selected_submodels_run(monkeypatch):
    ens = make_ensemble(5)
    calls = []
    real = T.forward

    def counting(params, x):
        calls.append(x.shape[0])
        return real(params, x)

    monkeypatch.setattr(T, "forward", counting)
    _, rec = ens.predict_random(x_batch(1))
    assert len(calls) == len(rec.subsets[0])


def test_classify_ties_go_low():
    assert classify(np.array([[0.5, 0.5, 0.0], [0.1, 0.2, 0.7]])).tolist() == [0, 2]


def test_plain_model_interface():
    p = T.init_params(CFG, 0)
    m = PlainModel(p)
    x = x_batch(2)
    np.testing.assert_allclose(m(x), T.softmax(T.forward(p, x).astype(np.float64)))


def test_mismatched_construction():
    ks = generate_keyset(2, 4, 3, 8, 8, seed=1)
    subs = [SubModel(T.init_params(CFG, 0), "k1"), SubModel(T.init_params(CFG, 1), "k0")]
    with pytest.raises(RejectedInput, match="bound to key"):
        EnsembleModel(subs, ks, SelectionPolicy.simple())
    with pytest.raises(RejectedInput):
        EnsembleModel(subs[:1], ks, SelectionPolicy.simple())


def test_pickle_round_trip():
    ens = make_ensemble(4, seed=5)
    clone = pickle.loads(pickle.dumps(ens))
    x = x_batch(2)
    assert np.array_equal(clone.predict_proba(x), ens.predict_proba(x))


def _write(tmp_path, ens):
    kp = tmp_path / "keys.json"
    kp.write_bytes(serialize_keyset(ens.keyset))
    wps = []
    for sm in ens.submodels:
        wp = tmp_path / f"{sm.key_id}.tvit"
        wp.write_bytes(T.save_weights(sm.params))
        wps.append(wp)
    mp = tmp_path / "manifest.json"
    mp.write_text(json.dumps(write_manifest(mp, ens, wps, kp)))
    return mp


def test_manifest_round_trip(tmp_path):
    ens = make_ensemble(4, seed=3)
    mp = _write(tmp_path, ens)
    back, doc = load_manifest(mp)
    assert back.N == 4 and back.policy == ens.policy and back.seed == 3
    assert doc["submodels"][0]["weights"] == "k0.tvit"
    x = x_batch(3)
    assert np.array_equal(back.predict_proba(x), ens.predict_proba(x))
    simple, _ = load_manifest(mp, policy=SelectionPolicy.simple())
    assert simple.policy.mode == "simple"


def test_manifest_detects_tampered_weights(tmp_path):
    mp = _write(tmp_path, make_ensemble(3))
    wp = tmp_path / "k1.tvit"
    blob = bytearray(wp.read_bytes())
    blob[-1] ^= 1
    wp.write_bytes(bytes(blob))
    with pytest.raises(FormatError, match="integrity"):
        load_manifest(mp)


def test_manifest_malformed(tmp_path):
    mp = _write(tmp_path, make_ensemble(3))
    doc = json.loads(mp.read_text())
    del doc["policy"]
    mp.write_text(json.dumps(doc))
    with pytest.raises(FormatError, match="malformed"):
        load_manifest(mp)
