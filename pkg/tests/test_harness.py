import hashlib
import json

import numpy as np
import pytest

from encvit import harness as H
from encvit.attacks import AttackBudget
from encvit.ensemble import SelectionPolicy, load_manifest
from encvit.errors import RejectedInput
from encvit.report import emit_report

TINY = dict(n_train=200, n_test=60, n_eval=20, embed_dim=16, num_blocks=1, heads=2, epochs=1, n_keys=4,
            steps=2, query_budget=20, n_targets=2, chunk=10, batch_size=32)


def tiny_config(tmp_path, **kw):
    return H.ExperimentConfig(**{**TINY, "out_dir": str(tmp_path), **kw})


@pytest.fixture(scope="module")
def art(tmp_path_factory):
    return H.prepare(tiny_config(tmp_path_factory.mktemp("run")))


def test_derive_seed_is_stable_and_path_sensitive():
    assert H.derive_seed(1, "chunk", 0) == H.derive_seed(1, "chunk", 0)
    seeds = {H.derive_seed(1, "chunk", c) for c in range(50)} | {H.derive_seed(2, "chunk", 0)}
    assert len(seeds) == 51
    assert H.derive_seed(0, "a") != H.derive_seed(0, "b")
    assert 0 <= H.derive_seed(5, 3) < 2**63


def test_config_round_trip_and_validation():
    cfg = H.ExperimentConfig(n_eval=10)
    assert H.ExperimentConfig.from_json(cfg.to_json()) == cfg
    with pytest.raises(RejectedInput, match="unknown"):
        H.ExperimentConfig.from_mapping({"nope": 1})
    for bad in (dict(n_eval=0), dict(n_eval=2000), dict(jobs=0), dict(epsilon="x")):
        with pytest.raises(RejectedInput):
            H.ExperimentConfig(**bad)
    # attack-only fields leave the training fingerprint alone
    assert cfg.training_fingerprint() == H.ExperimentConfig(steps=3, jobs=4).training_fingerprint()
    assert cfg.training_fingerprint() != H.ExperimentConfig(epochs=3).training_fingerprint()


def test_atomic_write_mode(tmp_path):
    p = H.atomic_write(tmp_path / "a" / "k.json", b"{}", mode=0o600)
    assert p.read_bytes() == b"{}" and (p.stat().st_mode & 0o777) == 0o600
    assert [q.name for q in p.parent.iterdir()] == ["k.json"]


def test_prepare_writes_artifacts(art):
    out = art.paths["keys"].parent
    assert (art.paths["keys"].stat().st_mode & 0o777) == 0o600
    assert len(art.submodels) == 4 and [s.key_id for s in art.submodels] == art.keyset.key_ids
    ens, doc = load_manifest(out / "manifest_N4.json")
    assert ens.policy == SelectionPolicy("random", 3, 4)
    assert doc["baseline"] == "weights/baseline.tvit" and doc["config"]["n_keys"] == 4
    assert load_manifest(out / "manifest_N2.json")[0].policy.mode == "simple"


def test_prepare_reuses_weights(art):
    hashes = art.weight_hashes()
    again = H.prepare(art.config)
    assert again.weight_hashes() == hashes
    assert again.baseline.equal(art.baseline)


def test_retrain_is_bit_identical(art, tmp_path):
    other = H.prepare(H.ExperimentConfig(**{**art.config.to_dict(), "out_dir": str(tmp_path)}))
    assert other.weight_hashes() == art.weight_hashes()


def test_submodels_use_distinct_seeds(art):
    w = [s.params["patch_embed.w"] for s in art.submodels]
    assert not any(np.array_equal(w[0], v) for v in w[1:])


def test_ensemble_rejects_untrained_count(art):
    with pytest.raises(RejectedInput):
        art.ensemble(9, SelectionPolicy.simple(), "x")


def test_geometry_mismatch(art):
    ks = art.keyset
    with pytest.raises(RejectedInput, match="geometry"):
        H.train_submodels(art.train, ks, H.ExperimentConfig(patch_size=8).vit, 0, art.config.train_config)


def test_evaluate_is_independent_of_jobs_and_cache(art):
    ev = art.eval_set
    ens = art.ensemble(4, SelectionPolicy("random", 3), "random")
    b = art.config.budget
    one = H.evaluate(ens, ev.images, ev.labels, b, baseline=art.baseline, chunk=10, jobs=1)
    two = H.evaluate(ens, ev.images, ev.labels, b, baseline=art.baseline, chunk=10, jobs=2)
    for a in one.robust:
        assert np.array_equal(one.robust[a], two.robust[a])
    assert np.array_equal(one.aa, two.aa) and one.queries == two.queries
    assert np.array_equal(one.aa, one.clean & np.logical_and.reduce(list(one.robust.values())))


def test_evaluate_rejects_empty(art):
    with pytest.raises(RejectedInput):
        H.evaluate(art.ensemble(1, SelectionPolicy.simple(), "e"), np.zeros((0, 3, 32, 32)), np.zeros(0),
                   AttackBudget())


def test_experiments_are_reproducible(art):
    a = emit_report(H.experiment_model_comparison(art))
    b = emit_report(H.experiment_model_comparison(art))
    assert hashlib.sha256(a).hexdigest() == hashlib.sha256(b).hexdigest()
    lines = a.decode().splitlines()
    assert [l.split(",")[0] for l in lines[1:]] == ["baseline", "encrypted", "simple_ensemble", "random_ensemble"]


def test_key_leak_rows(art):
    rep = H.experiment_key_leak(art, leak_counts=[0, 4])
    assert [r.leaked_keys for r in rep.rows] == [0, 4]
    assert all(set(r.attacks) == {"pgd_ce"} for r in rep.rows)
    doc = json.loads(emit_report(rep, "json"))
    assert doc["meta"]["experiment"] == "key_leak"
    assert set(doc["meta"]["weights_sha256"]) == {"baseline", "sub_k0", "sub_k1", "sub_k2", "sub_k3"}


def test_submodel_count_rows(art):
    rep = H.experiment_submodel_count(art, n_list=(3, 4))
    assert [(r.model, r.N, r.S) for r in rep.rows] == [
        ("simple_ensemble", 3, "3"), ("random_ensemble", 3, "3"),
        ("simple_ensemble", 4, "4"), ("random_ensemble", 4, "3 or 4")]
