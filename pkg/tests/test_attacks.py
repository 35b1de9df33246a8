from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from encvit import attacks as A
from encvit import tensor_nn as T
from encvit.crypto_perm import decrypt_image, encrypt_image, generate_keyset
from encvit.ensemble import EnsembleModel, PlainModel, SelectionPolicy, SubModel
from encvit.errors import RejectedInput

CFG = T.ViTConfig(patch_size=4, embed_dim=16, num_blocks=1, heads=2, num_classes=10, channels=3, height=8, width=8)
EPS = 8 / 255


class Linear:
    """logits = W x + c: closed-form gradients for oracle checks."""

    name = "linear"

    def __init__(self, W, c=None):
        self.W = np.asarray(W, dtype=np.float64)
        self.c = np.zeros(self.W.shape[0]) if c is None else c
        self.num_classes = self.W.shape[0]

    def logits(self, x):
        return x.reshape(len(x), -1).astype(np.float64) @ self.W.T + self.c

    def predict_proba(self, x):
        return T.softmax(self.logits(x))

    def loss_grad(self, x, y):
        p = self.predict_proba(x)
        idx = np.arange(len(y))
        loss = -np.log(p[idx, y])
        d = p.copy()
        d[idx, y] -= 1
        return loss, (d @ self.W).reshape(x.shape).astype(np.float32), p


class Flat(Linear):
    def __init__(self, k=3, favourite=0):
        super().__init__(np.zeros((k, 12)), np.eye(k)[favourite] * 5.0)


def imgs(n=4, seed=0, shape=(3, 2, 2)):
    return np.random.default_rng(seed).random((n, *shape)).astype(np.float32)


def test_parse_epsilon_is_exact():
    assert A.parse_epsilon("8/255") == float(Fraction(8, 255)) == 8 / 255
    assert A.parse_epsilon(" 4 / 255 ".replace(" ", "")) == 4 / 255
    assert A.parse_epsilon(0.5) == 0.5
    with pytest.raises(RejectedInput):
        A.parse_epsilon("eight")


@pytest.mark.parametrize("kw", [dict(epsilon=0), dict(epsilon=1.5), dict(steps=0), dict(alpha=-1.0),
                                dict(query_budget=-1), dict(p_init=0), dict(eot=0)])
def test_budget_validation(kw):
    with pytest.raises(RejectedInput):
        A.AttackBudget(**kw)


def test_budget_from_mapping():
    b = A.AttackBudget.from_mapping({"epsilon": "8/255", "steps": 5})
    assert b.epsilon == 8 / 255 and b.step_size == 2 * b.epsilon
    with pytest.raises(RejectedInput, match="unknown"):
        A.AttackBudget.from_mapping({"eps": "1/255"})


def test_fgsm_linear_oracle():
    rng = np.random.default_rng(0)
    W = rng.normal(size=(2, 12))
    sur = Linear(W)
    x = imgs(5)
    y = np.array([0, 1, 0, 1, 1])
    res = A.fgsm(sur, x, y, EPS)
    # two classes: the CE gradient points along w_other - w_true
    direction = np.sign(W[1 - y] - W[y]).reshape(x.shape)
    np.testing.assert_allclose(res.x_adv, np.clip(x + np.float32(EPS) * direction, 0, 1), atol=1e-7)


def test_fgsm_zero_epsilon_limit():
    x = imgs(3)
    res = A.fgsm(Linear(np.ones((2, 12))), x, np.array([0, 1, 0]), 1e-12)
    np.testing.assert_allclose(res.x_adv, x, atol=1e-7)


def test_targeted_step_opposes_untargeted_on_two_classes():
    rng = np.random.default_rng(1)
    sur = Linear(rng.normal(size=(2, 12)))
    x = imgs(6, 1) * 0.5 + 0.25
    y = np.array([0, 1, 1, 0, 0, 1])
    b = A.AttackBudget(alpha=EPS, steps=1, random_start=False)
    _, g_true, _ = sur.loss_grad(x, y)
    _, g_tgt, _ = sur.loss_grad(x, 1 - y)
    assert np.array_equal(np.sign(g_tgt), -np.sign(g_true))
    unt = A.pgd_ce(sur, x, y, b).x_adv
    tgt = A.pgd_targeted(sur, x, y, 1 - y, b).x_adv
    np.testing.assert_array_equal(unt, tgt)  # ascend CE(y) == descend CE(target)


def test_zero_gradient_surrogate():
    x = imgs(3)
    b = A.AttackBudget(random_start=False, steps=3)
    sur = Flat(3, favourite=0)
    res = A.pgd_ce(sur, x, np.array([0, 1, 2]), b)
    assert np.array_equal(res.x_adv, x)
    assert res.success.tolist() == [False, True, True]
    tgt = A.pgd_targeted(sur, x, np.array([1, 1, 2]), 0, b)
    assert np.array_equal(tgt.x_adv, x) and tgt.success.all()


def test_targeted_rejects_true_label():
    with pytest.raises(RejectedInput, match="true label"):
        A.pgd_targeted(Flat(), imgs(2), np.array([0, 1]), np.array([1, 1]), A.AttackBudget())


def test_pgd_single_step_never_returns_start():
    rng = np.random.default_rng(2)
    sur = Linear(rng.normal(size=(3, 12)))
    x = imgs(4, 2) * 0.5 + 0.25
    res = A.pgd_ce(sur, x, np.array([0, 1, 2, 0]), A.AttackBudget(steps=1, random_start=False))
    assert np.all(res.linf_norm > 0)


def test_pgd_raises_loss_and_tracks_best():
    rng = np.random.default_rng(3)
    sur = Linear(rng.normal(size=(4, 12)) * 0.3)
    x = imgs(8, 3)
    y = rng.integers(0, 4, 8)
    res = A.pgd_ce(sur, x, y, A.AttackBudget(steps=10))
    assert np.all(sur.loss_grad(res.x_adv, y)[0] >= sur.loss_grad(x, y)[0] - 1e-9)
    assert res.loss_trace == sorted(res.loss_trace)  # best-so-far never decreases


def test_p_selection_schedule():
    vals = [A.p_selection(0.8, i, 1000) for i in range(1000)]
    assert vals[0] == 0.8
    assert all(a >= b for a, b in zip(vals, vals[1:]))
    # the schedule is defined on a 10k-iteration scale and stretched to n_iters
    assert A.p_selection(0.8, 999, 1000) == pytest.approx(0.8 / 512)
    assert A.p_selection(0.8, 30, 1000) == pytest.approx(0.8 / 8)


def _tiny_target(seed=0):
    return PlainModel(T.init_params(CFG, seed, std=0.5))


def test_square_zero_budget():
    q = A.QueryAccess(_tiny_target())
    x = imgs(3, shape=(3, 8, 8))
    res = A.square_attack(q, x, np.array([0, 1, 2]), A.AttackBudget(query_budget=0))
    assert np.array_equal(res.x_adv, x) and q.count == 0
    assert not res.success.any() and res.queries_used.sum() == 0


@pytest.mark.parametrize("eot", [1, 3])
def test_square_query_accounting_and_isolation(monkeypatch, eot):
    calls = {"backward": 0}
    real = T._backward

    def counting(*a, **k):
        calls["backward"] += 1
        return real(*a, **k)

    monkeypatch.setattr(T, "_backward", counting)
    q = A.QueryAccess(_tiny_target())
    x = imgs(5, shape=(3, 8, 8))
    y = np.arange(5)
    res = A.square_attack(q, x, y, A.AttackBudget(query_budget=40, eot=eot))
    assert calls["backward"] == 0
    assert res.queries_used.sum() == q.count
    assert np.all(res.queries_used <= 40)
    assert np.all(res.queries_used % eot == 0)


def test_square_perturbation_is_plus_minus_eps():
    q = A.QueryAccess(_tiny_target(1))
    x = imgs(6, 4, shape=(3, 8, 8)) * 0.8 + 0.1  # away from the box edges
    res = A.square_attack(q, x, np.zeros(6, int), A.AttackBudget(query_budget=60))
    d = np.abs(res.x_adv.astype(np.float64) - x)
    assert np.allclose(d, EPS, atol=1e-6)


def test_square_is_batch_independent():
    t = _tiny_target(2)
    x = imgs(4, 5, shape=(3, 8, 8))
    y = np.array([3, 1, 4, 1])
    b = A.AttackBudget(query_budget=30)
    full = A.square_attack(A.QueryAccess(t), x, y, b)
    part = A.square_attack(A.QueryAccess(t), x[2:], y[2:], b, image_ids=[2, 3])
    assert np.array_equal(full.x_adv[2:], part.x_adv)


def test_label_only_access():
    q = A.QueryAccess(_tiny_target(), output="label")
    p = q(imgs(3, shape=(3, 8, 8)))
    assert set(np.unique(p)) <= {0.0, 1.0} and np.all(p.sum(1) == 1)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10**6), attack=st.sampled_from(["fgsm", "pgd_ce", "pgd_t", "square"]),
       eps_num=st.integers(1, 16))
def test_linf_soundness(seed, attack, eps_num):
    eps = eps_num / 255
    rng = np.random.default_rng(seed)
    p = T.init_params(CFG, seed % 1000, std=0.4)
    x = rng.random((3, 3, 8, 8)).astype(np.float32)
    x[0, 0] = 0.0
    x[1, 1] = 1.0
    y = rng.integers(0, 10, 3)
    b = A.AttackBudget(epsilon=eps, steps=3, query_budget=12, n_targets=2, seed=seed)
    sur = A.PlainSurrogate(p)
    if attack == "fgsm":
        res = A.fgsm(sur, x, y, eps)
    elif attack == "pgd_ce":
        res = A.pgd_ce(sur, x, y, b)
    elif attack == "pgd_t":
        res = A.pgd_targeted(sur, x, y, (y + 1) % 10, b)
    else:
        res = A.square_attack(A.QueryAccess(PlainModel(p)), x, y, b)
    assert np.all(res.x_adv >= 0) and np.all(res.x_adv <= 1)
    assert res.linf_norm.max() <= eps + np.spacing(np.float32(1.0))
    assert np.all(res.queries_used <= b.query_budget)


def _ensemble(n=4, policy=SelectionPolicy.simple(), dtype=np.float32):
    ks = generate_keyset(n, 4, 3, 8, 8, seed=5)
    subs = [SubModel(T.init_params(CFG, 10 + i, std=0.5, dtype=dtype), k) for i, k in enumerate(ks.key_ids)]
    return EnsembleModel(subs, ks, policy, 0)


def test_keyed_surrogate_gradient_finite_difference():
    ens = _ensemble(3, dtype=np.float64)
    sur = A.KeyedSurrogate([(sm.params, ens.keyset[sm.key_id]) for sm in ens.submodels], 4)
    x = np.random.default_rng(0).random((2, 3, 8, 8))
    y = np.array([1, 7])
    loss, g, probs = sur.loss_grad(x, y)
    np.testing.assert_allclose(probs, ens.predict_simple(x), rtol=1e-6)  # the ensemble casts to float32
    np.testing.assert_allclose(loss, -np.log(probs[[0, 1], y]), rtol=1e-10)
    flat = x.reshape(-1)
    for c in np.random.default_rng(1).choice(flat.size, 25, replace=False):
        up, down = flat.copy(), flat.copy()
        up[c] += 1e-5
        down[c] -= 1e-5
        num = (sur.loss_grad(up.reshape(x.shape), y)[0].sum() - sur.loss_grad(down.reshape(x.shape), y)[0].sum()) / 2e-5
        assert g.reshape(-1)[c] == pytest.approx(num, rel=1e-3, abs=1e-6)


def test_full_leak_gradient_equals_encrypted_model_gradient():
    # one leaked key: gradient through the permutation is the decrypted encrypted-domain gradient
    ens = _ensemble(1, dtype=np.float64)
    sm = ens.submodels[0]
    key = ens.keyset[sm.key_id]
    sur = A.KeyedSurrogate([(sm.params, key)], 4)
    x = np.random.default_rng(2).random((2, 3, 8, 8))
    y = np.array([0, 3])
    g_enc = T.input_gradient(sm.params, encrypt_image(x, key, 4), y)
    np.testing.assert_allclose(sur.loss_grad(x, y)[1], decrypt_image(g_enc, key, 4), rtol=1e-5, atol=1e-7)


def test_attacker_knowledge():
    ens = _ensemble(4, SelectionPolicy("random", 3))
    k2 = A.AttackerKnowledge.for_target(ens, 2)
    assert k2.leaked_key_ids == ("k0", "k1") and isinstance(k2.surrogate, A.KeyedSurrogate)
    base = T.init_params(CFG, 99)
    k0 = A.AttackerKnowledge.for_target(ens, 0, base)
    assert k0.leaked_key_ids == () and isinstance(k0.surrogate, A.PlainSurrogate)
    with pytest.raises(RejectedInput):
        A.AttackerKnowledge.for_target(ens, 5)
    with pytest.raises(RejectedInput):
        A.AttackerKnowledge.for_target(ens, 0)


def test_run_suite_schema():
    ens = _ensemble(4, SelectionPolicy("random", 3))
    base = T.init_params(CFG, 77, std=0.5)
    x = imgs(12, 7, shape=(3, 8, 8))
    y = np.random.default_rng(7).integers(0, 10, 12)
    know = A.AttackerKnowledge.for_target(ens, 0, base)
    b = A.AttackBudget(steps=2, query_budget=10, n_targets=2)
    res = A.run_suite(ens, know, x, y, b)
    for name in A.ATTACK_NAMES:
        assert not np.any(res.robust[name] & ~res.clean)
        assert res.accuracy("aa") <= res.accuracy(name)
    assert np.array_equal(res.aa, res.clean & res.robust["pgd_ce"] & res.robust["pgd_t"] & res.robust["square"])
    assert res.queries["square"] == know.query_access.count
    assert res.queries["square"] <= 10 * int(res.clean.sum())


def test_run_suite_rejects_empty_and_unknown():
    ens = _ensemble(3, SelectionPolicy("random", 3))
    know = A.AttackerKnowledge.for_target(ens, 1)
    with pytest.raises(RejectedInput):
        A.run_suite(ens, know, np.zeros((0, 3, 8, 8), np.float32), np.zeros(0, int), A.AttackBudget())
    with pytest.raises(RejectedInput, match="unknown"):
        A.run_suite(ens, know, imgs(1, shape=(3, 8, 8)), [0], A.AttackBudget(), attacks=("fab",))


def test_transfer_cache_reused():
    ens = _ensemble(3)
    base = T.init_params(CFG, 8, std=0.5)
    x = imgs(4, 8, shape=(3, 8, 8))
    y = np.array([0, 1, 2, 3])
    cache = {}
    b = A.AttackBudget(steps=2, n_targets=2)
    A.run_suite(ens, A.AttackerKnowledge.for_target(ens, 0, base), x, y, b, attacks=("pgd_ce", "pgd_t"), cache=cache)
    assert len(cache) == 2
    A.run_suite(PlainModel(base), A.AttackerKnowledge.for_target(PlainModel(base), 0, base), x, y, b,
                attacks=("pgd_ce",), cache=cache)
    assert len(cache) == 2
