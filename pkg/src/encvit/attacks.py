"""L-infinity attacks and the worst-case evaluation suite.

White-box attacks (FGSM, PGD with cross-entropy, targeted PGD) only ever see
a *surrogate*: the differentiable model the attacker can build from what they
know. With no leaked keys that is a plainly trained model; with leaked keys it
is the leaked sub-models behind their true encryption, so gradients flow
exactly through the permutation. Square Attack only sees a :class:`QueryAccess`
handle on the target, which exposes predictions and nothing else.

All images are batched (B, C, H, W) float32 arrays in [0, 1].
"""
from __future__ import annotations

import hashlib

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import tensor_nn
from .crypto_perm import decrypt_image, encrypt_image
from .ensemble import EnsembleModel, classify
from .errors import RejectedInput

CHUNK = 256


def parse_epsilon(value) -> float:
    """'8/255' -> 0.0313..., also accepts numbers. Converted exactly once."""
    if isinstance(value, str):
        try:
            return float(Fraction(value.strip()))
        except (ValueError, ZeroDivisionError):
            raise RejectedInput(f"cannot parse epsilon {value!r}") from None
    return float(value)


@dataclass(frozen=True)
class AttackBudget:
    epsilon: float = 8 / 255
    alpha: float | None = None  # None -> 2 * epsilon, halved adaptively
    steps: int = 20
    restarts: int = 1
    query_budget: int = 1000
    p_init: float = 0.8
    random_start: bool = True
    n_targets: int = 9
    eot: int = 1
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.epsilon < 1:
            raise RejectedInput("epsilon must lie in (0, 1)")
        if self.alpha is not None and self.alpha <= 0:
            raise RejectedInput("alpha must be positive")
        if self.steps < 1 or self.restarts < 1:
            raise RejectedInput("steps and restarts must be >= 1")
        if self.query_budget < 0:
            raise RejectedInput("query_budget must be >= 0")
        if not 0 < self.p_init <= 1:
            raise RejectedInput("p_init must lie in (0, 1]")
        if self.eot < 1 or self.n_targets < 1:
            raise RejectedInput("eot and n_targets must be >= 1")

    @property
    def step_size(self) -> float:
        return 2 * self.epsilon if self.alpha is None else self.alpha

    @classmethod
    def from_mapping(cls, m: dict) -> "AttackBudget":
        m = dict(m)
        if "epsilon" in m:
            m["epsilon"] = parse_epsilon(m["epsilon"])
        if m.get("alpha") is not None:
            m["alpha"] = parse_epsilon(m["alpha"])
        unknown = set(m) - set(cls.__dataclass_fields__)
        if unknown:
            raise RejectedInput(f"unknown budget fields: {sorted(unknown)}")
        return cls(**m)


@dataclass
class AttackResult:
    x_adv: np.ndarray
    success: np.ndarray  # (B,) bool, judged by the model the attack talked to
    queries_used: np.ndarray  # (B,) int
    linf_norm: np.ndarray  # (B,)
    loss_trace: list = field(default_factory=list)


def _result(x, x_adv, success, queries=None, trace=None) -> AttackResult:
    B = x.shape[0]
    linf = np.abs(x_adv.astype(np.float64) - x.astype(np.float64)).reshape(B, -1).max(1)
    q = np.zeros(B, dtype=np.int64) if queries is None else queries
    return AttackResult(x_adv, np.asarray(success, dtype=bool), q, linf, trace or [])


def _project(x_new, x, eps):
    return np.clip(np.clip(x_new, x - eps, x + eps), 0.0, 1.0).astype(np.float32)


def _validate(x, y, num_classes=None):
    x = np.asarray(x, dtype=np.float32)
    if x.ndim != 4:
        raise RejectedInput(f"attacks take batches (B, C, H, W), got {x.shape}")
    if x.shape[0] == 0:
        raise RejectedInput("empty batch")
    if x.min() < 0 or x.max() > 1:
        raise RejectedInput("images must lie in [0, 1]")
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    if y.shape[0] != x.shape[0]:
        raise RejectedInput("one label per image required")
    if num_classes is not None and (y.min() < 0 or y.max() >= num_classes):
        raise RejectedInput("label out of range")
    return x, y


# --------------------------------------------------------------------------
# surrogates


class PlainSurrogate:
    """Gradient access to an unencrypted model."""

    def __init__(self, params: tensor_nn.TinyViTParams, name: str = "plain"):
        self.params = params
        self.name = name
        self.num_classes = params.config.num_classes

    def loss_grad(self, x, y):
        """Per-image CE toward ``y``, its input gradient and the model's probabilities."""
        losses, grads, probs = [], [], []
        for s in range(0, x.shape[0], CHUNK):
            loss, logits, g = tensor_nn.loss_and_input_gradient(self.params, x[s:s + CHUNK], y[s:s + CHUNK])
            losses.append(loss)
            grads.append(g)
            probs.append(tensor_nn.softmax(logits.astype(np.float64)))
        return np.concatenate(losses), np.concatenate(grads), np.concatenate(probs)

    def predict_proba(self, x):
        return np.concatenate([tensor_nn.softmax(tensor_nn.forward(self.params, x[s:s + CHUNK]).astype(np.float64))
                               for s in range(0, x.shape[0], CHUNK)])


class KeyedSurrogate:
    """The average of leaked sub-models' probabilities, each behind its true key.

    Loss is -log of the averaged probability of the label. Encryption is a
    permutation, so its vector-Jacobian product is the inverse permutation,
    i.e. decryption of the gradient.
    """

    def __init__(self, members, M: int, name: str | None = None):
        # members: list of (TinyViTParams, PermutationKey)
        if not members:
            raise RejectedInput("a keyed surrogate needs at least one leaked sub-model")
        self.members = list(members)
        self.M = M
        self.name = name or "keyed:" + ",".join(k.key_id for _, k in self.members)
        self.num_classes = self.members[0][0].config.num_classes

    def _chunk(self, x, y):
        k = len(self.members)
        probs, cache = [], []
        for params, key in self.members:
            logits, vjp = tensor_nn.forward_vjp(params, encrypt_image(x, key, self.M))
            p = tensor_nn.softmax(logits.astype(np.float64))
            probs.append(p)
            cache.append((key, vjp, p))
        pbar = sum(probs) / k
        idx = np.arange(len(y))
        py = np.maximum(pbar[idx, y], 1e-300)
        loss = -np.log(py)
        grad = np.zeros(x.shape, dtype=np.float64)
        for key, vjp, p in cache:
            # d(-log pbar_y)/d logits_i = -(1 / (k pbar_y)) p_iy (e_y - p_i)
            coef = -(p[idx, y] / (k * py))[:, None]
            onehot = np.zeros_like(p)
            onehot[idx, y] = 1.0
            dlogits = coef * (onehot - p)
            grad += decrypt_image(vjp(dlogits), key, self.M)
        return loss, grad.astype(np.float32), pbar

    def loss_grad(self, x, y):
        parts = [self._chunk(x[s:s + CHUNK], y[s:s + CHUNK]) for s in range(0, x.shape[0], CHUNK)]
        return tuple(np.concatenate(z) for z in zip(*parts))

    def predict_proba(self, x):
        out = []
        for s in range(0, x.shape[0], CHUNK):
            xb = x[s:s + CHUNK]
            out.append(sum(tensor_nn.softmax(tensor_nn.forward(p, encrypt_image(xb, k, self.M)).astype(np.float64))
                           for p, k in self.members) / len(self.members))
        return np.concatenate(out)


class QueryAccess:
    """Prediction-only handle on a target; counts every image it is asked about."""

    def __init__(self, target, output: str = "proba"):
        if output not in ("proba", "label"):
            raise RejectedInput("output must be 'proba' or 'label'")
        self._target = target
        self.output = output
        self.count = 0

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float32)
        self.count += x.shape[0]
        p = self._target.predict_proba(x)
        if self.output == "label":
            lab = classify(p)
            p = np.zeros_like(p)
            p[np.arange(len(lab)), lab] = 1.0
        return p


@dataclass
class AttackerKnowledge:
    leaked_key_ids: tuple
    surrogate: object
    query_access: QueryAccess

    @classmethod
    def for_target(cls, target, n_leaked: int = 0, baseline=None, output: str = "proba") -> "AttackerKnowledge":
        """Knowledge with the first ``n_leaked`` keys of an ensemble target.

        With no leaks the surrogate is ``baseline`` (plain params).
        """
        if n_leaked:
            if not isinstance(target, EnsembleModel):
                raise RejectedInput("keys can only leak from an encrypted ensemble")
            if n_leaked > target.N:
                raise RejectedInput(f"cannot leak {n_leaked} of {target.N} keys")
            subs = target.submodels[:n_leaked]
            surrogate = KeyedSurrogate([(sm.params, target.keyset[sm.key_id]) for sm in subs], target.keyset.M)
            leaked = tuple(sm.key_id for sm in subs)
        else:
            if baseline is None:
                raise RejectedInput("a zero-key attacker needs a baseline surrogate")
            surrogate = PlainSurrogate(baseline, name="plain:baseline") if isinstance(
                baseline, tensor_nn.TinyViTParams) else baseline
            leaked = ()
        if isinstance(target, EnsembleModel) and not set(leaked) <= set(target.keyset.key_ids):
            raise RejectedInput("leaked keys must belong to the defender")
        return cls(leaked, surrogate, QueryAccess(target, output))


# --------------------------------------------------------------------------
# gradient attacks


def fgsm(surrogate, x, y, epsilon: float) -> AttackResult:
    """x + eps * sign(grad CE), clipped to [0, 1]; sign(0) = 0."""
    x, y = _validate(x, y, surrogate.num_classes)
    _, g, _ = surrogate.loss_grad(x, y)
    x_adv = _project(x + np.float32(epsilon) * np.sign(g), x, np.float32(epsilon))
    success = classify(surrogate.predict_proba(x_adv)) != y
    return _result(x, x_adv, success)


def _pgd(surrogate, x, y, budget: AttackBudget, targeted: bool, rng) -> AttackResult:
    """Best-iterate sign-gradient ascent with stagnation-triggered step halving.

    The objective is CE toward ``y`` (untargeted) or -CE toward ``y`` (targeted,
    where ``y`` holds the target classes). The start point is excluded from
    best-tracking, so a single step always returns the stepped image.
    """
    eps = np.float32(budget.epsilon)
    B = x.shape[0]
    window = max(1, math.ceil(budget.steps / 5))
    sgn = -1.0 if targeted else 1.0

    best_x = x.copy()
    best_obj = np.full(B, -np.inf)
    best_ok = np.zeros(B, dtype=bool)
    trace = []
    for _ in range(budget.restarts):
        if budget.random_start:
            x_cur = _project(x + rng.uniform(-eps, eps, x.shape).astype(np.float32), x, eps)
        else:
            x_cur = x.copy()
        alpha = np.full(B, budget.step_size, dtype=np.float32)
        run_x = np.zeros_like(x)
        run_obj = np.full(B, -np.inf)
        run_ok = np.zeros(B, dtype=bool)
        last_ckpt = run_obj.copy()
        loss, g, probs = surrogate.loss_grad(x_cur, y)
        for t in range(1, budget.steps + 1):
            x_cur = _project(x_cur + alpha[:, None, None, None] * np.sign(sgn * g).astype(np.float32), x, eps)
            loss, g, probs = surrogate.loss_grad(x_cur, y)
            obj = sgn * loss
            pred = classify(probs)
            ok = pred == y if targeted else pred != y
            better = obj > run_obj
            run_x[better] = x_cur[better]
            run_obj = np.where(better, obj, run_obj)
            run_ok = np.where(better, ok, run_ok)
            if t % window == 0 and t < budget.steps:
                trace.append(float(run_obj.mean()))
                stalled = run_obj <= last_ckpt
                if stalled.any():
                    alpha[stalled] *= 0.5
                    x_cur[stalled] = run_x[stalled]
                    # gradient at the restored points
                    _, g_s, _ = surrogate.loss_grad(x_cur[stalled], y[stalled])
                    g[stalled] = g_s
                last_ckpt = run_obj.copy()
        trace.append(float(run_obj.mean()))
        # successful iterates beat unsuccessful ones; then higher objective wins
        take = (run_ok & ~best_ok) | ((run_ok == best_ok) & (run_obj > best_obj))
        best_x[take] = run_x[take]
        best_obj = np.where(take, run_obj, best_obj)
        best_ok = np.where(take, run_ok, best_ok)
    return _result(x, best_x, best_ok, trace=trace)


def pgd_ce(surrogate, x, y, budget: AttackBudget, rng=None) -> AttackResult:
    x, y = _validate(x, y, surrogate.num_classes)
    rng = rng or np.random.Generator(np.random.PCG64(budget.seed))
    return _pgd(surrogate, x, y, budget, False, rng)


def pgd_targeted(surrogate, x, y, target_class, budget: AttackBudget, rng=None) -> AttackResult:
    x, y = _validate(x, y, surrogate.num_classes)
    t = np.broadcast_to(np.asarray(target_class, dtype=np.int64), y.shape).copy()
    if t.min() < 0 or t.max() >= surrogate.num_classes:
        raise RejectedInput("target class out of range")
    if np.any(t == y):
        raise RejectedInput("target class equals the true label")
    rng = rng or np.random.Generator(np.random.PCG64(budget.seed))
    return _pgd(surrogate, x, t, budget, True, rng)


# --------------------------------------------------------------------------
# Square Attack


def p_selection(p_init: float, it: int, n_iters: int) -> float:
    """Square-size schedule: the fraction halves at fixed points of a 10k-iteration scale."""
    it = int(it / max(n_iters, 1) * 10000)
    for bound, div in ((10, 1), (50, 2), (200, 4), (500, 8), (1000, 16), (2000, 32),
                       (4000, 64), (6000, 128), (8000, 256)):
        if it <= bound:
            return p_init / div
    return p_init / 512


def _margin(probs, y):
    idx = np.arange(len(y))
    other = probs.copy()
    other[idx, y] = -np.inf
    return probs[idx, y] - other.max(1)


def square_attack(query: QueryAccess, x, y, budget: AttackBudget, image_ids=None) -> AttackResult:
    """Random search over square windows of +-eps, accepted when the margin drops.

    Image b owns a generator seeded from ``(budget.seed, image_ids[b])``
    (default: its batch position), so results do not depend on batching.
    With ``budget.eot > 1`` each margin is the mean of that many queries.
    """
    x, y = _validate(x, y)
    B, C, H, W = x.shape
    eps = np.float32(budget.epsilon)
    n_eval = budget.query_budget // budget.eot
    queries = np.zeros(B, dtype=np.int64)
    if n_eval == 0:
        return _result(x, x.copy(), np.zeros(B, dtype=bool), queries)
    ids = np.arange(B) if image_ids is None else np.asarray(image_ids)
    rngs = [np.random.Generator(np.random.PCG64(np.random.SeedSequence([budget.seed, int(i)]))) for i in ids]

    def evaluate(xq, rows):
        acc = None
        for _ in range(budget.eot):
            p = query(xq)
            acc = p if acc is None else acc + p
        queries[rows] += budget.eot
        p = acc / budget.eot
        return _margin(p, y[rows]), classify(p) != y[rows]

    # vertical stripes: one sign per (channel, column)
    stripes = np.stack([r.choice(np.array([-1.0, 1.0], dtype=np.float32), size=(C, 1, W)) for r in rngs])
    x_best = _project(x + eps * stripes, x, eps)
    rows = np.arange(B)
    margin_best, success = evaluate(x_best, rows)
    n_features = C * H * W
    n_iters = n_eval - 1
    for it in range(n_iters):
        active = np.flatnonzero(~success)
        if active.size == 0:
            break
        p = p_selection(budget.p_init, it, n_iters)
        s = int(min(max(int(round(math.sqrt(p * n_features / C))), 1), H - 1))
        x_new = x_best[active].copy()
        for j, b in enumerate(active):
            r = rngs[b]
            vh = int(r.integers(0, H - s + 1))
            vw = int(r.integers(0, W - s + 1))
            win = (slice(None), slice(vh, vh + s), slice(vw, vw + s))
            cur = x_best[b][win]
            for _ in range(10):
                signs = r.choice(np.array([-1.0, 1.0], dtype=np.float32), size=(C, 1, 1))
                cand = np.clip(x[b][win] + eps * signs, 0.0, 1.0)
                if not np.array_equal(cand, cur):
                    break
            x_new[j][win] = cand
        margin, ok = evaluate(x_new, active)
        improved = margin < margin_best[active]
        upd = active[improved]
        x_best[upd] = x_new[improved]
        margin_best[upd] = margin[improved]
        success[upd] = ok[improved]
    return _result(x, x_best, success, queries)


# --------------------------------------------------------------------------
# evaluation suite

ATTACK_NAMES = ("pgd_ce", "pgd_t", "square")


@dataclass
class SuiteResult:
    n: int
    clean: np.ndarray  # (n,) bool
    robust: dict  # attack name -> (n,) bool
    aa: np.ndarray
    queries: dict = field(default_factory=dict)

    def accuracy(self, name: str) -> float:
        flags = self.clean if name == "clean" else self.aa if name == "aa" else self.robust[name]
        return 100.0 * float(np.mean(flags))


def _adjudicate(target, x, y) -> np.ndarray:
    return classify(target.predict_proba(x)) == y


def _transfer_examples(surrogate, x, y, budget, attack, cache):
    digest = hashlib.sha256(x.tobytes() + y.astype("<i8").tobytes()).hexdigest()
    key = (surrogate.name, attack, budget, x.shape, digest)
    if cache is not None and key in cache:
        return cache[key]
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([budget.seed, ATTACK_NAMES.index(attack)])))
    if attack == "pgd_ce":
        out = [pgd_ce(surrogate, x, y, budget, rng).x_adv]
    else:
        probs = surrogate.predict_proba(x).copy()
        probs[np.arange(len(y)), y] = -np.inf
        order = np.argsort(-probs, axis=1, kind="stable")
        n_t = min(budget.n_targets, surrogate.num_classes - 1)
        out = [pgd_targeted(surrogate, x, y, order[:, j], budget, rng).x_adv for j in range(n_t)]
    if cache is not None:
        cache[key] = out
    return out


def run_suite(target, knowledge: AttackerKnowledge, x, y, budget: AttackBudget,
              attacks=ATTACK_NAMES, cache: dict | None = None, image_ids=None) -> SuiteResult:
    """Clean accuracy, per-attack robust accuracy and the per-image worst case.

    Gradient attacks are crafted on ``knowledge.surrogate`` and transferred;
    Square runs against ``knowledge.query_access``. Each resulting image is
    scored with one fresh query to ``target``. An image counts toward "aa"
    only if it is classified correctly clean and survives every attack run.
    ``cache`` lets several targets reuse the same surrogate examples.
    ``image_ids`` (default 0..n-1) seed the per-image Square streams.
    """
    x, y = _validate(x, y)
    unknown = set(attacks) - set(ATTACK_NAMES)
    if unknown:
        raise RejectedInput(f"unknown attacks {sorted(unknown)}")
    n = len(y)
    clean = _adjudicate(target, x, y)
    idx = np.flatnonzero(clean)
    robust, queries = {}, {}
    for name in attacks:
        flags = np.zeros(n, dtype=bool)
        if name == "square":
            queries[name] = 0
        if idx.size:
            if name == "square":
                before = knowledge.query_access.count
                ids = idx if image_ids is None else np.asarray(image_ids)[idx]
                res = square_attack(knowledge.query_access, x[idx], y[idx], budget, image_ids=ids)
                queries[name] = int(knowledge.query_access.count - before)
                flags[idx] = _adjudicate(target, res.x_adv, y[idx])
            else:
                # examples are crafted for every image so caches are target-independent
                advs = _transfer_examples(knowledge.surrogate, x, y, budget, name, cache)
                ok = np.ones(idx.size, dtype=bool)
                for adv in advs:
                    ok &= _adjudicate(target, adv[idx], y[idx])
                flags[idx] = ok
        robust[name] = flags
    aa = clean.copy()
    for name in attacks:
        aa &= robust[name]
    return SuiteResult(n, clean, robust, aa, queries)
