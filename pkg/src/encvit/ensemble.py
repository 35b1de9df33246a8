"""Random ensembles of key-encrypted sub-models.

A query image is encrypted once per key, each encrypted copy goes to the
sub-model trained under that key, and the softmax outputs of a subset of the
sub-models are averaged. In ``random`` mode the subset is redrawn for every
query: first a size ``s`` uniformly from ``[s_min, s_max]``, then a uniform
``s``-subset of the N sub-models. ``simple`` mode always uses all N.

All randomness comes from one PCG64 stream seeded at construction and
advanced once per queried image, so experiments replay exactly while the
defender still looks stochastic to an attacker.
"""
from __future__ import annotations

import hashlib
import json
import os
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor_nn
from .crypto_perm import KeySet, encrypt_image, parse_keyset
from .errors import FormatError, RejectedInput

MANIFEST_VERSION = 1


@dataclass
class SubModel:
    params: tensor_nn.TinyViTParams
    key_id: str
    clean_val_accuracy: float = float("nan")


@dataclass(frozen=True)
class SelectionPolicy:
    mode: str = "random"
    s_min: int = 3
    s_max: int | None = None  # None -> N

    @classmethod
    def simple(cls) -> "SelectionPolicy":
        return cls("simple", 0, None)

    def resolve(self, n: int) -> "SelectionPolicy":
        """Concrete bounds for an ensemble of ``n`` sub-models; validates them."""
        if self.mode == "simple":
            return SelectionPolicy("simple", n, n)
        if self.mode != "random":
            raise RejectedInput(f"unknown selection mode {self.mode!r}")
        s_max = n if self.s_max is None else self.s_max
        # the lower bound of 3 only makes sense once there are 3 sub-models
        if not (3 <= self.s_min <= s_max <= n):
            raise RejectedInput(f"random policy needs 3 <= s_min <= s_max <= N, got s_min={self.s_min}, "
                                f"s_max={s_max}, N={n}")
        return SelectionPolicy("random", self.s_min, s_max)

    def describe(self) -> str:
        if self.mode == "simple" or self.s_min == self.s_max:
            return str(self.s_max)
        return " or ".join(str(s) for s in range(self.s_min, self.s_max + 1))


@dataclass
class PredictionRecord:
    subsets: list = field(default_factory=list)  # one sorted index tuple per queried image


def classify(probs: np.ndarray) -> np.ndarray:
    """Argmax over the last axis; ties go to the lowest class index."""
    return np.argmax(np.asarray(probs), axis=-1)


def _as_batch(x):
    x = np.asarray(x, dtype=np.float32)
    if x.ndim == 3:
        return x[None], True
    if x.ndim != 4:
        raise RejectedInput(f"expected image (C, H, W) or batch (B, C, H, W), got {x.shape}")
    return x, False


class PlainModel:
    """A single unencrypted model exposing the same query interface as an ensemble."""

    def __init__(self, params: tensor_nn.TinyViTParams, name: str = "plain"):
        self.params = params
        self.name = name

    def predict_proba(self, x):
        xb, single = _as_batch(x)
        p = tensor_nn.softmax(tensor_nn.forward(self.params, xb).astype(np.float64))
        return p[0] if single else p

    def __call__(self, x):
        return self.predict_proba(x)


class EnsembleModel:
    def __init__(self, submodels, keyset: KeySet, policy: SelectionPolicy = SelectionPolicy(), seed: int = 0,
                 name: str = "ensemble"):
        submodels = list(submodels)
        if len(submodels) != keyset.N:
            raise RejectedInput(f"{len(submodels)} sub-models for {keyset.N} keys")
        for i, (sm, kid) in enumerate(zip(submodels, keyset.key_ids)):
            if sm.key_id != kid:
                raise RejectedInput(f"sub-model {i} is bound to key {sm.key_id!r}, expected {kid!r}")
            cfg = sm.params.config
            if (cfg.channels, cfg.height, cfg.width) != (keyset.C, keyset.H, keyset.W) or cfg.patch_size != keyset.M:
                raise RejectedInput(f"sub-model {i} geometry does not match the key set")
        self.submodels = submodels
        self.keyset = keyset
        self.policy = policy.resolve(len(submodels))
        self.seed = int(seed)
        self.name = name
        self._rng = np.random.Generator(np.random.PCG64(self.seed))
        self._lock = threading.Lock()

    def __getstate__(self):
        state = self.__dict__.copy()
        del state["_lock"]
        return state

    def __setstate__(self, state):
        self.__dict__.update(state)
        self._lock = threading.Lock()

    @property
    def N(self) -> int:
        return len(self.submodels)

    def with_policy(self, policy: SelectionPolicy, seed: int | None = None, name: str | None = None):
        return EnsembleModel(self.submodels, self.keyset, policy, self.seed if seed is None else seed,
                             name or self.name)

    def reseed(self, seed: int) -> None:
        with self._lock:
            self.seed = int(seed)
            self._rng = np.random.Generator(np.random.PCG64(self.seed))

    def spawn_streams(self, n: int) -> list:
        """Independent per-worker generators derived from the master seed."""
        return [np.random.Generator(np.random.PCG64(s)) for s in np.random.SeedSequence(self.seed).spawn(n)]

    # -- per-model pipeline

    def predict_submodel(self, i: int, x_plain) -> np.ndarray:
        if not 0 <= i < self.N:
            raise RejectedInput(f"sub-model index {i} out of range for N={self.N}")
        xb, single = _as_batch(x_plain)
        p = self._probs(i, xb)
        return p[0] if single else p

    def _probs(self, i, xb):
        sm = self.submodels[i]
        x_enc = encrypt_image(xb, self.keyset[sm.key_id], self.keyset.M)
        return tensor_nn.softmax(tensor_nn.forward(sm.params, x_enc).astype(np.float64))

    # -- selection

    def _draw(self, rng) -> tuple:
        p = self.policy
        s = int(rng.integers(p.s_min, p.s_max + 1))
        if s == self.N:
            return tuple(range(self.N))
        return tuple(sorted(int(i) for i in rng.choice(self.N, size=s, replace=False)))

    def select_subset(self, rng=None) -> tuple:
        if rng is not None:
            return self._draw(rng)
        with self._lock:
            return self._draw(self._rng)

    # -- aggregate predictions

    def _average(self, xb, subsets):
        B = xb.shape[0]
        out = np.zeros((B, self.submodels[0].params.config.num_classes))
        for i in range(self.N):
            rows = [b for b, sub in enumerate(subsets) if i in sub]
            if not rows:
                continue
            if len(rows) == B:
                out += self._probs(i, xb)
            else:
                out[rows] += self._probs(i, xb[rows])
        sizes = np.array([len(s) for s in subsets], dtype=np.float64)
        return out / sizes[:, None]

    def predict_simple(self, x_plain) -> np.ndarray:
        xb, single = _as_batch(x_plain)
        p = self._average(xb, [tuple(range(self.N))] * xb.shape[0])
        return p[0] if single else p

    def predict_random(self, x_plain, rng=None):
        """Probabilities plus the record of which sub-models answered each image."""
        xb, single = _as_batch(x_plain)
        if rng is None:
            with self._lock:
                subsets = [self._draw(self._rng) for _ in range(xb.shape[0])]
        else:
            subsets = [self._draw(rng) for _ in range(xb.shape[0])]
        p = self._average(xb, subsets)
        return (p[0] if single else p), PredictionRecord(subsets)

    def predict_proba(self, x_plain) -> np.ndarray:
        """Query entry point used by attacks and evaluation; follows the policy."""
        if self.policy.mode == "simple":
            return self.predict_simple(x_plain)
        return self.predict_random(x_plain)[0]

    def __call__(self, x_plain):
        return self.predict_proba(x_plain)


# --------------------------------------------------------------------------
# manifest


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(path, ens: EnsembleModel, weight_paths, keyset_path, extra: dict | None = None) -> dict:
    """Write a JSON manifest; paths are stored relative to the manifest's directory."""
    base = Path(path).resolve().parent
    rel = lambda p: os.path.relpath(Path(p).resolve(), base)
    doc = {
        "version": MANIFEST_VERSION,
        "N": ens.N,
        "policy": {"mode": ens.policy.mode, "s_min": ens.policy.s_min, "s_max": ens.policy.s_max},
        "seed": ens.seed,
        "keyset": rel(keyset_path),
        "submodels": [
            {"key_id": sm.key_id, "weights": rel(wp), "sha256": _sha256(wp),
             "clean_val_accuracy": sm.clean_val_accuracy}
            for sm, wp in zip(ens.submodels, weight_paths)
        ],
    }
    if extra:
        doc.update(extra)
    return doc


def load_manifest(path, policy: SelectionPolicy | None = None, seed: int | None = None, verify: bool = True):
    """Rebuild an EnsembleModel from a manifest. Returns (model, manifest dict)."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
        base = path.resolve().parent
        keyset = parse_keyset((base / doc["keyset"]).read_bytes())
        subs = []
        for entry in doc["submodels"]:
            wp = base / entry["weights"]
            data = wp.read_bytes()
            if verify and hashlib.sha256(data).hexdigest() != entry["sha256"]:
                raise FormatError(f"weight file {wp} fails its integrity hash")
            subs.append(SubModel(tensor_nn.load_weights(data), entry["key_id"],
                                 float(entry.get("clean_val_accuracy", "nan"))))
        if int(doc["N"]) != len(subs):
            raise FormatError("manifest N does not match the sub-model list")
        pol = doc["policy"]
        if policy is None:
            policy = SelectionPolicy(pol["mode"], int(pol["s_min"]), pol.get("s_max"))
        ids = [sm.key_id for sm in subs]
        if ids != keyset.key_ids:
            # a manifest may cover a prefix or any subset of a larger keyset
            missing = set(ids) - set(keyset.key_ids)
            if missing:
                raise FormatError(f"manifest names keys absent from the keyset: {sorted(missing)}")
            keyset = KeySet(tuple(keyset[k] for k in ids), keyset.M, keyset.C, keyset.H, keyset.W)
    except (KeyError, TypeError, ValueError) as e:
        if isinstance(e, (FormatError, RejectedInput)):
            raise
        raise FormatError(f"malformed manifest: {e}") from None
    return EnsembleModel(subs, keyset, policy, doc["seed"] if seed is None else seed), doc
