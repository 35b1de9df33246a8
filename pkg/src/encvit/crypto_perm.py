"""Block-wise pixel-shuffling encryption with secret permutation keys.

An image of shape (C, H, W) is cut into non-overlapping M x M blocks. Each
block is flattened in (c, i, j) order -- channel-major, then row, then column
inside the block -- into a vector ``b`` of length ``p_b = C * M * M``. A key is
a permutation ``v`` of ``range(p_b)``; encryption produces ``b'[k] = b[v[k]]``
for every block, using the same ``v`` everywhere.

Indices are 0-based. The flattening helpers here are shared with
``tensor_nn.patchify`` so that blocks and ViT patches line up exactly.

Only this module reads a key's permutation vector. Everything else consumes a
key through :meth:`PermutationKey.apply` / :meth:`PermutationKey.invert` or the
image-level :func:`encrypt_image` / :func:`decrypt_image`.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, RejectedInput

KEYSET_VERSION = 1


def flatten_blocks(x: np.ndarray, M: int) -> np.ndarray:
    """(..., C, H, W) -> (..., H//M * W//M, C*M*M), blocks in row-major grid order."""
    if x.ndim < 3:
        raise RejectedInput(f"expected (..., C, H, W) array, got shape {x.shape}")
    *lead, C, H, W = x.shape
    if M < 1 or H % M or W % M:
        raise RejectedInput(f"image {H}x{W} is not divisible into {M}x{M} blocks")
    hb, wb = H // M, W // M
    n = len(lead)
    y = x.reshape(*lead, C, hb, M, wb, M)
    # (..., hb, wb, C, i, j)
    y = y.transpose(*range(n), n + 1, n + 3, n, n + 2, n + 4)
    return y.reshape(*lead, hb * wb, C * M * M)


def unflatten_blocks(b: np.ndarray, M: int, C: int, H: int, W: int) -> np.ndarray:
    """Inverse of :func:`flatten_blocks`."""
    *lead, nb, pb = b.shape
    hb, wb = H // M, W // M
    if nb != hb * wb or pb != C * M * M:
        raise RejectedInput(f"block array {b.shape} does not match geometry {C}x{H}x{W}, M={M}")
    n = len(lead)
    y = b.reshape(*lead, hb, wb, C, M, M)
    y = y.transpose(*range(n), n + 2, n, n + 3, n + 1, n + 4)
    return y.reshape(*lead, C, H, W)


class PermutationKey:
    """A secret bijection on block-pixel indices.

    The permutation vector is deliberately not part of the public surface.
    """

    __slots__ = ("key_id", "p_b", "seed", "_v", "_inv")

    def __init__(self, key_id: str, v, seed: int | None = None):
        v = np.asarray(v, dtype=np.int64)
        if v.ndim != 1 or v.size == 0:
            raise RejectedInput("invalid permutation: key vector must be 1-D and non-empty")
        if not np.array_equal(np.sort(v), np.arange(v.size)):
            raise RejectedInput("invalid permutation: key vector is not a bijection on 0..p_b-1")
        self.key_id = str(key_id)
        self.p_b = int(v.size)
        self.seed = None if seed is None else int(seed)
        self._v = v
        self._v.setflags(write=False)
        inv = np.empty_like(v)
        inv[v] = np.arange(v.size)
        self._inv = inv

    def apply(self, b: np.ndarray) -> np.ndarray:
        """Shuffle along the last axis: out[..., k] = b[..., v[k]]."""
        if b.shape[-1] != self.p_b:
            raise RejectedInput(f"key {self.key_id!r} has p_b={self.p_b}, got vectors of length {b.shape[-1]}")
        return b[..., self._v]

    def invert(self, b: np.ndarray) -> np.ndarray:
        if b.shape[-1] != self.p_b:
            raise RejectedInput(f"key {self.key_id!r} has p_b={self.p_b}, got vectors of length {b.shape[-1]}")
        return b[..., self._inv]

    def is_identity(self) -> bool:
        return bool(np.array_equal(self._v, np.arange(self.p_b)))

    def __eq__(self, other):
        if not isinstance(other, PermutationKey):
            return NotImplemented
        return (self.key_id, self.seed) == (other.key_id, other.seed) and np.array_equal(self._v, other._v)

    def __hash__(self):
        return hash((self.key_id, self.p_b, self._v.tobytes()))

    def __repr__(self):
        # never print the permutation itself
        return f"PermutationKey(key_id={self.key_id!r}, p_b={self.p_b}, seed={self.seed})"


def generate_key(seed: int, p_b: int, key_id: str | None = None) -> PermutationKey:
    """Uniform random permutation of ``range(p_b)``.

    Fisher-Yates (Durstenfeld) driven by numpy's PCG64 seeded with ``seed``:
    for i = p_b-1 .. 1, swap position i with j drawn uniformly from [0, i].
    """
    if p_b < 1:
        raise RejectedInput("p_b must be >= 1")
    rng = np.random.Generator(np.random.PCG64(seed))
    v = np.arange(p_b, dtype=np.int64)
    for i in range(p_b - 1, 0, -1):
        j = int(rng.integers(0, i + 1))
        v[i], v[j] = v[j], v[i]
    return PermutationKey(key_id if key_id is not None else f"seed{seed}", v, seed=seed)


def identity_key(p_b: int, key_id: str = "identity") -> PermutationKey:
    return PermutationKey(key_id, np.arange(p_b), seed=None)


def compose(outer: PermutationKey, inner: PermutationKey, key_id: str | None = None) -> PermutationKey:
    """Key equivalent to encrypting with ``inner`` and then with ``outer``."""
    if outer.p_b != inner.p_b:
        raise RejectedInput("cannot compose keys with different p_b")
    return PermutationKey(key_id or f"{outer.key_id}*{inner.key_id}", inner._v[outer._v])


def _check_geometry(x: np.ndarray, key: PermutationKey, M: int) -> None:
    if x.ndim < 3:
        raise RejectedInput(f"expected image (C, H, W) or batch, got shape {x.shape}")
    C = x.shape[-3]
    if key.p_b != C * M * M:
        raise RejectedInput(f"key p_b={key.p_b} does not match C*M*M={C * M * M}")


def encrypt_image(x: np.ndarray, key: PermutationKey, M: int) -> np.ndarray:
    """Encrypt one image (C, H, W) or a batch (..., C, H, W)."""
    x = np.asarray(x)
    _check_geometry(x, key, M)
    C, H, W = x.shape[-3:]
    return unflatten_blocks(key.apply(flatten_blocks(x, M)), M, C, H, W)


def decrypt_image(x_enc: np.ndarray, key: PermutationKey, M: int) -> np.ndarray:
    x_enc = np.asarray(x_enc)
    _check_geometry(x_enc, key, M)
    C, H, W = x_enc.shape[-3:]
    return unflatten_blocks(key.invert(flatten_blocks(x_enc, M)), M, C, H, W)


@dataclass(frozen=True, eq=True)
class KeySet:
    keys: tuple
    M: int
    C: int
    H: int
    W: int

    def __post_init__(self):
        object.__setattr__(self, "keys", tuple(self.keys))
        if len(self.keys) < 1:
            raise RejectedInput("N >= 1 required")
        if self.M < 1 or self.H % self.M or self.W % self.M:
            raise RejectedInput(f"image {self.H}x{self.W} is not divisible into {self.M}x{self.M} blocks")
        p_b = self.C * self.M * self.M
        for k in self.keys:
            if k.p_b != p_b:
                raise RejectedInput(f"key {k.key_id!r} has p_b={k.p_b}, geometry needs {p_b}")
        ids = [k.key_id for k in self.keys]
        if len(set(ids)) != len(ids):
            raise RejectedInput("key ids must be unique")

    @property
    def N(self) -> int:
        return len(self.keys)

    @property
    def p_b(self) -> int:
        return self.C * self.M * self.M

    @property
    def key_ids(self) -> list:
        return [k.key_id for k in self.keys]

    def __getitem__(self, key_id: str) -> PermutationKey:
        for k in self.keys:
            if k.key_id == key_id:
                return k
        raise KeyError(key_id)

    def subset(self, n: int) -> "KeySet":
        return KeySet(self.keys[:n], self.M, self.C, self.H, self.W)

    def encrypt(self, x: np.ndarray, key_id: str) -> np.ndarray:
        return encrypt_image(x, self[key_id], self.M)

    def decrypt(self, x: np.ndarray, key_id: str) -> np.ndarray:
        return decrypt_image(x, self[key_id], self.M)


def generate_keyset(n: int, M: int, C: int, H: int, W: int, seed: int) -> KeySet:
    """N keys with ids k0..k{N-1}; key i is seeded from SeedSequence(seed).spawn."""
    if n < 1:
        raise RejectedInput("N >= 1 required")
    children = np.random.SeedSequence(seed).generate_state(n, dtype=np.uint64)
    keys = [generate_key(int(s), C * M * M, key_id=f"k{i}") for i, s in enumerate(children)]
    return KeySet(keys, M, C, H, W)


def serialize_keyset(ks: KeySet) -> bytes:
    doc = {
        "version": KEYSET_VERSION,
        "M": ks.M,
        "C": ks.C,
        "H": ks.H,
        "W": ks.W,
        "N": ks.N,
        "keys": [{"key_id": k.key_id, "seed": k.seed, "v": [int(i) for i in k._v]} for k in ks.keys],
    }
    return (json.dumps(doc, indent=1) + "\n").encode()


def parse_keyset(data: bytes) -> KeySet:
    try:
        doc = json.loads(data)
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"keyset is not valid JSON: {e}") from None
    if not isinstance(doc, dict):
        raise FormatError("keyset must be a JSON object")
    if doc.get("version") != KEYSET_VERSION:
        raise FormatError(f"unsupported keyset version {doc.get('version')!r}")
    try:
        entries = doc["keys"]
        M, C, H, W, N = (int(doc[f]) for f in ("M", "C", "H", "W", "N"))
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"keyset missing or malformed field: {e}") from None
    if not entries or N < 1:
        raise FormatError("N >= 1 required")
    if len(entries) != N:
        raise FormatError(f"keyset declares N={N} but lists {len(entries)} keys")
    keys = []
    for e in entries:
        try:
            keys.append(PermutationKey(e["key_id"], e["v"], seed=e.get("seed")))
        except RejectedInput as err:
            raise FormatError(f"key {e.get('key_id')!r}: {err}") from None
        except (KeyError, TypeError, ValueError) as err:
            raise FormatError(f"invalid permutation entry: {err}") from None
    try:
        return KeySet(keys, M, C, H, W)
    except RejectedInput as err:
        raise FormatError(str(err)) from None
