"""A fixed tiny vision transformer with hand-written forward and backward passes.

Architecture (pre-LN): patch embedding -> [cls] + positional embedding ->
L x (LN -> multi-head self-attention -> residual, LN -> 2-layer GELU MLP ->
residual) -> LN on the [cls] token -> linear head.

Tensors are plain numpy arrays. Images are (B, C, H, W) floats in [0, 1].
Training and attacks run in float32; ``params.astype(np.float64)`` gives the
float64 mode used for finite-difference checks.
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .crypto_perm import flatten_blocks, unflatten_blocks
from .errors import FormatError, RejectedInput

LN_EPS = 1e-6
GELU_C = float(np.sqrt(2.0 / np.pi))
WEIGHT_MAGIC = b"TVIT"
WEIGHT_VERSION = 1


@dataclass(frozen=True)
class ViTConfig:
    patch_size: int = 4
    embed_dim: int = 64
    num_blocks: int = 2
    heads: int = 4
    num_classes: int = 10
    channels: int = 3
    height: int = 32
    width: int = 32
    mlp_ratio: int = 2

    def __post_init__(self):
        if self.embed_dim % self.heads:
            raise RejectedInput(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        M = self.patch_size
        if M < 1 or self.height % M or self.width % M:
            raise RejectedInput(f"image {self.height}x{self.width} not divisible by patch size {M}")

    @property
    def p_b(self) -> int:
        return self.channels * self.patch_size**2

    @property
    def num_patches(self) -> int:
        return (self.height // self.patch_size) * (self.width // self.patch_size)

    @property
    def image_shape(self) -> tuple:
        return (self.channels, self.height, self.width)


def param_shapes(cfg: ViTConfig) -> dict:
    d, T, hid = cfg.embed_dim, cfg.num_patches + 1, cfg.embed_dim * cfg.mlp_ratio
    shapes = {
        "patch_embed.w": (cfg.p_b, d),
        "patch_embed.b": (d,),
        "cls_token": (d,),
        "pos_embed": (T, d),
    }
    for l in range(cfg.num_blocks):
        p = f"blocks.{l}."
        shapes.update({
            p + "ln1.g": (d,), p + "ln1.b": (d,),
            p + "attn.q.w": (d, d), p + "attn.q.b": (d,),
            p + "attn.k.w": (d, d), p + "attn.k.b": (d,),
            p + "attn.v.w": (d, d), p + "attn.v.b": (d,),
            p + "attn.o.w": (d, d), p + "attn.o.b": (d,),
            p + "ln2.g": (d,), p + "ln2.b": (d,),
            p + "mlp.fc1.w": (d, hid), p + "mlp.fc1.b": (hid,),
            p + "mlp.fc2.w": (hid, d), p + "mlp.fc2.b": (d,),
        })
    shapes.update({
        "norm.g": (d,), "norm.b": (d,),
        "head.w": (d, cfg.num_classes), "head.b": (cfg.num_classes,),
    })
    return shapes


@dataclass
class TinyViTParams:
    """Configuration plus a name -> array mapping in a fixed order."""

    config: ViTConfig
    arrays: dict = field(default_factory=dict)

    def __post_init__(self):
        shapes = param_shapes(self.config)
        if list(self.arrays) != list(shapes):
            missing = set(shapes) ^ set(self.arrays)
            if missing:
                raise RejectedInput(f"parameter set mismatch: {sorted(missing)}")
            self.arrays = {k: self.arrays[k] for k in shapes}
        for k, s in shapes.items():
            if self.arrays[k].shape != s:
                raise RejectedInput(f"{k}: expected shape {s}, got {self.arrays[k].shape}")

    def __getitem__(self, name):
        return self.arrays[name]

    @property
    def dtype(self):
        return self.arrays["head.w"].dtype

    def astype(self, dtype) -> "TinyViTParams":
        return replace(self, arrays={k: v.astype(dtype) for k, v in self.arrays.items()})

    def copy(self) -> "TinyViTParams":
        return replace(self, arrays={k: v.copy() for k, v in self.arrays.items()})

    def num_parameters(self) -> int:
        return sum(v.size for v in self.arrays.values())

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.arrays.values()])

    def equal(self, other: "TinyViTParams") -> bool:
        return self.config == other.config and all(
            np.array_equal(a, other.arrays[k]) for k, a in self.arrays.items()
        )


def init_params(cfg: ViTConfig, seed: int, std: float = 0.02, dtype=np.float32) -> TinyViTParams:
    """Truncated normal (at +-2 std) weights and embeddings, zero biases, unit LN gains."""
    rng = np.random.Generator(np.random.PCG64(seed))
    arrays = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".g"):
            a = np.ones(shape)
        elif name.endswith(".b"):
            a = np.zeros(shape)
        else:
            a = rng.standard_normal(shape)
            bad = np.abs(a) > 2
            while bad.any():
                a[bad] = rng.standard_normal(int(bad.sum()))
                bad = np.abs(a) > 2
            a = a * std
        arrays[name] = a.astype(dtype)
    return TinyViTParams(cfg, arrays)


def zero_params(cfg: ViTConfig, dtype=np.float32) -> TinyViTParams:
    return TinyViTParams(cfg, {k: np.zeros(s, dtype) for k, s in param_shapes(cfg).items()})


# --------------------------------------------------------------------------
# forward / backward


def patchify(x: np.ndarray, M: int) -> np.ndarray:
    """(B, C, H, W) or (C, H, W) -> (..., num_patches, C*M*M) in (c, i, j) order."""
    return flatten_blocks(np.asarray(x), M)


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _ln_fwd(x, g, b):
    xhat = x - x.mean(-1, keepdims=True)
    var = np.einsum("...i,...i->...", xhat, xhat)[..., None] / x.shape[-1]
    rstd = 1.0 / np.sqrt(var + LN_EPS)
    xhat *= rstd
    return xhat * g + b, (xhat, rstd)


def _ln_bwd(dy, g, cache):
    xhat, rstd = cache
    flat_dy = dy.reshape(-1, dy.shape[-1])
    dg = np.einsum("ij,ij->j", flat_dy, xhat.reshape(flat_dy.shape))
    db = flat_dy.sum(0)
    n = dy.shape[-1]
    dxh = dy * g
    proj = np.einsum("...i,...i->...", dxh, xhat)[..., None] / n
    dxh -= dxh.mean(-1, keepdims=True)
    dxh -= xhat * proj
    dxh *= rstd
    return dxh, dg, db


def _gelu(x):
    t = np.tanh(GELU_C * (x + 0.044715 * (x * x * x)))
    return 0.5 * x * (1.0 + t), t


def _gelu_grad(x, t):
    # 0.5 * (1 + t + x (1 - t^2) c (1 + 3 a x^2))
    inner = x * x
    inner *= 3 * 0.044715 * GELU_C
    inner += GELU_C
    out = t * t
    np.subtract(1.0, out, out=out)
    out *= x
    out *= inner
    out += t
    out += 1.0
    out *= 0.5
    return out


def _lin(x, w, b):
    return (x.reshape(-1, x.shape[-1]) @ w + b).reshape(*x.shape[:-1], w.shape[1])


def _check_input(params: TinyViTParams, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    cfg = params.config
    if x.ndim != 4 or x.shape[1:] != cfg.image_shape:
        raise RejectedInput(f"expected batch (B, {cfg.channels}, {cfg.height}, {cfg.width}), got {x.shape}")
    if x.shape[0] == 0:
        raise RejectedInput("empty batch")
    return x.astype(params.dtype, copy=False)


def _forward(params: TinyViTParams, x: np.ndarray):
    cfg = params.config
    P = params.arrays
    B = x.shape[0]
    d, nh = cfg.embed_dim, cfg.heads
    dh = d // nh
    T = cfg.num_patches + 1
    scale = float(1.0 / np.sqrt(dh))

    xp = patchify(x, cfg.patch_size)  # (B, P, p_b)
    emb = _lin(xp, P["patch_embed.w"], P["patch_embed.b"])
    z = np.empty((B, T, d), dtype=emb.dtype)
    z[:, 0] = P["cls_token"]
    z[:, 1:] = emb
    z += P["pos_embed"]

    caches = []
    for l in range(cfg.num_blocks):
        p = f"blocks.{l}."
        u, ln1 = _ln_fwd(z, P[p + "ln1.g"], P[p + "ln1.b"])
        # one fused projection for q, k and v
        wqkv = np.concatenate([P[p + "attn.q.w"], P[p + "attn.k.w"], P[p + "attn.v.w"]], axis=1)
        bqkv = np.concatenate([P[p + "attn.q.b"], P[p + "attn.k.b"], P[p + "attn.v.b"]])
        qkv = _lin(u, wqkv, bqkv).reshape(B, T, 3, nh, dh).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0] * scale, qkv[1], qkv[2]
        a = q @ k.transpose(0, 1, 3, 2)
        a -= a.max(-1, keepdims=True)
        np.exp(a, out=a)
        a /= a.sum(-1, keepdims=True)
        o = (a @ v).transpose(0, 2, 1, 3).reshape(B, T, d)
        z1 = z + _lin(o, P[p + "attn.o.w"], P[p + "attn.o.b"])
        u2, ln2 = _ln_fwd(z1, P[p + "ln2.g"], P[p + "ln2.b"])
        hpre = _lin(u2, P[p + "mlp.fc1.w"], P[p + "mlp.fc1.b"])
        hact, t = _gelu(hpre)
        z = z1 + _lin(hact, P[p + "mlp.fc2.w"], P[p + "mlp.fc2.b"])
        caches.append((u, ln1, q, k, v, a, o, u2, ln2, hpre, hact, t))

    f, lnf = _ln_fwd(z[:, 0], P["norm.g"], P["norm.b"])
    logits = f @ P["head.w"] + P["head.b"]
    return logits, (xp, caches, f, lnf, B, T)


def _backward(params: TinyViTParams, cache, dlogits: np.ndarray, want_params: bool = True):
    """Reverse pass. Returns (param grads or None, d logits / d input image)."""
    cfg = params.config
    P = params.arrays
    xp, caches, f, lnf, B, T = cache
    d, nh = cfg.embed_dim, cfg.heads
    dh = d // nh
    scale = float(1.0 / np.sqrt(dh))
    G = {} if want_params else None

    def back(dout, w):
        return (dout.reshape(-1, dout.shape[-1]) @ w.T).reshape(*dout.shape[:-1], w.shape[0])

    def mm_grad(name, inp, dout):
        if want_params:
            G[name + ".w"] = inp.reshape(-1, inp.shape[-1]).T @ dout.reshape(-1, dout.shape[-1])
            G[name + ".b"] = dout.reshape(-1, dout.shape[-1]).sum(0)

    mm_grad("head", f, dlogits)
    df = dlogits @ P["head.w"].T
    dz0, dg, db = _ln_bwd(df, P["norm.g"], lnf)
    if want_params:
        G["norm.g"], G["norm.b"] = dg, db
    dz = np.zeros((B, T, d), dtype=dlogits.dtype)
    dz[:, 0] = dz0

    for l in reversed(range(cfg.num_blocks)):
        p = f"blocks.{l}."
        u, ln1, q, k, v, a, o, u2, ln2, hpre, hact, t = caches[l]
        # MLP branch
        mm_grad(p + "mlp.fc2", hact, dz)
        dh_ = back(dz, P[p + "mlp.fc2.w"]) * _gelu_grad(hpre, t)
        mm_grad(p + "mlp.fc1", u2, dh_)
        du2 = back(dh_, P[p + "mlp.fc1.w"])
        dx, dg, db = _ln_bwd(du2, P[p + "ln2.g"], ln2)
        if want_params:
            G[p + "ln2.g"], G[p + "ln2.b"] = dg, db
        dz1 = dz + dx
        # attention branch
        mm_grad(p + "attn.o", o, dz1)
        do = back(dz1, P[p + "attn.o.w"]).reshape(B, T, nh, dh).transpose(0, 2, 1, 3)
        da = do @ v.transpose(0, 1, 3, 2)
        dv = a.transpose(0, 1, 3, 2) @ do
        ds = da - np.einsum("...i,...i->...", da, a)[..., None]
        ds *= a
        dq = ds @ k
        dq *= scale
        dk = ds.transpose(0, 1, 3, 2) @ q  # q was stored pre-scaled

        def merge(t_):
            return t_.transpose(0, 2, 1, 3).reshape(B, T, d)

        dq, dk, dv = merge(dq), merge(dk), merge(dv)
        mm_grad(p + "attn.q", u, dq)
        mm_grad(p + "attn.k", u, dk)
        mm_grad(p + "attn.v", u, dv)
        du = back(dq, P[p + "attn.q.w"]) + back(dk, P[p + "attn.k.w"]) + back(dv, P[p + "attn.v.w"])
        dx, dg, db = _ln_bwd(du, P[p + "ln1.g"], ln1)
        if want_params:
            G[p + "ln1.g"], G[p + "ln1.b"] = dg, db
        dz = dz1 + dx

    demb = dz[:, 1:]
    if want_params:
        G["pos_embed"] = dz.sum(0)
        G["cls_token"] = dz[:, 0].sum(0)
        mm_grad("patch_embed", xp, demb)
        G = {name: G[name] for name in P}
    dxp = back(demb, P["patch_embed.w"])
    dimg = unflatten_blocks(dxp, cfg.patch_size, cfg.channels, cfg.height, cfg.width)
    return G, dimg


def forward(params: TinyViTParams, x_batch: np.ndarray) -> np.ndarray:
    """Logits (B, num_classes) for a batch of images."""
    x = _check_input(params, x_batch)
    return _forward(params, x)[0]


def predict_proba(params: TinyViTParams, x_batch: np.ndarray) -> np.ndarray:
    return softmax(forward(params, x_batch))


def _check_labels(labels, n, num_classes) -> np.ndarray:
    y = np.asarray(labels)
    if y.shape != (n,):
        raise RejectedInput(f"expected {n} labels, got shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        raise RejectedInput("labels must be integers")
    if n and (y.min() < 0 or y.max() >= num_classes):
        raise RejectedInput(f"labels must lie in [0, {num_classes})")
    return y.astype(np.int64)


def cross_entropy(logits: np.ndarray, labels) -> float:
    """Mean over the batch of -log softmax(logits)[label]."""
    logits = np.asarray(logits)
    y = _check_labels(labels, logits.shape[0], logits.shape[1])
    return float(-log_softmax(logits)[np.arange(len(y)), y].mean())


def _ce_terms(logits, y):
    """Per-sample CE and its derivative w.r.t. the logits (unnormalised by batch size)."""
    ls = log_softmax(logits)
    idx = np.arange(len(y))
    dl = np.exp(ls)
    dl[idx, y] -= 1.0
    return -ls[idx, y], dl


def loss_and_input_gradient(params: TinyViTParams, x, y):
    """Per-sample CE losses, logits and per-sample input gradients in one pass."""
    x = _check_input(params, x)
    y = _check_labels(y, x.shape[0], params.config.num_classes)
    logits, cache = _forward(params, x)
    loss, dl = _ce_terms(logits, y)
    _, dx = _backward(params, cache, dl, want_params=False)
    return loss, logits, dx


def input_gradient(params: TinyViTParams, x, y) -> np.ndarray:
    """d CE(x_b, y_b) / d x_b for each image b (per-sample, not batch-averaged)."""
    return loss_and_input_gradient(params, x, y)[2]


def forward_vjp(params: TinyViTParams, x):
    """Logits plus a function mapping a logits cotangent to an input-image cotangent."""
    x = _check_input(params, x)
    logits, cache = _forward(params, x)

    def vjp(dlogits):
        dlogits = np.asarray(dlogits, dtype=params.dtype)
        if dlogits.shape != logits.shape:
            raise RejectedInput(f"cotangent shape {dlogits.shape} != logits shape {logits.shape}")
        return _backward(params, cache, dlogits, want_params=False)[1]

    return logits, vjp


def logits_vjp(params: TinyViTParams, x, dlogits) -> tuple:
    """Logits and the vector-Jacobian product dlogits^T d logits / d x."""
    x = _check_input(params, x)
    logits, cache = _forward(params, x)
    dlogits = np.asarray(dlogits, dtype=params.dtype)
    if dlogits.shape != logits.shape:
        raise RejectedInput(f"cotangent shape {dlogits.shape} != logits shape {logits.shape}")
    return logits, _backward(params, cache, dlogits, want_params=False)[1]


def param_gradients(params: TinyViTParams, batch, labels) -> dict:
    """Gradients of the batch-mean CE with respect to every parameter."""
    return loss_and_param_gradients(params, batch, labels)[2]


def loss_and_param_gradients(params: TinyViTParams, batch, labels):
    x = _check_input(params, batch)
    y = _check_labels(labels, x.shape[0], params.config.num_classes)
    logits, cache = _forward(params, x)
    loss, dl = _ce_terms(logits, y)
    G, _ = _backward(params, cache, dl / len(y), want_params=True)
    return float(loss.mean()), logits, G


# --------------------------------------------------------------------------
# gradient checking


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """max_i |a_i - n_i| / max(|a_i|, |n_i|, floor); 0/0 counts as 0."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    if a.size == 0:
        return 0.0
    den = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / den))


def numeric_input_gradient(params: TinyViTParams, x, y, step: float = 1e-4, coords=None) -> np.ndarray:
    """Central differences of the summed per-sample CE w.r.t. selected input coordinates."""
    x = np.array(x, dtype=params.dtype)
    y = np.asarray(y)
    flat = x.reshape(-1)
    coords = np.arange(flat.size) if coords is None else np.asarray(coords)
    out = np.empty(len(coords))

    def total(z):
        return float(-log_softmax(forward(params, z))[np.arange(len(y)), y].sum())

    for n, c in enumerate(coords):
        orig = flat[c]
        flat[c] = orig + step
        up = total(x)
        flat[c] = orig - step
        down = total(x)
        flat[c] = orig
        out[n] = (up - down) / (2 * step)
    return out


def grad_check(params: TinyViTParams, x, y, step: float = 1e-4, coords=None, analytic=None) -> float:
    """Max relative error between the analytic input gradient and central differences.

    ``analytic`` may be supplied to check an externally produced gradient.
    """
    if analytic is None:
        analytic = input_gradient(params, x, y)
    a = np.asarray(analytic).reshape(-1)
    coords = np.arange(a.size) if coords is None else np.asarray(coords)
    numeric = numeric_input_gradient(params, x, y, step, coords)
    return relative_error(a[coords], numeric)


def param_grad_check(params: TinyViTParams, x, y, step: float = 1e-4, fraction: float = 0.01, seed: int = 0) -> float:
    """Same check for parameter gradients on a random ``fraction`` of coordinates."""
    rng = np.random.Generator(np.random.PCG64(seed))
    G = param_gradients(params, x, y)
    analytic, numeric = [], []
    for name, arr in params.arrays.items():
        flat = arr.reshape(-1)
        k = max(1, int(round(fraction * flat.size)))
        for c in rng.choice(flat.size, size=k, replace=False):
            orig = flat[c]
            flat[c] = orig + step
            up = cross_entropy(forward(params, x), y)
            flat[c] = orig - step
            down = cross_entropy(forward(params, x), y)
            flat[c] = orig
            analytic.append(G[name].reshape(-1)[c])
            numeric.append((up - down) / (2 * step))
    return relative_error(np.array(analytic), np.array(numeric))


# --------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.03
    momentum: float = 0.9
    epochs: int = 20
    batch_size: int = 64
    rng_seed: int = 0
    warmup_epochs: int = 1
    cosine: bool = True
    grad_clip: float = 1.0
    patience: int = 0  # 0 disables early stopping
    optimizer: str = "sgd"  # "sgd" (momentum) or "adam"
    betas: tuple = (0.9, 0.999)
    frozen: tuple = ()  # parameter-name prefixes that are never updated

    def __post_init__(self):
        if self.optimizer not in ("sgd", "adam"):
            raise RejectedInput(f"unknown optimizer {self.optimizer!r}")
        if not self.learning_rate >= 0:
            raise RejectedInput("learning_rate must be non-negative")
        if not 0 <= self.momentum < 1:
            raise RejectedInput("momentum must lie in [0, 1)")
        if self.epochs < 1 or self.batch_size < 1:
            raise RejectedInput("epochs and batch_size must be positive")


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    train_accuracy: float
    val_accuracy: float | None = None
    lr: float = 0.0


def _lr_at(cfg: TrainConfig, step: int, total: int, steps_per_epoch: int) -> float:
    warm = cfg.warmup_epochs * steps_per_epoch
    if warm and step < warm:
        return cfg.learning_rate * (step + 1) / warm
    if not cfg.cosine:
        return cfg.learning_rate
    frac = (step - warm) / max(1, total - warm)
    return cfg.learning_rate * 0.5 * (1.0 + np.cos(np.pi * frac))


def accuracy(params: TinyViTParams, x, y, batch_size: int = 500) -> float:
    correct = 0
    for s in range(0, len(y), batch_size):
        correct += int((forward(params, x[s:s + batch_size]).argmax(1) == y[s:s + batch_size]).sum())
    return correct / len(y)


def train(params: TinyViTParams, images, labels, config: TrainConfig, val=None, log=None):
    """SGD with momentum (v <- mu v + g; w <- w - lr v) or Adam, global-norm
    clipping, linear warmup then cosine decay.

    Returns (trained params, list of EpochRecord). Shuffling derives from
    ``config.rng_seed``; the input params are not modified. With ``patience``
    > 0 and a validation set, training stops after that many epochs without
    a validation improvement and the best-validation parameters are returned.
    """
    images = np.asarray(images)
    if images.shape[0] == 0:
        raise RejectedInput("empty dataset")
    labels = _check_labels(labels, images.shape[0], params.config.num_classes)
    params = params.copy()
    if config.learning_rate == 0:
        # zero step: nothing can move, still record the trace
        acc = accuracy(params, images, labels)
        loss = cross_entropy(forward(params, images[:512]), labels[:512])
        return params, [EpochRecord(e, loss, acc, None, 0.0) for e in range(config.epochs)]

    rng = np.random.Generator(np.random.PCG64(config.rng_seed))
    n = images.shape[0]
    spe = -(-n // config.batch_size)
    total = spe * config.epochs
    vel = {k: np.zeros_like(v) for k, v in params.arrays.items()}
    sq = {k: np.zeros_like(v) for k, v in params.arrays.items()} if config.optimizer == "adam" else None
    b1, b2 = config.betas
    history = []
    best, best_val, stale = None, -1.0, 0
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        loss_sum, correct = 0.0, 0
        lr = 0.0
        for s in range(0, n, config.batch_size):
            idx = order[s:s + config.batch_size]
            loss, logits, G = loss_and_param_gradients(params, images[idx], labels[idx])
            loss_sum += loss * len(idx)
            correct += int((logits.argmax(1) == labels[idx]).sum())
            if config.grad_clip:
                norm = np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in G.values()))
                if norm > config.grad_clip:
                    c = params.dtype.type(config.grad_clip / norm)
                    G = {k: g * c for k, g in G.items()}
            lr = _lr_at(config, step, total, spe)
            lr_t = params.dtype.type(lr)
            live = [(k, w) for k, w in params.arrays.items() if not k.startswith(tuple(config.frozen))]
            if sq is None:
                mu = params.dtype.type(config.momentum)
                for k, w in live:
                    v = vel[k]
                    v *= mu
                    v += G[k]
                    w -= lr_t * v
            else:
                t = step + 1
                c1 = params.dtype.type(lr / (1 - b1**t))
                c2 = params.dtype.type(1 / np.sqrt(1 - b2**t))
                for k, w in live:
                    m, u, g = vel[k], sq[k], G[k]
                    m *= params.dtype.type(b1)
                    m += params.dtype.type(1 - b1) * g
                    u *= params.dtype.type(b2)
                    u += params.dtype.type(1 - b2) * g * g
                    w -= c1 * m / (np.sqrt(u) * c2 + params.dtype.type(1e-8))
            step += 1
        rec = EpochRecord(epoch, loss_sum / n, correct / n, None, float(lr))
        if val is not None:
            rec.val_accuracy = accuracy(params, *val)
        history.append(rec)
        if log:
            log(rec)
        if config.patience and val is not None:
            if rec.val_accuracy > best_val:
                best_val, best, stale = rec.val_accuracy, params.copy(), 0
            else:
                stale += 1
                if stale >= config.patience:
                    break
    if config.patience and best is not None:
        params = best
    return params, history


# --------------------------------------------------------------------------
# weight file


def save_weights(params: TinyViTParams) -> bytes:
    cfg = params.config
    buf = io.BytesIO()
    buf.write(WEIGHT_MAGIC)
    buf.write(struct.pack("<H", WEIGHT_VERSION))
    buf.write(struct.pack("<8I", cfg.patch_size, cfg.embed_dim, cfg.num_blocks, cfg.heads,
                          cfg.num_classes, cfg.channels, cfg.height, cfg.width))
    for name, arr in params.arrays.items():
        nb = name.encode()
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


def load_weights(data: bytes) -> TinyViTParams:
    view = memoryview(data)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise FormatError("weight file truncated")
        out = view[pos:pos + n]
        pos += n
        return out

    if bytes(take(4)) != WEIGHT_MAGIC:
        raise FormatError("not a TVIT weight file (bad magic)")
    (version,) = struct.unpack("<H", take(2))
    if version != WEIGHT_VERSION:
        raise FormatError(f"unsupported weight file version {version}")
    M, d, L, h, K, C, H, W = struct.unpack("<8I", take(32))
    arrays = {}
    while pos < len(view):
        (nlen,) = struct.unpack("<H", take(2))
        name = bytes(take(nlen)).decode()
        (rank,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(shape)) if rank else 1
        arrays[name] = np.frombuffer(take(4 * count), dtype="<f4").reshape(shape).astype(np.float32)
    if min(M, d, h, K, C, H, W) == 0:
        raise FormatError("weight file inconsistent: zero dimension in header")
    if "blocks.0.mlp.fc1.w" in arrays:
        ratio = arrays["blocks.0.mlp.fc1.w"].shape[1] // d
    else:
        ratio = 2
    try:
        cfg = ViTConfig(M, d, L, h, K, C, H, W, ratio)
        return TinyViTParams(cfg, arrays)
    except RejectedInput as e:
        raise FormatError(f"weight file inconsistent: {e}") from None
