"""Experiment orchestration: data, keys, sub-model training and the three runners.

Every experiment is a pure function of an :class:`ExperimentConfig`. Seeds
for individual tasks (one sub-model, one chunk of attacked images) are
derived from the master seeds with ``SeedSequence``, so results do not depend
on how work is spread over ``jobs`` worker processes.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import multiprocessing
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor_nn
from .attacks import ATTACK_NAMES, AttackBudget, AttackerKnowledge, SuiteResult, parse_epsilon, run_suite
from .crypto_perm import KeySet, encrypt_image, generate_keyset, parse_keyset, serialize_keyset
from .data import Dataset, gen_synthetic_dataset, load_dataset, save_dataset
from .ensemble import EnsembleModel, PlainModel, SelectionPolicy, SubModel, write_manifest
from .errors import RejectedInput
from .report import EvalReport, row_from_suite

__all__ = [
    "ExperimentConfig", "Artifacts", "derive_seed", "train_submodels", "train_baseline", "prepare",
    "evaluate", "experiment_model_comparison", "experiment_submodel_count", "experiment_key_leak",
    "gen_synthetic_dataset", "load_dataset", "save_dataset", "Dataset", "EvalReport", "atomic_write",
]


@dataclass
class ExperimentConfig:
    data_seed: int = 0
    n_train: int = 5000
    n_test: int = 1000
    n_eval: int = 200  # test images that are attacked
    patch_size: int = 4
    embed_dim: int = 64
    num_blocks: int = 2
    heads: int = 4
    key_seed: int = 7
    n_keys: int = 5
    train_seed: int = 100
    epochs: int = 12
    optimizer: str = "adam"
    learning_rate: float = 0.001
    batch_size: int = 64
    epsilon: str = "8/255"
    steps: int = 20
    restarts: int = 1
    query_budget: int = 1000
    n_targets: int = 9
    attack_seed: int = 0
    ensemble_seed: int = 0
    s_min: int = 3
    chunk: int = 50  # images per attack task
    jobs: int = 1
    out_dir: str = "runs/default"

    def __post_init__(self):
        if self.n_eval < 1 or self.n_eval > self.n_test:
            raise RejectedInput("n_eval must lie in [1, n_test]")
        if self.n_keys < 1 or self.chunk < 1 or self.jobs < 1:
            raise RejectedInput("n_keys, chunk and jobs must be positive")
        parse_epsilon(self.epsilon)

    @classmethod
    def from_mapping(cls, m: dict) -> "ExperimentConfig":
        unknown = set(m) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise RejectedInput(f"unknown config fields: {sorted(unknown)}")
        return cls(**m)

    @classmethod
    def from_json(cls, data) -> "ExperimentConfig":
        return cls.from_mapping(json.loads(data))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @property
    def vit(self) -> tensor_nn.ViTConfig:
        return tensor_nn.ViTConfig(patch_size=self.patch_size, embed_dim=self.embed_dim,
                                   num_blocks=self.num_blocks, heads=self.heads)

    def train_config(self, rng_seed: int) -> tensor_nn.TrainConfig:
        return tensor_nn.TrainConfig(learning_rate=self.learning_rate, epochs=self.epochs, optimizer=self.optimizer,
                                     batch_size=self.batch_size, rng_seed=rng_seed)

    @property
    def budget(self) -> AttackBudget:
        return AttackBudget(epsilon=parse_epsilon(self.epsilon), steps=self.steps, restarts=self.restarts,
                            query_budget=self.query_budget, n_targets=self.n_targets, seed=self.attack_seed)

    def training_fingerprint(self) -> str:
        keys = ("data_seed", "n_train", "n_test", "patch_size", "embed_dim", "num_blocks", "heads", "key_seed",
                "n_keys", "train_seed", "epochs", "optimizer", "learning_rate", "batch_size")
        blob = json.dumps({k: getattr(self, k) for k in keys}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def derive_seed(seed: int, *path) -> int:
    """A 63-bit seed for the task addressed by ``path`` (ints or strings)."""
    words = [int(seed)]
    for p in path:
        words.append(int.from_bytes(hashlib.sha256(p.encode()).digest()[:4], "little") if isinstance(p, str)
                     else int(p))
    return int(np.random.SeedSequence(words).generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def atomic_write(path, data: bytes, mode: int | None = None) -> Path:
    """Write via a temp file in the same directory and rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    with open(tmp, "wb") as fh:
        fh.write(data)
    if mode is not None:
        os.chmod(tmp, mode)
    os.replace(tmp, path)
    return path


def _pool(jobs: int):
    return ProcessPoolExecutor(max_workers=jobs, mp_context=multiprocessing.get_context("fork"))


def _map(fn, tasks, jobs: int):
    if jobs <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with _pool(min(jobs, len(tasks))) as ex:
        return list(ex.map(fn, tasks))


# --------------------------------------------------------------------------
# training


def _train_one(task):
    vit, images, labels, tcfg, init_seed, val = task
    params = tensor_nn.init_params(vit, init_seed)
    params, history = tensor_nn.train(params, images, labels, tcfg, val=val)
    return params, history


def train_submodels(dataset: Dataset, keyset: KeySet, vit: tensor_nn.ViTConfig, train_seed: int,
                    make_train_config, val: Dataset | None = None, jobs: int = 1) -> list:
    """One model per key, trained only on images encrypted with that key.

    Sub-model ``i`` takes its init and shuffle seeds from ``(train_seed, i)``.
    ``clean_val_accuracy`` is measured on ``val`` encrypted with the same key.
    """
    if (vit.channels, vit.height, vit.width, vit.patch_size) != (keyset.C, keyset.H, keyset.W, keyset.M):
        raise RejectedInput("model geometry does not match the key set")
    tasks = []
    for i, kid in enumerate(keyset.key_ids):
        key = keyset[kid]
        enc_val = None if val is None else (encrypt_image(val.images, key, keyset.M), val.labels)
        tasks.append((vit, encrypt_image(dataset.images, key, keyset.M), dataset.labels,
                      make_train_config(derive_seed(train_seed, i, "shuffle")), derive_seed(train_seed, i, "init"),
                      enc_val))
    out = []
    for kid, (params, history) in zip(keyset.key_ids, _map(_train_one, tasks, jobs)):
        acc = history[-1].val_accuracy if val is not None else float("nan")
        out.append(SubModel(params, kid, float(acc)))
    return out


def train_baseline(dataset: Dataset, vit: tensor_nn.ViTConfig, train_seed: int, make_train_config,
                   val: Dataset | None = None):
    vt = None if val is None else (val.images, val.labels)
    return _train_one((vit, dataset.images, dataset.labels, make_train_config(derive_seed(train_seed, "baseline",
                       "shuffle")), derive_seed(train_seed, "baseline", "init"), vt))


# --------------------------------------------------------------------------
# artifacts


@dataclass
class Artifacts:
    config: ExperimentConfig
    train: Dataset
    test: Dataset
    keyset: KeySet
    baseline: tensor_nn.TinyViTParams
    submodels: list
    paths: dict = field(default_factory=dict)

    @property
    def eval_set(self) -> Dataset:
        return self.test.take(self.config.n_eval)

    def ensemble(self, n: int, policy: SelectionPolicy, name: str) -> EnsembleModel:
        if not 1 <= n <= len(self.submodels):
            raise RejectedInput(f"only {len(self.submodels)} sub-models are trained, asked for {n}")
        seed = derive_seed(self.config.ensemble_seed, name, n)
        return EnsembleModel(self.submodels[:n], self.keyset.subset(n), policy, seed, name)

    def weight_hashes(self) -> dict:
        return {k: hashlib.sha256(Path(p).read_bytes()).hexdigest()
                for k, p in sorted(self.paths.items()) if k.startswith("weights/")}


def prepare(cfg: ExperimentConfig, log=None, retrain: bool = False) -> Artifacts:
    """Generate data and keys, then train (or reload) the baseline and N sub-models.

    Weights are cached in ``cfg.out_dir`` next to a fingerprint of every
    field that influences training; a mismatch triggers retraining.
    """
    log = log or (lambda *_: None)
    out = Path(cfg.out_dir)
    train, test = gen_synthetic_dataset(cfg.data_seed, cfg.n_train, cfg.n_test)
    vit = cfg.vit
    keyset = generate_keyset(cfg.n_keys, vit.patch_size, vit.channels, vit.height, vit.width, cfg.key_seed)
    key_path = atomic_write(out / "keys.json", serialize_keyset(keyset), mode=0o600)
    paths = {"keys": key_path}
    fp_path = out / "weights" / "fingerprint.txt"
    names = ["baseline"] + [f"sub_{k}" for k in keyset.key_ids]
    wpaths = {n: out / "weights" / f"{n}.tvit" for n in names}
    cached = (not retrain and fp_path.exists() and fp_path.read_text().strip() == cfg.training_fingerprint()
              and all(p.exists() for p in wpaths.values()))
    if cached:
        log(f"reusing weights in {out / 'weights'}")
        baseline = tensor_nn.load_weights(wpaths["baseline"].read_bytes())
        meta = json.loads((out / "weights" / "val.json").read_text())
        subs = [SubModel(tensor_nn.load_weights(wpaths[f"sub_{k}"].read_bytes()), k, meta[k]) for k in keyset.key_ids]
    else:
        log(f"training baseline and {keyset.N} sub-models ({cfg.epochs} epochs, jobs={cfg.jobs})")
        make_tc = cfg.train_config
        if cfg.jobs > 1:
            # baseline joins the sub-model fan-out as an identity-free extra task
            with _pool(1) as ex:
                fut = ex.submit(train_baseline, train, vit, cfg.train_seed, make_tc, test)
                subs = train_submodels(train, keyset, vit, cfg.train_seed, make_tc, test, max(1, cfg.jobs - 1))
                baseline, bhist = fut.result()
        else:
            baseline, bhist = train_baseline(train, vit, cfg.train_seed, make_tc, test)
            subs = train_submodels(train, keyset, vit, cfg.train_seed, make_tc, test)
        atomic_write(wpaths["baseline"], tensor_nn.save_weights(baseline))
        for sm in subs:
            atomic_write(wpaths[f"sub_{sm.key_id}"], tensor_nn.save_weights(sm.params))
        val = {sm.key_id: sm.clean_val_accuracy for sm in subs}
        val["baseline"] = bhist[-1].val_accuracy
        atomic_write(out / "weights" / "val.json", (json.dumps(val, indent=2, sort_keys=True) + "\n").encode())
        atomic_write(fp_path, (cfg.training_fingerprint() + "\n").encode())
    for n, p in wpaths.items():
        paths[f"weights/{n}"] = p
    art = Artifacts(cfg, train, test, keyset, baseline, subs, paths)
    for n in range(1, keyset.N + 1):
        ens = art.ensemble(n, SelectionPolicy.simple() if n < 3 else SelectionPolicy("random", cfg.s_min),
                           f"ensemble{n}")
        mpath = out / f"manifest_N{n}.json"
        doc = write_manifest(mpath, ens, [wpaths[f"sub_{k}"] for k in ens.keyset.key_ids], key_path,
                             {"config": cfg.to_dict(), "baseline": os.path.relpath(wpaths["baseline"], out)})
        atomic_write(mpath, (json.dumps(doc, indent=2, sort_keys=True) + "\n").encode())
        paths[f"manifest/{n}"] = mpath
    return art


# --------------------------------------------------------------------------
# evaluation


def _suite_task(task):
    target, n_leaked, baseline, x, y, ids, budget, attacks, cache = task
    know = AttackerKnowledge.for_target(target, n_leaked, baseline)
    res = run_suite(target, know, x, y, budget, attacks, cache=cache, image_ids=ids)
    return res, cache


def evaluate(target, x, y, budget: AttackBudget, *, n_leaked: int = 0, baseline=None, attacks=ATTACK_NAMES,
             chunk: int = 50, jobs: int = 1, cache: dict | None = None) -> SuiteResult:
    """run_suite over fixed-size image chunks; each chunk reseeds a copy of the target.

    Chunk boundaries and seeds are independent of ``jobs``, so the result is too.
    """
    x = np.asarray(x, dtype=np.float32)
    y = np.asarray(y, dtype=np.int64)
    if x.shape[0] == 0:
        raise RejectedInput("empty test set")
    cache = {} if cache is None else cache
    tasks = []
    for c, s in enumerate(range(0, x.shape[0], chunk)):
        t = target
        if isinstance(target, EnsembleModel):
            t = target.with_policy(target.policy, seed=derive_seed(target.seed, "chunk", c))
        ids = np.arange(s, min(s + chunk, x.shape[0]))
        tasks.append((t, n_leaked, baseline, x[ids], y[ids], ids, budget, tuple(attacks), cache if jobs <= 1 else
                      dict(cache)))
    outs = _map(_suite_task, tasks, jobs)
    for _, c in outs:
        cache.update(c)
    parts = [r for r, _ in outs]
    robust = {a: np.concatenate([p.robust[a] for p in parts]) for a in attacks}
    queries = {}
    for p in parts:
        for k, v in p.queries.items():
            queries[k] = queries.get(k, 0) + v
    return SuiteResult(x.shape[0], np.concatenate([p.clean for p in parts]), robust,
                       np.concatenate([p.aa for p in parts]), queries)


def _meta(art: Artifacts, experiment: str, **extra) -> dict:
    cfg = art.config
    b = cfg.budget
    return {
        "experiment": experiment,
        "config": cfg.to_dict(),
        "epsilon": cfg.epsilon,
        "budgets": {"pgd_steps": b.steps, "pgd_restarts": b.restarts, "pgd_alpha": "2*epsilon, halved on stall",
                    "square_queries": b.query_budget, "square_p_init": b.p_init, "targeted_classes": b.n_targets},
        "seeds": {k: getattr(cfg, k) for k in ("data_seed", "key_seed", "train_seed", "attack_seed",
                                                "ensemble_seed")},
        "dataset_digest": art.test.digest(),
        "key_ids": art.keyset.key_ids,
        "weights_sha256": {k.split("/", 1)[1]: v for k, v in art.weight_hashes().items()},
        "surrogate": "plain-trained baseline (0 keys)",
        **extra,
    }


def _run_row(art, report, cache, model, target, N, S, attacks=ATTACK_NAMES, n_leaked=0, leaked_col=None):
    cfg = art.config
    ev = art.eval_set
    key = ("row", model, N, S, n_leaked, tuple(attacks))
    if key not in cache:
        cache[key] = evaluate(target, ev.images, ev.labels, cfg.budget, n_leaked=n_leaked, baseline=art.baseline,
                              attacks=attacks, chunk=cfg.chunk, jobs=cfg.jobs, cache=cache)
    suite = cache[key]
    return report.add(row_from_suite(model, N, S, suite, leaked_col)), suite


def experiment_model_comparison(art: Artifacts, n: int = 4, cache: dict | None = None) -> EvalReport:
    """Baseline, a single encrypted model, and simple/random ensembles of ``n``."""
    cache = {} if cache is None else cache
    cfg = art.config
    rep = EvalReport(meta=_meta(art, "model_comparison"))
    rnd = SelectionPolicy("random", cfg.s_min)
    _run_row(art, rep, cache, "baseline", PlainModel(art.baseline, "baseline"), 1, "1")
    _run_row(art, rep, cache, "encrypted", art.ensemble(1, SelectionPolicy.simple(), "encrypted"), 1, "1")
    _run_row(art, rep, cache, "simple_ensemble", art.ensemble(n, SelectionPolicy.simple(), "simple"), n, str(n))
    ens = art.ensemble(n, rnd, "random")
    _run_row(art, rep, cache, "random_ensemble", ens, n, ens.policy.describe())
    return rep


def experiment_submodel_count(art: Artifacts, n_list=(4, 5), cache: dict | None = None) -> EvalReport:
    cache = {} if cache is None else cache
    cfg = art.config
    rep = EvalReport(meta=_meta(art, "submodel_count", n_list=list(n_list)))
    for n in n_list:
        _run_row(art, rep, cache, "simple_ensemble", art.ensemble(n, SelectionPolicy.simple(), "simple"), n, str(n))
        ens = art.ensemble(n, SelectionPolicy("random", cfg.s_min), "random")
        _run_row(art, rep, cache, "random_ensemble", ens, n, ens.policy.describe())
    return rep


def experiment_key_leak(art: Artifacts, leak_counts=None, n: int = 4, cache: dict | None = None) -> EvalReport:
    """pgd_ce with the first k keys (and their sub-models) known to the attacker.

    k = 0 uses the plain baseline as surrogate; k > 0 uses the leaked
    sub-models behind their true keys, so gradients are exact for them.
    """
    cache = {} if cache is None else cache
    cfg = art.config
    leak_counts = list(range(n + 1)) if leak_counts is None else list(leak_counts)
    ens = art.ensemble(n, SelectionPolicy("random", cfg.s_min), "random")
    rep = EvalReport(meta=_meta(art, "key_leak", leak_counts=leak_counts,
                                surrogate="k=0: plain baseline; k>0: leaked sub-models with true keys"))
    for k in leak_counts:
        _run_row(art, rep, cache, "random_ensemble", ens, n, ens.policy.describe(), attacks=("pgd_ce",),
                 n_leaked=k, leaked_col=k)
    return rep
