"""encvit command line: gen-data, gen-keys, train, encrypt, predict, attack, evaluate, report.

Every verb takes ``--seed``, prints its resolved configuration as one JSON
line, and writes outputs atomically. Relative ``--out``/``--out-dir`` paths
resolve against ``$ENCVIT_OUT`` when it is set.
"""
from __future__ import annotations

import argparse
import json
import os
import stat
import sys
import traceback
from pathlib import Path

import numpy as np

from . import attacks, harness, report, tensor_nn
from .crypto_perm import decrypt_image, encrypt_image, generate_keyset, parse_keyset, serialize_keyset
from .data import Dataset, gen_synthetic_dataset, load_dataset, save_dataset
from .ensemble import PlainModel, SelectionPolicy, SubModel, classify, load_manifest, write_manifest
from .errors import FormatError, RejectedInput

OUT_ENV = "ENCVIT_OUT"

_BUDGET_ALIASES = {"eps": "epsilon", "queries": "query_budget", "targets": "n_targets"}


class UsageError(Exception):
    pass


def _out(path) -> Path:
    p = Path(path)
    base = os.environ.get(OUT_ENV)
    return p if p.is_absolute() or not base else Path(base) / p


def _emit_config(verb: str, cfg: dict) -> None:
    print(json.dumps({"verb": verb, **cfg}, sort_keys=True, default=str))


def _read(path) -> bytes:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"no such file: {p}")
    return p.read_bytes()


def _geometry(text: str) -> tuple:
    try:
        C, H, W = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise UsageError(f"geometry must look like 3x32x32, got {text!r}") from None
    return C, H, W


def parse_budget(text: str | None, seed: int) -> attacks.AttackBudget:
    """'eps=8/255,steps=20,queries=1000' -> AttackBudget."""
    fields = {"seed": seed}
    for part in filter(None, (text or "").split(",")):
        if "=" not in part:
            raise UsageError(f"budget entries look like name=value, got {part!r}")
        k, v = (s.strip() for s in part.split("=", 1))
        k = _BUDGET_ALIASES.get(k, k)
        if k in ("epsilon", "alpha"):
            fields[k] = v
        elif k == "random_start":
            fields[k] = v.lower() in ("1", "true", "yes")
        elif k == "p_init":
            fields[k] = float(v)
        else:
            try:
                fields[k] = int(v)
            except ValueError:
                raise UsageError(f"budget field {k} needs an integer, got {v!r}") from None
    return attacks.AttackBudget.from_mapping(fields)


def _policy(args) -> SelectionPolicy | None:
    if args.policy is None:
        return None
    if args.policy == "simple":
        return SelectionPolicy.simple()
    return SelectionPolicy("random", args.s_min, args.s_max)


def _target(args):
    """(model, manifest dict or None) from --ensemble or --weights."""
    if bool(args.ensemble) == bool(getattr(args, "weights", None)):
        raise UsageError("give exactly one of --ensemble or --weights")
    if args.ensemble:
        _read(args.ensemble)
        return load_manifest(args.ensemble, policy=_policy(args), seed=args.seed)
    return PlainModel(tensor_nn.load_weights(_read(args.weights)), Path(args.weights).stem), None


def _eval_data(args, manifest) -> Dataset:
    if args.data:
        return load_dataset(_read(args.data))
    if manifest and "config" in manifest:
        cfg = manifest["config"]
        return gen_synthetic_dataset(cfg["data_seed"], cfg["n_train"], cfg["n_test"])[1]
    raise UsageError("--data is required when the manifest carries no dataset config")


def _surrogate_params(args, manifest):
    if getattr(args, "surrogate", None):
        return tensor_nn.load_weights(_read(args.surrogate))
    if manifest and "baseline" in manifest:
        return tensor_nn.load_weights(_read(Path(args.ensemble).resolve().parent / manifest["baseline"]))
    return None


# --------------------------------------------------------------------------
# verbs


def cmd_gen_data(args):
    _emit_config("gen-data", {"seed": args.seed, "n_train": args.n_train, "n_test": args.n_test,
                              "out_dir": str(_out(args.out_dir))})
    train, test = gen_synthetic_dataset(args.seed, args.n_train, args.n_test)
    out = _out(args.out_dir)
    for ds in (train, test):
        harness.atomic_write(out / f"{ds.split}.dset", save_dataset(ds))
        print(f"wrote {out / (ds.split + '.dset')} ({len(ds)} images, sha256 {ds.digest()[:16]})")


def cmd_gen_keys(args):
    C, H, W = _geometry(args.geometry)
    out = _out(args.out)
    _emit_config("gen-keys", {"seed": args.seed, "n": args.n, "block": args.block, "geometry": [C, H, W],
                              "out": str(out)})
    if out.exists() and not args.force:
        raise UsageError(f"{out} exists; refusing to overwrite a keyset without --force")
    ks = generate_keyset(args.n, args.block, C, H, W, args.seed)
    harness.atomic_write(out, serialize_keyset(ks), mode=0o600)
    print(f"wrote {ks.N} keys of length {ks.p_b} to {out}")


def _warn_if_readable(path) -> None:
    try:
        mode = os.stat(path).st_mode
    except OSError:
        return
    if mode & (stat.S_IROTH | stat.S_IRGRP):
        print(f"warning: keyset {path} is readable by other users", file=sys.stderr)


def _load_keys(path):
    _warn_if_readable(path)
    return parse_keyset(_read(path))


def cmd_train(args):
    train = load_dataset(_read(args.data))
    val = load_dataset(_read(args.val)) if args.val else None
    C, H, W = train.geometry
    vit = tensor_nn.ViTConfig(patch_size=args.block, embed_dim=args.dim, num_blocks=args.depth, heads=args.heads,
                              num_classes=train.num_classes, channels=C, height=H, width=W)
    make_tc = lambda s: tensor_nn.TrainConfig(learning_rate=args.lr, epochs=args.epochs, optimizer=args.optimizer,
                                               batch_size=args.batch_size, rng_seed=s)
    out = _out(args.out_dir)
    _emit_config("train", {"seed": args.seed, "data": args.data, "keys": args.keys, "plain": args.plain,
                           "epochs": args.epochs, "optimizer": args.optimizer, "lr": args.lr,
                           "batch_size": args.batch_size, "out_dir": str(out), "jobs": args.jobs})
    if args.plain:
        params, hist = harness.train_baseline(train, vit, args.seed, make_tc, val)
        path = harness.atomic_write(out / "baseline.tvit", tensor_nn.save_weights(params))
        print(f"wrote {path} (train acc {hist[-1].train_accuracy:.4f}, val acc {hist[-1].val_accuracy})")
        return
    if not args.keys:
        raise UsageError("--keys is required unless --plain is given")
    keyset = _load_keys(args.keys)
    if args.key_id:
        keyset = type(keyset)(tuple(keyset[k] for k in args.key_id), keyset.M, keyset.C, keyset.H, keyset.W)
    subs = harness.train_submodels(train, keyset, vit, args.seed, make_tc, val, args.jobs)
    paths = []
    for sm in subs:
        paths.append(harness.atomic_write(out / f"sub_{sm.key_id}.tvit", tensor_nn.save_weights(sm.params)))
        print(f"wrote {paths[-1]} (val acc {sm.clean_val_accuracy})")
    from .ensemble import EnsembleModel
    policy = SelectionPolicy("random", 3) if keyset.N >= 3 else SelectionPolicy.simple()
    ens = EnsembleModel(subs, keyset, policy, args.seed)
    mpath = out / "manifest.json"
    doc = write_manifest(mpath, ens, paths, args.keys)
    harness.atomic_write(mpath, (json.dumps(doc, indent=2, sort_keys=True) + "\n").encode())
    print(f"wrote {mpath}")


def cmd_encrypt(args):
    keyset = _load_keys(args.keys)
    ds = load_dataset(_read(args.inp))
    out = _out(args.out)
    _emit_config("encrypt", {"seed": args.seed, "keys": args.keys, "key_id": args.key_id, "in": args.inp,
                             "out": str(out), "decrypt": args.decrypt})
    try:
        key = keyset[args.key_id]
    except KeyError:
        raise UsageError(f"key {args.key_id!r} is not in {args.keys}") from None
    fn = decrypt_image if args.decrypt else encrypt_image
    tag = "decrypted" if args.decrypt else "encrypted"
    res = Dataset(fn(ds.images, key, keyset.M), ds.labels, ds.split, f"{ds.provenance}|{tag}:{key.key_id}",
                  ds.num_classes)
    harness.atomic_write(out, save_dataset(res))
    print(f"wrote {out}")


def cmd_predict(args):
    model, manifest = _target(args)
    ds = _eval_data(args, manifest)
    out = _out(args.out)
    _emit_config("predict", {"seed": args.seed, "ensemble": args.ensemble, "weights": args.weights,
                             "policy": getattr(getattr(model, "policy", None), "mode", "plain"),
                             "n": len(ds), "out": str(out)})
    pred = classify(model.predict_proba(ds.images))
    lines = ["index,label,prediction"] + [f"{i},{l},{p}" for i, (l, p) in enumerate(zip(ds.labels, pred))]
    harness.atomic_write(out, ("\n".join(lines) + "\n").encode())
    print(f"accuracy {100 * float(np.mean(pred == ds.labels)):.2f}% over {len(ds)} images; wrote {out}")


def cmd_attack(args):
    model, manifest = _target(args)
    ds = _eval_data(args, manifest)
    if args.n:
        ds = ds.take(args.n)
    budget = parse_budget(args.budget, args.seed)
    out = _out(args.out)
    _emit_config("attack", {"seed": args.seed, "attack": args.attack, "budget": budget.__dict__,
                            "n": len(ds), "out": str(out)})
    if args.attack == "square":
        q = attacks.QueryAccess(model)
        res = attacks.square_attack(q, ds.images, ds.labels, budget)
    else:
        sp = _surrogate_params(args, manifest)
        if sp is None:
            if manifest is not None:
                raise UsageError("gradient attacks on an ensemble need --surrogate")
            sp = model.params
        sur = attacks.PlainSurrogate(sp)
        rng = np.random.Generator(np.random.PCG64(args.seed))
        if args.attack == "fgsm":
            res = attacks.fgsm(sur, ds.images, ds.labels, budget.epsilon)
        elif args.attack == "pgd_ce":
            res = attacks.pgd_ce(sur, ds.images, ds.labels, budget, rng)
        else:
            probs = sur.predict_proba(ds.images)
            probs[np.arange(len(ds)), ds.labels] = -np.inf
            res = attacks.pgd_targeted(sur, ds.images, ds.labels, probs.argmax(1), budget, rng)
    adv = Dataset(res.x_adv, ds.labels, ds.split, f"{ds.provenance}|{args.attack}", ds.num_classes)
    harness.atomic_write(out, save_dataset(adv))
    acc = 100 * float(np.mean(classify(model.predict_proba(res.x_adv)) == ds.labels))
    print(f"target accuracy on adversarial images {acc:.2f}%; max linf {float(res.linf_norm.max()):.6f}; "
          f"queries {int(res.queries_used.sum())}; wrote {out}")


def cmd_evaluate(args):
    model, manifest = _target(args)
    ds = _eval_data(args, manifest)
    if args.n:
        ds = ds.take(args.n)
    budget = parse_budget(args.budget, args.seed)
    names = tuple(args.attacks.split(",")) if args.attacks else attacks.ATTACK_NAMES
    base = _surrogate_params(args, manifest)
    if base is None and args.leaked == 0 and set(names) - {"square"}:
        raise UsageError("gradient attacks need --surrogate (or a manifest with a baseline)")
    out = _out(args.out_dir)
    _emit_config("evaluate", {"seed": args.seed, "ensemble": args.ensemble, "weights": args.weights,
                              "policy": getattr(getattr(model, "policy", None), "describe", lambda: "plain")(),
                              "budget": budget.__dict__, "attacks": names, "leaked": args.leaked,
                              "n": len(ds), "out_dir": str(out), "jobs": args.jobs})
    suite = harness.evaluate(model, ds.images, ds.labels, budget, n_leaked=args.leaked, baseline=base,
                             attacks=names, jobs=args.jobs)
    N = getattr(model, "N", 1)
    S = model.policy.describe() if hasattr(model, "policy") else "1"
    rep = report.EvalReport(meta={"epsilon": args.budget, "budget": budget.__dict__, "seed": args.seed,
                                  "source": args.ensemble or args.weights, "dataset_digest": ds.digest()})
    rep.add(report.row_from_suite(getattr(model, "name", "model"), N, S, suite,
                                  args.leaked if args.leaked else None))
    _write_report(rep, out)


def _write_report(rep, out: Path):
    csv_bytes = report.emit_report(rep, "csv")
    harness.atomic_write(out / "report.csv", csv_bytes)
    harness.atomic_write(out / "report.json", report.emit_report(rep, "json"))
    sys.stdout.write(csv_bytes.decode())
    print(f"wrote {out / 'report.csv'} and {out / 'report.json'}")


def cmd_report(args):
    cfg = harness.ExperimentConfig.from_json(_read(args.config)) if args.config else harness.ExperimentConfig()
    over = {"jobs": args.jobs}
    if args.seed is not None:
        over["attack_seed"] = args.seed
    if args.out_dir:
        over["out_dir"] = str(_out(args.out_dir))
    cfg = harness.ExperimentConfig.from_mapping({**cfg.to_dict(), **over})
    _emit_config("report", {"seed": cfg.attack_seed, "experiment": args.experiment, **cfg.to_dict()})
    art = harness.prepare(cfg, log=print)
    cache = {}
    runners = {
        "model_comparison": lambda: harness.experiment_model_comparison(art, cache=cache),
        "submodel_count": lambda: harness.experiment_submodel_count(art, cache=cache),
        "key_leak": lambda: harness.experiment_key_leak(art, cache=cache),
    }
    chosen = list(runners) if args.experiment == "all" else [args.experiment]
    for name in chosen:
        _write_report(runners[name](), Path(cfg.out_dir) / name)


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="encvit", description="Key-encrypted random ensembles of tiny ViTs.")
    sub = ap.add_subparsers(dest="verb", required=True)

    def verb(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.set_defaults(fn=fn)
        p.add_argument("--seed", type=int, default=0)
        return p

    p = verb("gen-data", cmd_gen_data, "generate the synthetic train/test sets")
    p.add_argument("--n-train", type=int, default=5000)
    p.add_argument("--n-test", type=int, default=1000)
    p.add_argument("--out-dir", default="data")

    p = verb("gen-keys", cmd_gen_keys, "generate a keyset of N block permutations")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--block", type=int, default=4)
    p.add_argument("--geometry", default="3x32x32")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")

    p = verb("train", cmd_train, "train one sub-model per key (or a plain model)")
    p.add_argument("--data", required=True)
    p.add_argument("--val")
    p.add_argument("--keys")
    p.add_argument("--key-id", action="append")
    p.add_argument("--plain", action="store_true")
    p.add_argument("--block", type=int, default=4)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--depth", type=int, default=2)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--epochs", type=int, default=12)
    p.add_argument("--optimizer", choices=("adam", "sgd"), default="adam")
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out-dir", default="models")

    p = verb("encrypt", cmd_encrypt, "encrypt (or --decrypt) a dataset with one key")
    p.add_argument("--keys", required=True)
    p.add_argument("--key-id", required=True)
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--decrypt", action="store_true")

    def target_opts(p):
        p.add_argument("--ensemble")
        p.add_argument("--weights")
        p.add_argument("--data")
        p.add_argument("--policy", choices=("simple", "random"))
        p.add_argument("--s-min", type=int, default=3)
        p.add_argument("--s-max", type=int)

    p = verb("predict", cmd_predict, "classify a dataset")
    target_opts(p)
    p.add_argument("--out", default="predictions.csv")

    p = verb("attack", cmd_attack, "run one attack and save the adversarial images")
    target_opts(p)
    p.add_argument("--attack", choices=("fgsm", "pgd_ce", "pgd_t", "square"), required=True)
    p.add_argument("--surrogate")
    p.add_argument("--budget", default="eps=8/255")
    p.add_argument("--n", type=int, default=0)
    p.add_argument("--out", default="adversarial.dset")

    p = verb("evaluate", cmd_evaluate, "clean, per-attack and worst-case accuracy of a model")
    target_opts(p)
    p.add_argument("--surrogate")
    p.add_argument("--budget", default="eps=8/255")
    p.add_argument("--attacks")
    p.add_argument("--leaked", type=int, default=0)
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out-dir", default="evaluation")

    p = verb("report", cmd_report, "train (or reuse) models and run the experiment tables")
    p.set_defaults(seed=None)
    p.add_argument("--config")
    p.add_argument("--experiment", choices=("model_comparison", "submodel_count", "key_leak", "all"),
                   default="all")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out-dir")
    return ap


def _origin(exc: BaseException) -> str:
    tb = exc.__traceback__
    name = "encvit"
    while tb is not None:
        mod = tb.tb_frame.f_globals.get("__name__", "")
        if mod.startswith("encvit.") and mod != __name__:
            name = mod
        tb = tb.tb_next
    return name


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on usage errors
    try:
        args.fn(args)
    except UsageError as e:
        print(f"encvit: usage error: {e}", file=sys.stderr)
        return 2
    except (RejectedInput, FormatError, OSError) as e:
        print(f"encvit: error: {_origin(e)}: {e}", file=sys.stderr)
        if os.environ.get("ENCVIT_DEBUG"):
            traceback.print_exc()
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
