import argparse
import time
from pathlib import Path

from encvit import harness
from encvit.report import emit_report


def run(experiment, description, **kw):
    ap = argparse.ArgumentParser(description=description)
    ap.add_argument("--config", help="JSON experiment config; defaults to the desk-scale settings")
    ap.add_argument("--out-dir", default="runs/default")
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args()
    cfg = harness.ExperimentConfig.from_json(Path(args.config).read_text()) if args.config else \
        harness.ExperimentConfig()
    cfg = harness.ExperimentConfig.from_mapping({**cfg.to_dict(), "out_dir": args.out_dir, "jobs": args.jobs})
    t = time.perf_counter()
    art = harness.prepare(cfg, log=print)
    print(f"models ready after {time.perf_counter() - t:.0f}s")
    rep = experiment(art, **kw)
    out = Path(cfg.out_dir) / experiment.__name__.removeprefix("experiment_")
    harness.atomic_write(out / "report.csv", emit_report(rep, "csv"))
    harness.atomic_write(out / "report.json", emit_report(rep, "json"))
    print(emit_report(rep, "csv").decode(), end="")
    print(f"wrote {out} after {time.perf_counter() - t:.0f}s")
