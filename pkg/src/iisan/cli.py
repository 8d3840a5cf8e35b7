"""``iisan`` command line: gen-data, build-cache, train, eval, profile, tpme.

Every command reads one YAML config (``--config``) with ``--set key=value``
overrides. Failures print a single JSON line on stderr and exit with 2
(config), 3 (data) or 4 (cache).
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from pathlib import Path

from . import checkpoint, data
from .backbone import FrozenEncoder
from .cache import build_cache
from .config import load_config
from .efficiency import SAMPLE_HEADER, TpmeWeights, read_samples_csv, tpme, write_tpme_csv
from .errors import ConfigError, IisanError
from .pipeline import build_run, check_dataset, fit, profile
from .recsys import evaluate, evaluate_scores, write_report_csv

EPOCH_HEADER = ["epoch", "loss", "batches", "tape_nodes", "peak_retained_bytes",
                "grad_bytes", "config_digest", "wall_time_s"]
PROFILE_HEADER = ["method", "params", "mem_bytes", "weights_bytes", "grad_bytes",
                  "optimizer_bytes", "activation_bytes", "config_digest", "t_seconds"]
CHECKPOINT_NAME = "checkpoint.iick"


def _cfg(args):
    overrides = list(args.set or [])
    for flag, key in (("method", "method.method"), ("epochs", "training.epochs"),
                      ("seed", "training.seed"), ("out_dir", "out_dir"),
                      ("dataset", "dataset"), ("cache", "cache")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides.append(f"{key}={value}")
    return load_config(args.config, overrides)


def _out(cfg, name) -> Path:
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    return cfg.out_dir / name


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _default_cache(cfg) -> Path:
    return cfg.cache or cfg.out_dir / "hidden_states.dphs"


def _run_for(cfg, ds):
    m = cfg.method
    cache = None
    if m.method == "iisan_cached" or (m.embedded and cfg.cache is not None):
        cache = _default_cache(cfg)
    return build_run(m, cfg.encoders, cfg.seq_encoder, cfg.training, items=ds,
                     adaptation=cfg.adaptation, cache=cache)


def cmd_gen_data(cfg, args):
    cfg.dataset.parent.mkdir(parents=True, exist_ok=True)
    manifest = data.save(data.generate(cfg.gen_spec), cfg.dataset, digest=cfg.digest_hex())
    print(f"wrote {cfg.dataset} ({manifest['num_items']} items, {manifest['num_users']} users)")


def cmd_build_cache(cfg, args):
    ds = data.load(cfg.dataset)
    check_dataset(cfg.encoders, ds)
    encoders = {m: FrozenEncoder(c) for m, c in cfg.encoders.items()}
    path = _default_cache(cfg)
    path.parent.mkdir(parents=True, exist_ok=True)
    size = build_cache(encoders, ds, range(1, ds.num_items + 1), path, width=cfg.cache_width)
    print(f"wrote {path} ({size} bytes)")


def cmd_train(cfg, args):
    ds = data.load(cfg.dataset)
    splits = data.split_and_popularity(ds)
    run = _run_for(cfg, ds)
    digest = cfg.digest_hex()
    rows = []

    def log(s):
        rows.append([s.epoch, f"{s.loss:.10f}", s.batches, s.tape_nodes, s.peak_retained_bytes,
                     s.grad_bytes, digest, f"{s.wall_time:.6f}"])
        if not args.quiet:
            print(f"epoch {s.epoch} loss {s.loss:.5f} ({s.wall_time:.2f}s)", file=sys.stderr)

    fit(run, splits, cfg.training, on_epoch=log)
    checkpoint.save(_out(cfg, CHECKPOINT_NAME), run.method.params, cfg.digest())
    _write_rows(_out(cfg, "epochs.csv"), EPOCH_HEADER, rows)
    print(f"wrote {cfg.out_dir / CHECKPOINT_NAME}")


def cmd_eval(cfg, args):
    ds = data.load(cfg.dataset)
    splits = data.split_and_popularity(ds)
    run = _run_for(cfg, ds)
    digest, arrays = checkpoint.load(cfg.out_dir / CHECKPOINT_NAME)
    if digest != cfg.digest():
        raise ConfigError("checkpoint was trained under a different config")
    checkpoint.restore(run.method.params, arrays)
    seed, hexd = cfg.training.seed, cfg.digest_hex()
    rows = []
    for split in ("valid", "test"):
        rows.append((cfg.method.method, evaluate(run.method, splits, split), seed, hexd))
    _, targets = splits.test
    pop = evaluate_scores(data.popularity_scores(splits, len(targets)), targets)
    rows.append(("popularity", pop, seed, hexd))
    path = _out(cfg, "eval.csv")
    write_report_csv(path, rows)
    for name, rep, *_ in rows:
        print(f"{name:>12} {rep.split:>5}  HR@10 {rep.hr10:.4f}  NDCG@10 {rep.ndcg10:.4f}")


def cmd_profile(cfg, args):
    ds = data.load(cfg.dataset)
    splits = data.split_and_popularity(ds)
    run = _run_for(cfg, ds)
    sample, mem = profile(run, splits, cfg.training, epochs=args.epochs_timed)
    _write_rows(_out(cfg, "profile.csv"), PROFILE_HEADER, [[
        sample.method, sample.p, int(sample.m), mem.weights_bytes, mem.grad_bytes,
        mem.optimizer_bytes, mem.activation_bytes, cfg.digest_hex(), f"{sample.t:.6f}",
    ]])
    print(f"{sample.method}: t={sample.t:.3f}s p={sample.p} m={int(sample.m)}B")


def cmd_tpme(cfg, args):
    samples = []
    for path in args.inputs:
        if not Path(path).exists():
            raise ConfigError(f"sample file not found: {path}")
        samples.extend(read_samples_csv(path))
    weights = TpmeWeights(*args.alpha) if args.alpha else cfg.alpha
    scores = tpme(samples, weights)
    h = hashlib.sha256(json.dumps(
        [[s.method, s.t, s.p, s.m] for s in samples] + [[weights.time, weights.params, weights.memory]]
    ).encode()).hexdigest()[:16]
    out = Path(args.out) if args.out else _out(cfg, "tpme.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    write_tpme_csv(out, scores, digest=h)
    for name, value in scores.items():
        print(f"{name:>14} {value:6.2f}%")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "build-cache": cmd_build_cache,
    "train": cmd_train,
    "eval": cmd_eval,
    "profile": cmd_profile,
    "tpme": cmd_tpme,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="iisan", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", "-c", help="YAML run config")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config entry, e.g. training.epochs=3")
        p.add_argument("--out-dir", dest="out_dir")
        p.add_argument("--dataset")
        p.add_argument("--cache")
        p.add_argument("--seed", type=int)
        if name in ("train", "eval", "profile", "build-cache"):
            p.add_argument("--method")
        if name in ("train", "profile"):
            p.add_argument("--epochs", type=int)
            p.add_argument("--quiet", "-q", action="store_true")
        if name == "profile":
            p.add_argument("--epochs-timed", type=int, default=3,
                           help="timed epochs; the first is discarded as warm-up")
        if name == "tpme":
            p.add_argument("inputs", nargs="+", help="CSV files with " + ", ".join(SAMPLE_HEADER))
            p.add_argument("--alpha", type=float, nargs=3, metavar=("TIME", "PARAMS", "MEMORY"))
            p.add_argument("--out", help="output CSV (default <out_dir>/tpme.csv)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _cfg(args)
        COMMANDS[args.command](cfg, args)
    except IisanError as exc:
        line = {"error": type(exc).__name__, "exit_code": exc.exit_code, "message": str(exc)}
        print(json.dumps(line), file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
