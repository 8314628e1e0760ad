"""Command line driver.

Exit codes: 0 success, 1 runtime failure (e.g. divergence), 2 usage or
validation error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import data as D
from .config import ConfigError, ExperimentConfig, load_config
from .model import (ParamFormatError, ParamShapeError, architecture_of, check_architecture,
                    encode, forward, init_params, load_params, predict_labels, save_params)
from .numerics import DivergenceError
from .swd import SampleSizeError, SwdConfig, swd_estimate, subseed
from .training import dacad_train, evaluate, pretrain

log = logging.getLogger("dacad")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


# -- swd ----------------------------------------------------------------------

def _samples(path) -> np.ndarray:
    try:
        ds = D.read_csv(path)
    except (OSError, ValueError) as exc:
        raise UsageError(f"{path}: {exc}") from None
    return ds.x


def cmd_swd(args) -> int:
    a, b = _samples(args.file_a), _samples(args.file_b)
    if a.shape[1] != b.shape[1]:
        raise UsageError(f"dimension mismatch: {args.file_a} has {a.shape[1]} columns, "
                         f"{args.file_b} has {b.shape[1]}")
    if a.shape[0] != b.shape[0]:
        if args.strict:
            raise UsageError(f"row counts differ ({a.shape[0]} vs {b.shape[0]}) under --strict")
        n = min(a.shape[0], b.shape[0])
        print(f"warning: row counts differ ({a.shape[0]} vs {b.shape[0]}); "
              f"subsampling both to {n}", file=sys.stderr)
        rng = np.random.default_rng(subseed(args.seed, 1))
        if a.shape[0] > n:
            a = a[np.sort(rng.choice(a.shape[0], n, replace=False))]
        if b.shape[0] > n:
            b = b[np.sort(rng.choice(b.shape[0], n, replace=False))]
    try:
        cfg = SwdConfig(num_projections=args.projections, p=args.p,
                        normalization=args.normalization, seed=args.seed)
        est = swd_estimate(a, b, cfg)
    except (ValueError, SampleSizeError) as exc:
        raise UsageError(str(exc)) from None
    print(f"{est.value:.12g}")
    return EXIT_OK


# -- gen-data -------------------------------------------------------------------

def _parse_params(items) -> dict:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise UsageError(f"--param expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        try:
            out[k] = json.loads(v)
        except json.JSONDecodeError:
            out[k] = v
    return out


def cmd_gen_data(args) -> int:
    if args.manifest:
        manifest = json.loads(Path(args.manifest).read_text())
        name, seed, params = manifest["generator"], manifest["seed"], manifest["params"]
    else:
        if not args.generator:
            raise UsageError("give a generator name or --manifest")
        name, seed, params = args.generator, args.seed, _parse_params(args.param)
    try:
        pair = D.generate(name, seed, **dict(params))
    except TypeError as exc:
        raise UsageError(f"bad parameters for {name}: {exc}") from None
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    D.write_csv(pair.source, out / "source.csv")
    D.write_csv(pair.target, out / "target.csv")
    manifest = {"generator": name, "seed": seed, "params": params,
                "files": {"source": "source.csv", "target": "target.csv"},
                "shift": pair.shift}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(pair.source)} source and {len(pair.target)} target rows to {out}")
    return EXIT_OK


# -- task loading -----------------------------------------------------------------

def _load_ref(ref: dict):
    if "csv" in ref:
        return D.read_csv(ref["csv"])
    return D.load_idx(ref["images"], ref["labels"])


def load_task(cfg: ExperimentConfig):
    """Returns (source, target features, labelled target for evaluation or None)."""
    t = cfg.task
    if "generator" in t:
        pair = D.generate(t["generator"], t["seed"], **dict(t["params"]))
        return pair.source, pair.target.unlabeled(), pair.target
    source = _load_ref(t["source"])
    target = _load_ref(t["target"])
    if not isinstance(source, D.LabeledDataset):
        raise ConfigError("task.source", "source data must carry a label column")
    prep = t.get("preprocess")
    if prep:
        size = int(prep.get("size", 32))
        seed = int(prep.get("seed", 0))
        source = D.preprocess(source, size, prep.get("source_subset"), seed)
        if isinstance(target, D.LabeledDataset):
            target = D.preprocess(target, size, prep.get("target_subset"), seed + 1)
        else:
            raise ConfigError("task.target", "image targets need the IDX label file")
    if source.dim != target.dim:
        raise ConfigError("task", f"source has {source.dim} features, target {target.dim}")
    if isinstance(target, D.LabeledDataset):
        return source, target.unlabeled(), target
    return source, target, None


def _num_classes(source, eval_target) -> int:
    k = int(source.y.max()) + 1
    if eval_target is not None:
        k = max(k, int(eval_target.y.max()) + 1)
    return k


def _write_resolved(cfg: ExperimentConfig, out: Path) -> str:
    resolved = cfg.resolved()
    text = json.dumps(resolved, indent=2, sort_keys=True) + "\n"
    (out / "config.resolved.json").write_text(text)
    return hashlib.sha256(text.encode()).hexdigest()[:12]


def _apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    if getattr(args, "seed", None) is not None:
        cfg.seeds = [args.seed]
    if getattr(args, "out", None):
        cfg.out = args.out
    return cfg


# -- pretrain -----------------------------------------------------------------------

def _pretrain_seed(cfg, arch, source, seed, writer, fh):
    tc = cfg.train_config(seed)

    def on_epoch(epoch, loss, params):
        writer.writerow([seed, epoch, _fmt(loss), _fmt(evaluate(params, source).accuracy)])
        fh.flush()

    return pretrain(source, init_params(arch, seed), tc, callback=on_epoch)


def cmd_pretrain(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    source, target, eval_target = load_task(cfg)
    arch = cfg.architecture(source.dim, _num_classes(source, eval_target))
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_resolved(cfg, out)
    with open(out / "pretrain_metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seed", "epoch", "ce_loss", "source_acc"])
        fh.flush()
        for seed in cfg.seeds:
            params = _pretrain_seed(cfg, arch, source, seed, w, fh)
            path = out / f"pretrained_seed{seed}.bin"
            save_params(params, path)
            msg = f"seed {seed}: source acc {evaluate(params, source).accuracy:.4f}"
            if eval_target is not None:
                msg += f", target acc {evaluate(params, eval_target).accuracy:.4f}"
            print(f"{msg} -> {path}")
    return EXIT_OK


# -- train --------------------------------------------------------------------------

METRIC_FIELDS = ["run_id", "seed", "iteration", "ce_loss", "swd_loss", "source_acc",
                 "target_acc"]


def _dump_embeddings(path, params, source, target, eval_target, pl):
    zs, _ = encode(params.v, source.x)
    zt, _ = encode(params.v, target.x)
    _, ps = forward(params, source.x)
    _, pt = forward(params, target.x)
    _, conf_s = predict_labels(ps)
    _, conf_t = predict_labels(pt)
    pseudo = np.full(len(target), -1, dtype=np.int64)
    pseudo[pl.indices] = pl.labels
    true_t = eval_target.y if eval_target is not None else np.full(len(target), -1)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["domain", "label", "pseudo_label", "confidence",
                    *(f"z{i}" for i in range(zs.shape[1]))])
        for y, c, z in zip(source.y, conf_s, zs):
            w.writerow(["source", int(y), -1, _fmt(c), *map(_fmt, z)])
        for y, p, c, z in zip(true_t, pseudo, conf_t, zt):
            w.writerow(["target", int(y), int(p), _fmt(c), *map(_fmt, z)])


def cmd_train(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    source, target, eval_target = load_task(cfg)
    arch = cfg.architecture(source.dim, _num_classes(source, eval_target))
    start = None
    if args.checkpoint:
        try:
            start = load_params(args.checkpoint)
            check_architecture(start, arch)
        except ParamShapeError as exc:
            raise UsageError(f"checkpoint does not match config architecture: {exc}") from None
    k = arch.num_classes
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    run_id = _write_resolved(cfg, out)
    finals = {}
    fields = METRIC_FIELDS + [f"pl_count_{j}" for j in range(k)]
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(fields)
        fh.flush()
        for seed in cfg.seeds:
            tc = cfg.train_config(seed)
            if start is None:
                p0 = pretrain(source, init_params(arch, seed), tc)
                save_params(p0, out / f"pretrained_seed{seed}.bin")
            else:
                p0 = start
            last_good = [0]

            def on_iteration(rec, params, pl, seed=seed):
                w.writerow([run_id, seed, rec.iteration, _fmt(rec.ce_loss), _fmt(rec.swd_loss),
                            _fmt(rec.source_acc), _fmt(rec.target_acc),
                            *map(int, rec.pl_counts)])
                fh.flush()
                last_good[0] = rec.iteration
                every = cfg.embedding_every
                if every and (rec.iteration % every == 0 or rec.iteration == tc.itr):
                    emb = out / "embeddings"
                    emb.mkdir(exist_ok=True)
                    _dump_embeddings(emb / f"seed{seed}_itr{rec.iteration}.csv", params, source,
                                     target, eval_target, pl)

            try:
                params, trainlog = dacad_train(source, target, p0, tc, eval_target, on_iteration)
            except DivergenceError as exc:
                print(f"error: seed {seed} diverged: {exc}; last good iteration "
                      f"{last_good[0]}", file=sys.stderr)
                return EXIT_RUNTIME
            save_params(params, out / f"final_seed{seed}.bin")
            last = trainlog.records[-1]
            finals[seed] = {"source_acc": last.source_acc, "target_acc": last.target_acc,
                            "pseudo_labels": int(last.pl_counts.sum())}
            print(f"seed {seed}: source acc {last.source_acc:.4f}" +
                  (f", target acc {last.target_acc:.4f}" if last.target_acc is not None else ""))

    summary = {"run_id": run_id, "seeds": finals}
    for key in ("source_acc", "target_acc"):
        vals = [f[key] for f in finals.values() if f[key] is not None]
        if vals:
            summary[key] = {"mean": float(np.mean(vals)),
                            "std": float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    if "target_acc" in summary:
        s = summary["target_acc"]
        print(f"target accuracy over {len(finals)} seed(s): {s['mean']:.4f} +- {s['std']:.4f}")
    return EXIT_OK


# -- eval ---------------------------------------------------------------------------

def cmd_eval(args) -> int:
    params = load_params(args.checkpoint)
    if args.data:
        ds = D.read_csv(args.data)
    elif args.images and args.labels:
        ds = D.load_idx(args.images, args.labels)
        arch = architecture_of(params)
        if ds.dim != arch.input_dim:
            side = int(round(np.sqrt(arch.input_dim)))
            ds = D.preprocess(ds, side)
    else:
        raise UsageError("give --data CSV or --images and --labels")
    if not isinstance(ds, D.LabeledDataset):
        raise UsageError("evaluation needs labelled data (CSV with a 'label' column)")
    try:
        res = evaluate(params, ds)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    per_class = {str(j): (None if np.isnan(a) else float(a)) for j, a in enumerate(res.per_class)}
    if args.json:
        print(json.dumps({"accuracy": res.accuracy, "n": res.n, "per_class": per_class,
                          "support": [int(s) for s in res.support]}, sort_keys=True))
    else:
        print(f"accuracy  {res.accuracy:.6f}  (n={res.n})")
        for j, a in per_class.items():
            shown = "   n/a" if a is None else f"{a:.6f}"
            print(f"class {j:>3}  {shown}  (n={int(res.support[int(j)])})")
    return EXIT_OK


# -- entry point ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dacad", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("swd", help="sliced-Wasserstein distance between two sample CSVs")
    s.add_argument("file_a")
    s.add_argument("file_b")
    s.add_argument("-L", "--projections", type=int, default=128)
    s.add_argument("-p", "--p", type=float, default=2.0)
    s.add_argument("--normalization", choices=("mean", "sum"), default="mean")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--strict", action="store_true", help="fail on unequal row counts")
    s.set_defaults(func=cmd_swd)

    g = sub.add_parser("gen-data", help="write a synthetic domain pair as CSV")
    g.add_argument("generator", nargs="?", choices=sorted(D.GENERATORS))
    g.add_argument("--param", action="append", metavar="KEY=VALUE")
    g.add_argument("--manifest", help="regenerate from a manifest.json")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    for name, func, hlp in (("pretrain", cmd_pretrain, "source-only pre-training"),
                            ("train", cmd_train, "class-conditional adaptation")):
        t = sub.add_parser(name, help=hlp)
        t.add_argument("--config", required=True)
        t.add_argument("--seed", type=int, help="run only this seed")
        t.add_argument("--out", help="output directory (overrides config)")
        if name == "train":
            t.add_argument("--checkpoint", help="pre-trained parameters; pre-train if omitted")
        t.set_defaults(func=func)

    e = sub.add_parser("eval", help="accuracy of a checkpoint on labelled data")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", help="CSV with a label column")
    e.add_argument("--images")
    e.add_argument("--labels")
    e.add_argument("--json", action="store_true")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ParamFormatError, ParamShapeError, D.IDXFormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
