"""Command-line pipeline: synth -> defend -> featurize -> train -> eval.

Every command writes ``run.json`` next to its outputs with the inputs, the
resolved configuration, its hash and the seed. Failures print one line,
``error: <category>: <message>``, and exit non-zero.
"""
from __future__ import annotations

import argparse
import hashlib
import inspect
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import defenses, features, synth
from .model import ModelConfig, ModelConfigError, WfcatModel
from .tensor import ShapeError, save_checkpoint
from .trace import DatasetError, DatasetManifest, TraceFormatError, load_trace, save_trace, scan_dataset
from .train import (
    EvalReport,
    SplitError,
    TrainingError,
    closed_world_accuracy,
    make_folds,
    pr_curve,
    predict_proba,
    tau_grid,
    train,
)

log = logging.getLogger("wfkit")

EXIT_CODES = {"usage": 2, "input": 3, "config": 4, "shape": 5, "data": 6, "runtime": 1}


class CliError(Exception):
    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", message)


# helpers ----------------------------------------------------------------------


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _args_config(args, **extra) -> dict:
    skip = {"func", "jobs", "verbose"}
    return {k: v for k, v in vars(args).items() if k not in skip} | extra


def _write_run(out: Path, command: str, config: dict, seed: int, inputs: list[Path]) -> None:
    canon = json.dumps(config, sort_keys=True, default=str)
    record = {
        "command": command,
        "config": json.loads(canon),
        "config_hash": hashlib.sha256(canon.encode()).hexdigest(),
        "seed": seed,
        "inputs": {str(p): _sha256(p) for p in inputs if p.is_file()},
    }
    (out / "run.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")


def _resolve_seed(args) -> int:
    if args.seed is not None:
        return int(args.seed)
    env = os.environ.get("WFKIT_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise CliError("config", f"WFKIT_SEED must be an integer, got {env!r}") from None
    return 0


def _load_manifest(path: Path) -> DatasetManifest:
    if path.is_dir():
        csv_path = path / "manifest.csv"
        return DatasetManifest.from_csv(csv_path) if csv_path.exists() else scan_dataset(path)
    if path.is_file():
        return DatasetManifest.from_csv(path)
    raise CliError("input", f"{path}: no such dataset or manifest")


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise CliError("input", f"{path}: missing {what}")
    return path


def _config_values(path: Path) -> dict[str, str]:
    values = {}
    for n, line in enumerate(_require(path, "config file").read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError("config", f"{path}:{n}: expected key=value")
        k, v = line.split("=", 1)
        values[k.strip().replace("-", "_")] = v.strip()
    return values


def _pool_map(fn, items, jobs: int):
    if jobs > 1 and len(items) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(min(jobs, len(items))) as pool:
            return list(pool.map(fn, items, chunksize=max(1, len(items) // (4 * jobs))))
    return [fn(x) for x in items]


# synth ------------------------------------------------------------------------


def cmd_synth(args) -> None:
    out = Path(args.out)
    spec = synth.SynthSpec(
        class_count=args.classes,
        traces_per_class=args.per_class,
        nonmonitored=args.nonmonitored,
        seed=args.seed,
    )
    manifest = synth.generate(spec, out)
    _write_run(out, "synth", _args_config(args), args.seed, [])
    print(f"wrote {len(manifest)} traces to {out}")


# defend -----------------------------------------------------------------------


def _defense_params(kind: str, raw: list[str]) -> dict:
    fn = defenses.DEFENSES.get(kind)
    if fn is None:
        raise CliError("config", f"unknown defense {kind!r}")
    sig = inspect.signature(fn).parameters
    params = {}
    for item in raw:
        key, sep, value = item.partition("=")
        key = key.strip().replace("-", "_")
        if not sep or key not in sig or key in ("trace", "seed", "stream"):
            raise CliError("config", f"bad --param {item!r} for {kind}")
        default = sig[key].default
        try:
            params[key] = int(value) if isinstance(default, int) else float(value)
        except ValueError:
            raise CliError("config", f"--param {key} needs a number, got {value!r}") from None
    return params


def _defend_one(job):
    index, path, out_path, kind, params, seed = job
    src = load_trace(path)
    dfd = defenses.apply_defense(kind, src, params, seed, index)
    save_trace(dfd.to_trace(), out_path, dummy=dfd.dummy.tolist())
    return src, dfd


def cmd_defend(args) -> None:
    manifest = _load_manifest(Path(args.dataset))
    params = _defense_params(args.defense, args.param or [])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [
        (i, e.path, out / e.path.name, args.defense, params, args.seed)
        for i, e in enumerate(manifest.entries)
    ]
    pairs = _pool_map(_defend_one, jobs, args.jobs)
    mirrored = DatasetManifest(
        tuple(type(e)(out / e.path.name, e.label, e.monitored) for e in manifest.entries),
        manifest.class_count,
        manifest.has_nonmonitored,
    )
    mirrored.to_csv(out / "manifest.csv")
    data_oh, time_oh = defenses.overheads(pairs)
    (out / "overheads.csv").write_text(f"data_overhead,time_overhead\n{data_oh!r},{time_oh!r}\n")
    config = {"defense": args.defense, "params": params, "dataset": args.dataset}
    _write_run(out, "defend", config, args.seed, [Path(args.dataset) / "manifest.csv"])
    print(f"defended {len(pairs)} traces: data overhead {data_oh:.3f}, time overhead {time_oh:.3f}")


# featurize --------------------------------------------------------------------


def cmd_featurize(args) -> None:
    manifest = _load_manifest(Path(args.dataset))
    cfg = features.IatConfig(
        slot_duration=args.slot_ms / 1000.0,
        slot_count=args.slots,
        bin_count=args.bins,
        boundaries=tuple(features.default_boundaries(args.bins, args.delta_min, args.delta_max)),
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    n = features.featurize_dataset(
        manifest, cfg, args.repr, out / "features.wfc", out / "labels.csv", jobs=args.jobs
    )
    meta = {
        "representation": args.repr,
        "slot_duration": cfg.slot_duration,
        "slot_count": cfg.slot_count,
        "bin_count": cfg.bin_count,
        "boundaries": [repr(b) for b in cfg.boundaries],
        "class_count": manifest.class_count,
        "has_nonmonitored": manifest.has_nonmonitored,
    }
    (out / "features.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    _write_run(out, "featurize", _args_config(args), args.seed, [])
    print(f"featurized {n} traces into {out / 'features.wfc'}")


# train ------------------------------------------------------------------------


def _load_features(path: Path):
    _require(path / "features.wfc", "feature cache")
    meta = json.loads(_require(path / "features.json", "feature metadata").read_text())
    x = features.read_cache(path / "features.wfc")
    y = features.read_labels(_require(path / "labels.csv", "labels"))
    if len(x) != len(y):
        raise CliError("data", f"{len(x)} tensors but {len(y)} labels")
    if x.ndim == 3:  # TAM [2, L] becomes a single-bin histogram
        x = x[:, None]
    return x, y, meta


def _train_fold(job):
    fold, plan, cfg, x, y, args = job
    model = WfcatModel(cfg)
    model, history = train(
        model, x, y, plan, epochs=args["epochs"], batch=args["batch"], lr=args["lr"],
        wd=args["wd"], seed=args["seed"] + fold, decoupled=args["decoupled_wd"],
    )
    probs = predict_proba(model, x[plan.test]) if plan.test.size else np.zeros((0, cfg.class_count))
    return fold, model.state_dict(), history, probs


def cmd_train(args) -> None:
    src = Path(args.features)
    x, y, meta = _load_features(src)
    C = int(meta["class_count"])
    keep = np.arange(len(y))
    if args.mode == "closed":
        keep = np.flatnonzero(y < C)
        classes = C
    else:
        if not meta["has_nonmonitored"]:
            raise CliError("data", "open-world training needs non-monitored traces")
        classes = C + 1
    x, y = x[keep], y[keep]
    try:
        cfg = ModelConfig(
            class_count=classes, bins=x.shape[1], slots=x.shape[3], kernels=args.kernels,
            se_reduction=args.se_reduction, dropout=args.dropout, seed=args.seed,
        )
    except ModelConfigError as e:
        raise CliError("config", str(e)) from None
    if args.model_config:
        loaded = ModelConfig.from_text(_require(Path(args.model_config), "model config").read_text())
        if (loaded.bins, loaded.slots) != (cfg.bins, cfg.slots):
            raise CliError("shape", f"model config expects [{loaded.bins}, 2, {loaded.slots}] "
                                    f"but cache holds {list(x.shape[1:])}")
        cfg = loaded
    plans = make_folds(y, args.folds, args.seed)
    selected = range(args.folds) if args.fold is None else [args.fold]
    if args.fold is not None and not 0 <= args.fold < args.folds:
        raise CliError("config", f"--fold must be in [0, {args.folds})")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "model.cfg").write_text(cfg.to_text())
    targs = {k: getattr(args, k) for k in ("epochs", "batch", "lr", "wd", "seed", "decoupled_wd")}
    jobs = [(f, plans[f], cfg, x, y, targs) for f in selected]
    for fold, state, history, probs in _pool_map(_train_fold, jobs, min(args.jobs, len(jobs))):
        save_checkpoint(out / f"model-fold{fold}.wfm", state)
        history.to_csv(out / f"history-fold{fold}.csv")
        test = plans[fold].test
        with open(out / f"predictions-fold{fold}.csv", "w", encoding="utf-8") as f:
            f.write("index,label," + ",".join(f"p{j}" for j in range(classes)) + "\n")
            for i, row in zip(test, probs):
                f.write(f"{keep[i]},{y[i]}," + ",".join(repr(float(p)) for p in row) + "\n")
        acc = closed_world_accuracy(probs, y[test]) if test.size else float("nan")
        print(f"fold {fold}: best epoch {history.best_epoch}, test accuracy {acc:.4f}")
    config = _args_config(args, class_count=classes)
    _write_run(out, "train", config, args.seed, [src / "features.wfc", src / "labels.csv"])


# eval -------------------------------------------------------------------------


def _read_predictions(path: Path):
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data[:, 1].astype(np.int64), data[:, 2:]


def cmd_eval(args) -> None:
    run = Path(args.run)
    files = sorted(run.glob("predictions-fold*.csv"), key=lambda p: int(p.stem.split("fold")[1]))
    if args.folds is not None:
        files = [run / f"predictions-fold{i}.csv" for i in range(args.folds)]
        for f in files:
            _require(f, "fold predictions")
    if not files:
        raise CliError("input", f"{run}: no predictions-fold*.csv files")
    labels, probs = zip(*(_read_predictions(f) for f in files))
    y, p = np.concatenate(labels), np.concatenate(probs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.mode == "closed":
        rows = [(i, closed_world_accuracy(pr, lb)) for i, (lb, pr) in enumerate(zip(labels, probs))]
        pooled = closed_world_accuracy(p, y)
        with open(out / "accuracy.csv", "w", encoding="utf-8") as f:
            f.write("fold,accuracy\n")
            for i, a in rows:
                f.write(f"{i},{a!r}\n")
            f.write(f"pooled,{pooled!r}\n")
        print(f"closed-world accuracy {pooled:.4f} over {len(y)} traces")
    else:
        try:
            report: EvalReport = pr_curve(p, y, tau_grid(args.tau_grid))
        except ValueError as e:
            raise CliError("data", str(e)) from None
        report.to_csv(out / "pr_curve.csv")
        print(f"open-world best F1 {report.best_f1:.4f}; {len(report.points())} PR points")
    _write_run(out, "eval", _args_config(args), args.seed, files)


# entry point --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="wfkit", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--config", help="key=value file; command-line flags override it")
        p.add_argument("--seed", type=int, default=None, help="defaults to $WFKIT_SEED, then 0")
        p.add_argument("--jobs", type=int, default=os.cpu_count() or 1)
        p.add_argument("--out", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    common(p)
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--per-class", type=int, default=50)
    p.add_argument("--nonmonitored", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("defend", help="simulate a defense over a dataset")
    common(p)
    p.add_argument("dataset", help="dataset directory or manifest CSV")
    p.add_argument("--defense", choices=sorted(defenses.DEFENSES), required=True)
    p.add_argument("--param", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_defend)

    p = sub.add_parser("featurize", help="build the feature cache")
    common(p)
    p.add_argument("dataset", help="dataset directory or manifest CSV")
    p.add_argument("--repr", choices=["iat", "tam"], default="iat")
    p.add_argument("--bins", type=int, default=features.DEFAULT_BINS)
    p.add_argument("--slot-ms", type=float, default=features.DEFAULT_SLOT * 1000)
    p.add_argument("--slots", type=int, default=features.DEFAULT_SLOTS)
    p.add_argument("--delta-min", type=float, default=features.DEFAULT_DELTA_MIN)
    p.add_argument("--delta-max", type=float, default=features.DEFAULT_DELTA_MAX)
    p.set_defaults(func=cmd_featurize)

    p = sub.add_parser("train", help="train WFCAT with k-fold cross-validation")
    common(p)
    p.add_argument("features", help="featurize output directory")
    p.add_argument("--mode", choices=["closed", "open"], default="closed")
    p.add_argument("--folds", type=int, default=10)
    p.add_argument("--fold", type=int, default=None, help="train one fold only")
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--wd", type=float, default=5e-4)
    p.add_argument("--decoupled-wd", action="store_true")
    p.add_argument("--kernels", type=int, default=4)
    p.add_argument("--se-reduction", type=int, default=16)
    p.add_argument("--dropout", type=float, default=0.1)
    p.add_argument("--model-config", help="key=value model config file")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score pooled fold predictions")
    common(p)
    p.add_argument("run", help="train output directory")
    p.add_argument("--mode", choices=["closed", "open"], default="closed")
    p.add_argument("--folds", type=int, default=None, help="number of folds to pool")
    p.add_argument("--tau-grid", type=int, default=101)
    p.set_defaults(func=cmd_eval)
    return parser


def _parse(argv) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        values = _config_values(Path(args.config))
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sub._actions}
        unknown = set(values) - known
        if unknown:
            raise CliError("config", f"unknown config keys {sorted(unknown)}")
        typed = {}
        for a in sub._actions:
            if a.dest in values:
                raw = values[a.dest]
                typed[a.dest] = (raw.lower() in ("1", "true", "yes")) if a.nargs == 0 else (
                    a.type(raw) if a.type else raw)
        sub.set_defaults(**typed)
        args = parser.parse_args(argv)
    args.seed = _resolve_seed(args)
    return args


def main(argv=None) -> int:
    try:
        args = _parse(sys.argv[1:] if argv is None else argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        args.func(args)
        return 0
    except CliError as e:
        category, msg = e.category, str(e)
    except (TraceFormatError, DatasetError, features.CacheError) as e:
        category, msg = "input", str(e)
    except (ShapeError,) as e:
        category, msg = "shape", str(e)
    except (features.ConfigError, defenses.DefenseConfigError, ModelConfigError, synth.SynthError, SplitError) as e:
        category, msg = "config", str(e)
    except TrainingError as e:
        category, msg = "runtime", str(e)
    except OSError as e:
        category, msg = "input", str(e)
    print(f"error: {category}: {' '.join(msg.split())}", file=sys.stderr)
    return EXIT_CODES[category]


if __name__ == "__main__":
    sys.exit(main())
