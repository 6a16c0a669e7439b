"""Command-line entry points.

Exit codes: 0 success, 2 usage/config error, 3 data error, 4 transport error.
Options may also come from a flat ``key=value`` file given with ``--config``;
command-line flags win over the file.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import blackbox
from .datagen import (ADAPTATION_FIXTURE, DatasetSplit, ShiftSpec, load_csv, make_synthetic_pair,
                      normalize_pair, write_csv)
from .errors import ConfigError, DataError, IterLNLError
from .iterative import IterConfig, evaluate, run_iterlnl, write_trace
from .lnl import LnlConfig
from .model import TrainConfig, load_checkpoint, save_checkpoint, train_source
from .report import (build_report, config_hash, provenance_line, write_rows_csv,
                     write_transition_csv)

log = logging.getLogger("iterlnl")

DEFAULTS = {
    "seed": 0,
    # model / SGD
    "iters": 2000,
    "batch_size": 64,
    "eta0": 0.01,
    "momentum": 0.9,
    "hidden": "256,128",
    # LNL
    "gamma": 0.9,
    "kappa": 2.0,
    "buffer_length": 100,
    "nk_fraction": 0.5,
    "steps": 5,
    "reinit": "random",
    "tolerance": 0.01,
    "max_in_flight": 1,
    "bind": "127.0.0.1:8080",
    # gen-data
    "preset": "fixture",
    "k": 3,
    "d": 2,
    "n_source": 600,
    "n_target": 600,
    "translation": "",
    "rotation": 0.0,
    "spread": 0.5,
    "separation": 3.0,
    "val_per_class": 30,
}


def read_config_file(path) -> dict:
    """Parse ``key=value`` lines; ``#`` starts a comment, dashes in keys become underscores."""
    out = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


_BOOL_TRUE = {"1", "true", "yes", "on"}


def _convert(key, value, like):
    if isinstance(value, str) and not isinstance(like, str):
        try:
            if isinstance(like, bool) or like is None:
                return value.strip().lower() in _BOOL_TRUE
            if isinstance(like, int):
                return int(value)
            if isinstance(like, float):
                return float(value)
        except ValueError:
            raise ConfigError(f"config value {key}={value!r} is not a valid {type(like).__name__}") from None
    return value


def resolve(args) -> dict:
    """Merge flags > config file > defaults into one flat settings dict."""
    from_file = read_config_file(args.config) if getattr(args, "config", None) else {}
    settings = {}
    for key, value in vars(args).items():
        if key in ("func", "command"):
            continue
        if value is None and key in from_file:
            value = _convert(key, from_file[key], DEFAULTS.get(key))
        if value is None:
            value = DEFAULTS.get(key)
        settings[key] = value
    unknown = set(from_file) - set(settings)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    return settings


def _floats(text, name):
    if text in (None, ""):
        return ()
    try:
        return tuple(float(v) for v in str(text).split(","))
    except ValueError:
        raise ConfigError(f"--{name} expects comma-separated numbers, got {text!r}") from None


def _hidden(text):
    if text in (None, "", "none"):
        return ()
    try:
        dims = tuple(int(v) for v in str(text).split(","))
    except ValueError:
        raise ConfigError(f"--hidden expects comma-separated sizes, got {text!r}") from None
    if any(v < 1 for v in dims):
        raise ConfigError("hidden sizes must be positive")
    return dims


def _handle_from(settings):
    if settings.get("endpoint"):
        return blackbox.remote(settings["endpoint"], max_in_flight=settings["max_in_flight"])
    if settings.get("checkpoint"):
        return blackbox.wrap_as_blackbox(load_checkpoint(settings["checkpoint"]))
    raise ConfigError("need --checkpoint or --endpoint for the black box")


def _load_split(path, labeled, k):
    split = load_csv(path, has_labels=labeled, k=k)
    if not labeled:
        split = DatasetSplit(split.features, None, k)
    return split


# -- commands ---------------------------------------------------------------

def cmd_gen_data(s):
    if s["preset"] == "fixture":
        spec = ADAPTATION_FIXTURE
    else:
        spec = ShiftSpec(k=s["k"], d=s["d"], n_source=s["n_source"], n_target=s["n_target"],
                         translation=_floats(s["translation"], "translation"), rotation=s["rotation"],
                         spread=s["spread"], separation=s["separation"], seed=s["seed"])
    source, target = normalize_pair(*make_synthetic_pair(spec))
    out = Path(s["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    write_csv(source, out / "source.csv")
    write_csv(target, out / "target.csv")
    rng = np.random.default_rng(spec.seed + 1)
    truth = target.evaluation_labels()
    per = s["val_per_class"]
    pick = np.concatenate([rng.permutation(np.flatnonzero(truth == c))[:per] for c in range(spec.k)])
    write_csv(target.subset(np.sort(pick)), out / "val.csv")
    print(f"wrote {out}/source.csv ({source.n} rows), target.csv ({target.n} rows), "
          f"val.csv ({pick.size} rows); k={spec.k} d={spec.d}")
    return 0


def cmd_train_source(s):
    source = load_csv(s["data"], has_labels=True)
    cfg = TrainConfig(iterations=s["iters"], batch_size=s["batch_size"], eta0=s["eta0"],
                      momentum=s["momentum"], hidden=_hidden(s["hidden"]), seed=s["seed"])
    model = train_source(source, cfg)
    save_checkpoint(model, s["out"])
    acc = evaluate(model, source).accuracy
    report = Path(str(s["out"]) + ".report.csv")
    write_rows_csv(report, ["metric", "value"], [["source_accuracy", acc], ["n", source.n]],
                   provenance_line(s["seed"], s))
    print(f"source accuracy {acc:.4f} ({source.n} samples); checkpoint {s['out']}")
    return 0


def cmd_serve(s):
    if not s.get("checkpoint"):
        raise ConfigError("serve needs --checkpoint")
    blackbox.serve(s["checkpoint"], s["bind"])
    return 0


def cmd_adapt(s):
    handle = _handle_from(s)
    target = _load_split(s["target"], s["labeled_target"], handle.k)
    if s["labeled_target"]:
        target = target.unlabeled()
    val = load_csv(s["val_set"], has_labels=True, k=handle.k) if s["val_set"] else None
    lnl = LnlConfig(gamma=s["gamma"], kappa=s["kappa"], h=s["buffer_length"],
                    nk_fraction=s["nk_fraction"], iterations=s["iters"],
                    batch_size=s["batch_size"], eta0=s["eta0"], momentum=s["momentum"],
                    hidden=_hidden(s["hidden"]), no_rescale=bool(s["no_rescale"]),
                    no_category_sampling=bool(s["no_category_sampling"]),
                    noise_rate_override=s["noise_rate"], validation_set=val)
    steps = 1 if s["no_iter"] else s["steps"]
    cfg = IterConfig(steps=steps, lnl=lnl, reinit=s["reinit"], tolerance=s["tolerance"], seed=s["seed"])
    run_dir = Path(s["run_dir"]) if s["run_dir"] else Path("runs") / (s["name"] or "adapt")
    run_dir.mkdir(parents=True, exist_ok=True)
    provenance = provenance_line(s["seed"], s)
    (run_dir / "config.txt").write_text(
        f"# {provenance}\n" + "".join(f"{k}={'' if v is None else v}\n" for k, v in sorted(s.items())),
        encoding="utf-8")

    model, records = run_iterlnl(handle, target, cfg, run_dir=run_dir, provenance=provenance)
    save_checkpoint(model, run_dir / "final.ckpt")
    write_trace(records, run_dir / "trace.csv", provenance)
    for r in records:
        extra = "" if r.model_acc is None else f"  label_acc={r.label_acc:.4f}  model_acc={r.model_acc:.4f}"
        print(f"step {r.m}: eps_est={r.epsilon_est:.4f}{extra}")
    print(f"run directory {run_dir} (config-hash {config_hash(s)})")
    return 0


def cmd_eval(s):
    handle = _handle_from(s)
    split = load_csv(s["data"], has_labels=True, k=handle.k)
    ev = evaluate(handle, split)
    print(f"accuracy {ev.accuracy:.4f} on {split.n} samples")
    for c, (a, n) in enumerate(zip(ev.per_class, ev.support)):
        shown = "absent" if np.isnan(a) else f"{a:.4f}"
        print(f"  class {c}: {shown} (n={int(n)})")
    if s["out"]:
        write_transition_csv(ev.transition, s["out"], provenance_line(s["seed"], s))
        print(f"transition matrix written to {s['out']}")
    return 0


def cmd_report(s):
    run_dir = Path(s["run_dir"])
    split = None
    if s["eval"]:
        final = run_dir / "final.ckpt"
        k = load_checkpoint(final).k if final.exists() else None
        split = load_csv(s["eval"], has_labels=True, k=k)
    result = build_report(run_dir, split, s["out_dir"], figures=not s["no_figures"])
    for path in result.written:
        print(f"wrote {path}")
    for note in result.notices:
        print(f"notice: {note}")
    return 0


# -- parser -----------------------------------------------------------------

def _add_common(p):
    p.add_argument("--config", help="key=value file; flags override it")
    p.add_argument("--seed", type=int, help="master seed (default 0)")


def _add_sgd(p):
    p.add_argument("--iters", type=int, help="SGD iterations per training run (default 2000)")
    p.add_argument("--batch-size", type=int, help="mini-batch size (default 64)")
    p.add_argument("--eta0", type=float, help="base learning rate (default 0.01)")
    p.add_argument("--momentum", type=float, help="SGD momentum (default 0.9)")
    p.add_argument("--hidden", help="hidden layer sizes, comma separated (default 256,128)")


def _add_blackbox(p):
    g = p.add_mutually_exclusive_group()
    g.add_argument("--checkpoint", help="local source checkpoint used as the black box")
    g.add_argument("--endpoint", help="URL of a served black box, e.g. http://localhost:8080")
    p.add_argument("--max-in-flight", type=int, help="concurrent requests to a remote black box")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="iterlnl", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic source/target pair as CSV")
    _add_common(p)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--preset", choices=["fixture", "none"], help="'fixture' ignores the shape flags")
    for name, typ in (("k", int), ("d", int), ("n-source", int), ("n-target", int),
                      ("rotation", float), ("spread", float), ("separation", float),
                      ("val-per-class", int)):
        p.add_argument(f"--{name}", type=typ)
    p.add_argument("--translation", help="comma-separated translation vector")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-source", help="train the source model on labeled data")
    _add_common(p)
    _add_sgd(p)
    p.add_argument("--data", required=True, help="labeled source CSV")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.set_defaults(func=cmd_train_source)

    p = sub.add_parser("serve", help="serve a checkpoint as a prediction-only HTTP API")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--bind", help="host:port (default 127.0.0.1:8080)")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("adapt", help="run iterative LNL against a black box")
    _add_common(p)
    _add_sgd(p)
    _add_blackbox(p)
    p.add_argument("--target", required=True, help="target CSV")
    p.add_argument("--labeled-target", action="store_true", default=None,
                   help="target CSV has a last label column, used for evaluation only")
    p.add_argument("--steps", type=int, help="iterative steps M (default 5)")
    p.add_argument("--no-iter", action="store_true", default=None, help="single step (M=1)")
    p.add_argument("--no-category-sampling", action="store_true", default=None,
                   help="pool all classes into one loss buffer")
    p.add_argument("--no-rescale", action="store_true", default=None, help="noise rate = 1 - rho'")
    p.add_argument("--val-set", help="labeled CSV; noise rate = 1 - black-box accuracy on it")
    p.add_argument("--noise-rate", type=float, help="fixed noise rate, skipping estimation")
    p.add_argument("--gamma", type=float, help="confidence threshold (default 0.9)")
    p.add_argument("--kappa", type=float, help="rescale curve degree (default 2)")
    p.add_argument("--buffer-length", type=int, help="loss queue length h (default 100)")
    p.add_argument("--nk-fraction", type=float, help="n_k as a fraction of --iters (default 0.5)")
    p.add_argument("--reinit", choices=["random", "warm"], help="model init per step")
    p.add_argument("--tolerance", type=float, help="stop when the estimate moves less (default 0.01)")
    p.add_argument("--run-dir", help="output directory (default runs/<name>)")
    p.add_argument("--name", help="run name under runs/")
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("eval", help="score a black box on a labeled CSV")
    _add_common(p)
    _add_blackbox(p)
    p.add_argument("--data", required=True, help="labeled CSV")
    p.add_argument("--out", help="write the transition matrix CSV here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="emit transition matrices and curves for a run")
    _add_common(p)
    p.add_argument("--run-dir", required=True)
    p.add_argument("--eval", help="labeled target CSV for label-dependent outputs")
    p.add_argument("--out-dir", help="default <run-dir>/report")
    p.add_argument("--no-figures", action="store_true", default=None, help="CSV only")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    func = args.func
    del args.verbose
    try:
        return func(resolve(args))
    except IterLNLError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (FileNotFoundError, IsADirectoryError) as exc:
        print(f"error: {exc.filename}: {exc.strerror}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
