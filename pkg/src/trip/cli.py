"""Command-line runs: ``generate``, ``train``, ``evaluate``, ``cv``, ``interpret``.

Configuration is a flat ``key = value`` file with ``#`` comments; every key
also exists as a ``--key`` flag, and flags win over the file. Each command
writes its outputs and a ``manifest.txt`` under ``--outdir``. Exit status is
0 on success, 1 on invalid input or configuration, 2 on runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import data as D
from .interpret import (export_decision_grid, fit_surrogate_projected, lrc, model_targets,
                        rotate_projected, rotation_from_projected)
from .model import load_model, predict, project, save_model
from .tensor import ShapeError
from .training import TrainConfig

log = logging.getLogger("trip")

LAMBDA_GRID = (1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1.0, 10.0)


class ConfigError(ValueError):
    pass


def _floats(s):
    return tuple(float(v) for v in s.split())


def _ints(s):
    return tuple(int(v) for v in s.split())


def _bool(s):
    low = s.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _opt_int(s):
    return None if s.strip().lower() in ("", "none", "auto") else int(s)


def _lambda_grid(s):
    return LAMBDA_GRID if s.strip().lower() == "standard" else _floats(s)


@dataclass
class RunConfig:
    data: Optional[str] = None
    test: Optional[str] = None
    task: str = "classification"
    response: Optional[str] = None
    subspace: tuple = (2,)
    hidden: int = 0
    width: int = 10
    rank: Optional[int] = None
    lam: Optional[float] = None
    method: str = "trip"
    normalize: bool = True
    epochs: int = 100
    batch_size: int = 32
    learning_rate: float = 1e-3
    orthonormalize_every: str = "batch"
    seed: int = 0
    sigma: float = 1.0
    folds: int = 10
    trials: int = 5
    lambda_grid: Optional[tuple] = None
    hidden_grid: Optional[tuple] = None

    def validate(self, need_lambda=True):
        def bad(key, why):
            raise ConfigError(f"config key {_KEY.get(key, key)!r}: {why}")
        if self.task not in ("classification", "regression"):
            bad("task", "must be classification or regression")
        if self.method not in ("trip", "pcann"):
            bad("method", "must be trip or pcann")
        if not self.subspace or any(j < 1 for j in self.subspace):
            bad("subspace", "needs positive extents")
        if not 0 <= self.hidden <= 4:
            bad("hidden", "must be in 0..4")
        for key in ("width", "epochs", "batch_size", "folds", "trials"):
            if getattr(self, key) < (0 if key == "epochs" else 1):
                bad(key, "out of range")
        if self.rank is not None and self.rank < 1:
            bad("rank", "must be >= 1")
        if self.learning_rate <= 0:
            bad("learning_rate", "must be > 0")
        if self.sigma <= 0:
            bad("sigma", "must be > 0")
        if self.orthonormalize_every not in ("batch", "epoch"):
            bad("orthonormalize_every", "must be batch or epoch")
        if need_lambda and self.method == "trip" and self.lam is None:
            bad("lam", "is required (no default)")
        if self.lam is not None and self.lam < 0:
            bad("lam", "must be >= 0")
        if self.hidden_grid is not None and any(not 0 <= h <= 4 for h in self.hidden_grid):
            bad("hidden_grid", "entries must be in 0..4")
        return self

    def spec(self, lam=None, hidden=None) -> D.ModelSpec:
        lam = self.lam if lam is None else lam
        return D.ModelSpec(
            subspace=tuple(self.subspace), n_hidden=self.hidden if hidden is None else hidden,
            lam=0.0 if lam is None else lam, rank=self.rank, width=self.width,
            method=self.method, normalize=self.normalize,
            train=TrainConfig(epochs=self.epochs, batch_size=self.batch_size,
                              learning_rate=self.learning_rate, seed=self.seed,
                              orthonormalize_every=self.orthonormalize_every))


# config-file key <-> field; "lambda" is a Python keyword
_KEY = {"lam": "lambda"}
_FIELD = {v: k for k, v in _KEY.items()}
_PARSE = {
    "data": str, "test": str, "task": str, "response": str, "subspace": _ints,
    "hidden": int, "width": int, "rank": _opt_int, "lam": float, "method": str,
    "normalize": _bool, "epochs": int, "batch_size": int, "learning_rate": float,
    "orthonormalize_every": str, "seed": int, "sigma": float, "folds": int,
    "trials": int, "lambda_grid": _lambda_grid, "hidden_grid": _ints,
}


def parse_config(text: str, source="config") -> dict:
    """Parse ``key = value`` lines into field values; unknown keys are errors."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        name = _FIELD.get(key, key)
        if name not in _PARSE or key in _KEY:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        try:
            out[name] = _PARSE[name](value)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key!r}: {exc}") from None
    return out


def _fmt_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return " ".join(_fmt_value(x) for x in v)
    if isinstance(v, float):
        return format(v, ".17g")
    return str(v)


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if v is not None:
            lines.append(f"{_KEY.get(f.name, f.name)} = {_fmt_value(v)}")
    return "\n".join(lines) + "\n"


def resolve_config(args) -> RunConfig:
    values = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file {path} not found")
        values.update(parse_config(path.read_text(), str(path)))
    for name, parse in _PARSE.items():
        flag = getattr(args, f"opt_{name}", None)
        if flag is not None:
            try:
                values[name] = parse(flag)
            except ValueError as exc:
                raise ConfigError(f"--{_KEY.get(name, name)}: {exc}") from None
    return RunConfig(**values)


# ---------------------------------------------------------------- helpers

def load_dataset(path, task="classification", response=None) -> D.Dataset:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"dataset {path} not found")
    if path.suffix.lower() == ".csv":
        return D.load_dense_csv(path, response, task)
    return D.load_sparse_tensor(path)


def norm_path(model_path) -> Path:
    return Path(str(model_path) + ".norm.csv")


def save_norm(stats: D.NormStats, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variable", "mean", "std", "constant"])
        for i, (m, s, c) in enumerate(zip(stats.mean, stats.std, stats.constant)):
            w.writerow([i + 1, format(m, ".17g"), format(s, ".17g"), int(c)])


def load_norm(path) -> D.NormStats:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    a = np.array([[float(v) for v in r[1:]] for r in rows])
    return D.NormStats(a[:, 0], a[:, 1], a[:, 2].astype(bool))


def _apply_norm(ds, model_path):
    p = norm_path(model_path)
    if p.is_file():
        return D.normalize(ds, load_norm(p))
    return ds


def _can_normalize(cfg, ds):
    return cfg.normalize and not ds.sparse and len(ds.shape) == 1


def write_manifest(outdir: Path, command: str, body: str = "", **extra):
    lines = [f"# trip {command}"]
    lines += [f"# {k}: {v}" for k, v in extra.items()]
    (outdir / "manifest.txt").write_text("\n".join(lines) + "\n" + body)


def write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([format(v, ".17g") if isinstance(v, (float, np.floating)) else v
                        for v in r])


def _outdir(args) -> Path:
    out = Path(args.outdir)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------- commands

def cmd_generate(args) -> int:
    out = _outdir(args)
    if args.kind == "spiral":
        train, test = D.gen_spiral(args.seed)
        D.save_dense_csv(train, out / "spiral_train.csv")
        D.save_dense_csv(test, out / "spiral_test.csv")
        files = ["spiral_train.csv", "spiral_test.csv"]
        shapes = f"{len(train)}x{train.shape[0]} {len(test)}x{test.shape[0]}"
    else:
        ds = D.gen_preset(args.kind, args.seed, args.samples, args.nnz)
        D.save_sparse_tensor(ds, out / f"{args.kind}.tns")
        files = [f"{args.kind}.tns", f"{args.kind}.y"]
        shapes = " ".join(map(str, ds.shape)) + f" N={len(ds)}"
    body = f"kind = {args.kind}\nseed = {args.seed}\nshape = {shapes}\nfiles = {' '.join(files)}\n"
    write_manifest(out, "generate", body)
    print(f"wrote {', '.join(files)} to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = resolve_config(args).validate()
    if cfg.data is None:
        raise ConfigError("config key 'data': a training dataset is required")
    ds = load_dataset(cfg.data, cfg.task, cfg.response)
    out = _outdir(args)
    stats = None
    if _can_normalize(cfg, ds):
        stats = D.fit_norm(ds)
        ds = D.normalize(ds, stats)
    model, history = D.fit_model(cfg.spec(), ds, cfg.seed)
    save_model(model, out / "model.trip")
    if stats is not None:
        save_norm(stats, norm_path(out / "model.trip"))
    history.write_csv(out / "train_log.csv")
    write_manifest(out, "train", dump_config(cfg), outputs="model.trip train_log.csv")
    msg = f"trained {len(history)} epoch(s)"
    if len(history):
        msg += f"; final loss {history[-1].mean_loss:.6g}, fit metric {history[-1].fit_metric:.6g}"
    if cfg.test:
        te = load_dataset(cfg.test, cfg.task, cfg.response)
        if stats is not None:
            te = D.normalize(te, stats)
        res = D.evaluate(model, te)
        write_rows(out / "test_metrics.csv", ["metric", "value"], sorted(res.items()))
        msg += "; test " + ", ".join(f"{k} {v:.6g}" for k, v in sorted(res.items()))
    print(msg)
    return 0


def cmd_evaluate(args) -> int:
    model = load_model(args.model)
    ds = load_dataset(args.data, args.task or model.task, args.response)
    if ds.task != model.task:
        raise ConfigError(f"model task {model.task} but dataset task {ds.task}")
    ds = _apply_norm(ds, args.model)
    res = D.evaluate(model, ds)
    out = _outdir(args)
    write_rows(out / "metrics.csv", ["metric", "value"], sorted(res.items()))
    write_manifest(out, "evaluate", f"model = {args.model}\ndata = {args.data}\n")
    for k, v in sorted(res.items()):
        print(f"{k}\t{v:.10g}")
    return 0


def cmd_cv(args) -> int:
    cfg = resolve_config(args)
    cfg.validate(need_lambda=cfg.lambda_grid is None)
    if cfg.data is None:
        raise ConfigError("config key 'data': a dataset is required")
    ds = load_dataset(cfg.data, cfg.task, cfg.response)
    lams = cfg.lambda_grid if cfg.lambda_grid is not None else (cfg.lam,)
    if cfg.method == "pcann":
        lams = (0.0,)
    hiddens = cfg.hidden_grid if cfg.hidden_grid is not None else (cfg.hidden,)
    plan = D.CvPlan(cfg.folds, cfg.trials, cfg.seed)
    out = _outdir(args)
    rows, summary = [], []
    for h in hiddens:
        for lam in lams:
            res = D.run_cv(ds, cfg.spec(lam=lam, hidden=h), plan)
            for r in res.rows:
                rows.append({"method": cfg.method, "hidden": h, "lambda": lam, **r})
            s = res.summary()
            summary.append({"method": cfg.method, "hidden": h, "lambda": lam,
                            **{f"{k}_mean": v[0] for k, v in s.items()},
                            **{f"{k}_std": v[1] for k, v in s.items()}})
            main = "test_accuracy" if ds.task == "classification" else "test_rmse"
            print(f"hidden {h} lambda {lam:g}: {main} {s[main][0]:.4f} +- {s[main][1]:.4f}")
    write_rows(out / "cv_folds.csv", list(rows[0]), [list(r.values()) for r in rows])
    write_rows(out / "cv_summary.csv", list(summary[0]), [list(r.values()) for r in summary])
    write_manifest(out, "cv", dump_config(cfg), outputs="cv_folds.csv cv_summary.csv")
    return 0


def cmd_interpret(args) -> int:
    if not args.sigma > 0:
        raise ConfigError("--sigma must be > 0")
    model = load_model(args.model)
    ds = load_dataset(args.data, args.task or model.task, args.response)
    ds = _apply_norm(ds, args.model)
    out = _outdir(args)
    Xbar = project(model, ds.X)
    N, K = len(Xbar), model.order
    cls = model.task == "classification"
    outputs = list(range(model.n_outputs)) if cls else [None]
    globals_ = {o: fit_surrogate_projected(Xbar, model_targets(model, Xbar, o), output=o)
                for o in outputs}
    main = model.n_outputs - 1 if cls else None
    rot = rotation_from_projected(Xbar, globals_[main].g)
    Xrot = rotate_projected(Xbar, rot.R)

    for k, R in enumerate(rot.R):
        write_rows(out / f"rotation_{k + 1}.csv", [f"r{j + 1}" for j in range(R.shape[1])], R)
        write_rows(out / f"projection_{k + 1}.csv", [f"c{j + 1}" for j in range(R.shape[1])],
                   model.C[k] @ R)
    coords = [f"z{'_'.join(str(i + 1) for i in ix)}" for ix in np.ndindex(*model.subspace)]
    pred = predict(model, ds.X)
    label = np.argmax(pred, axis=1) if cls else pred
    write_rows(out / "rotated_coordinates.csv", ["sample", "response", "prediction"] + coords,
               [[n + 1, ds.y[n], label[n], *Xrot[n].ravel()] for n in range(N)])

    head_rot = ["sample", "output", "mode"] + [f"r{j + 1}" for j in range(max(model.subspace))]
    head_orig = ["sample", "output", "mode"] + [f"v{i + 1}" for i in range(max(model.input_shape))]
    rows_rot, rows_orig = [], []
    for n in range(N):
        o = int(label[n]) if cls else None
        r = lrc(model, ds.X, n, args.sigma, o, globals_[o], rot)
        for k in range(K):
            pad_r = [""] * (len(head_rot) - 3 - len(r.rotated[k]))
            pad_o = [""] * (len(head_orig) - 3 - len(r.original[k]))
            tag = "" if o is None else o
            rows_rot.append([n + 1, tag, k + 1, *r.rotated[k], *pad_r])
            rows_orig.append([n + 1, tag, k + 1, *r.original[k], *pad_o])
    write_rows(out / "lrc_rotated.csv", head_rot, rows_rot)
    write_rows(out / "lrc_original.csv", head_orig, rows_orig)

    files = ["rotated_coordinates.csv", "lrc_rotated.csv", "lrc_original.csv"]
    files += [f"rotation_{k + 1}.csv" for k in range(K)]
    if int(np.prod(model.subspace)) >= 2:
        flat = Xrot.reshape(N, -1)
        lo, hi = flat[:, :2].min(axis=0), flat[:, :2].max(axis=0)
        pad = 0.05 * np.maximum(hi - lo, 1e-12)
        grid = export_decision_grid(model, (0, 1), list(zip(lo - pad, hi + pad)),
                                    args.resolution, rot, base=flat.mean(axis=0))
        names = [f"p{c}" for c in range(model.n_outputs)] if cls else ["value"]
        write_rows(out / "decision_grid.csv", [coords[0], coords[1]] + names, grid)
        files.append("decision_grid.csv")
    else:
        log.info("one-dimensional subspace: no decision grid")
    write_manifest(out, "interpret",
                   f"model = {args.model}\ndata = {args.data}\nsigma = {args.sigma!r}\n"
                   f"resolution = {args.resolution}\n", outputs=" ".join(files))
    print(f"wrote {', '.join(files)} to {out}")
    return 0


# ---------------------------------------------------------------- parser

def _add_config_flags(p):
    p.add_argument("--config", help="key = value configuration file")
    for name in _PARSE:
        key = _KEY.get(name, name)
        p.add_argument(f"--{key.replace('_', '-')}", dest=f"opt_{name}", metavar="VALUE",
                       help=f"override config key '{key}'")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="trip", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write an artificial dataset")
    g.add_argument("--kind", required=True, choices=["spiral", *D.RANDOM_PRESETS])
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--samples", type=int, default=100, help="samples (random tensors)")
    g.add_argument("--nnz", type=int, default=100, help="non-zeros per sample (random tensors)")
    g.add_argument("--outdir", required=True)
    g.set_defaults(func=cmd_generate)

    for name, func, help_ in (("train", cmd_train, "train one model"),
                              ("cv", cmd_cv, "repeated k-fold cross validation")):
        c = sub.add_parser(name, help=help_)
        _add_config_flags(c)
        c.add_argument("--outdir", required=True)
        c.set_defaults(func=func)

    for name, func, help_ in (("evaluate", cmd_evaluate, "metrics of a model on a dataset"),
                              ("interpret", cmd_interpret, "rotations, LRC and decision grid")):
        c = sub.add_parser(name, help=help_)
        c.add_argument("--model", required=True)
        c.add_argument("--data", required=True)
        c.add_argument("--task", choices=["classification", "regression"])
        c.add_argument("--response", help="response column of a CSV dataset")
        c.add_argument("--outdir", required=True)
        if name == "interpret":
            c.add_argument("--sigma", type=float, default=1.0)
            c.add_argument("--resolution", type=int, default=50)
        c.set_defaults(func=func)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # usage errors count as invalid input
        return 1 if exc.code else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, D.FormatError, ShapeError, ValueError) as exc:
        print(f"trip {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        print(f"trip {args.command}: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
