"""Command-line entry point: ``colnet {train,eval,gradcheck,synth,grid} [options]``.

Settings come from a flat ``key = value`` file (``--config``) with dotted
keys, overridden by ``--key value`` flags of the same names. Exit codes:
0 success, 1 configuration or validation error, 2 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import baselines, model, training
from .checkpoint import load_container
from .errors import ColnetError, ConfigError, DivergenceError
from .relgraph import (
    MULTICLASS, MULTILABEL, RelGraph, generate_synthetic, load_graph, load_splits,
    make_split, save_graph, save_splits, standardize,
)

log = logging.getLogger("colnet")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2

FAMILIES = ("cln", "hwn_norel", "sl_lr")

# key -> default; the default's type is the parse type (None means optional float)
DEFAULTS = {
    "seed": 0,
    "out": "run",
    "family": "cln",
    "data.nodes": "",
    "data.edges": "",
    "data.labels": "",
    "data.splits": "",
    "data.head_kind": MULTICLASS,
    "data.standardize": True,
    "split.train": 0.6,
    "split.valid": 0.2,
    "split.test": 0.2,
    "split.seed": 0,
    "model.column_kind": model.HIGHWAY,
    "model.sharing": model.SHARED,
    "model.share_gates": True,
    "model.depth": 10,
    "model.width": 10,
    "model.pooling": "mean",
    "model.z": None,
    "model.dropout_in": 0.5,
    "model.dropout_out": 0.5,
    "model.dropout_hidden": 0.5,
    "model.gate_bias": -1.0,
    "sl.steps": 3,
    "sl.iterations": 400,
    "sl.lr": 0.05,
    "sl.l2": 1e-4,
    "eval.checkpoint": "",
    "eval.role": "test",
    "synth.n": 2000,
    "synth.r_types": 2,
    "synth.homophily": 0.9,
    "synth.feature_noise": 3.75,
    "synth.classes": 3,
    "synth.feature_dim": 16,
    "synth.degree": 4.0,
    "gradcheck.n": 12,
    "gradcheck.r_types": 2,
    "gradcheck.depth": 4,
    "gradcheck.width": 5,
    "gradcheck.labels": 3,
    "gradcheck.features": 4,
    "gradcheck.epsilon": 1e-5,
    "gradcheck.tolerance": 1e-4,
    "gradcheck.corrupt": "",
    "gradcheck.variants": "all",
}
for _f in fields(training.TrainConfig):
    if _f.name != "seed":
        DEFAULTS[f"train.{_f.name}"] = _f.default

_PATH_KEYS = ("data.nodes", "data.edges", "data.labels", "data.splits", "eval.checkpoint")


def _parse_value(key: str, text: str):
    default = DEFAULTS[key]
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float) or default is None:
            if default is None and text.lower() in ("", "none", "auto"):
                return None
            return float(text)
        if isinstance(default, tuple):
            kind = type(default[0])
            return tuple(kind(t) for t in text.replace(",", " ").split())
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r}") from None
    return text


def read_config_file(path) -> dict:
    """Parse a ``key = value`` file; relative paths resolve against its directory."""
    out = {}
    base = Path(path).parent
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in DEFAULTS:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            out[key] = _parse_value(key, value)
            if key in _PATH_KEYS and out[key] and not os.path.isabs(out[key]):
                out[key] = str(base / out[key])
    return out


def _parse_overrides(tokens: list[str]) -> dict:
    out = {}
    k = 0
    while k < len(tokens):
        tok = tokens[k]
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}")
        key, eq, value = tok[2:].partition("=")
        if not eq:
            if k + 1 >= len(tokens):
                raise ConfigError(f"flag --{key} needs a value")
            value = tokens[k + 1]
            k += 1
        key = key.replace("-", "_") if key.count(".") == 0 else key
        if key not in DEFAULTS:
            raise ConfigError(f"unknown option --{key}")
        out[key] = _parse_value(key, value)
        k += 1
    return out


class RunConfig(dict):
    """Resolved settings; ``explicit`` records keys set by file or flag."""

    def __init__(self, values: dict, explicit: set):
        super().__init__(values)
        self.explicit = explicit

    def section(self, prefix: str) -> dict:
        return {k[len(prefix) + 1:]: v for k, v in self.items() if k.startswith(prefix + ".")}

    def train_config(self) -> training.TrainConfig:
        return training.TrainConfig(**self.section("train"), seed=self["seed"])

    def hyper(self) -> dict:
        h = self.section("model")
        return {k: h[k] for k in ("column_kind", "sharing", "share_gates", "depth", "width",
                                  "pooling", "z", "dropout_in", "dropout_out",
                                  "dropout_hidden", "gate_bias")}

    def sl_config(self) -> baselines.SlConfig:
        return baselines.SlConfig(**self.section("sl"))


def resolve_config(config_path, overrides: dict) -> RunConfig:
    values = dict(DEFAULTS)
    explicit = set()
    if config_path:
        from_file = read_config_file(config_path)
        values.update(from_file)
        explicit |= set(from_file)
    values.update(overrides)
    explicit |= set(overrides)
    cfg = RunConfig(values, explicit)
    if cfg["family"] not in FAMILIES:
        raise ConfigError(f"family must be one of {', '.join(FAMILIES)}")
    if cfg["data.head_kind"] not in (MULTICLASS, MULTILABEL):
        raise ConfigError(f"data.head_kind must be {MULTICLASS} or {MULTILABEL}")
    return cfg


# --- helpers -------------------------------------------------------------------------


def _write_text(path: Path, text: str) -> None:
    tmp = path.with_name(f"{path.name}.tmp{os.getpid()}")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def _load_data(cfg: RunConfig) -> RelGraph:
    for key in ("data.nodes", "data.edges", "data.labels"):
        if not cfg[key]:
            raise ConfigError(f"{key} is required")
        if not os.path.exists(cfg[key]):
            raise ConfigError(f"{key}: no such file {cfg[key]!r}")
    if cfg["data.splits"] and not os.path.exists(cfg["data.splits"]):
        raise ConfigError(f"data.splits: no such file {cfg['data.splits']!r}")
    return load_graph(cfg["data.nodes"], cfg["data.edges"], cfg["data.labels"],
                      cfg["data.head_kind"])


def _split_for(cfg: RunConfig, g: RelGraph):
    if cfg["data.splits"]:
        return load_splits(g, cfg["data.splits"]), {"split": "file"}
    fr = (cfg["split.train"], cfg["split.valid"], cfg["split.test"])
    split = make_split(g, fr, cfg["split.seed"])
    return split, {"split": f"stratified {fr[0]:g}/{fr[1]:g}/{fr[2]:g} seed {cfg['split.seed']}"}


def _role(cfg: RunConfig) -> int:
    from .relgraph import ROLE_CODES
    if cfg["eval.role"] not in ROLE_CODES:
        raise ConfigError(f"eval.role must be train, valid or test, got {cfg['eval.role']!r}")
    return ROLE_CODES[cfg["eval.role"]]


def _write_report(out: Path, report) -> None:
    _write_text(out / "report.txt", report.to_text())
    _write_text(out / "report.json", report.to_json())


def _fit(cfg: RunConfig, g: RelGraph, split, tcfg: training.TrainConfig):
    """Train the configured family; returns (kind, fitted object, probs, log or None)."""
    family = cfg["family"]
    if family == "sl_lr":
        stack = baselines.sl_train(g, split, cfg.sl_config())
        return "sl", stack, baselines.sl_predict(stack, g), None
    if family == "hwn_norel":
        g = g.without_edges()
    params = model.init_for_graph(g, seed=cfg["seed"], **cfg.hyper())
    best, tlog = training.train(g, params, split, tcfg)
    probs, _ = model.forward(g, best, "infer")
    return "cln", best, probs, tlog


def _save_fitted(path: Path, kind: str, fitted, extra: dict) -> None:
    if kind == "sl":
        baselines.save_stack(fitted, path, extra)
    else:
        model.save_params(fitted, path, extra)


# --- commands ------------------------------------------------------------------------


def cmd_train(cfg: RunConfig) -> int:
    out = Path(cfg["out"])
    tcfg = cfg.train_config()
    g = _load_data(cfg)
    split, meta = _split_for(cfg, g)
    stats = None
    if cfg["data.standardize"]:
        g, stats = standardize(g)
    out.mkdir(parents=True, exist_ok=True)
    kind, fitted, probs, tlog = _fit(cfg, g, split, tcfg)
    meta.update({"family": cfg["family"], "seed": cfg["seed"], "role": cfg["eval.role"]})
    if kind == "cln":
        meta.update({"column_kind": fitted.column_kind, "sharing": fitted.sharing,
                     "depth": fitted.depth, "width": fitted.width, "pooling": fitted.pooling,
                     "batch_mode": tcfg.batch_mode, "best_epoch": tlog.best_epoch})
    report = training.evaluate(g, probs, split, _role(cfg), tcfg.threshold, meta)
    extra = {"report_meta": meta, "feature_stats": stats, "family": cfg["family"],
             "threshold": tcfg.threshold}
    _save_fitted(out / "model.npz", kind, fitted, extra)
    save_splits(g, split, out / "splits.tsv")
    if tlog is not None:
        _write_text(out / "trainlog.csv", tlog.to_csv())
    _write_report(out, report)
    sys.stdout.write(report.to_text())
    return EXIT_OK


def cmd_eval(cfg: RunConfig) -> int:
    path = cfg["eval.checkpoint"]
    if not path or not os.path.exists(path):
        raise ConfigError(f"eval.checkpoint: no such file {path!r}")
    kind, meta, _ = load_container(path)
    extra = meta.get("extra", {})
    if kind == "sl":
        fitted = baselines.load_stack(path)
    else:
        expect = cfg["model.column_kind"] if "model.column_kind" in cfg.explicit else None
        fitted = model.load_params(path, expect_column_kind=expect)
    g = _load_data(cfg)
    if extra.get("feature_stats"):
        g, _ = standardize(g, extra["feature_stats"])
    if cfg["data.splits"]:
        split = load_splits(g, cfg["data.splits"])
    else:
        split, _ = _split_for(cfg, g)
    if kind == "sl":
        probs = baselines.sl_predict(fitted, g)
    else:
        if extra.get("family") == "hwn_norel":
            g = g.without_edges()
        fitted.check_graph(g)
        probs, _ = model.forward(g, fitted, "infer")
    report_meta = dict(extra.get("report_meta", {}))
    report_meta["role"] = cfg["eval.role"]
    report = training.evaluate(g, probs, split, _role(cfg), extra.get("threshold", 0.5),
                               report_meta)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    _write_report(out, report)
    sys.stdout.write(report.to_text())
    return EXIT_OK


def _gradcheck_variants(spec: str):
    grid = [(c, s, p, h) for c in (model.FNN, model.HIGHWAY) for s in (model.SHARED, model.PER_LAYER)
            for p in model.POOLINGS for h in (MULTICLASS, MULTILABEL)]
    if spec == "all":
        return grid
    parts = spec.split(",")
    if len(parts) != 4:
        raise ConfigError("gradcheck.variants is 'all' or column,sharing,pooling,head")
    return [tuple(parts)]


def gradcheck_instance(n=12, r_types=2, features=4, labels=3, head_kind=MULTICLASS, seed=0):
    """Small random graph with every role present and a few hidden-label entities."""
    rng = np.random.default_rng(seed)
    edges = [(s, d, r) for r in range(r_types) for d in range(n) for s in range(n)
             if s != d and rng.random() < 0.25]
    X = rng.normal(size=(n, features))
    if head_kind == MULTICLASS:
        Y = np.zeros((n, labels))
        Y[np.arange(n), rng.integers(labels, size=n)] = 1.0
    else:
        Y = (rng.random((n, labels)) < 0.4).astype(float)
    labeled = np.ones(n, dtype=bool)
    labeled[-1] = False
    Y[-1] = 0.0
    g = RelGraph([f"v{k}" for k in range(n)], X, [f"r{r}" for r in range(r_types)],
                 np.array(edges, dtype=np.int64).reshape(-1, 3),
                 [f"l{k}" for k in range(labels)], Y, labeled, head_kind)
    roles = np.array([k % 3 for k in range(n)], dtype=np.int8)
    roles[-1] = -1
    from .relgraph import SplitMask
    return g, SplitMask(roles)


def cmd_gradcheck(cfg: RunConfig) -> int:
    gc = cfg.section("gradcheck")
    lines, ok = [], True
    for column, sharing, pooling, head in _gradcheck_variants(gc["variants"]):
        g, split = gradcheck_instance(gc["n"], gc["r_types"], gc["features"], gc["labels"],
                                      head, cfg["seed"])
        params = model.init_for_graph(g, seed=cfg["seed"], depth=gc["depth"], width=gc["width"],
                                      column_kind=column, sharing=sharing, pooling=pooling,
                                      gate_bias=0.0)
        rep = training.grad_check(g, params, split, gc["epsilon"], gc["tolerance"],
                                  seed=cfg["seed"], corrupt=gc["corrupt"] or None)
        ok &= rep.passed
        tag = f"{column}/{sharing}/{pooling}/{head}"
        status = "ok" if rep.passed else "FAIL " + ",".join(rep.failed)
        lines.append(f"{tag:<36} worst {rep.worst:.3e} {status}")
        for name, err in rep.errors.items():
            note = f" ({rep.skipped[name]} at kinks)" if rep.skipped.get(name) else ""
            lines.append(f"    {name:<12} {err:.3e}{note}")
    lines.append(f"{'PASS' if ok else 'FAIL'} tolerance {gc['tolerance']:g}")
    text = "\n".join(lines) + "\n"
    if "out" in cfg.explicit:
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        _write_text(out / "gradcheck.txt", text)
    sys.stdout.write(text)
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_synth(cfg: RunConfig) -> int:
    s = cfg.section("synth")
    fr = (cfg["split.train"], cfg["split.valid"], cfg["split.test"])
    g, split = generate_synthetic(n=s["n"], r_types=s["r_types"], homophily=s["homophily"],
                                  feature_noise=s["feature_noise"], classes=s["classes"],
                                  seed=cfg["seed"], feature_dim=s["feature_dim"],
                                  degree=s["degree"], fractions=fr)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    save_graph(g, out / "nodes.tsv", out / "edges.tsv", out / "labels.tsv")
    save_splits(g, split, out / "splits.tsv")
    sys.stdout.write(f"wrote {g.N} entities, {len(g.edges)} tuples, {g.R} relations to {out}\n")
    return EXIT_OK


GRID_COLUMNS = ("depth", "width", "optimizer", "n_params", "status", "val_metric",
                "test_micro", "test_macro")


def _cell_dir(out: Path, key) -> Path:
    return out / "cells" / f"d{key[0]}_w{key[1]}_{key[2]}"


def cmd_grid(cfg: RunConfig) -> int:
    if cfg["family"] == "sl_lr":
        raise ConfigError("grid search applies to column networks only")
    out = Path(cfg["out"])
    tcfg = cfg.train_config()
    g = _load_data(cfg)
    split, meta = _split_for(cfg, g)
    stats = None
    if cfg["data.standardize"]:
        g, stats = standardize(g)
    if cfg["family"] == "hwn_norel":
        g = g.without_edges()
    hyper = cfg.hyper()
    done = {}
    for depth in tcfg.grid_depths:
        for width in tcfg.grid_widths:
            for opt in tcfg.grid_optimizers:
                key = (int(depth), int(width), str(opt))
                cell_json = _cell_dir(out, key) / "cell.json"
                if cell_json.exists():
                    done[key] = training.GridCell(**json.loads(cell_json.read_text()))

    def on_cell(cell, res):
        d = _cell_dir(out, (cell.depth, cell.width, cell.optimizer))
        d.mkdir(parents=True, exist_ok=True)
        if res is not None:
            model.save_params(res.params, d / "model.npz",
                              {"feature_stats": stats, "family": cfg["family"],
                               "threshold": tcfg.threshold})
        _write_text(d / "cell.json", json.dumps(cell.__dict__, sort_keys=True) + "\n")

    best, cells, _ = training.grid_search(g, split, hyper, tcfg, on_cell=on_cell, done=done)
    lines = ["\t".join(GRID_COLUMNS + ("best",))]
    for k, c in enumerate(cells):
        row = [str(getattr(c, col)) if not isinstance(getattr(c, col), float)
               else f"{getattr(c, col):.6f}" for col in GRID_COLUMNS]
        lines.append("\t".join(row + ["*" if k == best else ""]))
    out.mkdir(parents=True, exist_ok=True)
    _write_text(out / "grid.tsv", "\n".join(lines) + "\n")
    sys.stdout.write("\n".join(lines) + "\n")
    if best < 0:
        sys.stderr.write("colnet: every grid cell failed\n")
        return EXIT_NUMERIC
    c = cells[best]
    src = _cell_dir(out, (c.depth, c.width, c.optimizer)) / "model.npz"
    _write_bytes_atomic(out / "best.npz", src.read_bytes())
    return EXIT_OK


def _write_bytes_atomic(path: Path, data: bytes) -> None:
    tmp = path.with_name(f"{path.name}.tmp{os.getpid()}")
    tmp.write_bytes(data)
    os.replace(tmp, path)


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "gradcheck": cmd_gradcheck,
            "synth": cmd_synth, "grid": cmd_grid}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="colnet",
        description="Column networks for collective classification.",
        epilog="Any config key can be overridden as --key VALUE, e.g. --model.depth 6.",
    )
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="key = value settings file")
    p.add_argument("--seed", type=int, help="random seed")
    p.add_argument("--out", help="output directory")
    p.add_argument("--checkpoint", help="checkpoint to evaluate (eval)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args, rest = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = _parse_overrides(rest)
        if args.seed is not None:
            overrides["seed"] = args.seed
        if args.out is not None:
            overrides["out"] = args.out
        if args.checkpoint is not None:
            overrides["eval.checkpoint"] = args.checkpoint
        cfg = resolve_config(args.config, overrides)
        return COMMANDS[args.command](cfg)
    except DivergenceError as exc:
        sys.stderr.write(f"colnet: {exc}\n")
        return EXIT_NUMERIC
    except (ColnetError, OSError) as exc:
        sys.stderr.write(f"colnet: {exc}\n")
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
