"""Command-line interface.

    xcae ingest  --data ue.csv
    xcae train   --data ue.csv --seed 7 --labeled 100
    xcae score   --model runs/<id>/model.json --data ue.csv --gamma 1.0
    xcae explain --model ... --data ... --method fastshap_c --train-explainer
    xcae eval    --model ... --data ...
    xcae sweep   --data ue.csv --grid "hidden_layers=1,2,3"
    xcae version

Configuration is an INI file (sections data/train/score/explain/eval/run);
flags and ``--set section.key=value`` override it. Every run writes into
``<out>/<UTC timestamp>-<config hash[:8]>/`` together with the resolved
config and a manifest.

Exit codes: 0 ok, 2 config, 3 data, 4 numerical divergence, 5 incompatible artifacts.
"""
from __future__ import annotations

import argparse
import configparser
import copy
import datetime as _dt
import hashlib
import io
import itertools
import json
import logging
import math
import os
import sys
import time
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__, anomaly, evalx, kernels, pipeline, shapley
from .dataset import DataError, SchemaConfig, infer_schema, load_csv
from .fastshapc import (ExplainerModel, ExplainerTrainConfig, IncompatibleArtifactError,
                        diagnostics, model_hash, train_explainer)
from .numerics import SeededRng, ShapeError, derive_seed
from .sscae import DivergenceError, SSCaeModel, TrainConfig

log = logging.getLogger("xcae")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGENCE, EXIT_INCOMPATIBLE = 0, 2, 3, 4, 5


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "data": {"path": "", "schema": "", "labeled": "all", "transductive": True},
    "train": {"lambda_c": 1e-4, "lam": 1.0, "lr": 1e-3, "batch_size": 64, "steps": 10000,
              "hidden_layers": 2, "width": 64, "latent": 16, "log_interval": 100},
    "score": {"gamma": 0.5, "threshold_policy": "quantile", "q": 0.95, "tau": math.inf},
    "explain": {"method": "fastshap_c", "target": "score", "n_explain": 256, "mc_m": 2000,
                "kernel_samples": 512, "baseline_mode": "mean", "K": 32,
                "explainer_lr": 1e-3, "explainer_steps": 50000, "explainer_batch": 1,
                "explainer_optimizer": "sgd", "normalize": True, "eval_n": 256},
    "eval": {"methods": "fastshap_c,fastshap,kernel", "n_explain": 500, "kappa_step": 10,
             "eps": 0.05, "n_perturb": 16, "n_sensitivity": 100},
    "run": {"seed": 0, "out": "runs", "backend": ""},
}
SWEEPABLE = {"train." + k for k in DEFAULTS["train"]} | {
    "score.gamma", "score.q", "data.labeled", "run.seed"}
METHODS = ("exact", "montecarlo", "kernel", "fastshap_c", "fastshap")


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

def _coerce(section: str, key: str, raw):
    default = DEFAULTS[section][key]
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise ConfigError(f"{section}.{key}: cannot parse {raw!r} as {type(default).__name__}") from None
    if key == "labeled" and text != "all":
        try:
            return int(text)
        except ValueError:
            raise ConfigError(f"data.labeled must be an integer or 'all', got {raw!r}") from None
    return text


def load_config(path: Optional[str]) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if not path:
        return cfg
    parser = configparser.ConfigParser()
    parser.optionxform = str  # keys are case-sensitive (explain.K)
    try:
        if not parser.read(path):
            raise ConfigError(f"cannot read config file {path}")
    except configparser.Error as e:
        raise ConfigError(f"config file {path}: {e}") from None
    errors = []
    for sec in parser.sections():
        if sec not in cfg:
            errors.append(f"unknown config section [{sec}]")
            continue
        for key, raw in parser[sec].items():
            if key not in cfg[sec]:
                errors.append(f"unknown config key {sec}.{key}")
                continue
            try:
                cfg[sec][key] = _coerce(sec, key, raw)
            except ConfigError as e:
                errors.append(str(e))
    if errors:
        raise ConfigError("; ".join(errors))
    return cfg


def apply_override(cfg: dict, dotted: str, raw) -> None:
    if "." not in dotted:
        raise ConfigError(f"override {dotted!r} must look like section.key")
    sec, key = dotted.split(".", 1)
    if sec not in cfg or key not in cfg[sec]:
        raise ConfigError(f"unknown config key {dotted}")
    cfg[sec][key] = _coerce(sec, key, raw)


def train_config(cfg: dict) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(lambda_c=t["lambda_c"], lam=t["lam"], lr=t["lr"], batch_size=t["batch_size"],
                       steps=t["steps"], seed=cfg["run"]["seed"], hidden_layers=t["hidden_layers"],
                       width=t["width"], latent=t["latent"], log_interval=t["log_interval"])


def score_config(cfg: dict) -> anomaly.ScoreConfig:
    s = cfg["score"]
    return anomaly.ScoreConfig(s["gamma"], s["tau"], s["threshold_policy"], s["q"])


def explainer_config(cfg: dict, distribution: str = "shapley-kernel") -> ExplainerTrainConfig:
    e = cfg["explain"]
    return ExplainerTrainConfig(lr=e["explainer_lr"], steps=e["explainer_steps"],
                                subset_distribution=distribution,
                                seed=derive_seed(cfg["run"]["seed"], f"explainer-{distribution}"),
                                eval_n=e["eval_n"], normalize=e["normalize"],
                                batch_size=e["explainer_batch"], optimizer=e["explainer_optimizer"])


def validate_config(cfg: dict) -> list[str]:
    """Every invariant violation, not just the first."""
    errs = list(train_config(cfg).validate())
    s = cfg["score"]
    try:
        anomaly.ScoreConfig(s["gamma"], s["tau"], s["threshold_policy"], s["q"])
    except ValueError as e:
        errs.append(str(e))
    if s["threshold_policy"] == "fixed" and not math.isfinite(s["tau"]):
        errs.append("score.tau must be finite when threshold_policy is fixed")
    errs.extend(explainer_config(cfg).validate())
    e = cfg["explain"]
    if e["method"] not in METHODS:
        errs.append(f"explain.method must be one of {METHODS}")
    if e["target"] not in anomaly.TARGETS:
        errs.append(f"explain.target must be one of {anomaly.TARGETS}")
    if e["baseline_mode"] not in ("mean", "background"):
        errs.append("explain.baseline_mode must be 'mean' or 'background'")
    for key in ("n_explain", "mc_m", "K"):
        if e[key] < 1:
            errs.append(f"explain.{key} must be >= 1")
    if e["kernel_samples"] < 4:
        errs.append("explain.kernel_samples must be >= 4")
    v = cfg["eval"]
    bad = [m for m in _methods(v["methods"]) if m not in METHODS]
    if bad:
        errs.append(f"eval.methods has unknown method(s): {', '.join(bad)}")
    if v["n_explain"] < 1:
        errs.append("eval.n_explain must be >= 1")
    if not (1 <= v["kappa_step"] <= 100) or 100 % v["kappa_step"]:
        errs.append("eval.kappa_step must divide 100")
    if v["eps"] <= 0:
        errs.append("eval.eps must be > 0")
    if v["n_perturb"] < 1 or v["n_sensitivity"] < 0:
        errs.append("eval.n_perturb must be >= 1 and eval.n_sensitivity >= 0")
    lab = cfg["data"]["labeled"]
    if lab != "all" and (not isinstance(lab, int) or lab < 0):
        errs.append("data.labeled must be a non-negative integer or 'all'")
    if cfg["run"]["backend"] and cfg["run"]["backend"] not in kernels.BACKENDS:
        errs.append(f"run.backend {cfg['run']['backend']!r} is not available "
                    f"(have: {', '.join(kernels.BACKENDS)})")
    return errs


def _methods(text: str) -> list[str]:
    return [m.strip() for m in str(text).split(",") if m.strip()]


def config_to_ini(cfg: dict) -> str:
    parser = configparser.ConfigParser()
    parser.optionxform = str  # keys are case-sensitive (explain.K)
    for sec, vals in cfg.items():
        parser[sec] = {k: ("" if v is None else str(v)) for k, v in vals.items()}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def config_hash(command: str, cfg: dict) -> str:
    eff = copy.deepcopy(cfg)
    eff["run"].pop("out", None)
    doc = json.dumps({"command": command, "config": eff}, sort_keys=True, default=str)
    return hashlib.sha256(doc.encode()).hexdigest()


# ---------------------------------------------------------------------------
# Run directory and manifest
# ---------------------------------------------------------------------------

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Run:
    def __init__(self, command: str, cfg: dict):
        self.command = command
        self.cfg = cfg
        self.hash = config_hash(command, cfg)
        stamp = _dt.datetime.now(_dt.timezone.utc).strftime("%Y%m%dT%H%M%S")
        base = Path(cfg["run"]["out"])
        name = f"{stamp}-{self.hash[:8]}"
        path = base / name
        k = 1
        while path.exists():
            path = base / f"{name}-{k}"
            k += 1
        path.mkdir(parents=True)
        self.dir = path
        self.timings: dict = {}
        self.inputs: dict = {}
        self.artifacts: dict = {}
        self.extra: dict = {}
        (path / "config.ini").write_text(config_to_ini(cfg))
        self.artifacts["config"] = "config.ini"

    def stage(self, name: str):
        run = self

        class _Timer:
            def __enter__(self):
                self.t0 = time.monotonic()

            def __exit__(self, *exc):
                run.timings[name] = round(time.monotonic() - self.t0, 6)
                return False

        return _Timer()

    def path(self, name: str) -> Path:
        self.artifacts[Path(name).stem] = name
        return self.dir / name

    def add_input(self, path) -> None:
        if path:
            self.inputs[str(path)] = sha256_file(path)

    def finish(self) -> Path:
        arts = {k: {"path": v, "sha256": sha256_file(self.dir / v)}
                for k, v in sorted(self.artifacts.items()) if (self.dir / v).is_file()}
        manifest = {
            "tool_version": __version__,
            "kernel_backend": _backend(self.cfg),
            "command": self.command,
            "config_hash": self.hash,
            "inputs": self.inputs,
            "timings_s": self.timings,
            "artifacts": arts,
            **self.extra,
        }
        tmp = self.dir / "manifest.json.tmp"
        tmp.write_text(json.dumps(manifest, indent=1, sort_keys=True, default=str) + "\n")
        os.replace(tmp, self.dir / "manifest.json")
        return self.dir


def _backend(cfg: dict) -> str:
    return cfg["run"]["backend"] or kernels.BACKEND


# ---------------------------------------------------------------------------
# Shared steps
# ---------------------------------------------------------------------------

def _data_path(cfg: dict) -> Path:
    p = cfg["data"]["path"] or os.environ.get("XCAE_UE_CSV", "")
    if not p:
        raise ConfigError("no dataset given (use --data, data.path or XCAE_UE_CSV)")
    path = Path(p)
    if not path.is_file():
        raise DataError(f"dataset not found: {path}")
    return path


def _schema(cfg: dict, path: Path) -> SchemaConfig:
    if cfg["data"]["schema"]:
        return SchemaConfig.from_file(cfg["data"]["schema"])
    return infer_schema(path)


def _load_table(cfg: dict, run: Optional[Run] = None):
    path = _data_path(cfg)
    schema = _schema(cfg, path)
    table = load_csv(path, schema)
    if schema.label is None:
        raise DataError(f"{path}: no label column found (set data.schema)")
    if run is not None:
        run.add_input(path)
        if cfg["data"]["schema"]:
            run.add_input(cfg["data"]["schema"])
    return path, schema, table


def _splits(cfg: dict, table, model: Optional[SSCaeModel] = None) -> pipeline.Splits:
    seed, labeled, trans = cfg["run"]["seed"], cfg["data"]["labeled"], cfg["data"]["transductive"]
    if model is not None:
        d = model.meta.get("data", {})
        seed = d.get("split_seed", seed)
        labeled = d.get("labeled", labeled)
        trans = d.get("transductive", trans)
        names = model.meta.get("feature_names")
        if names is not None and list(names) != list(table.feature_names):
            missing = [n for n in names if n not in table.feature_names]
            extra = [n for n in table.feature_names if n not in names]
            raise IncompatibleArtifactError(
                f"dataset features differ from the model's (missing: {missing or 'none'}; "
                f"unexpected: {extra or 'none'}; order must match)")
        if model.input_dim != len(table.feature_names):
            raise IncompatibleArtifactError(
                f"model expects {model.input_dim} features, dataset has {len(table.feature_names)}")
    return pipeline.make_splits(table, seed, labeled, trans)


def _load_model(path) -> SSCaeModel:
    p = Path(path)
    if not p.is_file():
        raise DataError(f"model file not found: {p}")
    try:
        return SSCaeModel.load(p)
    except (ValueError, KeyError) as e:
        raise IncompatibleArtifactError(f"{p}: {e}") from None


def _explained_ref(model_path, cfg: dict) -> dict:
    return {"model_sha256": sha256_file(model_path), "target": cfg["explain"]["target"],
            "gamma": cfg["score"]["gamma"]}


def _value_config(cfg: dict, splits: pipeline.Splits) -> shapley.ValueFunctionConfig:
    e = cfg["explain"]
    if e["baseline_mode"] == "background":
        X_bg = splits.train_X
        return shapley.ValueFunctionConfig("background", baseline=splits.baseline, background=X_bg,
                                           K=e["K"], seed=derive_seed(cfg["run"]["seed"], "background"))
    return shapley.ValueFunctionConfig.mean(splits.baseline)


def _pick_rows(n_avail: int, n: int, seed: int, name: str) -> np.ndarray:
    if n >= n_avail:
        return np.arange(n_avail)
    return np.sort(SeededRng(derive_seed(seed, name)).choice_without_replacement(n_avail, n))


def _explain_with(method: str, cfg: dict, model_fn, X: np.ndarray, vf, splits, explainers: dict,
                  backend) -> tuple[np.ndarray, dict]:
    """Attributions (n, d) for ``method`` plus extra info; trains explainers on demand."""
    e = cfg["explain"]
    seed = cfg["run"]["seed"]
    info: dict = {}
    if method in ("fastshap_c", "fastshap"):
        ex = explainers.get(method)
        if ex is None:
            dist = "shapley-kernel" if method == "fastshap_c" else "uniform-nonempty"
            t0 = time.monotonic()
            ex, diag, _ = train_explainer(model_fn, splits.train_X, explainer_config(cfg, dist),
                                          vf, X_eval=pipeline.labeled_view(splits.val)[0],
                                          backend=backend)
            info["train_s"] = time.monotonic() - t0
            info["diagnostics"] = diag.to_dict()
            explainers[method] = ex
        t0 = time.monotonic()
        phis = ex.phi_batch(X)
        info["explain_s"] = time.monotonic() - t0
        return phis, info
    t0 = time.monotonic()
    attrs = shapley.explain_rows(method, model_fn, X, vf, seed=derive_seed(seed, f"explain-{method}"),
                                 M=e["mc_m"], n_samples=e["kernel_samples"])
    info["explain_s"] = time.monotonic() - t0
    info["ridge_damped"] = int(sum(bool(a.meta.get("ridge_damped")) for a in attrs))
    return np.stack([a.phi for a in attrs]), info


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_ingest(cfg: dict, args) -> int:
    run = Run("ingest", cfg)
    with run.stage("ingest"):
        path, schema, table = _load_table(cfg, run)
        y = table.labels()
        splits = pipeline.make_splits(table, cfg["run"]["seed"], cfg["data"]["labeled"],
                                      cfg["data"]["transductive"])
    known = y[~np.isnan(y)]
    summary = {"rows": len(table), "features": table.feature_names,
               "n_features": len(table.feature_names), "label": schema.label,
               "context": schema.context, "labeled_rows": int(known.size),
               "anomaly_prevalence": float(known.mean()) if known.size else None,
               **splits.counts()}
    (run.path("data_summary.json")).write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    splits.train.normalizer.save(run.path("normalizer.json"))
    split_col = np.empty(len(table), dtype=object)
    split_col[splits.train_rows], split_col[splits.val_rows], split_col[splits.test_rows] = \
        "train", "val", "test"
    from .dataset import Dataset
    full = Dataset(splits.train.normalizer.transform(table.matrix()), y,
                   np.flatnonzero(~np.isnan(y)), np.flatnonzero(np.isnan(y)),
                   table.feature_names, splits.train.normalizer)
    full.save_snapshot(run.path("normalized.csv"), list(split_col))
    run.extra["counts"] = summary
    print(json.dumps({k: summary[k] for k in ("rows", "n_features", "anomaly_prevalence")}))
    print(run.finish())
    return EXIT_OK


def _train_model(cfg: dict, run: Run):
    path, schema, table = _load_table(cfg, run)
    with run.stage("split"):
        splits = _splits(cfg, table)
    tcfg = train_config(cfg)
    with run.stage("train"):
        model, hist = _do_train(splits, tcfg, cfg)
    model.meta["data"] = {"sha256": run.inputs[str(path)], "split_seed": cfg["run"]["seed"],
                          "labeled": cfg["data"]["labeled"], "transductive": cfg["data"]["transductive"],
                          **splits.counts()}
    model.meta["kernel_backend"] = _backend(cfg)
    return table, splits, model, hist


def _do_train(splits, tcfg, cfg):
    from .sscae import train
    return train(splits.train, tcfg, validation=splits.val, backend=cfg["run"]["backend"] or None)


def _write_history(path, hist) -> None:
    evalx.write_metrics_csv(path, hist.log_rows)


def cmd_train(cfg: dict, args) -> int:
    run = Run("train", cfg)
    table, splits, model, hist = _train_model(cfg, run)
    model.save(run.path("model.json"))
    _write_history(run.path("history.csv"), hist)
    run.extra["counts"] = splits.counts()
    run.extra["mode"] = model.meta["mode"]
    print(run.finish())
    return EXIT_OK


def _split_view(splits: pipeline.Splits, which: str):
    if which == "test":
        ds = splits.test
    elif which == "val":
        ds = splits.val
    elif which == "train":
        ds = splits.train.subset(np.arange(len(splits.train_rows)))
    elif which == "all":
        return None
    else:
        raise ConfigError(f"unknown split {which!r}")
    return ds


def cmd_score(cfg: dict, args) -> int:
    run = Run("score", cfg)
    model = _load_model(args.model)
    run.add_input(args.model)
    path, schema, table = _load_table(cfg, run)
    splits = _splits(cfg, table, model)
    scfg = score_config(cfg)
    with run.stage("calibrate"):
        scfg = anomaly.resolve_config(model, scfg, splits.val)
    with run.stage("score"):
        ds = _split_view(splits, args.split)
        if ds is None:
            X = model_normalized(model, table)
            y, ids = table.labels(), np.arange(len(table))
        else:
            X, y, ids = ds.X, ds.y, ds.row_ids
        scores = anomaly.score_batch(model, X, scfg)
    anomaly.write_score_csv(run.path("scores.csv"), scores, ids, list(y))
    run.extra["threshold"] = {"gamma": scfg.gamma, "tau": scfg.tau, "policy": scfg.threshold_policy,
                              "q": scfg.q}
    run.extra["rows"] = int(len(scores))
    print(run.finish())
    return EXIT_OK


def model_normalized(model: SSCaeModel, table) -> np.ndarray:
    from .dataset import Normalizer
    norm = model.meta.get("normalizer")
    if norm is None:
        return table.matrix()
    return Normalizer.from_dict(norm).transform(table.matrix())


def _load_explainer(path, cfg, model_fn, model_path) -> ExplainerModel:
    p = Path(path)
    if not p.is_file():
        raise DataError(f"explainer file not found: {p}")
    return ExplainerModel.load(p, model_fn, expected_ref=_explained_ref(model_path, cfg))


def cmd_explain(cfg: dict, args) -> int:
    e = cfg["explain"]
    method = e["method"]
    model = _load_model(args.model)
    if method == "exact" and model.input_dim > shapley.MAX_EXACT_D:
        raise ConfigError(f"exact Shapley needs d <= {shapley.MAX_EXACT_D}; this model has d={model.input_dim}")
    if method in ("fastshap_c", "fastshap") and not (args.train_explainer or args.explainer):
        raise ConfigError(f"method {method} needs --explainer PATH or --train-explainer")
    run = Run("explain", cfg)
    run.add_input(args.model)
    path, schema, table = _load_table(cfg, run)
    splits = _splits(cfg, table, model)
    model_fn = anomaly.model_function(model, e["target"], cfg["score"]["gamma"])
    vf = _value_config(cfg, splits)
    ds = _split_view(splits, args.split) or splits.test
    rows = _pick_rows(len(ds), e["n_explain"], cfg["run"]["seed"], "explain-rows")
    X = ds.X[rows]
    explainers: dict = {}
    if args.explainer:
        explainers[method] = _load_explainer(args.explainer, cfg, model_fn, args.model)
        run.add_input(args.explainer)
    with run.stage(f"explain_{method}"):
        phis, info = _explain_with(method, cfg, model_fn, X, vf, splits, explainers,
                                   cfg["run"]["backend"] or None)
    attrs = [shapley.Attribution(p, method) for p in phis]
    shapley.write_attribution_csv(run.path("attributions.csv"), attrs, table.feature_names,
                                  ds.row_ids[rows])
    shapley.write_attribution_json(run.path("attributions.json"), attrs, table.feature_names)
    diag_doc = {"method": method, "n_samples": int(len(X)),
                "per_sample_s": info["explain_s"] / max(1, len(X))}
    if method in explainers:
        ex = explainers[method]
        ex.explained_ref = _explained_ref(args.model, cfg)
        if args.train_explainer:
            ex.save(run.path("explainer.json"))
        rng = SeededRng(derive_seed(cfg["run"]["seed"], "explain-diagnostics"))
        diag = diagnostics(ex, X, vf, rng, ex.meta.get("subset_distribution", "shapley-kernel"))
        diag_doc.update(diag.to_dict())
        if "diagnostics" in info:
            diag_doc["training_holdout"] = info["diagnostics"]
        run.timings["explainer_train"] = round(info.get("train_s", 0.0), 6)
    else:
        f = np.asarray(model_fn(X), dtype=np.float64)
        v0 = shapley.value_function(model_fn, X[0], shapley.CoalitionMask.empty(X.shape[1]), vf)
        gap = (f - v0) - phis.sum(axis=1)
        diag_doc.update({"cs": float(np.mean(np.abs(gap))), "em": float(np.mean(gap * gap))})
        if "ridge_damped" in info:
            diag_doc["ridge_damped"] = info["ridge_damped"]
    evalx.write_json(run.path("diagnostics.json"), diag_doc)
    run.extra["per_sample_s"] = {method: diag_doc["per_sample_s"]}
    print(run.finish())
    return EXIT_OK


def _evaluate(cfg: dict, run: Run, model: SSCaeModel, model_path, table, splits,
              explainer_paths: dict) -> dict:
    scfg = score_config(cfg)
    with run.stage("calibrate"):
        scfg = anomaly.resolve_config(model, scfg, splits.val)
    Xv, yv = pipeline.labeled_view(splits.val)
    Xt, yt = pipeline.labeled_view(splits.test)
    if len(yt) == 0:
        raise DataError("test split has no labeled rows")
    with run.stage("classify"):
        st = anomaly.score_batch(model, Xt, scfg)
        sv = anomaly.score_batch(model, Xv, scfg)
        rep_t = evalx.classify_metrics(st.score, yt, scfg.tau)
        rep_v = evalx.classify_metrics(sv.score, yv, scfg.tau)
        head_t = evalx.classify_metrics(model.predict_proba(Xt), yt, 0.5)
    rows = [{"split": "test", "decision": "score", **rep_t.to_dict()},
            {"split": "val", "decision": "score", **rep_v.to_dict()},
            {"split": "test", "decision": "head", **head_t.to_dict()}]
    evalx.write_metrics_csv(run.path("classification.csv"), rows)

    v = cfg["eval"]
    e = cfg["explain"]
    methods = _methods(v["methods"])
    seed = cfg["run"]["seed"]
    pick = _pick_rows(len(Xt), v["n_explain"], seed, "eval-rows")
    X, y = Xt[pick], yt[pick]
    model_fn = anomaly.model_function(model, e["target"], scfg.gamma)
    prob_fn = model.predict_proba
    tau = scfg.tau

    def decide(Z):
        return anomaly.score_batch(model, Z, scfg).is_anomaly

    vf = _value_config(cfg, splits)
    explainers: dict = {}
    for m, p in explainer_paths.items():
        explainers[m] = _load_explainer(p, cfg, model_fn, model_path)
        run.add_input(p)
    grid = list(range(0, 101, v["kappa_step"]))
    phis_by, curves, timing, diags = {}, [], {}, {}
    for m in methods:
        with run.stage(f"explain_{m}"):
            phis, info = _explain_with(m, cfg, model_fn, X, vf, splits, explainers,
                                       cfg["run"]["backend"] or None)
        phis_by[m] = phis
        timing[m] = info["explain_s"] / len(X)
        if m in explainers:
            ex = explainers[m]
            ex.explained_ref = _explained_ref(model_path, cfg)
            ex.save(run.path(f"explainer_{m}.json"))
            d = diagnostics(ex, X, vf, SeededRng(derive_seed(seed, f"eval-diag-{m}")),
                            ex.meta.get("subset_distribution", "shapley-kernel"))
            diags[m] = d.to_dict()
        with run.stage(f"curves_{m}"):
            curves.append(evalx.curve_report(m, decide, phis, X, y, splits.baseline, grid, prob_fn))
        attrs = [shapley.Attribution(p, m) for p in phis]
        shapley.write_attribution_csv(run.path(f"attributions_{m}.csv"), attrs, table.feature_names,
                                      splits.test.row_ids[np.flatnonzero(~np.isnan(splits.test.y))][pick])
    evalx.write_curves_csv(run.path("curves.csv"), curves)
    agreement = evalx.agreement_matrix(phis_by)

    sens = {}
    n_s = min(v["n_sensitivity"], len(X))
    for m in methods:
        if m not in explainers:
            continue
        ex = explainers[m]
        rng = SeededRng(derive_seed(seed, f"sensitivity-{m}"))
        vals = [evalx.sensitivity(ex.phi_batch, X[i], v["eps"], v["n_perturb"], rng.spawn(str(i)))
                for i in range(n_s)]
        sens[m] = {"mean": float(np.mean(vals)) if vals else None,
                   "max": float(np.max(vals)) if vals else None, "n": n_s}
    lo_rows = [{"feature": name, "log_odds": evalx.log_odds(prob_fn, X, j, splits.baseline)}
               for j, name in enumerate(table.feature_names)]
    evalx.write_metrics_csv(run.path("log_odds.csv"), lo_rows)

    metrics = {
        "threshold": {"gamma": scfg.gamma, "tau": tau, "policy": scfg.threshold_policy, "q": scfg.q},
        "test": rep_t.to_dict(), "val": rep_v.to_dict(), "test_head": head_t.to_dict(),
        "curves": {c.method: c.to_dict() for c in curves},
        "top1_agreement": agreement,
        "sensitivity": sens,
        "explainer_diagnostics": diags,
        "n_explained": int(len(X)),
    }
    evalx.write_json(run.path("metrics.json"), metrics)
    run.extra["per_sample_s"] = timing
    return metrics


def cmd_eval(cfg: dict, args) -> int:
    model = _load_model(args.model)
    if "exact" in _methods(cfg["eval"]["methods"]) and model.input_dim > shapley.MAX_EXACT_D:
        raise ConfigError(f"exact Shapley needs d <= {shapley.MAX_EXACT_D}; this model has d={model.input_dim}")
    run = Run("eval", cfg)
    run.add_input(args.model)
    path, schema, table = _load_table(cfg, run)
    splits = _splits(cfg, table, model)
    paths = {}
    for spec in args.explainer or []:
        if "=" not in spec:
            raise ConfigError(f"--explainer for eval takes METHOD=PATH, got {spec!r}")
        m, p = spec.split("=", 1)
        paths[m.strip()] = p.strip()
    metrics = _evaluate(cfg, run, model, args.model, table, splits, paths)
    t = metrics["test"]
    print(json.dumps({"uar": t["uar"], "acc": t["acc"], "f1": t["f1"], "auc": t["auc"]}))
    print(run.finish())
    return EXIT_OK


def parse_grid(text: str) -> list[tuple[str, list]]:
    grid = []
    for part in [p for p in text.replace("\n", ";").split(";") if p.strip()]:
        if "=" not in part:
            raise ConfigError(f"grid entry {part!r} must look like name=v1,v2")
        name, values = part.split("=", 1)
        name = name.strip()
        if "." not in name:
            for sec in ("train", "score", "data", "run"):
                if name in DEFAULTS[sec]:
                    name = f"{sec}.{name}"
                    break
        if name not in SWEEPABLE:
            raise ConfigError(f"unknown or non-sweepable grid parameter {part.split('=')[0].strip()!r}")
        vals = [v.strip() for v in values.split(",") if v.strip()]
        if not vals:
            raise ConfigError(f"grid parameter {name} has no values")
        grid.append((name, vals))
    if not grid:
        raise ConfigError("empty grid")
    return grid


def cmd_sweep(cfg: dict, args) -> int:
    grid = parse_grid(args.grid)
    combos = list(itertools.product(*[vals for _, vals in grid]))
    configs = []
    errors = []
    for combo in combos:
        c = copy.deepcopy(cfg)
        for (name, _), val in zip(grid, combo):
            apply_override(c, name, val)
        errs = validate_config(c)
        if errs:
            errors.append(f"{dict(zip([g[0] for g in grid], combo))}: {'; '.join(errs)}")
        configs.append(c)
    if errors:
        raise ConfigError(" | ".join(errors))
    run = Run("sweep", cfg)
    path, schema, table = _load_table(cfg, run)
    rows = []
    for k, (combo, c) in enumerate(zip(combos, configs)):
        splits = _splits(c, table)
        with run.stage(f"combo_{k}"):
            res = pipeline.train_and_evaluate(splits, train_config(c), score_config(c),
                                              backend=c["run"]["backend"] or None)
        row = {name: val for (name, _), val in zip(grid, combo)}
        row.update({f"test_{k2}": v2 for k2, v2 in res.test_report.to_dict().items()})
        row["val_uar"] = res.val_report.uar
        row["tau"] = res.score_cfg.tau
        rows.append(row)
    best = int(np.argmax([r["val_uar"] for r in rows]))
    for i, r in enumerate(rows):
        r["best"] = int(i == best)
    evalx.write_metrics_csv(run.path("sweep.csv"), rows)
    run.extra["grid"] = {name: vals for name, vals in grid}
    print(json.dumps({"combinations": len(rows), "best": rows[best]}, default=str))
    print(run.finish())
    return EXIT_OK


def cmd_version(cfg: dict, args) -> int:
    print(f"xcae {__version__} (kernels: {kernels.BACKEND}; available: {', '.join(kernels.BACKENDS)})")
    return EXIT_OK


def cmd_synth(cfg: dict, args) -> int:
    from . import synthetic
    out = synthetic.write_csv(args.output, args.rows, args.anomaly_rate, cfg["run"]["seed"])
    print(out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

FLAG_MAP = {
    "data": "data.path", "schema": "data.schema", "labeled": "data.labeled",
    "seed": "run.seed", "out": "run.out", "backend": "run.backend",
    "lambda_c": "train.lambda_c", "lam": "train.lam", "lr": "train.lr",
    "batch_size": "train.batch_size", "steps": "train.steps", "hidden_layers": "train.hidden_layers",
    "width": "train.width", "latent": "train.latent",
    "gamma": "score.gamma", "tau": "score.tau", "q": "score.q",
    "method": "explain.method", "target": "explain.target", "n_explain": "explain.n_explain",
    "explainer_steps": "explain.explainer_steps", "explainer_lr": "explain.explainer_lr",
    "kernel_samples": "explain.kernel_samples", "mc_m": "explain.mc_m",
    "baseline_mode": "explain.baseline_mode",
    "methods": "eval.methods", "eval_n_explain": "eval.n_explain",
}


class _Parser(argparse.ArgumentParser):
    """Usage errors become ConfigError so they share the one-line error format."""

    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="xcae", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True):
        sp.add_argument("--config", help="INI config file")
        sp.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
        sp.add_argument("--seed", type=str)
        sp.add_argument("--out", help="parent directory for run directories")
        sp.add_argument("--backend", help="kernel backend (python or cython)")
        if data:
            sp.add_argument("--data", help="dataset CSV")
            sp.add_argument("--schema", help="schema INI ([schema] label/context/features)")
            sp.add_argument("--labeled", help="number of visible labels or 'all'")
            tr = sp.add_mutually_exclusive_group()
            tr.add_argument("--transductive", dest="transductive", action="store_true", default=None)
            tr.add_argument("--no-transductive", dest="transductive", action="store_false")

    def train_flags(sp):
        sp.add_argument("--lambda-c", dest="lambda_c")
        sp.add_argument("--lambda", dest="lam")
        sp.add_argument("--lr")
        sp.add_argument("--batch-size", dest="batch_size")
        sp.add_argument("--steps")
        sp.add_argument("--hidden-layers", dest="hidden_layers")
        sp.add_argument("--width")
        sp.add_argument("--latent")

    def score_flags(sp):
        sp.add_argument("--gamma")
        sp.add_argument("--tau", help="fixed threshold (switches policy to fixed)")
        sp.add_argument("--q", help="quantile for validation calibration")

    def explain_flags(sp):
        sp.add_argument("--target", help="explained scalar: score or proba")
        sp.add_argument("--explainer-steps", dest="explainer_steps")
        sp.add_argument("--explainer-lr", dest="explainer_lr")
        sp.add_argument("--kernel-samples", dest="kernel_samples")
        sp.add_argument("--mc-m", dest="mc_m")
        sp.add_argument("--baseline-mode", dest="baseline_mode")

    sp = sub.add_parser("ingest", help="validate a CSV and write the normalized snapshot")
    common(sp)
    sp.set_defaults(func=cmd_ingest)

    sp = sub.add_parser("train", help="train the semi-supervised contractive autoencoder")
    common(sp)
    train_flags(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("score", help="anomaly scores for one split")
    common(sp)
    score_flags(sp)
    sp.add_argument("--model", required=True)
    sp.add_argument("--split", default="test", choices=("test", "val", "train", "all"))
    sp.set_defaults(func=cmd_score)

    sp = sub.add_parser("explain", help="Shapley attributions")
    common(sp)
    score_flags(sp)
    explain_flags(sp)
    sp.add_argument("--model", required=True)
    sp.add_argument("--method", choices=METHODS)
    sp.add_argument("--n-explain", dest="n_explain")
    sp.add_argument("--split", default="test", choices=("test", "val", "train"))
    sp.add_argument("--explainer", help="trained explainer JSON")
    sp.add_argument("--train-explainer", action="store_true")
    sp.set_defaults(func=cmd_explain)

    sp = sub.add_parser("eval", help="classification metrics, curves, agreement, sensitivity")
    common(sp)
    score_flags(sp)
    explain_flags(sp)
    sp.add_argument("--model", required=True)
    sp.add_argument("--methods", help="comma-separated attribution methods")
    sp.add_argument("--n-explain", dest="eval_n_explain")
    sp.add_argument("--explainer", action="append", metavar="METHOD=PATH")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("sweep", help="grid search over training/scoring parameters")
    common(sp)
    train_flags(sp)
    score_flags(sp)
    sp.add_argument("--grid", required=True, help='e.g. "hidden_layers=1,2,3;gamma=0,0.5,1"')
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("version", help="print version and kernel backend")
    sp.set_defaults(func=cmd_version)

    sp = sub.add_parser("synth", help="write a synthetic UE KPI table for offline testing")
    sp.add_argument("--seed", type=str)
    sp.add_argument("--rows", type=int, default=10_000)
    sp.add_argument("--anomaly-rate", dest="anomaly_rate", type=float, default=0.25)
    sp.add_argument("-o", "--output", required=True)
    sp.set_defaults(func=cmd_synth)
    return p


def resolve(args) -> dict:
    cfg = load_config(getattr(args, "config", None))
    errors = []
    for key, dotted in FLAG_MAP.items():
        val = getattr(args, key, None)
        if val is None:
            continue
        try:
            apply_override(cfg, dotted, val)
        except ConfigError as e:
            errors.append(str(e))
    if getattr(args, "transductive", None) is not None:
        cfg["data"]["transductive"] = args.transductive
    if getattr(args, "tau", None) is not None:
        cfg["score"]["threshold_policy"] = "fixed"
    for item in getattr(args, "set", []) or []:
        if "=" not in item:
            errors.append(f"--set {item!r} must look like section.key=value")
            continue
        k, v = item.split("=", 1)
        try:
            apply_override(cfg, k.strip(), v)
        except ConfigError as e:
            errors.append(str(e))
    if errors:
        raise ConfigError("; ".join(errors))
    errs = validate_config(cfg)
    if errs:
        raise ConfigError("; ".join(errs))
    return cfg


def _fail(code: int, kind: str, msg: str) -> int:
    print(f"error: code={code} kind={kind}: {' '.join(str(msg).split())}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except ConfigError as e:
        return _fail(EXIT_CONFIG, "config", e)
    except SystemExit as e:  # --help
        return EXIT_OK if e.code in (0, None) else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args)
        return args.func(cfg, args)
    except ConfigError as e:
        return _fail(EXIT_CONFIG, "config", e)
    except IncompatibleArtifactError as e:
        return _fail(EXIT_INCOMPATIBLE, "incompatible", e)
    except (DataError, ShapeError) as e:
        return _fail(EXIT_DATA, "data", e)
    except (DivergenceError, FloatingPointError) as e:
        return _fail(EXIT_DIVERGENCE, "divergence", e)
    except (ValueError, OSError) as e:
        return _fail(EXIT_DATA, "data", e)


if __name__ == "__main__":
    sys.exit(main())
