"""End-to-end defense run on the synthetic scenario, plus parameter sweeps.

A run configuration is a nested JSON object. Every key has a default (see
``DEFAULT_CONFIG``); a user file only needs the keys it changes. Setting
``"attack": null`` or ``"attack": {"poison_rate": null}`` trains a clean model.
"""
from __future__ import annotations

import copy
import csv
import io
import json
import logging
import math
import os
import platform
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from tacrecon import _backend
from tacrecon.backdoor import (
    Metrics,
    Trigger,
    der,
    evaluate,
    metrics_csv,
    metrics_json,
    oracle_tac_latent,
    poison_dataset,
    random_coverage_baseline,
    sample_blobs,
    sparse_trigger,
    synthetic_classification,
    tac_coverage,
)
from tacrecon.core import make_rng
from tacrecon.detect import DetectionReport, detect_from_results
from tacrecon.nn import Dataset, MlpParams, TrainConfig, TrainingDivergedError, latent_batch, save_params, train
from tacrecon.qp import SolverConfig, perturbations_for_all_classes
from tacrecon.removal import RemovalConfig, finetune_remove, finetune_remove_nopci, finetune_remove_recompute

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CLEAN = 2
EXIT_INFEASIBLE = 3

SWEEP_AXES = ("beta", "alpha", "ref_fraction", "seed")

DEFAULT_CONFIG: dict = {
    "seed": 0,
    "out": "runs/default",
    "data": {
        "n_train": 4000,
        "n_test": 2000,
        "d_in": 16,
        "n_classes": 10,
        "separation": 4.0,
        "layout": "orthogonal",
        "support": 12,  # class means live on the first `support` inputs (null: all)
    },
    "attack": {
        "magnitude": 3.0,
        "n_active": 4,
        "coords": None,
        "target_class": 1,
        "poison_rate": 0.1,
    },
    "train": {
        "hidden": [64],
        "d_emb": 32,
        "epochs": 30,
        "lr": 0.05,
        "batch_size": 32,
        "weight_decay": 1e-2,
        "latent_activation": "relu",
    },
    "qp": {
        "tol": 1e-8,
        "max_sweeps": None,
        "kkt_tol": 1e-6,
        "include_bias_in_margins": False,
        "workers": 1,
    },
    "detect": {
        "alpha": -2.0,
        "process_all": False,
    },
    "removal": {
        "beta": 0.5,
        "epochs": 50,
        "lr": 0.01,
        "batch_size": 8,
        "mode": "pci",
        "ref_fraction": 0.05,
        "stop_grad_latent": False,
        "recompute_every": 0,
    },
    "tac": {
        "top_k_fraction": 0.1,
        "n_random": 100,
    },
}


class ConfigError(ValueError):
    pass


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict) and value is not None:
            if not isinstance(value, dict):
                raise ConfigError(f"{where!r} must be an object")
            out[key] = _merge(base[key], value, where + ".")
        else:
            out[key] = copy.deepcopy(value)
    return out


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ConfigError(msg)


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v) -> bool:
    return (isinstance(v, (int, float)) and not isinstance(v, bool)) and math.isfinite(v)


def is_clean(cfg: dict) -> bool:
    return cfg["attack"] is None or cfg["attack"].get("poison_rate") is None


def validate_config(cfg: dict) -> None:
    """Check every block before anything is computed."""
    _require(_is_int(cfg["seed"]) and cfg["seed"] >= 0, "seed must be a nonnegative integer")
    _require(isinstance(cfg["out"], str) and cfg["out"] != "", "out must be a nonempty path")

    d = cfg["data"]
    for key in ("n_train", "n_test", "d_in"):
        _require(_is_int(d[key]) and d[key] >= 1, f"data.{key} must be a positive integer")
    _require(_is_int(d["n_classes"]) and d["n_classes"] >= 2, "data.n_classes must be at least 2")
    _require(_is_num(d["separation"]) and d["separation"] > 0, "data.separation must be positive")
    _require(d["layout"] in ("orthogonal", "gaussian"), "data.layout must be 'orthogonal' or 'gaussian'")
    _require(d["support"] is None or (_is_int(d["support"]) and 1 <= d["support"] <= d["d_in"]),
             "data.support must be null or between 1 and data.d_in")
    if d["layout"] == "orthogonal":
        _require((d["support"] or d["d_in"]) >= d["n_classes"], "orthogonal layout needs n_classes <= data.support")

    if not is_clean(cfg):
        a = cfg["attack"]
        _require(_is_num(a["magnitude"]), "attack.magnitude must be a number")
        _require(_is_int(a["target_class"]) and 0 <= a["target_class"] < d["n_classes"],
                 "attack.target_class must be a class index")
        _require(_is_num(a["poison_rate"]) and 0 < a["poison_rate"] < 1, "attack.poison_rate must be in (0, 1)")
        _require(a["poison_rate"] * d["n_train"] >= 0.5, "attack.poison_rate poisons no training rows")
        if a["coords"] is None:
            _require(_is_int(a["n_active"]) and 1 <= a["n_active"] <= d["d_in"],
                     "attack.n_active must be between 1 and data.d_in")
        else:
            _require(isinstance(a["coords"], list) and a["coords"]
                     and all(_is_int(c) and 0 <= c < d["d_in"] for c in a["coords"]),
                     "attack.coords must list input coordinates")

    t = cfg["train"]
    _require(isinstance(t["hidden"], list) and all(_is_int(h) and h >= 1 for h in t["hidden"]),
             "train.hidden must be a list of positive integers")
    _require(_is_int(t["d_emb"]) and t["d_emb"] >= 1, "train.d_emb must be a positive integer")
    _require(_is_int(t["epochs"]) and t["epochs"] >= 1, "train.epochs must be a positive integer")
    _require(_is_int(t["batch_size"]) and t["batch_size"] >= 1, "train.batch_size must be a positive integer")
    _require(_is_num(t["lr"]) and t["lr"] >= 0, "train.lr must be nonnegative")
    _require(_is_num(t["weight_decay"]) and t["weight_decay"] >= 0, "train.weight_decay must be nonnegative")
    _require(t["latent_activation"] in ("identity", "relu"), "train.latent_activation must be 'identity' or 'relu'")

    q = cfg["qp"]
    _require(_is_num(q["tol"]) and q["tol"] > 0, "qp.tol must be positive")
    _require(_is_num(q["kkt_tol"]) and q["kkt_tol"] > 0, "qp.kkt_tol must be positive")
    _require(q["max_sweeps"] is None or (_is_int(q["max_sweeps"]) and q["max_sweeps"] >= 1),
             "qp.max_sweeps must be null or a positive integer")
    _require(isinstance(q["include_bias_in_margins"], bool), "qp.include_bias_in_margins must be a boolean")
    _require(_is_int(q["workers"]) and q["workers"] >= 1, "qp.workers must be a positive integer")

    _require(_is_num(cfg["detect"]["alpha"]), "detect.alpha must be a number")
    _require(isinstance(cfg["detect"]["process_all"], bool), "detect.process_all must be a boolean")

    r = cfg["removal"]
    _require(_is_num(r["beta"]) and r["beta"] >= 0, "removal.beta must be nonnegative")
    _require(_is_int(r["epochs"]) and r["epochs"] >= 1, "removal.epochs must be a positive integer")
    _require(_is_int(r["batch_size"]) and r["batch_size"] >= 1, "removal.batch_size must be a positive integer")
    _require(_is_num(r["lr"]) and r["lr"] >= 0, "removal.lr must be nonnegative")
    _require(r["mode"] in ("pci", "nopci"), "removal.mode must be 'pci' or 'nopci'")
    _require(_is_num(r["ref_fraction"]) and 0 < r["ref_fraction"] <= 1, "removal.ref_fraction must be in (0, 1]")
    _require(round(r["ref_fraction"] * d["n_train"]) >= 1, "removal.ref_fraction selects no reference rows")
    _require(isinstance(r["stop_grad_latent"], bool), "removal.stop_grad_latent must be a boolean")
    _require(_is_int(r["recompute_every"]) and r["recompute_every"] >= 0,
             "removal.recompute_every must be a nonnegative integer")

    tc = cfg["tac"]
    _require(_is_num(tc["top_k_fraction"]) and 0 < tc["top_k_fraction"] <= 1, "tac.top_k_fraction must be in (0, 1]")
    _require(_is_int(tc["n_random"]) and tc["n_random"] >= 1, "tac.n_random must be a positive integer")


def resolve_config(user: dict | None = None, **overrides) -> dict:
    """Defaults, then ``user`` (a parsed config file), then dotted ``overrides``."""
    cfg = _merge(DEFAULT_CONFIG, user or {})
    for dotted, value in overrides.items():
        if value is None:
            continue
        *parents, leaf = dotted.split(".")
        node = cfg
        for p in parents:
            node = node[p]
        node[leaf] = value
    validate_config(cfg)
    return cfg


def load_config(path) -> dict:
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return doc


@dataclass
class Scenario:
    train: Dataset  # clean training rows
    test: Dataset
    trigger: Trigger | None
    poisoned: Dataset  # what the model is trained on (== train when clean)
    ref: Dataset


def arch_of(cfg: dict) -> tuple[int, ...]:
    return (cfg["data"]["d_in"], *cfg["train"]["hidden"], cfg["train"]["d_emb"], cfg["data"]["n_classes"])


def build_scenario(cfg: dict) -> Scenario:
    """Data, trigger, poisoned training set and reference set, all from named seed streams."""
    seed, d = cfg["seed"], cfg["data"]
    rng = make_rng(seed, "data")
    means, clean = synthetic_classification(d["n_train"], d["d_in"], d["n_classes"], d["separation"], rng,
                                            layout=d["layout"], support=d["support"])
    test = sample_blobs(means, d["n_test"], rng)
    trig = None
    poisoned = clean
    if not is_clean(cfg):
        a = cfg["attack"]
        delta = sparse_trigger(d["d_in"], a["magnitude"], a["n_active"], a["coords"])
        trig = Trigger(delta, a["target_class"], a["poison_rate"])
        poisoned, _ = poison_dataset(clean, trig, make_rng(seed, "poison"))
    n_ref = int(round(cfg["removal"]["ref_fraction"] * d["n_train"]))
    ref = clean.subset(np.sort(make_rng(seed, "reference").choice(d["n_train"], n_ref, replace=False)))
    return Scenario(clean, test, trig, poisoned, ref)


def train_config(cfg: dict) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(epochs=t["epochs"], lr=t["lr"], batch_size=t["batch_size"], seed=cfg["seed"],
                       weight_decay=t["weight_decay"], latent_activation=t["latent_activation"])


def solver_config(cfg: dict) -> SolverConfig:
    q = cfg["qp"]
    return SolverConfig(tol=q["tol"], max_sweeps=q["max_sweeps"], kkt_tol=q["kkt_tol"],
                        include_bias_in_margins=q["include_bias_in_margins"], workers=q["workers"])


def removal_config(cfg: dict) -> RemovalConfig:
    r = cfg["removal"]
    return RemovalConfig(beta=r["beta"], epochs=r["epochs"], lr=r["lr"], batch_size=r["batch_size"],
                         seed=cfg["seed"], mode=r["mode"], stop_grad_latent=r["stop_grad_latent"])


def evaluate_model(params: MlpParams, sc: Scenario) -> Metrics:
    """ACC and ASR; ASR is nan when there is no trigger."""
    if sc.trigger is None:
        from tacrecon.nn import predict
        return Metrics(float(np.mean(predict(params, sc.test.inputs) == sc.test.labels)), math.nan)
    return evaluate(params, sc.test, sc.trigger)


def remove_backdoor(params: MlpParams, sc: Scenario, results, classes: list[int], cfg: dict) -> MlpParams:
    rcfg = removal_config(cfg)
    if rcfg.mode == "nopci":
        return finetune_remove_nopci(params, sc.ref, [r.s for r in results], rcfg)
    every = cfg["removal"]["recompute_every"]
    for k in classes:
        if every:
            params = finetune_remove_recompute(params, sc.ref, k, rcfg, every, solver_config(cfg))
        else:
            params = finetune_remove(params, sc.ref, results[k].s, rcfg)
    return params


def _clean_float(v):
    if v is None:
        return None
    v = float(v)
    return v if math.isfinite(v) else None


@dataclass
class DefenseReport:
    status: str = "error"
    exit_code: int = EXIT_ERROR
    clean_training: bool = False
    seed: int = 0
    target_class: int | None = None
    norms: list | None = None
    z: list | None = None
    mean: float | None = None
    std: float | None = None
    degenerate: bool | None = None
    alpha: float | None = None
    poisoned_classes: list | None = None
    certified: list | None = None
    infeasible_classes: list | None = None
    removed_classes: list | None = None
    removal_mode: str | None = None
    beta: float | None = None
    acc_before: float | None = None
    asr_before: float | None = None
    acc_after: float | None = None
    asr_after: float | None = None
    der: float | None = None
    tac_coverage: float | None = None
    tac_random_baseline: float | None = None
    error: str | None = None

    def to_dict(self) -> dict:
        out = asdict(self)
        for key in ("mean", "std", "acc_before", "asr_before", "acc_after", "asr_after", "der",
                    "tac_coverage", "tac_random_baseline"):
            out[key] = _clean_float(out[key])
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


@dataclass
class RunOutcome:
    report: DefenseReport
    exit_code: int
    params_bd: MlpParams | None = None
    params_ft: MlpParams | None = None
    results: list = field(default_factory=list)


def _write(path: Path, text: str) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(text)


def run_pipeline(cfg: dict, write: bool = True) -> RunOutcome:
    """Train, perturb, detect, remove, evaluate. ``cfg`` must come from :func:`resolve_config`."""
    validate_config(cfg)
    started = time.time()
    out = Path(cfg["out"])
    rep = DefenseReport(seed=cfg["seed"], clean_training=is_clean(cfg), alpha=float(cfg["detect"]["alpha"]))
    outcome = RunOutcome(rep, EXIT_ERROR)
    if write:
        out.mkdir(parents=True, exist_ok=True)
        for stale in ("model_ft.json",):
            (out / stale).unlink(missing_ok=True)
    try:
        _run(cfg, rep, outcome, out if write else None)
    except TrainingDivergedError as exc:
        rep.status, rep.exit_code, rep.error = "error", EXIT_ERROR, f"training diverged: {exc}"
    outcome.exit_code = rep.exit_code
    if write:
        _write(out / "report.json", rep.to_json())
        _write(out / "config.json", json.dumps(cfg, indent=2, sort_keys=True) + "\n")
        rows = []
        if rep.acc_before is not None:
            rows.append(("before", Metrics(rep.acc_before, _nan(rep.asr_before)), None))
        if rep.acc_after is not None:
            rows.append(("after", Metrics(rep.acc_after, _nan(rep.asr_after)), rep.der))
        _write(out / "metrics.csv", metrics_csv(rows))
        _write(out / "metrics.json", metrics_json(rows))
        meta = {
            "started_unix": started,
            "elapsed_seconds": time.time() - started,
            "backend": _backend.BACKEND,
            "python": platform.python_version(),
            "numpy": np.__version__,
        }
        _write(out / "run_meta.json", json.dumps(meta, indent=2) + "\n")
    return outcome


def _nan(v):
    return math.nan if v is None else v


def _run(cfg: dict, rep: DefenseReport, outcome: RunOutcome, out: Path | None) -> None:
    sc = build_scenario(cfg)
    if sc.trigger is not None:
        rep.target_class = sc.trigger.target_class
    log.info("training on %d rows (%s)", len(sc.poisoned), "clean" if sc.trigger is None else "poisoned")
    params = train(sc.poisoned, arch_of(cfg), train_config(cfg)).params
    outcome.params_bd = params
    if out is not None:
        save_params(out / "model_bd.json", params, cfg["seed"])
    before = evaluate_model(params, sc)
    rep.acc_before, rep.asr_before = before.acc, before.asr

    results = perturbations_for_all_classes(latent_batch(params, sc.ref.inputs), params.final_layer,
                                            solver_config(cfg))
    outcome.results = results
    det = detect_from_results(results, cfg["detect"]["alpha"])
    d = det.to_dict()
    rep.norms, rep.z, rep.mean, rep.std, rep.degenerate = d["norms"], d["z"], d["mean"], d["std"], d["degenerate"]
    rep.poisoned_classes = d["poisoned_classes"]
    rep.certified = [bool(r.certified) for r in results]
    rep.infeasible_classes = [r.target_class for r in results if r.s is None]

    if sc.trigger is not None:
        s_true = results[sc.trigger.target_class].s
        if s_true is not None:
            tac = oracle_tac_latent(params, sc.test.inputs, sc.trigger)
            k = cfg["tac"]
            rep.tac_coverage = tac_coverage(s_true, tac, k["top_k_fraction"])
            rep.tac_random_baseline = random_coverage_baseline(
                tac, k["top_k_fraction"], make_rng(cfg["seed"], "coverage-baseline"), k["n_random"])

    if not det.detected:
        rep.status, rep.exit_code = "clean", EXIT_CLEAN
        log.info("no class below alpha=%g", cfg["detect"]["alpha"])
        return

    classes = det.poisoned_classes if cfg["detect"]["process_all"] else det.poisoned_classes[:1]
    blocked = [k for k in classes if results[k].s is None]
    if blocked and cfg["removal"]["mode"] == "pci":
        rep.status, rep.exit_code = "infeasible", EXIT_INFEASIBLE
        rep.error = f"no feasible perturbation for detected class(es) {blocked}: {results[blocked[0]].error}"
        return

    rep.removal_mode, rep.beta = cfg["removal"]["mode"], float(cfg["removal"]["beta"])
    rep.removed_classes = list(classes) if rep.removal_mode == "pci" else None
    params_ft = remove_backdoor(params, sc, results, classes, cfg)
    outcome.params_ft = params_ft
    if out is not None:
        save_params(out / "model_ft.json", params_ft, cfg["seed"])
    after = evaluate_model(params_ft, sc)
    rep.acc_after, rep.asr_after = after.acc, after.asr
    if sc.trigger is not None:
        rep.der = der(before, after)
    rep.status, rep.exit_code = "ok", EXIT_OK


SWEEP_FIELDS = ["axis", "value", "status", "exit_code", "detected", "poisoned_classes", "z_target",
                "acc_before", "asr_before", "acc_after", "asr_after", "der", "tac_coverage", "error"]


def _axis_override(axis: str) -> str:
    return {"beta": "removal.beta", "alpha": "detect.alpha", "ref_fraction": "removal.ref_fraction",
            "seed": "seed"}[axis]


def _sweep_entry(args) -> dict:
    cfg, axis, value = args
    row = {"axis": axis, "value": value}
    try:
        entry = copy.deepcopy(cfg)
        entry["out"] = os.path.join(cfg["out"], f"{axis}={value}")
        entry = resolve_config(entry, **{_axis_override(axis): value})
        rep = run_pipeline(entry).report
    except Exception as exc:  # a failed entry becomes a row, never aborts the sweep
        row.update(status="error", exit_code=EXIT_ERROR, error=f"{type(exc).__name__}: {exc}")
        return row
    z_target = None
    if rep.target_class is not None and rep.z is not None:
        z_target = rep.z[rep.target_class]
    row.update(
        status=rep.status, exit_code=rep.exit_code,
        detected=None if rep.target_class is None or rep.poisoned_classes is None
        else rep.target_class in rep.poisoned_classes,
        poisoned_classes=" ".join(map(str, rep.poisoned_classes or [])),
        z_target=z_target, acc_before=rep.acc_before, asr_before=_clean_float(rep.asr_before),
        acc_after=rep.acc_after, asr_after=_clean_float(rep.asr_after), der=rep.der,
        tac_coverage=rep.tac_coverage, error=rep.error,
    )
    return row


def sweep_rows(cfg: dict, axis: str, values, workers: int = 1) -> list[dict]:
    if axis not in SWEEP_AXES:
        raise ConfigError(f"sweep axis must be one of {SWEEP_AXES}, got {axis!r}")
    jobs = [(cfg, axis, v) for v in values]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(workers) as pool:
            return list(pool.map(_sweep_entry, jobs))
    return [_sweep_entry(j) for j in jobs]


def sweep_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=SWEEP_FIELDS, lineterminator="\n", restval="")
    w.writeheader()
    for row in rows:
        w.writerow({k: ("" if v is None else _fmt(v)) for k, v in row.items()})
    return buf.getvalue()


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def sweep(cfg: dict, axis: str, values, workers: int = 1) -> Path:
    """Run the pipeline once per value; write ``sweep_<axis>.csv`` under ``cfg["out"]``."""
    rows = sweep_rows(cfg, axis, values, workers)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"sweep_{axis}.csv"
    _write(path, sweep_csv(rows))
    return path
