"""Command-line front end.

Every subcommand reads the same JSON config (``--config``) and writes into
``--out``. The phase commands exchange files so they can be chained::

    tacrecon train    -> model_bd.json
    tacrecon perturb  -> perturbations.json
    tacrecon detect   -> detection.json
    tacrecon remove   -> model_ft.json
    tacrecon eval     -> eval.json

Exit codes: 0 success, 1 error, 2 no backdoor detected, 3 detected class has
no feasible perturbation.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from tacrecon import pipeline as pl
from tacrecon.core import ContractError
from tacrecon.detect import DetectionReport, detect_from_results
from tacrecon.nn import TrainingDivergedError, latent_batch, load_params, save_params, train
from tacrecon.qp import PerturbationResult, perturbations_for_all_classes

log = logging.getLogger("tacrecon")


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", type=Path, help="JSON run configuration (missing keys take defaults)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--alpha", type=float, help="detection threshold on z-scores")
    p.add_argument("--beta", type=float, help="weight of the shifted-latent loss term")
    p.add_argument("--ref-fraction", type=float, help="fraction of training rows the defender holds")
    p.add_argument("--mode", choices=["pci", "nopci"], help="removal mode")
    p.add_argument("--include-bias-in-margins", action="store_true", default=None,
                   help="include final-layer bias differences in the margins")
    p.add_argument("--print-config", action="store_true", help="print the resolved config and exit")
    p.add_argument("-v", "--verbose", action="count", default=0)
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    ap = argparse.ArgumentParser(prog="tacrecon", description=__doc__.split("\n\n")[0])
    sub = ap.add_subparsers(dest="command", required=True)
    sub.add_parser("pipeline", parents=[common], help="train, perturb, detect, remove and evaluate")
    sub.add_parser("train", parents=[common], help="train the (optionally poisoned) model")

    p = sub.add_parser("perturb", parents=[common], help="minimal latent perturbation for every class")
    p.add_argument("--model", type=Path, help="checkpoint (default OUT/model_bd.json)")

    p = sub.add_parser("detect", parents=[common], help="flag classes with anomalously small perturbations")
    p.add_argument("--perturbations", type=Path, help="default OUT/perturbations.json")

    p = sub.add_parser("remove", parents=[common], help="fine-tune the model against the detected perturbation")
    p.add_argument("--model", type=Path, help="default OUT/model_bd.json")
    p.add_argument("--perturbations", type=Path, help="default OUT/perturbations.json")
    p.add_argument("--detection", type=Path, help="default OUT/detection.json")
    p.add_argument("--class", dest="target", type=int, help="class to remove (overrides the detection file)")

    p = sub.add_parser("eval", parents=[common], help="clean accuracy and attack success rate of a checkpoint")
    p.add_argument("--model", type=Path, help="default OUT/model_ft.json, else OUT/model_bd.json")

    p = sub.add_parser("sweep", parents=[common], help="repeat the pipeline over one parameter")
    p.add_argument("--axis", required=True, choices=pl.SWEEP_AXES)
    p.add_argument("--values", default="", help="comma-separated values, e.g. 0.1,0.5,2.0")
    p.add_argument("--workers", type=int, default=1, help="parallel pipeline runs")
    return ap


def resolve(args) -> dict:
    user = pl.load_config(args.config) if args.config else None
    return pl.resolve_config(
        user,
        seed=args.seed,
        out=args.out,
        **{
            "detect.alpha": args.alpha,
            "removal.beta": args.beta,
            "removal.ref_fraction": args.ref_fraction,
            "removal.mode": args.mode,
            "qp.include_bias_in_margins": args.include_bias_in_margins,
        },
    )


def _dump(path: Path, doc) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="\n") as fh:
        fh.write(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _read(path: Path):
    with open(path) as fh:
        return json.load(fh)


def cmd_pipeline(cfg, args) -> int:
    outcome = pl.run_pipeline(cfg)
    rep = outcome.report
    d = rep.to_dict()
    print(f"status={rep.status} poisoned_classes={rep.poisoned_classes} "
          f"acc {d['acc_before']} -> {d['acc_after']} asr {d['asr_before']} -> {d['asr_after']}")
    if rep.error:
        print(rep.error, file=sys.stderr)
    return outcome.exit_code


def cmd_train(cfg, args) -> int:
    sc = pl.build_scenario(cfg)
    params = train(sc.poisoned, pl.arch_of(cfg), pl.train_config(cfg)).params
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    save_params(out / "model_bd.json", params, cfg["seed"])
    m = pl.evaluate_model(params, sc)
    print(f"acc={m.acc:.4f} asr={m.asr:.4f}")
    return pl.EXIT_OK


def cmd_perturb(cfg, args) -> int:
    out = Path(cfg["out"])
    params = load_params(args.model or out / "model_bd.json")
    sc = pl.build_scenario(cfg)
    results = perturbations_for_all_classes(latent_batch(params, sc.ref.inputs), params.final_layer,
                                            pl.solver_config(cfg))
    _dump(out / "perturbations.json", [r.to_dict() for r in results])
    for r in results:
        print(f"class {r.target_class}: norm={r.norm:.6g} certified={r.certified}")
    return pl.EXIT_OK


def _load_results(path: Path) -> list[PerturbationResult]:
    return [PerturbationResult.from_dict(d) for d in _read(path)]


def cmd_detect(cfg, args) -> int:
    out = Path(cfg["out"])
    results = _load_results(args.perturbations or out / "perturbations.json")
    rep = detect_from_results(results, cfg["detect"]["alpha"])
    _dump(out / "detection.json", rep.to_dict())
    print(f"z={np.round(rep.z, 3).tolist()} poisoned_classes={rep.poisoned_classes}")
    return pl.EXIT_OK if rep.detected else pl.EXIT_CLEAN


def cmd_remove(cfg, args) -> int:
    out = Path(cfg["out"])
    params = load_params(args.model or out / "model_bd.json")
    results = _load_results(args.perturbations or out / "perturbations.json")
    if args.target is not None:
        classes = [args.target]
    else:
        det = DetectionReport.from_dict(_read(args.detection or out / "detection.json"))
        if not det.detected:
            print("no poisoned class detected; nothing to remove", file=sys.stderr)
            return pl.EXIT_CLEAN
        classes = det.poisoned_classes if cfg["detect"]["process_all"] else det.poisoned_classes[:1]
    for k in classes:
        if not 0 <= k < len(results):
            raise ContractError(f"class {k} out of range")
        if results[k].s is None and cfg["removal"]["mode"] == "pci":
            print(f"class {k} has no feasible perturbation: {results[k].error}", file=sys.stderr)
            return pl.EXIT_INFEASIBLE
    sc = pl.build_scenario(cfg)
    params_ft = pl.remove_backdoor(params, sc, results, classes, cfg)
    save_params(out / "model_ft.json", params_ft, cfg["seed"])
    m = pl.evaluate_model(params_ft, sc)
    print(f"removed class(es) {classes}: acc={m.acc:.4f} asr={m.asr:.4f}")
    return pl.EXIT_OK


def cmd_eval(cfg, args) -> int:
    out = Path(cfg["out"])
    path = args.model
    if path is None:
        path = out / "model_ft.json" if (out / "model_ft.json").exists() else out / "model_bd.json"
    params = load_params(path)
    m = pl.evaluate_model(params, pl.build_scenario(cfg))
    doc = {"model": str(path), "acc": m.acc, "asr": None if np.isnan(m.asr) else m.asr}
    _dump(out / "eval.json", doc)
    print(f"acc={m.acc:.4f} asr={doc['asr']}")
    return pl.EXIT_OK


def _parse_values(axis: str, text: str) -> list:
    items = [t.strip() for t in text.split(",") if t.strip()]
    conv = int if axis == "seed" else float
    try:
        return [conv(t) for t in items]
    except ValueError:
        raise pl.ConfigError(f"bad value list for axis {axis}: {text!r}") from None


def cmd_sweep(cfg, args) -> int:
    path = pl.sweep(cfg, args.axis, _parse_values(args.axis, args.values), workers=args.workers)
    print(path)
    return pl.EXIT_OK


COMMANDS = {
    "pipeline": cmd_pipeline,
    "train": cmd_train,
    "perturb": cmd_perturb,
    "detect": cmd_detect,
    "remove": cmd_remove,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args)
        if args.print_config:
            print(json.dumps(cfg, indent=2, sort_keys=True))
            return pl.EXIT_OK
        return COMMANDS[args.command](cfg, args)
    except (pl.ConfigError, ContractError, TrainingDivergedError, OSError, json.JSONDecodeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return pl.EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
