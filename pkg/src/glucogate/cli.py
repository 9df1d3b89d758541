"""Command-line driver for simulation, datasets, training, planning, and gating.

Configuration comes from an optional JSON file plus flag overrides (flags
win). File outputs carry a config-hash sidecar for provenance. Exit codes:
0 success, 2 usage (argparse), 3 validation, 4 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_VALIDATION = 3
EXIT_RUNTIME = 4


class CliValidationError(Exception):
    pass


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise CliValidationError(f"config file not found: {p}")
    try:
        with open(p, "r", encoding="utf-8") as f:
            cfg = json.load(f)
    except json.JSONDecodeError as exc:
        raise CliValidationError(f"malformed config {p}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise CliValidationError(f"config {p} must hold a JSON object")
    return cfg


def _setting(args, cfg: dict, key: str, default):
    """Flag value if given, else config-file value, else default."""
    v = getattr(args, key.replace("-", "_"), None)
    if v is not None:
        return v
    if key in cfg:
        return cfg[key]
    return default


def _write_sidecar(out_path: Path, payload: dict) -> None:
    from .planner import config_hash

    sidecar = out_path.with_suffix(out_path.suffix + ".meta.json")
    with open(sidecar, "w", encoding="utf-8") as f:
        json.dump({"config_hash": config_hash(payload), "config": payload},
                  f, indent=2, sort_keys=True, default=str)
        f.write("\n")


def _patient_from_config(cfg: dict):
    from .dynamics import Coefficients, GlucoseParams
    from .gate import VirtualPatient
    from .planner import ControllerConfig

    patient = VirtualPatient()
    if "coefficients" in cfg:
        patient = replace(patient, coeffs=Coefficients(**cfg["coefficients"]))
    if "glucose" in cfg:
        patient = replace(patient, glucose=GlucoseParams(**cfg["glucose"]))
    if "controller" in cfg:
        patient = replace(patient, controller=ControllerConfig(**cfg["controller"]))
    return patient


# ------------------------------------------------------------ subcommands ---

def cmd_sim(args, cfg) -> int:
    from .dynamics import InputSchedule, simulate
    from .planner import make_controller

    patient = _patient_from_config(cfg)
    horizon = float(_setting(args, cfg, "horizon-min", 360.0))
    boluses = tuple((float(b["t_min"]), float(b["units"])) for b in cfg.get("boluses", ()))
    meals = tuple((float(m["t_min"]), float(m["carbs"])) for m in cfg.get("meals", ()))
    schedule = InputSchedule(boluses=boluses, meals=meals)
    trace = simulate(patient.equilibrium(), patient.coeffs, patient.glucose,
                     schedule, make_controller(patient.controller),
                     horizon=horizon, dt=float(cfg.get("dt", 1.0)))
    out = Path(args.out or "trace.csv")
    trace.write_csv(out)
    _write_sidecar(out, {"command": "sim", "horizon": horizon,
                         "boluses": boluses, "meals": meals})
    print(f"wrote {len(trace)} samples to {out}")
    return EXIT_OK


def cmd_dataset(args, cfg) -> int:
    from .llm import SeriesSpec, generate_dataset

    n = int(_setting(args, cfg, "count", 100))
    seed = int(_setting(args, cfg, "seed", 0))
    spec = SeriesSpec(**cfg.get("series", {}))
    out = Path(args.out or "dataset.jsonl")
    k1_range = cfg.get("k1_range", (0.008, 0.04))
    sampler = lambda rng: float(rng.uniform(*k1_range))
    generate_dataset(n, sampler, spec, seed=seed, path=out)
    _write_sidecar(out, {"command": "dataset", "count": n, "seed": seed,
                         "k1_range": list(k1_range)})
    print(f"wrote {n} records to {out}")
    return EXIT_OK


def cmd_train(args, cfg) -> int:
    from .estimator import TrainingConfig, generate_traces, save_checkpoint, train
    from .planner import config_hash

    seed = int(_setting(args, cfg, "seed", 0))
    overrides = dict(cfg.get("training", {}))
    overrides.setdefault("seed", seed)
    tc = TrainingConfig.desk_scale(**overrides) if cfg.get("desk_scale", True) \
        else TrainingConfig(**overrides)
    dataset = generate_traces(tc, seed=int(cfg.get("dataset_seed", seed + 42)))
    last = {"ep": 0}

    def progress(ep, loss):
        last["ep"] = ep
        if args.verbose:
            print(f"epoch {ep + 1}/{tc.epochs}: loss {loss:.6f}")

    net, history = train(tc, dataset, progress=progress)
    out = Path(args.out or "checkpoint.json")
    save_checkpoint(net, out, training_config_hash=config_hash(tc))
    hist_path = out.with_suffix(".loss.json")
    with open(hist_path, "w", encoding="utf-8") as f:
        json.dump({"loss": history}, f)
        f.write("\n")
    _write_sidecar(out, {"command": "train", "training": str(tc)})
    print(f"trained {tc.epochs} epochs (final loss {history[-1]:.6f}); "
          f"checkpoint at {out}, history at {hist_path}")
    return EXIT_OK


def cmd_estimate(args, cfg) -> int:
    from .dynamics import Trace
    from .estimator import estimate_coefficients, load_checkpoint

    if args.trace is None:
        raise CliValidationError("estimate requires --trace <csv>")
    if args.checkpoint is None:
        raise CliValidationError("estimate requires --checkpoint <json>")
    trace = Trace.read_csv(args.trace)
    net = load_checkpoint(args.checkpoint)
    coeffs = estimate_coefficients(net, trace)
    print(json.dumps({"k1": coeffs.k1, "n": coeffs.n, "p1": coeffs.p1,
                      "i_b": coeffs.i_b}, sort_keys=True))
    return EXIT_OK


def cmd_plan(args, cfg) -> int:
    from .planner import (MealEvent, build_meal_plan, config_hash,
                          fixed_iob_estimator)
    from .dynamics import InputSchedule, simulate
    from .planner import make_controller

    patient = _patient_from_config(cfg)
    carbs = float(_setting(args, cfg, "carbs", 45.0))
    iob = float(_setting(args, cfg, "iob", 0.0))
    cr = _setting(args, cfg, "cr", None)
    controller = patient.controller if cr is None \
        else replace(patient.controller, cr=float(cr))
    context = simulate(patient.equilibrium(), patient.coeffs, patient.glucose,
                       InputSchedule(), make_controller(controller),
                       horizon=60.0, dt=1.0)
    plan = build_meal_plan(MealEvent(0.0, carbs), controller,
                           fixed_iob_estimator(iob), context)
    payload = plan.to_dict(provenance={"estimator": "fixed-override",
                                       "config_hash": config_hash(controller)})
    text = json.dumps(payload, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return EXIT_OK


def cmd_gate(args, cfg) -> int:
    from .gate import forward_simulate, gate as gate_fn
    from .planner import MealEvent, UsagePlan
    from .stl import FormulaParseError, parse_formula

    patient = _patient_from_config(cfg)
    if args.plan is None:
        raise CliValidationError("gate requires --plan <json>")
    plan_path = Path(args.plan)
    if not plan_path.exists():
        raise CliValidationError(f"plan file not found: {plan_path}")
    plan = UsagePlan.from_dict(json.loads(plan_path.read_text()))
    horizon = float(_setting(args, cfg, "horizon-min", 360.0))
    carbs = _setting(args, cfg, "carbs", None)
    meal = MealEvent(0.0, float(carbs)) if carbs is not None else None
    criterion = None
    criterion_text = args.criterion or cfg.get("criterion")
    if criterion_text:
        try:
            criterion = parse_formula(criterion_text)
        except FormulaParseError as exc:
            raise CliValidationError(f"bad --criterion formula: {exc}") from exc
    trace = forward_simulate(plan, patient.coeffs, patient.glucose,
                             patient.equilibrium(), patient.controller,
                             horizon, meal=meal)
    verdict, rob, feedback = gate_fn(trace, criterion=criterion)
    print(json.dumps({"verdict": verdict.value, "rho": rob.rho,
                      "feedback": feedback}, sort_keys=True))
    return EXIT_OK


def cmd_suite(args, cfg) -> int:
    from .gate import SuiteConfig, run_scenario_suite

    seed = int(_setting(args, cfg, "seed", 7))
    count = int(_setting(args, cfg, "count", 50))
    workers = int(_setting(args, cfg, "workers", 1))
    suite_cfg = SuiteConfig(count=count, seed=seed, workers=workers,
                            **cfg.get("suite", {}))
    patient = _patient_from_config(cfg)
    report = run_scenario_suite(suite_cfg, patient)
    out = Path(args.out or "suite.csv")
    report.write_csv(out)
    summary = out.with_suffix(".summary.json")
    report.write_summary(summary)
    _write_sidecar(out, {"command": "suite", "seed": seed, "count": count})
    agg = report.aggregates()
    for mode in suite_cfg.modes:
        a = agg[mode]
        print(f"{mode:>7}: tbr={a['tbr']:.3f}% tir={a['tir']:.1f}% "
              f"hypo_events={a['hypo_events']} unsafe={a['unsafe_count']}")
    if report.failures:
        print(f"warning: {report.failures} scenario runs failed (see CSV)")
    print(f"report at {out}, summary at {summary}")
    return EXIT_OK


def cmd_serve(args, cfg) -> int:
    from .service import ServiceSettings, serve

    settings = ServiceSettings(patient=_patient_from_config(cfg),
                               checkpoint_path=args.checkpoint)
    serve(host=cfg.get("host", "127.0.0.1"), port=int(cfg.get("port", 8080)),
          settings=settings)
    return EXIT_OK


def cmd_eval_llm(args, cfg) -> int:
    from .llm import (ChatClient, ChatEndpointConfig, LocalOracle, SeriesSpec,
                      evaluate_rmse, format_forward_prompt, parse_series_response,
                      percentage_iob_series)

    spec = SeriesSpec(**cfg.get("series", {}))
    url = args.endpoint_url or cfg.get("endpoint_url")
    if url:
        endpoint = ChatClient(ChatEndpointConfig(
            base_url=url, model=cfg.get("model", "insulin-ft"),
            auth_env_var=cfg.get("auth_env_var")))
    else:
        endpoint = LocalOracle(spec)
    k1_values = cfg.get("k1_values", [0.015, 0.0196, 0.025])
    rows = []
    for k1 in k1_values:
        reply = endpoint.query(format_forward_prompt(float(k1), spec))
        generated = parse_series_response(reply)
        reference = percentage_iob_series(float(k1), spec)
        rows.append({"k1": k1, "rmse_percent":
                     evaluate_rmse(generated, reference, spec.initial_iob)})
    print(json.dumps({"endpoint": getattr(endpoint, "name", "unknown"),
                      "results": rows}, indent=2, sort_keys=True))
    return EXIT_OK


# ------------------------------------------------------------------ main ----

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="glucogate",
        description="Safety-gated meal planning for automated insulin delivery")
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--seed", type=int, help="random seed")
    parser.add_argument("--out", help="output path")
    parser.add_argument("--workers", type=int, help="worker count for suite/dataset")
    parser.add_argument("--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("sim", help="simulate the virtual patient, write a trace CSV")
    p = sub.add_parser("dataset", help="write the instruction-tuning dataset")
    p.add_argument("--count", type=int)
    sub.add_parser("train", help="train the coefficient estimator")
    p = sub.add_parser("estimate", help="estimate coefficients from a trace CSV")
    p.add_argument("--trace")
    p.add_argument("--checkpoint")
    p = sub.add_parser("plan", help="print a meal usage plan as JSON")
    p.add_argument("--carbs", type=float)
    p.add_argument("--cr", type=float)
    p.add_argument("--iob", type=float)
    p = sub.add_parser("gate", help="gate a plan JSON by forward simulation")
    p.add_argument("--plan")
    p.add_argument("--carbs", type=float)
    p.add_argument("--horizon-min", type=float)
    p.add_argument("--criterion", help="STL formula text, e.g. '(G 0 360 (> cgm 70))'")
    p = sub.add_parser("suite", help="run the planner-mode scenario suite")
    p.add_argument("--count", type=int)
    p.add_argument("--mode", choices=["exact", "linear", "faulty"],
                   help="restrict to a single planner mode")
    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--checkpoint")
    p = sub.add_parser("eval-llm", help="report series RMSE for an endpoint")
    p.add_argument("--endpoint-url")

    return parser


_COMMANDS = {
    "sim": cmd_sim, "dataset": cmd_dataset, "train": cmd_train,
    "estimate": cmd_estimate, "plan": cmd_plan, "gate": cmd_gate,
    "suite": cmd_suite, "serve": cmd_serve, "eval-llm": cmd_eval_llm,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _load_config(args.config)
        if args.command == "suite" and getattr(args, "mode", None):
            cfg.setdefault("suite", {})["modes"] = [args.mode]
        return _COMMANDS[args.command](args, cfg)
    except CliValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:      # runtime failures keep a distinct exit code
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
