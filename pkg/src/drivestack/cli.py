"""Command-line entry point for data generation, training, and evaluation.

Commands mirror the experiment pipeline: gen-data writes a scenario file,
train produces a checkpoint plus a training log, eval-open-loop and
eval-closed-loop score runs against the No-prediction baseline and the
GT-prediction oracle, grad-check runs a finite-difference suite, and plot
renders SVG charts from a metrics CSV.

Conventions shared by every command:
  - ``--out`` names a directory (default: $DRIVESTACK_OUT, else the current
    directory); filenames inside it are fixed per command.
  - a resolved_config.json snapshot of the effective options is written next
    to the outputs.
  - CSV cells are written with repr() so identical runs are byte-identical;
    no timestamps anywhere.
  - exit codes: 2 for configuration errors, 3 for missing or malformed input
    files, 4 for runtime failures.

Options may come from a ``--config`` file with KEY=VALUE lines; explicit
flags win over file values.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

from . import controller, cost as cost_mod, gradcheck, scenario as scenario_mod
from . import simulator, training

SCENARIO_FILE = "scenarios.jsonl"
CHECKPOINT_FILE = "checkpoint.json"
TRAINING_LOG_FILE = "training_log.csv"

TRAINING_LOG_COLUMNS = ("epoch", "train_loss", "control_skipped",
                        "weight_invariant_gap", "val_pred_loss",
                        "val_plan_loss", "val_ctr_loss")
OPEN_LOOP_SCENARIO_COLUMNS = ("scenario_id", "run", "ade", "nll", "plan_loss",
                              "ctr_loss", "converged")
OPEN_LOOP_SUMMARY_COLUMNS = ("run", "scenarios", "ade", "nll", "plan_loss",
                             "ctr_loss", "rel_plan_loss", "rel_ctr_loss",
                             "converged_frac")
CLOSED_LOOP_SCENARIO_COLUMNS = ("scenario_id", "run") + simulator.METRIC_NAMES \
    + ("converged_frac",)
CLOSED_LOOP_SUMMARY_COLUMNS = ("run", "scenarios") + simulator.METRIC_NAMES \
    + ("converged_frac",)

BASELINE_RUN = "no_prediction"
ORACLE_RUN = "gt_prediction"
REPLAY_RUN = "replay"


class DataError(Exception):
    """Input file missing or malformed; maps to exit code 3."""


class ConfigError(Exception):
    """Bad option value or option combination; maps to exit code 2."""


# ---------------------------------------------------------------------------
# Small deterministic writers


def _cell(value):
    if isinstance(value, bool):
        return repr(int(value))
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_csv(path, columns, rows) -> None:
    """Rows are dicts; every cell goes through repr, keeping runs comparable."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_cell(row[c]) for c in columns])


def _write_resolved(out_dir: Path, command: str, options: dict) -> None:
    doc = {"command": command, "options": {k: options[k] for k in sorted(options)}}
    (out_dir / "resolved_config.json").write_text(json.dumps(doc, sort_keys=True) + "\n")


def _out_dir(args) -> Path:
    out = args.out or os.environ.get("DRIVESTACK_OUT") or "."
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _options_dict(args) -> dict:
    skip = {"func", "command", "config"}
    return {k: v for k, v in vars(args).items() if k not in skip}


# ---------------------------------------------------------------------------
# Input loading (exit code 3 territory)


def _load_scenarios(path) -> list:
    try:
        return scenario_mod.load(path)
    except OSError as exc:
        raise DataError(f"cannot read scenario file {path}: {exc}") from exc
    except ValueError as exc:
        raise DataError(f"bad scenario file {path}: {exc}") from exc


def _load_checkpoint(path) -> training.Checkpoint:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    try:
        return training.Checkpoint.from_json(text)
    except (ValueError, KeyError) as exc:
        raise DataError(f"bad checkpoint {path}: {exc}") from exc


def _checkpoint_runs(paths):
    """[(run_name, checkpoint)] with file stems as run names."""
    runs = []
    seen = set()
    for p in paths or []:
        name = Path(p).stem
        if name in {BASELINE_RUN, ORACLE_RUN, REPLAY_RUN} or name in seen:
            raise ConfigError(f"run name {name!r} is reserved or repeated; "
                              f"rename the checkpoint file")
        seen.add(name)
        runs.append((name, _load_checkpoint(p)))
    return runs


def _parse_alphas(text):
    if text is None:
        return None
    parts = text.split(",")
    if len(parts) != 3:
        raise ConfigError(f"--alphas wants three comma-separated numbers, got {text!r}")
    try:
        return tuple(float(p) for p in parts)
    except ValueError as exc:
        raise ConfigError(f"bad --alphas value {text!r}") from exc


# ---------------------------------------------------------------------------
# Commands


def cmd_gen_data(args) -> int:
    try:
        cfg = scenario_mod.ScenarioConfig(family=args.family, count=args.count,
                                          seed=args.seed, dt=args.dt,
                                          future_seconds=args.future_seconds)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    out = _out_dir(args)
    scenarios = scenario_mod.generate(cfg)
    scenario_mod.save(out / SCENARIO_FILE, scenarios)
    _write_resolved(out, "gen-data", _options_dict(args))
    print(f"wrote {len(scenarios)} scenarios to {out / SCENARIO_FILE}")
    return 0


def cmd_train(args) -> int:
    try:
        loss_cfg = training.loss_config_for(args.setting, _parse_alphas(args.alphas))
        train_cfg = training.TrainConfig(
            epochs=args.epochs, seed=args.seed, train_mode=args.mode,
            bias_offset=args.bias_offset, beta=args.beta)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    scenarios = _load_scenarios(args.data)
    scenarios, _ = scenario_mod.reject_unsuitable(scenarios)
    if not scenarios:
        raise DataError(f"no usable scenarios in {args.data}")
    train_set, val_set = scenario_mod.split(scenarios, seed=args.seed)

    init_weights = None
    if args.mode == "cost_tuning" and args.perturb_weights > 0:
        import numpy as np
        rng = np.random.default_rng(args.seed + 1)
        init_weights = training.perturb_psi(cost_mod.hand_tuned_weights(), rng,
                                            scale=args.perturb_weights)

    out = _out_dir(args)
    checkpoint, log = training.train(train_set, val_set, train_cfg, loss_cfg,
                                     init_weights=init_weights)
    (out / CHECKPOINT_FILE).write_text(checkpoint.to_json() + "\n")
    rows = [{c: rec.get(c, float("nan")) for c in TRAINING_LOG_COLUMNS}
            for rec in log]
    write_csv(out / TRAINING_LOG_FILE, TRAINING_LOG_COLUMNS, rows)
    _write_resolved(out, "train", _options_dict(args))
    print(f"trained {args.mode}/{args.setting} for {args.epochs} epochs; "
          f"final train loss {log[-1]['train_loss']:.6g}")
    return 0


def _open_loop_runs(args, scenarios):
    """[(run_name, records)] starting with the baseline and the oracle."""
    checkpoints = _checkpoint_runs(args.checkpoints)
    settings = {cp.setting for _, cp in checkpoints}
    if args.setting is not None:
        setting = args.setting
    elif len(settings) == 1:
        setting = settings.pop()
    elif not settings:
        setting = "rl"
    else:
        raise ConfigError("checkpoints disagree on rl/il setting; "
                          "pass --setting or evaluate them separately")
    runs = [
        (BASELINE_RUN, training.evaluate_open_loop(
            scenarios, BASELINE_RUN, setting, use="none", beta=args.beta)),
        (ORACLE_RUN, training.evaluate_open_loop(
            scenarios, ORACLE_RUN, setting, use="gt", beta=args.beta)),
    ]
    for name, cp in checkpoints:
        runs.append((name, training.evaluate_open_loop(
            scenarios, name, setting, checkpoint=cp, beta=args.beta)))
    return runs


def cmd_eval_open_loop(args) -> int:
    scenarios = _load_scenarios(args.data)
    runs = _open_loop_runs(args, scenarios)
    out = _out_dir(args)

    scenario_rows = []
    for _, records in runs:
        for r in records:
            scenario_rows.append({
                "scenario_id": r.scenario_id, "run": r.run, "ade": r.ade,
                "nll": r.nll, "plan_loss": r.plan_loss, "ctr_loss": r.ctr_loss,
                "converged": r.converged})
    write_csv(out / "open_loop_scenarios.csv", OPEN_LOOP_SCENARIO_COLUMNS,
              scenario_rows)

    import numpy as np
    baseline = runs[0][1]
    summary_rows = []
    for name, records in runs:
        agg = training.summarize(records)
        rel = training.relative_to_baseline(records, baseline)
        summary_rows.append({
            "run": name, "scenarios": len(records), "ade": agg["ade"],
            "nll": agg["nll"], "plan_loss": agg["plan_loss"],
            "ctr_loss": agg["ctr_loss"],
            "rel_plan_loss": float(np.mean([r["rel_plan_loss"] for r in rel])),
            "rel_ctr_loss": float(np.mean([r["rel_ctr_loss"] for r in rel])),
            "converged_frac": agg["converged_frac"]})
    write_csv(out / "open_loop_metrics.csv", OPEN_LOOP_SUMMARY_COLUMNS,
              summary_rows)

    if args.dump_candidates:
        _dump_candidates(out, scenarios, args.beta)
    _write_resolved(out, "eval-open-loop", _options_dict(args))
    for row in summary_rows:
        print(f"{row['run']}: plan_loss {row['plan_loss']:.4f} "
              f"rel {row['rel_plan_loss']:+.4f}, ctr {row['ctr_loss']:.4f}")
    return 0


def _dump_candidates(out: Path, scenarios, beta: float) -> None:
    """Debug dump of every scenario's candidate costs under GT futures."""
    weights = cost_mod.hand_tuned_weights()
    with open(out / "candidates.jsonl", "w") as fh:
        for scn in scenarios:
            try:
                cache = training.build_cache(scn)
            except ValueError:
                continue
            from . import planner as planner_mod
            sel = planner_mod.cost_and_select(cache.candidates, cache.gt_ctx,
                                              weights, beta)
            fh.write(json.dumps({
                "scenario_id": scn.scenario_id,
                "costs": [float(c) for c in sel.costs],
                "probs": [float(p) for p in sel.probs],
                "selected": sel.selected, "beta": beta,
            }, sort_keys=True) + "\n")


def cmd_eval_closed_loop(args) -> int:
    try:
        sim_cfg = simulator.SimConfig(t_sim=args.tsim,
                                      replan_interval=args.replan,
                                      beta=args.beta)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    scenarios = _load_scenarios(args.data)
    checkpoints = _checkpoint_runs(args.checkpoints)
    policies = [(REPLAY_RUN, simulator.ReplayStack()),
                (BASELINE_RUN, simulator.StackPolicy(use="none", beta=args.beta)),
                (ORACLE_RUN, simulator.StackPolicy(use="gt", beta=args.beta))]
    for name, cp in checkpoints:
        policies.append((name, simulator.StackPolicy(checkpoint=cp,
                                                     beta=args.beta)))
    out = _out_dir(args)

    import numpy as np
    scenario_rows = []
    summary_rows = []
    for name, policy in policies:
        metric_lists = {m: [] for m in simulator.METRIC_NAMES}
        conv = []
        count = 0
        for scn in scenarios:
            try:
                result = simulator.simulate(scn, policy, sim_cfg)
            except ValueError as exc:
                raise DataError(f"scenario {scn.scenario_id}: {exc}") from exc
            metrics = simulator.closed_loop_metrics(result, scn)
            row = {"scenario_id": scn.scenario_id, "run": name}
            row.update(metrics)
            row["converged_frac"] = float(np.mean([1.0 if c else 0.0
                                                   for c in result.converged]))
            scenario_rows.append(row)
            for m in simulator.METRIC_NAMES:
                metric_lists[m].append(metrics[m])
            conv.append(row["converged_frac"])
            count += 1
        summary = {"run": name, "scenarios": count}
        for m in simulator.METRIC_NAMES:
            vals = np.asarray(metric_lists[m], dtype=float)
            good = vals[np.isfinite(vals)]
            summary[m] = float(np.mean(good)) if good.size else float("nan")
        summary["converged_frac"] = float(np.mean(conv)) if conv else float("nan")
        summary_rows.append(summary)

    write_csv(out / "closed_loop_scenarios.csv", CLOSED_LOOP_SCENARIO_COLUMNS,
              scenario_rows)
    write_csv(out / "closed_loop_metrics.csv", CLOSED_LOOP_SUMMARY_COLUMNS,
              summary_rows)
    _write_resolved(out, "eval-closed-loop", _options_dict(args))
    for row in summary_rows:
        print(f"{row['run']}: trajectory_cost {row['trajectory_cost']:.4f} "
              f"deviation {row['deviation']:.4f}")
    return 0


def cmd_grad_check(args) -> int:
    targets = gradcheck.TARGETS if args.target == "all" else (args.target,)
    reports = [gradcheck.run_target(t, seed=args.seed, instances=args.instances)
               for t in targets]
    doc = reports[0] if len(reports) == 1 else reports
    text = json.dumps(doc, sort_keys=True)
    print(text)
    if args.out is not None:
        out = _out_dir(args)
        (out / "grad_check.json").write_text(text + "\n")
        _write_resolved(out, "grad-check", _options_dict(args))
    return 0 if all(r["passed"] for r in reports) else 4


def cmd_plot(args) -> int:
    from . import plots
    out = _out_dir(args)
    try:
        written = plots.render(args.metrics_csv, out)
    except OSError as exc:
        raise DataError(f"cannot read {args.metrics_csv}: {exc}") from exc
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    _write_resolved(out, "plot", _options_dict(args))
    for path in written:
        print(f"wrote {path}")
    return 0


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="drivestack",
        description="Differentiable driving stack: data, training, evaluation.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", default=None,
                       help="KEY=VALUE file; flags override it")
        p.add_argument("--out", default=None,
                       help="output directory (default $DRIVESTACK_OUT or .)")
        p.set_defaults(func=fn)
        return p

    p = add("gen-data", cmd_gen_data, "generate a synthetic scenario file")
    p.add_argument("--family", default="mixed",
                   choices=sorted(scenario_mod.FAMILIES)
                   + sorted(scenario_mod.FAMILY_GROUPS))
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dt", type=float, default=0.5)
    p.add_argument("--future-seconds", type=float, default=13.0,
                   help="logged future per scenario; 13 s covers a 10 s "
                        "closed-loop run plus the plan horizon")

    p = add("train", cmd_train, "train a predictor or tune cost weights")
    p.add_argument("--data", required=True, help="scenario file from gen-data")
    p.add_argument("--mode", default="standard",
                   choices=sorted(training.TRAIN_MODES))
    p.add_argument("--setting", default="rl", choices=sorted(training.SETTINGS))
    p.add_argument("--alphas", default=None,
                   help="three comma-separated loss weights, e.g. 1,100,1000")
    p.add_argument("--bias-offset", type=float, default=0.0,
                   help="meters of lateral offset injected into training targets")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--beta", type=float, default=1.0)
    p.add_argument("--perturb-weights", type=float, default=0.5,
                   help="cost_tuning initial psi perturbation scale")

    p = add("eval-open-loop", cmd_eval_open_loop,
            "score checkpoints against the No-prediction baseline")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoints", nargs="*", default=[])
    p.add_argument("--setting", default=None, choices=sorted(training.SETTINGS))
    p.add_argument("--beta", type=float, default=1.0)
    p.add_argument("--dump-candidates", action="store_true",
                   help="also write per-scenario candidate costs as JSONL")

    p = add("eval-closed-loop", cmd_eval_closed_loop,
            "log-replay simulation with replanning")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoints", nargs="*", default=[])
    p.add_argument("--tsim", type=float, default=10.0)
    p.add_argument("--replan", type=float, default=0.5)
    p.add_argument("--beta", type=float, default=1.0)

    p = add("grad-check", cmd_grad_check, "finite-difference gradient suites")
    p.add_argument("--target", default="all",
                   choices=gradcheck.TARGETS + ("all",))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--instances", type=int, default=None)

    p = add("plot", cmd_plot, "render SVG charts from a metrics CSV")
    p.add_argument("--metrics-csv", required=True)

    return parser


def _apply_config_file(parser, args, argv) -> None:
    """Overlay KEY=VALUE file entries onto options not given on the line."""
    if args.config is None:
        return
    try:
        lines = Path(args.config).read_text().splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {args.config}: {exc}") from exc
    entries = {}
    for i, line in enumerate(lines, 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{args.config}:{i}: expected KEY=VALUE, got {line!r}")
        key, _, value = line.partition("=")
        entries[key.strip().replace("-", "_")] = value.strip()

    sub_actions = [a for a in parser._subparsers._group_actions
                   if isinstance(a, argparse._SubParsersAction)]
    command_parser = sub_actions[0].choices[args.command]
    for action in command_parser._actions:
        if action.dest not in entries:
            continue
        raw = entries.pop(action.dest)
        given = any(tok == opt or tok.startswith(opt + "=")
                    for opt in action.option_strings for tok in argv)
        if given:
            continue
        if isinstance(action, argparse._StoreTrueAction):
            value = raw.lower() in ("1", "true", "yes", "on")
        elif action.nargs in ("*", "+"):
            value = raw.split()
        elif action.type is not None:
            try:
                value = action.type(raw)
            except ValueError as exc:
                raise ConfigError(
                    f"{args.config}: bad value {raw!r} for {action.dest}") from exc
        else:
            value = raw
        if action.choices is not None and value not in action.choices:
            raise ConfigError(f"{args.config}: {action.dest} must be one of "
                              f"{sorted(action.choices)}, got {value!r}")
        setattr(args, action.dest, value)
    unknown = [k for k in entries if k != "config"]
    if unknown:
        raise ConfigError(f"{args.config}: unknown keys for {args.command}: "
                          f"{', '.join(sorted(unknown))}")


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _apply_config_file(parser, args, argv)
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
