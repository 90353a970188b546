"""Command line entry point: ``modrl-ta <verb> [--config FILE] [--seed N] [--out DIR]``.

Verbs run a prefix of the pipeline and write its artifacts to ``--out``:

  build-table  offline logs and the position CTR table
  simulate     the above plus simulated transitions
  train        the above plus a trained ensemble checkpoint
  cem          the above plus searched fusion weights and their history
  evaluate     a full run (or a saved checkpoint) scored in the environment
  ablation     the five-row comparison

Exit codes: 0 success, 2 for usage or config errors, otherwise ``harness.STAGE_EXIT`` by stage.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import config as config_mod
from . import dfm, harness, pda
from .core import SeededRng, write_transition_log
from .moq import load_ensemble, save_ensemble

VERBS = ("build-table", "simulate", "train", "cem", "evaluate", "ablation")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="modrl-ta", description="Multi-objective traffic allocation experiments")
    p.add_argument("verb", choices=VERBS)
    p.add_argument("--config", type=Path, help="INI experiment config (defaults if omitted)")
    p.add_argument("--seed", type=int, help="override [experiment] seed")
    p.add_argument("--out", type=Path, default=Path("runs"), help="output directory")
    p.add_argument("--logs", type=Path, help="build-table: read offline logs from this CSV instead of generating them")
    p.add_argument("--checkpoint", type=Path, help="cem/evaluate: reuse a saved ensemble")
    p.add_argument("--weights", type=Path, help="evaluate: fusion weights JSON")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _load_config(args) -> config_mod.ExperimentConfig:
    try:
        cfg = config_mod.load(args.config) if args.config else config_mod.ExperimentConfig()
        if args.seed is not None:
            cfg = cfg.replace(experiment={"seed": args.seed})
        return cfg
    except (OSError, config_mod.ConfigError) as exc:
        raise harness.StageError("config", str(exc)) from exc


def _io(fn, *a):
    try:
        return fn(*a)
    except (OSError, ValueError, KeyError) as exc:
        raise harness.StageError("io", str(exc)) from exc


def _cold_start(cfg, out: Path, args, simulate: bool):
    if args.logs is not None:
        records, sessions = _io(pda.read_logs, args.logs), None
    else:
        records, sessions = harness.make_logs(cfg)
        _io(pda.write_logs, out / "logs.csv", records)
    table = harness.build_table(cfg, records)
    _io(pda.write_table, out / "table.csv", table)
    sim = []
    if simulate:
        if sessions is None:
            raise harness.StageError("simulate", "simulation needs generated sessions; omit --logs")
        sim = harness.simulate(cfg, sessions, table)
        ec = cfg.env_config
        _io(write_transition_log, out / "transitions_sim.log", sim, ec.objective_ids, ec.layout)
    return table, sim


def _ensemble(cfg, out: Path, args):
    if args.checkpoint is not None:
        return _io(load_ensemble, args.checkpoint)
    _, sim = _cold_start(cfg, out, args, simulate=cfg.ablation.data_mode != "real_only")
    tr = harness.train(cfg, sim)
    ec = cfg.env_config
    _io(write_transition_log, out / "transitions_real.log", tr.real, ec.objective_ids, ec.layout)
    _io(save_ensemble, out / "ensemble.npz", tr.ensemble)
    return tr.ensemble


def run(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = _load_config(args)
        out = args.out
        _io(out.mkdir, 0o777, True, True)
        _io((out / "config.ini").write_text, config_mod.dumps(cfg))
        if args.verb == "build-table":
            table, _ = _cold_start(cfg, out, args, simulate=False)
            print(f"table over {len(table)} positions -> {out / 'table.csv'}")
        elif args.verb == "simulate":
            _, sim = _cold_start(cfg, out, args, simulate=True)
            print(f"{len(sim)} simulated transitions -> {out / 'transitions_sim.log'}")
        elif args.verb == "train":
            _ensemble(cfg, out, args)
            print(f"checkpoint -> {out / 'ensemble.npz'}")
        elif args.verb == "cem":
            ens = _ensemble(cfg, out, args)
            res = harness.search_weights(cfg, ens)
            w = dict(zip(ens.ids, map(float, res.best_weights)))
            _io(dfm.write_history, out / "cem_history.csv", res.history, ens.ids)
            _io(dfm.write_weights, out / "weights.json", w, res.best_score)
            print("weights " + ", ".join(f"{k}={v:.4f}" for k, v in w.items()) + f"  fitness {res.best_score:.4f}")
        elif args.verb == "evaluate":
            if args.checkpoint is None:
                rows = [harness.run_experiment(cfg, out)]
            else:
                ens = _io(load_ensemble, args.checkpoint)
                w = _io(dfm.read_weights, args.weights) if args.weights else harness.policy_weights(cfg)
                try:
                    ev = harness.evaluate_policy(
                        ens, w, cfg.env_config, cfg.ablation.eval_episodes, SeededRng(cfg.experiment.seed, harness.EVALUATION)
                    )
                    combined = sum(c * ev.returns[k] for k, c in cfg.ablation.metric_weights.items())
                    rows = [
                        harness.MetricsRow(
                            f"{cfg.experiment.label}-s{cfg.experiment.seed}",
                            cfg.experiment.label,
                            ev.ctr_reward,
                            ev.cvr_reward,
                            combined,
                            {},
                            dict(w),
                        )
                    ]
                except (ValueError, KeyError) as exc:
                    raise harness.StageError("evaluate", str(exc)) from exc
                _io(harness.write_metrics, out / "metrics.csv", rows)
            print(harness.summary(rows))
        else:
            rows = harness.run_ablation(cfg, out)
            print(harness.summary(rows))
    except harness.StageError as exc:
        print(f"modrl-ta: error {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
