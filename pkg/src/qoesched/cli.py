"""Command-line entry point: ``qoesched <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import socket
import sys
from dataclasses import replace
from pathlib import Path


from . import auction, dqn, harness, index, model_based, protocol
from .sim import StreamSim

log = logging.getLogger("qoesched")


def _load_json(path) -> dict:
    if not path:
        return {}
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _out(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _pipeline_config(args) -> harness.PipelineConfig:
    data = _load_json(args.config)
    cfg = harness.PipelineConfig(**{k: v for k, v in data.items() if k in harness.PipelineConfig.__dataclass_fields__})
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def cmd_fit_kernel(args) -> int:
    cfg = _pipeline_config(args)
    if args.trace_dps:
        cfg = replace(cfg, trace_dps=args.trace_dps)
    kernel, traces = harness.fit_kernel_two_stage(cfg)
    out = _out(args)
    model_based.save_client_kernel(kernel, out / "kernel.txt")
    with open(out / "system_states.txt", "w", encoding="utf-8") as fh:
        for s in traces.system_states():
            fh.write(" ".join(map(str, s)) + "\n")
    print(f"kernel: {out / 'kernel.txt'} ({len(traces.client)} client transitions)")
    return 0


def _read_states(path) -> list[tuple[int, ...]]:
    with open(path, encoding="utf-8") as fh:
        return [tuple(int(x) for x in line.split()) for line in fh if line.strip()]


def cmd_solve_mdp(args) -> int:
    cfg = _pipeline_config(args)
    kernel = model_based.load_client_kernel(args.kernel)
    traces = model_based.TraceLog(system=[(s, frozenset(), s) for s in _read_states(args.states)])
    art = harness.build_model_based(cfg, kernel, traces)
    out = _out(args)
    model_based.save_model(out / "model.txt", art.sp, art.actions, art.system, art.solution, cfg.gamma)
    print(f"model: {out / 'model.txt'} (K={len(art.sp)}, {art.solution.iterations} sweeps, residual {art.solution.residual:.2e})")
    return 0


def cmd_solve_auction(args) -> int:
    data = _load_json(args.config)
    kernel = model_based.load_client_kernel(args.kernel)
    n_clients = data.get("n_clients", 6)
    gamma = data.get("gamma", 0.95)
    res = harness.solve_auction(
        kernel, n_clients=n_clients, gamma=gamma, seed=args.seed or 0,
        damping=data.get("damping", 0.3), outer_iters=data.get("outer_iters", 30),
        horizon=data.get("horizon", 2000), tol=data.get("tol", 1e-3),
    )
    out = _out(args)
    auction.save_solution(out / "auction.txt", res.solution, res.rho, gamma, n_clients - 1, 2)
    status = "converged" if res.converged else "not converged"
    print(f"auction: {out / 'auction.txt'} ({status}; L1 trace {', '.join(f'{x:.3g}' for x in res.l1_trace)})")
    return 0


def cmd_build_index(args) -> int:
    sol, _, _ = auction.load_solution(args.auction)
    table = harness.index_from_solution(sol)
    out = _out(args)
    index.save_index(out / "index.csv", table)
    print(f"index: {out / 'index.csv'} ({table.n_nonminimal} non-minimal states)")
    return 0


def cmd_train_dqn(args) -> int:
    data = _load_json(args.config)
    steps = args.steps or data.pop("total_steps", 200_000)
    n_clients = data.pop("n_clients", 6)
    res = harness.train_dqn(steps, seed=args.seed or 0, n_clients=n_clients, **data)
    out = _out(args)
    dqn.save_checkpoint(out / "checkpoint.txt", res.params, res.steps, dqn.TrainConfig.compressed(steps, **data))
    with open(out / "learning_curve.csv", "w", encoding="utf-8") as fh:
        fh.write("episode,mean_reward\n")
        for i, r in enumerate(res.curve):
            fh.write(f"{i},{r:.6f}\n")
    print(f"checkpoint: {out / 'checkpoint.txt'} after {res.steps} steps")
    return 0


def _experiment_config(args) -> harness.ExperimentConfig:
    overrides = {
        "seed": args.seed, "scenario": getattr(args, "scenario", None), "policy": getattr(args, "policy", None),
        "episodes": getattr(args, "episodes", None), "dps_per_episode": getattr(args, "dps", None),
    }
    if getattr(args, "via_protocol", False):
        overrides["via_protocol"] = True
    if args.config:
        return harness.ExperimentConfig.from_file(args.config, **overrides)
    return harness.ExperimentConfig(**{k: v for k, v in overrides.items() if v is not None})


def cmd_run(args) -> int:
    config = _experiment_config(args)
    bundle = harness.run_experiment(config, _out(args))
    s = bundle.summary
    print(f"{s['policy']} on {s['scenario']}: mean QoE {s['mean_qoe']:.4f}, P[QoE=5] {s['p_qoe5']:.4f}, "
          f"mean stall {s['mean_stall_duration']:.2f} s ({s['n_samples']} samples)")
    return 0


def cmd_compare(args) -> int:
    summaries = []
    for path in args.summaries:
        summaries.extend(harness.read_summaries(path))
    print(harness.format_table(harness.compare(summaries)))
    return 0


def cmd_serve_env(args) -> int:
    config = _experiment_config(args)
    sim_cfg, hook = harness.scenario_setup(config.scenario, config.policy, config.period)
    env_rng, _ = harness.episode_streams(config.seed, 1)[0]
    with socket.create_server((args.host, args.port)) as server:
        print(f"listening on {args.host}:{server.getsockname()[1]}", flush=True)
        conn, _ = server.accept()
        with conn:
            results = protocol.serve_environment(StreamSim(sim_cfg, env_rng), protocol.Channel(conn), config.dps_per_episode, hook, args.timeout)
    rows = [r for res in results for r in res.rows]
    from .sim import write_transcript_csv

    write_transcript_csv(rows, _out(args) / "transcript.csv")
    print(f"served {len(results)} DPs")
    return 0


def cmd_run_controller(args) -> int:
    config = _experiment_config(args)
    policy, kernel = harness.build_policy(config)
    _, pol_rng = harness.episode_streams(config.seed, 1)[0]
    with socket.create_connection((args.host, args.port)) as conn:
        ctl = protocol.run_controller(policy, protocol.Channel(conn), pol_rng, kernel)
    errors = sum(s != "OK" for s in ctl.statuses)
    print(f"sent {len(ctl.commands)} commands, {errors} error responses")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qoesched", description="QoE-aware priority scheduling experiments")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="JSON file of settings")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out-dir", default="out")
        sp.set_defaults(fn=fn)
        return sp

    sp = add("train-dqn", cmd_train_dqn, "train the model-free scheduler")
    sp.add_argument("--steps", type=int, help="environment steps (default 200000)")
    sp = add("fit-kernel", cmd_fit_kernel, "collect traces and fit the client kernel")
    sp.add_argument("--trace-dps", type=int)
    sp = add("solve-mdp", cmd_solve_mdp, "build and solve the frequent-state system MDP")
    sp.add_argument("--kernel", required=True)
    sp.add_argument("--states", required=True, help="system_states.txt from fit-kernel")
    sp = add("solve-auction", cmd_solve_auction, "mean-field bid solution")
    sp.add_argument("--kernel", required=True)
    sp = add("build-index", cmd_build_index, "index table from an auction solution")
    sp.add_argument("--auction", required=True)

    def experiment_args(sp):
        sp.add_argument("--scenario", choices=harness.SCENARIOS)
        sp.add_argument("--policy", choices=harness.POLICIES)
        sp.add_argument("--episodes", type=int)
        sp.add_argument("--dps", type=int, help="DPs per episode")

    sp = add("run", cmd_run, "run an experiment and write metrics")
    experiment_args(sp)
    sp.add_argument("--via-protocol", action="store_true")
    sp = add("compare", cmd_compare, "rank summary records")
    sp.add_argument("summaries", nargs="+", help="summary.jsonl files")
    for name, fn, help_ in (
        ("serve-env", cmd_serve_env, "serve one episode over TCP"),
        ("run-controller", cmd_run_controller, "drive a served environment"),
    ):
        sp = add(name, fn, help_)
        experiment_args(sp)
        sp.add_argument("--host", default="127.0.0.1")
        sp.add_argument("--port", type=int, default=7700)
        if name == "serve-env":
            sp.add_argument("--timeout", type=float, default=None, help="seconds to wait for each command")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (ValueError, FileNotFoundError, protocol.ProtocolError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
