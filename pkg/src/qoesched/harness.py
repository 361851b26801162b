"""Experiments: scenarios, policy construction, training pipelines and metrics."""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import auction, dqn, index, model_based
from .baselines import BASELINES, PolicyContext
from .envs import StreamEnv
from .mdp import label_of
from .model_based import TraceLog, canonical
from .protocol import run_over_socketpair
from .scheduling import BinLayout, Scheduler
from .sim import GOOD_BIN, TRANSCRIPT_HEADER, SimConfig, StepResult, StreamSim, format_row

log = logging.getLogger(__name__)

SCENARIOS = ("static6", "dynamic4to6", "vanilla", "channel_bins")
POLICIES = (
    "vanilla", "round_robin", "random", "greedy_buffer", "reward_greedy",
    "model_based", "model_free", "auction", "index",
)
QOE_TOP = 5.0 - 1e-6
DYNAMIC_SCHEDULE = (6, 5, 4, 6)
# (good-bin clients, bad-bin clients) per phase
CHANNEL_SCHEDULE = ((6, 3), (5, 4), (4, 5), (3, 6))


@dataclass
class ExperimentConfig:
    scenario: str = "static6"
    policy: str = "round_robin"
    episodes: int = 20
    dps_per_episode: int = 200
    seed: int = 0
    period: int = 50  # DPs between population changes
    via_protocol: bool = False
    kernel: str | None = None
    model: str | None = None
    checkpoint: str | None = None
    index_table: str | None = None
    auction: str | None = None

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}")
        if self.policy not in POLICIES:
            raise ValueError(f"unknown policy {self.policy!r}")
        if self.episodes < 1 or self.dps_per_episode < 1 or self.period < 1:
            raise ValueError("episodes, dps_per_episode and period must be positive")

    @classmethod
    def from_file(cls, path, **overrides) -> "ExperimentConfig":
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        data.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**data)


# -- scenarios ----------------------------------------------------------------------


def scenario_setup(scenario: str, policy: str = "", period: int = 50) -> tuple[SimConfig, Callable[[StreamSim, int], None]]:
    """Simulator config and a hook applied at every DP boundary."""

    def nothing(sim, t):
        pass

    if scenario == "static6":
        cfg, hook = SimConfig(), nothing
    elif scenario == "vanilla":
        cfg, hook = SimConfig(bins=(replace(GOOD_BIN, single_queue=True),)), nothing
    elif scenario == "dynamic4to6":
        cfg = SimConfig()

        def hook(sim, t):
            if t % period == 0:
                sim.set_population(DYNAMIC_SCHEDULE[(t // period) % len(DYNAMIC_SCHEDULE)])

    elif scenario == "channel_bins":
        cfg = SimConfig(bins=(GOOD_BIN, GOOD_BIN), n_clients=9, max_clients=9)

        def hook(sim, t):
            if t == 0:
                sim.set_bin_quality(1, "bad")
            if t % period == 0:
                good, _ = CHANNEL_SCHEDULE[(t // period) % len(CHANNEL_SCHEDULE)]
                ids = sorted(c.id for c in sim.clients)
                sim.assign_bins({cid: (0 if i < good else 1) for i, cid in enumerate(ids)})

    else:
        raise ValueError(f"unknown scenario {scenario!r}")
    if policy == "vanilla":
        cfg = replace(cfg, bins=tuple(replace(b, single_queue=True) for b in cfg.bins))
    return cfg, hook


# -- policies -----------------------------------------------------------------------


def _need(path, what):
    if not path:
        raise ValueError(f"policy needs a {what} artifact")
    if not os.path.exists(path):
        raise FileNotFoundError(f"{what} artifact not found: {path}")
    return path


def build_policy(config: ExperimentConfig):
    """Returns ``(policy, kernel)``; ``policy`` is ``None`` for vanilla."""
    name = config.policy
    if name == "vanilla":
        return None, None
    if name == "reward_greedy":
        return BASELINES[name], model_based.load_client_kernel(_need(config.kernel, "kernel"))
    if name in BASELINES:
        return BASELINES[name], None
    if name == "model_based":
        sp, actions, sys_kernel, sol, gamma = model_based.load_model(_need(config.model, "model"))
        kernel = model_based.load_client_kernel(config.kernel) if config.kernel else None
        return model_based.ModelBasedPolicy.from_solution(sp, actions, sys_kernel, sol, gamma, kernel), None
    if name == "model_free":
        params, _, _ = dqn.load_checkpoint(_need(config.checkpoint, "checkpoint"))
        return dqn.DqnPolicy(params), None
    if name == "auction":
        sol, _, _ = auction.load_solution(_need(config.auction, "auction"))
        return auction.AuctionPolicy(sol), None
    if name == "index":
        return index.IndexPolicy(index.load_index(_need(config.index_table, "index table"))), None
    raise ValueError(f"unknown policy {name!r}")


# -- running --------------------------------------------------------------------------


def episode_streams(seed: int, episodes: int) -> list[tuple[np.random.Generator, np.random.Generator]]:
    """(environment, policy) generators per episode; shared across policies."""
    out = []
    for child in np.random.SeedSequence(seed).spawn(episodes):
        env_ss, pol_ss = child.spawn(2)
        out.append((np.random.default_rng(env_ss), np.random.default_rng(pol_ss)))
    return out


def run_episode(
    sim: StreamSim,
    policy,
    n_dps: int,
    rng: np.random.Generator,
    hook: Callable[[StreamSim, int], None] | None = None,
    kernel=None,
) -> list[StepResult]:
    hook = hook or (lambda s, t: None)
    layout = [BinLayout(b.n_hi, b.single_queue) for b in sim.config.bins]
    scheduler = Scheduler(policy, layout, rng, kernel)
    hook(sim, 0)
    results = []
    for t in range(n_dps):
        obs = sim.observe()
        action = scheduler.decide(obs, {c.id: c.bin for c in sim.clients}, t)
        results.append(sim.step_dp(action))
        hook(sim, t + 1)
    return results


@dataclass
class Sample:
    episode: int
    dp_index: int
    client_id: int
    bin: int
    buffer: float
    stall_count: int
    qoe: float


@dataclass
class MetricsBundle:
    samples: list[Sample]
    stalls: list[tuple[int, int, float, float]]  # episode, client, start, end
    summary: dict
    transcript: list[tuple[int, tuple]] = field(default_factory=list, repr=False)

    @property
    def qoe(self) -> np.ndarray:
        return np.array([s.qoe for s in self.samples])

    def client_averages(self) -> list[float]:
        groups: dict[tuple[int, int], list[float]] = {}
        for s in self.samples:
            groups.setdefault((s.episode, s.client_id), []).append(s.qoe)
        return [float(np.mean(v)) for _, v in sorted(groups.items())]

    def cdfs(self) -> dict[str, list[tuple[float, float]]]:
        durations = stall_durations(self.stalls)
        out = {
            "qoe": compute_cdf(self.qoe.tolist()),
            "client_average_qoe": compute_cdf(self.client_averages()),
            "buffer": compute_cdf([s.buffer for s in self.samples]),
        }
        if durations:
            out["stall_duration"] = compute_cdf(durations)
        return out


def stall_durations(stalls: Iterable[tuple[int, int, float, float]]) -> list[float]:
    """Whole stall lengths, joining pieces split at DP boundaries."""
    merged: dict[tuple[int, int], list[list[float]]] = {}
    for ep, cid, start, end in stalls:
        runs = merged.setdefault((ep, cid), [])
        if runs and abs(runs[-1][1] - start) < 1e-9:
            runs[-1][1] = end
        else:
            runs.append([start, end])
    return [round(e - s, 9) for key in sorted(merged) for s, e in merged[key]]


def summarize(samples: Sequence[Sample], stalls, config: ExperimentConfig) -> dict:
    q = np.array([s.qoe for s in samples])
    per_episode: dict[int, list[float]] = {}
    for s in samples:
        per_episode.setdefault(s.episode, []).append(s.qoe)
    durations = stall_durations(stalls)
    return {
        "policy": config.policy,
        "scenario": config.scenario,
        "seed": config.seed,
        "episodes": config.episodes,
        "dps_per_episode": config.dps_per_episode,
        "via_protocol": config.via_protocol,
        "n_samples": int(len(q)),
        "mean_qoe": float(q.mean()),
        "p_qoe5": float((q >= QOE_TOP).mean()),
        "mean_stall_duration": float(np.mean(durations)) if durations else 0.0,
        "episode_means": [float(np.mean(per_episode[e])) for e in sorted(per_episode)],
    }


def run_experiment(
    config: ExperimentConfig,
    out_dir: str | os.PathLike | None = None,
    policy=None,
    kernel=None,
) -> MetricsBundle:
    """Run every episode and optionally write transcript, metrics and summary.

    ``policy`` overrides the artifact-based construction (useful in-process).
    """
    if policy is None and config.policy != "vanilla":
        policy, kernel = build_policy(config)
    sim_cfg, hook = scenario_setup(config.scenario, config.policy, config.period)
    if sim_cfg.bins[0].single_queue:
        policy = None  # nothing to decide
    samples, stalls, transcript = [], [], []
    for ep, (env_rng, pol_rng) in enumerate(episode_streams(config.seed, config.episodes)):
        sim = StreamSim(sim_cfg, env_rng)
        if config.via_protocol:
            results, _ = run_over_socketpair(sim, policy, config.dps_per_episode, pol_rng, hook, kernel)
        else:
            results = run_episode(sim, policy, config.dps_per_episode, pol_rng, hook, kernel)
        for res in results:
            for row in res.rows:
                transcript.append((ep, row))
                samples.append(Sample(ep, row.dp_index, row.client_id, row.bin, row.buffer, row.stall_count, row.qoe))
            stalls.extend((ep, s.client_id, s.start, s.end) for s in res.stalls)
    bundle = MetricsBundle(samples, stalls, summarize(samples, stalls, config), transcript)
    if out_dir is not None:
        write_outputs(bundle, Path(out_dir))
    return bundle


METRICS_HEADER = ("episode", "dp_index", "client_id", "bin", "buffer", "stall_count", "qoe")
STALLS_HEADER = ("episode", "client_id", "start", "end")


def write_outputs(bundle: MetricsBundle, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "transcript.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("episode",) + TRANSCRIPT_HEADER)
        for ep, row in bundle.transcript:
            w.writerow([ep] + format_row(row))
    with open(out / "metrics.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for s in bundle.samples:
            w.writerow([s.episode, s.dp_index, s.client_id, s.bin, f"{s.buffer:.6f}", s.stall_count, f"{s.qoe:.6f}"])
    with open(out / "stalls.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(STALLS_HEADER)
        for ep, cid, start, end in bundle.stalls:
            w.writerow([ep, cid, f"{start:.9f}", f"{end:.9f}"])
    with open(out / "summary.jsonl", "a", encoding="utf-8") as fh:
        fh.write(json.dumps(bundle.summary, sort_keys=True) + "\n")


def recompute_summary(out_dir, config: ExperimentConfig) -> dict:
    """Summary rebuilt from the metrics and stall CSVs alone."""
    out = Path(out_dir)
    with open(out / "metrics.csv", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        next(reader)
        samples = [Sample(int(r[0]), int(r[1]), int(r[2]), int(r[3]), float(r[4]), int(r[5]), float(r[6])) for r in reader]
    with open(out / "stalls.csv", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        next(reader)
        stalls = [(int(r[0]), int(r[1]), float(r[2]), float(r[3])) for r in reader]
    return summarize(samples, stalls, config)


def read_summaries(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def compute_cdf(samples: Sequence[float]) -> list[tuple[float, float]]:
    if len(samples) == 0:
        raise ValueError("empty sample")
    values, counts = np.unique(np.asarray(samples, dtype=float), return_counts=True)
    frac = np.cumsum(counts) / counts.sum()
    frac[-1] = 1.0
    return [(float(v), float(f)) for v, f in zip(values, frac)]


def compare(summaries: Sequence[dict], reference: int = 0) -> list[dict]:
    """Rank policies by mean QoE with per-episode deltas against ``reference``."""
    if len(summaries) < 2:
        raise ValueError("need at least two summaries")
    keys = ("scenario", "seed", "episodes", "dps_per_episode")
    base = summaries[reference]
    for s in summaries:
        if any(s[k] != base[k] for k in keys):
            raise ValueError("summaries come from different scenarios or seeds")
    ref = np.array(base["episode_means"])
    rows = []
    for s in summaries:
        deltas = np.array(s["episode_means"]) - ref
        rows.append(
            {
                "policy": s["policy"],
                "mean_qoe": s["mean_qoe"],
                "p_qoe5": s["p_qoe5"],
                "mean_stall_duration": s["mean_stall_duration"],
                "mean_delta": float(deltas.mean()),
                "deltas": deltas.tolist(),
            }
        )
    rows.sort(key=lambda r: -r["mean_qoe"])
    return rows


def format_table(rows: Sequence[dict]) -> str:
    lines = [f"{'policy':<16}{'mean_qoe':>10}{'p_qoe5':>9}{'stall_s':>9}{'delta':>9}"]
    for r in rows:
        lines.append(
            f"{r['policy']:<16}{r['mean_qoe']:>10.4f}{r['p_qoe5']:>9.4f}"
            f"{r['mean_stall_duration']:>9.2f}{r['mean_delta']:>+9.4f}"
        )
    return "\n".join(lines)


# -- traces and training pipelines ---------------------------------------------------------


def collect_traces(
    policies: dict,
    n_dps: int,
    seed: int,
    n_clients: int = 6,
    episode_len: int = 200,
    kernel=None,
) -> TraceLog:
    """Run each policy for ``n_dps // len(policies)`` DPs and log transitions.

    ``"vanilla"`` (value ``None``) runs the single-queue configuration and
    contributes joint states only, since it has no priority bit.
    """
    log_ = TraceLog()
    per = max(1, n_dps // len(policies))
    ss = np.random.SeedSequence(seed)
    for (name, policy), child in zip(policies.items(), ss.spawn(len(policies))):
        vanilla = policy is None
        bins = (replace(GOOD_BIN, single_queue=True),) if vanilla else (GOOD_BIN,)
        cfg = SimConfig(bins=bins, n_clients=n_clients)
        episodes = math.ceil(per / episode_len)
        for ep_ss in child.spawn(episodes):
            env_ss, pol_ss = ep_ss.spawn(2)
            sim = StreamSim(cfg, np.random.default_rng(env_ss))
            ctx = PolicyContext(0, np.random.default_rng(pol_ss), kernel)
            labels = [label_of(o.buffer, o.stalls, o.qoe) for o in sim.observe()]
            for t in range(min(episode_len, per)):
                obs = sim.observe()
                if vanilla:
                    hi = frozenset()
                else:
                    ctx.dp_index = t
                    hi = frozenset(policy(obs, ctx, GOOD_BIN.n_hi))
                sim.step_dp({0: hi})
                nxt_obs = sim.observe()
                nxt = [label_of(o.buffer, o.stalls, o.qoe) for o in nxt_obs]
                if not vanilla:
                    log_.client.extend(
                        (labels[i], int(o.client_id in hi), nxt[i]) for i, o in enumerate(obs)
                    )
                log_.system.append((canonical(labels), hi, canonical(nxt)))
                labels = nxt
        log.info("collected %d DPs under %s", per, name)
    return log_


@dataclass
class PipelineConfig:
    trace_dps: int = 20_000
    n_clients: int = 6
    n_hi: int = 2
    frequent_states: int = 1000
    samples_per: int = 100
    lookahead_samples: int = 400
    gamma: float = 0.95
    seed: int = 0


def fit_kernel_two_stage(cfg: PipelineConfig) -> tuple[model_based.ClientKernel, TraceLog]:
    """Traces from the fixed baselines first, then reward-greedy driven by
    the kernel those traces produce; the final kernel uses everything."""
    stage1 = {name: BASELINES[name] for name in ("round_robin", "greedy_buffer", "random")}
    stage1["vanilla"] = None
    share = cfg.trace_dps // 5
    traces = collect_traces(stage1, share * 4, cfg.seed, cfg.n_clients)
    first = model_based.fit_client_kernel(traces)
    stage2 = collect_traces({"reward_greedy": BASELINES["reward_greedy"]}, share, cfg.seed + 1, cfg.n_clients, kernel=first)
    traces.extend(stage2)
    return model_based.fit_client_kernel(traces), traces


@dataclass
class ModelBasedArtifacts:
    kernel: model_based.ClientKernel
    sp: model_based.FrequentStateSet
    actions: list
    system: model_based.SystemKernel
    solution: model_based.ValueSolution
    policy: model_based.ModelBasedPolicy


def build_model_based(cfg: PipelineConfig, kernel=None, traces: TraceLog | None = None) -> ModelBasedArtifacts:
    if kernel is None or traces is None:
        kernel, traces = fit_kernel_two_stage(cfg)
    states = traces.system_states()
    k = min(cfg.frequent_states, len(set(states)))
    sp = model_based.top_states(states, k)
    actions = model_based.default_actions(cfg.n_clients, cfg.n_hi)
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(3)[2])
    system = model_based.synthesize_system_kernel(kernel, sp, actions, cfg.samples_per, rng)
    solution = model_based.value_iteration(system, cfg.gamma)
    policy = model_based.ModelBasedPolicy.from_solution(
        sp, actions, system, solution, cfg.gamma, kernel, lookahead_samples=cfg.lookahead_samples
    )
    return ModelBasedArtifacts(kernel, sp, actions, system, solution, policy)


def solve_auction(
    kernel,
    n_clients: int = 6,
    gamma: float = 0.95,
    seed: int = 0,
    damping: float = 0.3,
    outer_iters: int = 30,
    horizon: int = 2000,
    tol: float = 1e-3,
) -> auction.FixedPointResult:
    bids = auction.bid_grid()
    rho0 = np.full(len(bids), 1.0 / len(bids))
    return auction.mfg_fixed_point(
        kernel, rho0, SimConfig(n_clients=n_clients), damping, outer_iters,
        np.random.default_rng(seed), gamma, tol, horizon,
    )


def index_from_solution(solution: auction.MfgSolution) -> index.IndexTable:
    """Rank by willingness to pay; states that gain nothing tie at rank 0."""
    return index.build_index(np.clip(solution.gap, 0.0, None))


def train_dqn(total_steps: int = 200_000, seed: int = 0, n_clients: int = 6, **overrides) -> dqn.TrainResult:
    config = dqn.TrainConfig.compressed(total_steps, **overrides)
    env = StreamEnv(SimConfig(n_clients=n_clients), capacity=6, seed=seed)
    return dqn.train(env, config, np.random.default_rng(seed), log_every=max(1, config.episodes // 10))
