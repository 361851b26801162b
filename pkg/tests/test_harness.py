import json

import numpy as np
import pytest

from qoesched import harness
from qoesched.baselines import BASELINES
from qoesched.harness import ExperimentConfig, compare, compute_cdf, run_experiment, stall_durations
from qoesched.model_based import fit_client_kernel
from qoesched.sim import StreamSim


def test_compute_cdf_examples():
    assert compute_cdf([5, 5, 5]) == [(5.0, 1.0)]
    assert compute_cdf([1, 3]) == [(1.0, 0.5), (3.0, 1.0)]
    rng = np.random.default_rng(0)
    cdf = compute_cdf(rng.random(101).tolist())
    assert cdf[-1][1] == 1.0
    assert all(a[1] < b[1] for a, b in zip(cdf, cdf[1:]))
    with pytest.raises(ValueError):
        compute_cdf([])


def test_sample_count_and_outputs(tmp_path):
    cfg = ExperimentConfig(scenario="static6", policy="round_robin", episodes=5, dps_per_episode=50)
    bundle = run_experiment(cfg, tmp_path)
    assert bundle.summary["n_samples"] == 6 * 5 * 50 == 1500
    with open(tmp_path / "metrics.csv") as fh:
        assert sum(1 for _ in fh) == 1501
    assert harness.recompute_summary(tmp_path, cfg) == pytest.approx(bundle.summary)
    assert harness.read_summaries(tmp_path / "summary.jsonl") == [json.loads(json.dumps(bundle.summary))]
    assert set(bundle.cdfs()) >= {"qoe", "client_average_qoe", "buffer"}


def test_deterministic_summary():
    cfg = ExperimentConfig(policy="random", episodes=2, dps_per_episode=20, seed=3)
    assert run_experiment(cfg).summary == run_experiment(cfg).summary


def test_vanilla_ignores_policy():
    a = run_experiment(ExperimentConfig(scenario="vanilla", policy="round_robin", episodes=1, dps_per_episode=10))
    b = run_experiment(ExperimentConfig(scenario="vanilla", policy="random", episodes=1, dps_per_episode=10))
    assert [r for _, r in a.transcript] == [r for _, r in b.transcript]
    assert {r.queue for _, r in a.transcript} == {0}


def test_vanilla_policy_on_static():
    bundle = run_experiment(ExperimentConfig(policy="vanilla", episodes=1, dps_per_episode=5))
    assert {r.queue for _, r in bundle.transcript} == {0}


def test_dynamic_population():
    cfg = ExperimentConfig(scenario="dynamic4to6", episodes=1, dps_per_episode=16, period=4)
    bundle = run_experiment(cfg)
    per_dp = {}
    for s in bundle.samples:
        per_dp[s.dp_index] = per_dp.get(s.dp_index, 0) + 1
    assert [per_dp[t] for t in (0, 4, 8, 12)] == [6, 5, 4, 6]


def test_channel_bins_layout():
    sim_cfg, hook = harness.scenario_setup("channel_bins", "round_robin", period=5)
    sim = StreamSim(sim_cfg, np.random.default_rng(0))
    hook(sim, 0)
    assert sim.bin_quality == ["good", "bad"]
    assert [len(sim.clients_in_bin(b)) for b in (0, 1)] == [6, 3]
    hook(sim, 5)
    assert [len(sim.clients_in_bin(b)) for b in (0, 1)] == [5, 4]


def test_compare_rows_and_deltas():
    base = dict(scenario="static6", seed=0, episodes=3, dps_per_episode=10, mean_stall_duration=0.0)
    a = {**base, "policy": "a", "mean_qoe": 3.0, "p_qoe5": 0.1, "episode_means": [3.0, 3.0, 3.0]}
    b = {**base, "policy": "b", "mean_qoe": 3.5, "p_qoe5": 0.2, "episode_means": [3.4, 3.5, 3.6]}
    rows = compare([a, b])
    assert [r["policy"] for r in rows] == ["b", "a"]
    assert all(d > 0 for d in rows[0]["deltas"])
    same = compare([a, dict(a)])
    assert all(d == 0 for r in same for d in r["deltas"])
    assert "policy" in harness.format_table(rows)
    with pytest.raises(ValueError):
        compare([a, {**b, "seed": 1}])


def test_stall_durations_merge_split_pieces():
    stalls = [(0, 1, 5.0, 10.0), (0, 1, 10.0, 12.5), (0, 1, 30.0, 31.0), (1, 1, 10.0, 11.0)]
    assert stall_durations(stalls) == [7.5, 1.0, 1.0]


def test_config_file(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"policy": "random", "episodes": 2}))
    cfg = ExperimentConfig.from_file(path, seed=4)
    assert (cfg.policy, cfg.episodes, cfg.seed) == ("random", 2, 4)
    path.write_text(json.dumps({"bogus": 1}))
    with pytest.raises(ValueError):
        ExperimentConfig.from_file(path)
    with pytest.raises(ValueError):
        ExperimentConfig(policy="nope")


def test_missing_artifact():
    with pytest.raises(ValueError):
        harness.build_policy(ExperimentConfig(policy="index"))
    with pytest.raises(FileNotFoundError):
        harness.build_policy(ExperimentConfig(policy="auction", auction="/nonexistent"))


def test_collect_traces_shapes():
    traces = harness.collect_traces({"rr": BASELINES["round_robin"], "vanilla": None}, 40, seed=0, episode_len=10)
    assert len(traces.system) == 40
    assert len(traces.client) == 20 * 6
    assert all(len(s) == 6 for s in traces.system_states())
    kernel = fit_client_kernel(traces)
    assert np.allclose(kernel.probs.sum(axis=2), 1.0)


def test_small_pipeline_end_to_end():
    cfg = harness.PipelineConfig(trace_dps=500, frequent_states=40, samples_per=10)
    art = harness.build_model_based(cfg)
    assert len(art.sp) == 40
    res = harness.solve_auction(art.kernel, outer_iters=2, horizon=10)
    table = harness.index_from_solution(res.solution)
    gain = np.clip(res.solution.gap, 0.0, None)
    assert table.n_nonminimal == int((gain > gain.min() + 1e-9).sum())
    for policy in (art.policy, harness.auction.AuctionPolicy(res.solution), harness.index.IndexPolicy(table)):
        bundle = run_experiment(ExperimentConfig(episodes=1, dps_per_episode=5), policy=policy)
        assert bundle.summary["n_samples"] == 30
