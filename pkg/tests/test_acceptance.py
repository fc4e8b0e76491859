"""Acceptance suite: one test per criterion, one summary line each.

Run with ``pytest tests/test_acceptance.py -s`` (lines are also collected into
the terminal summary). Criterion 8 runs its full protocol only when
``GROUNDPRIM_FULL_ACCEPTANCE=1``; otherwise it measures throughput, projects
the protocol runtime, and reports the result as an expected failure.
"""

import os
import time
from dataclasses import replace
from statistics import median

import numpy as np
import pytest

from groundprim import harness
from groundprim.agent import explore_probabilities, select_eval, select_explore
from groundprim.env import (SUCCESS_THRESHOLD, BinGeometry, EnvState, compute_reward, is_success,
                            make_goal, settle)
from groundprim.harness import RunConfig, Trainer, evaluate, train
from groundprim.nn import MLP, PointEncoder
from groundprim.objects import ObjectInstance, simple_objects
from groundprim.primitives import (K, PrimitiveAction, PrimitiveConstants, PrimitiveType as P,
                                   execute, map_regressed_location)
from groundprim.registration import registration_study
from groundprim.tensor import Tensor

RESULTS: dict = {}
METHODS = ("ours", "pdqn", "raps", "hacman_logit")


def report(n, ok, detail, status=None):
    status = status or ("PASS" if ok else "FAIL")
    RESULTS[n] = (status, detail)
    print(f"\ncriterion {n:>2}: {status:<4} {detail}")


# ---------------------------------------------------------------------------
# 1. autodiff against central differences

def _rel_err(net, x, w):
    net.zero_grad()
    (net(x) * w).sum().backward()
    analytic, numeric = [], []
    h = 1e-5
    for p in net.parameters():
        analytic.append(p.grad.ravel().copy())
        g = np.empty(p.data.size)
        flat = p.data.reshape(-1)
        for j in range(flat.size):
            old = flat[j]
            flat[j] = old + h
            up = (net(x) * w).sum().item()
            flat[j] = old - h
            down = (net(x) * w).sum().item()
            flat[j] = old
            g[j] = (up - down) / (2 * h)
        numeric.append(g)
    a, n = np.concatenate(analytic), np.concatenate(numeric)
    return np.linalg.norm(a - n) / max(np.linalg.norm(a), np.linalg.norm(n), 1e-300)


def test_criterion_01_autodiff():
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    errs = []
    for j in range(50):
        if j % 2:
            net = MLP([4, int(rng.integers(3, 7)), 3], rng, out_act=[None, "tanh"][j % 4 == 1])
            x = Tensor(rng.normal(size=(5, 4)))
        else:
            net = PointEncoder(7, rng, (4, 6), (5,), 3)
            x = Tensor(rng.normal(size=(2, 6, 7)))
        w = rng.normal(size=net(x).shape)
        errs.append(_rel_err(net, x, w))
    dt = time.perf_counter() - t0
    ok = max(errs) < 1e-4 and dt < 60
    report(1, ok, f"max relative error {max(errs):.2e} over 50 networks, {dt:.1f}s")
    assert ok


# ---------------------------------------------------------------------------
# 2. exploration sampling

def test_criterion_02_sampling():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    maps = [
        (np.array([[0.0, 0.1 * np.log(2)]]), np.array([[True, True]]), 0.0),
        (np.array([[0.3, -0.1, 0.0], [0.05, 0.2, 9.0]]),
         np.array([[True, True, True], [True, True, False]]), 0.0),
        (rng.normal(0, 0.1, (8, K)), rng.random((8, K)) < 0.6, 0.1),
    ]
    draws, worst, masked_hits = 100_000, 0.0, 0
    for q, mask, eps in maps:
        p = explore_probabilities(q, mask, 0.1, eps)
        counts = np.zeros(q.shape)
        for _ in range(draws):
            counts[select_explore(q, mask, 0.1, eps, rng)] += 1
        worst = max(worst, 0.5 * np.abs(counts / draws - p).sum())
        masked_hits += int(counts[~mask].sum())
    dt = time.perf_counter() - t0
    ok = worst < 0.01 and masked_hits == 0 and dt < 60
    report(2, ok, f"max TV distance {worst:.4f}, masked selections {masked_hits}, {dt:.1f}s")
    assert ok


# ---------------------------------------------------------------------------
# 3. greedy selection oracle

def test_criterion_03_selection_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    bad = ties = 0
    for t in range(1000):
        n = int(rng.integers(1, 40))
        q = rng.integers(0, 4, (n, K)).astype(float) if t % 3 == 0 else rng.normal(size=(n, K))
        mask = rng.random((n, K)) < 0.5
        mask[rng.integers(n), rng.integers(K)] = True
        best, arg = -np.inf, None
        for i in range(n):  # row-major scan, first maximum wins
            for k in range(K):
                if mask[i, k] and q[i, k] > best:
                    best, arg = q[i, k], (i, k)
        ties += int((q[mask] == best).sum() > 1)
        bad += tuple(int(v) for v in select_eval(q, mask)) != arg
    dt = time.perf_counter() - t0
    ok = bad == 0 and dt < 10
    report(3, ok, f"{bad} mismatches on 1000 maps ({ties} with ties), {dt:.2f}s")
    assert ok


# ---------------------------------------------------------------------------
# 4. reward

def _resting(obj, k=0):
    bins = BinGeometry()
    c = bins.center(k)
    return settle(EnvState(obj, 0, 0.4, np.array([c[0], c[1], 1.0])), bins, k)


def test_criterion_04_reward():
    rng = np.random.default_rng(4)
    s = _resting(ObjectInstance(simple_objects()[2], 1.2))
    goal = make_goal(s)
    at_goal = compute_reward(s, goal)
    worst = 0.0
    for _ in range(200):
        t = rng.uniform(-0.3, 0.3, 3)
        r = compute_reward(replace(s, position=s.position + t), goal)
        worst = max(worst, abs(r + np.linalg.norm(t)))
    strict = (not is_success(-SUCCESS_THRESHOLD)) and is_success(np.nextafter(-0.03, 0)) \
        and SUCCESS_THRESHOLD == 0.03
    ok = at_goal == 0.0 and worst <= 1e-12 and strict
    report(4, ok, f"reward at goal {at_goal}, max |r + |t|| {worst:.1e}, strict threshold {strict}")
    assert ok


# ---------------------------------------------------------------------------
# 5. primitive constants

def test_criterion_05_constants():
    c, bins = PrimitiveConstants(), BinGeometry()
    s = _resting(ObjectInstance(simple_objects()[0]))
    top = s.position + np.array([0, 0, s.obj.height / 2])
    n = np.array([0.0, 0.6, 0.8])
    _, tr = execute(s, PrimitiveAction(P.POKE, top, [0, 0, -0.5, 0, 1]), c, bins, normal=n)
    poke = np.allclose(tr["pre_contact"] - top, 0.04 * n, atol=1e-15)
    held, tr = execute(s, PrimitiveAction(P.GRASP, top, [0, 1]), c, bins)
    lift = abs(held.position[2] - s.position[2] - 0.15) < 1e-12 and tr["grasp_success"]
    loc = np.array([0.3, 0.05, 0.2])
    _, tr = execute(held, PrimitiveAction(P.MOVE_TO, loc, [0, 0, 0, 0, 1]), c, bins)
    move = np.array_equal(tr["target"], loc)
    lo, hi = np.array([0.1, -0.2, 0.0]), np.array([0.3, 0.2, 0.1])
    ws = bins.workspace()
    aoi = all(np.array_equal(map_regressed_location(2 * np.array(bits) - 1, P.POKE, (lo, hi), ws),
                             np.where(bits, hi, lo))
              for bits in np.ndindex(2, 2, 2))
    aoi &= np.array_equal(map_regressed_location([1, 1, 1], P.MOVE_TO, (lo, hi), ws), ws[1])
    ok = poke and lift and move and aoi
    report(5, ok, f"poke offset {poke}, grasp lift {lift}, move-to target {move}, AoI corners {aoi}")
    assert ok


# ---------------------------------------------------------------------------
# 6. registration study

@pytest.mark.slow
def test_criterion_06_registration():
    t0 = time.perf_counter()
    rows = registration_study(n_trials=100, n_points=500, noise=0.002, seed=2024)
    dt = time.perf_counter() - t0
    good = sum(r["rot_err_deg"] < 3.0 and r["trans_err_m"] < 0.005 for r in rows)
    mono = all(np.all(np.diff(r["result"].history) <= 0) for r in rows)
    ok = good >= 95 and mono and dt < 300
    report(6, ok, f"{good}/100 trials within 3 deg / 5 mm, ICP monotone {mono}, {dt:.0f}s")
    assert ok


# ---------------------------------------------------------------------------
# 7 and 9. lift toy task

LIFT = dict(method="ours", task="lift", objects="simple", n_object_points=32,
            n_background_points=32, total_steps=50_000, warmup_steps=200, eval_interval=100,
            eval_episodes=10, episode_length=10, target_success=0.9, batch_size=32,
            feature_dim=16, head_width=16, local_widths=(16, 32), decode_widths=(32,))


@pytest.fixture(scope="module")
def lift_runs(tmp_path_factory):
    t0 = time.perf_counter()
    out = tmp_path_factory.mktemp("lift")
    runs = [train(RunConfig(seed=s, **LIFT), out / f"s{s}") for s in range(3)]
    return runs, time.perf_counter() - t0


@pytest.mark.slow
def test_criterion_07_lift(lift_runs):
    runs, dt = lift_runs
    final = [tr.rows[-1]["success_rate"] for tr in runs]
    steps = [tr.rows[-1]["step"] for tr in runs]
    ok = median(final) >= 0.9 and max(steps) <= 50_000 and dt < 1800
    report(7, ok, f"greedy success {final} reached at steps {steps} "
                  f"(median {median(final):.2f}), {dt:.0f}s")
    assert ok


@pytest.mark.slow
def test_criterion_09_episode_length(lift_runs, tmp_path):
    runs, _ = lift_runs
    agents = [(tr.agent, tr.config) for tr in runs]
    # an untrained translation policy exercises a harder setting too
    tcfg = RunConfig(**{**LIFT, "task": "translation", "upright_only": True, "eval_episodes": 10})
    agents.append((harness.build_agent(tcfg), tcfg))
    ok, rates = True, []
    for agent, cfg in agents:
        reps = [evaluate(agent, cfg, L, n_episodes=20) for L in (10, 20, 30)]
        r = [rep.success_rate for rep in reps]
        rates.append(r)
        ok &= r[0] <= r[1] <= r[2]
        for a, b in zip(reps, reps[1:]):
            ok &= all(y or not x for x, y in zip(a.successes, b.successes))
    report(9, ok, "success at lengths 10/20/30: " + "; ".join(
        "/".join(f"{v:.2f}" for v in r) for r in rates))
    assert ok


# ---------------------------------------------------------------------------
# 8. separation on translation-only DoubleBin

PROTOCOL = dict(task="translation", objects="simple", upright_only=True, n_object_points=32,
                n_background_points=128, total_steps=200_000, warmup_steps=5_000,
                eval_interval=10_000, eval_episodes=20, episode_length=10, update_ratio=0.1,
                batch_size=32, feature_dim=16, head_width=32, local_widths=(16, 32),
                decode_widths=(32,))
BUDGET_S = 4 * 3600


def _measure_step_cost(method, tmp_path, probe=300):
    cfg = RunConfig(method=method, **{**PROTOCOL, "warmup_steps": 50, "eval_interval": 10**6})
    tr = Trainer(cfg, tmp_path / method)
    tr.run(until=60)  # warmup done, first updates compiled into caches
    t0 = time.perf_counter()
    tr.run(until=60 + probe)
    return (time.perf_counter() - t0) / probe


@pytest.mark.slow
def test_criterion_08_separation(tmp_path):
    if os.environ.get("GROUNDPRIM_FULL_ACCEPTANCE") == "1":
        t0 = time.perf_counter()
        finals = {}
        for m in METHODS:
            finals[m] = [train(RunConfig(method=m, seed=s, **PROTOCOL),
                               tmp_path / f"{m}_{s}").rows[-1]["success_rate"]
                         for s in range(3)]
        dt = time.perf_counter() - t0
        med = {m: median(v) for m, v in finals.items()}
        ok = med["ours"] >= 0.6 and all(med["ours"] - med[m] >= 0.15 for m in METHODS[1:]) \
            and dt < BUDGET_S
        report(8, ok, f"median success {med}, {dt / 3600:.1f}h")
        assert ok
        return
    costs = {m: _measure_step_cost(m, tmp_path) for m in METHODS}
    evals = PROTOCOL["total_steps"] // PROTOCOL["eval_interval"] * PROTOCOL["eval_episodes"] \
        * PROTOCOL["episode_length"]
    projected = sum(3 * c * (PROTOCOL["total_steps"] + evals) for c in costs.values())
    detail = (f"projected protocol runtime {projected / 3600:.1f}h vs 4h budget "
              f"(s/step: " + ", ".join(f"{m} {c * 1e3:.1f}ms" for m, c in costs.items()) +
              "); set GROUNDPRIM_FULL_ACCEPTANCE=1 to run it")
    report(8, False, detail, status="FAIL")
    if projected < BUDGET_S:
        pytest.fail("protocol fits the budget; run it with GROUNDPRIM_FULL_ACCEPTANCE=1")
    pytest.xfail("learning-separation protocol does not fit the compute budget on this machine")


# ---------------------------------------------------------------------------
# 10. determinism and resume

def test_criterion_10_determinism(tmp_path):
    small = dict(task="translation", objects="simple", upright_only=True, n_object_points=24,
                 n_background_points=24, total_steps=60, warmup_steps=16, eval_interval=20,
                 eval_episodes=2, batch_size=8, feature_dim=8, head_width=8,
                 local_widths=(8, 16), decode_widths=(16,))
    same, resumed = {}, {}
    for m in METHODS:
        cfg = RunConfig(method=m, seed=3, **small)
        train(cfg, tmp_path / m / "a")
        train(cfg, tmp_path / m / "b")
        train(cfg, tmp_path / m / "c", until=40)
        train(cfg, tmp_path / m / "c", resume=tmp_path / m / "c" / "checkpoints" / "step_00000020")
        ref = (tmp_path / m / "a" / "metrics.csv").read_bytes()
        same[m] = ref == (tmp_path / m / "b" / "metrics.csv").read_bytes()
        resumed[m] = ref == (tmp_path / m / "c" / "metrics.csv").read_bytes()
    ok = all(same.values()) and all(resumed.values())
    report(10, ok, f"bit-identical reruns {same}; resume from step 20 matches {resumed}")
    assert ok
