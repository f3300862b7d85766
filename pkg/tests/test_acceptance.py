"""Acceptance suite: one check per criterion, each at its stated tolerance.

Every criterion is a plain function returning ``(passed, detail)`` so the
file can also be run directly::

    python3 tests/test_acceptance.py           # all criteria
    python3 tests/test_acceptance.py 4 5       # a subset

Under pytest each criterion is one test; the PASS/FAIL lines are collected
and printed in the terminal summary. Criteria 6 and 8 train a few hundred
models and are marked ``slow``.
"""

from __future__ import annotations

import sys
import tempfile
import time
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedsim.cli import run_experiment
from fedsim.data import (
    dirichlet_partition,
    sort_and_partition,
    synth_gaussian_mixture,
    train_test_split,
)
from fedsim.engine import (
    ALGORITHMS,
    RunConfig,
    attention_heatmap,
    build_task,
    run_round,
    run_training,
)
from fedsim.client import ClientState
from fedsim.models import (
    Batch,
    LogisticModel,
    MLPModel,
    QuadraticModel,
    finite_diff_gradient,
    gradient,
)
from fedsim.server import (
    ATTENTION_OPTIONS,
    RoundUpdates,
    ServerState,
    attention_scores,
    igfl_server_aggregate,
)

# The desk-scale corpus: 10 classes x 1250 examples, 80/20 split, so 10,000
# training examples as in criterion 6.
DESK = dict(per_class=1250, test_fraction=0.2, dim=32, separation=3.0, num_classes=10)
LR_GRID = (1e-3, 3e-3, 1e-2, 3e-2, 1e-1, 3e-1)
# drift testbed shared by criteria 4 and 5
DRIFT = dict(dataset="quadratic", clients=10, quad_dim=5, quad_spread=5.0,
             quad_curv_min=0.01, quad_curv_max=1.0, lr=0.003, rounds=200,
             sample_rate=1.0, timing=False)


def _within(elapsed: float, limit: float) -> str:
    return f"{elapsed:.1f}s (limit {limit:g}s)"


# --------------------------------------------------------------------------
# 1. gradients


def criterion_1(workdir=None):
    start = time.perf_counter()
    rng = np.random.default_rng(101)
    worst = {}
    for kind in ("quadratic", "logistic", "mlp"):
        errs = []
        for _ in range(20):
            if kind == "quadratic":
                d = int(rng.integers(1, 12))
                model = QuadraticModel(rng.normal(0, 3, d), rng.uniform(0.1, 3.0, d))
                batch = None
                w = rng.normal(0, 3, d)
            else:
                d, k, n = int(rng.integers(2, 8)), int(rng.integers(2, 5)), int(rng.integers(3, 20))
                batch = Batch(rng.normal(size=(n, d)), rng.integers(0, k, size=n))
                if kind == "logistic":
                    model = LogisticModel(d, k)
                else:
                    model = MLPModel(d, int(rng.integers(2, 7)), k)
                w = rng.normal(0, 0.5, model.num_params)
            g = gradient(model, w, batch)
            fd = finite_diff_gradient(model, w, batch)
            scale = max(np.linalg.norm(g), np.linalg.norm(fd), 1e-12)
            errs.append(np.linalg.norm(g - fd) / scale)
        worst[kind] = max(errs)
    elapsed = time.perf_counter() - start
    ok = all(e <= 1e-5 for e in worst.values()) and elapsed < 5
    detail = ", ".join(f"{k} max rel err {v:.1e}" for k, v in worst.items())
    return ok, f"{detail}; {_within(elapsed, 5)}"


# --------------------------------------------------------------------------
# 2. centralized equivalence


def criterion_2(workdir=None):
    start = time.perf_counter()
    cfg = RunConfig(algo="fedavg", dataset="quadratic", clients=10, local_steps=1,
                    sample_rate=1.0, lr=0.1, rounds=100, quad_curv_min=0.1,
                    quad_curv_max=2.0, seed=3, timing=False)
    task = build_task(cfg)
    centers = np.array([m.center for m in task.models])
    curv = np.array([m.curvature for m in task.models])
    server = ServerState.initial(task.init_params(cfg.seed))
    clients = [ClientState.zeros(task.num_params) for _ in range(task.num_clients)]
    w_gd = server.params.copy()
    worst = 0.0
    for r in range(cfg.rounds):
        server, _ = run_round(cfg, server, clients, task, r)
        # gradient descent on (1/P) sum_i f_i
        w_gd = w_gd - cfg.lr * np.mean(curv * (w_gd - centers), axis=0)
        worst = max(worst, float(np.max(np.abs(server.params - w_gd))))
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-12 and elapsed < 1
    return ok, f"max coordinate gap {worst:.1e} over 100 rounds; {_within(elapsed, 1)}"


# --------------------------------------------------------------------------
# 3. degenerate equivalence


def criterion_3(workdir):
    start = time.perf_counter()
    base = RunConfig(algo="fedavg", clients=10, sample_rate=0.5, rounds=15, per_class=80,
                     dim=8, batch_size=20, seed=7, timing=False)
    run_experiment(base, Path(workdir) / "c3_fedavg")
    reference = (Path(workdir) / "c3_fedavg" / "metrics.csv").read_bytes()
    mismatches = []
    for option in ATTENTION_OPTIONS:
        cfg = base.replace(algo="igfl", attention=option, client_correction=False,
                           uniform_attention=True)
        out = Path(workdir) / f"c3_igfl_{option}"
        run_experiment(cfg, out)
        if (out / "metrics.csv").read_bytes() != reference:
            mismatches.append(option)
    elapsed = time.perf_counter() - start
    ok = not mismatches and elapsed < 10
    what = "byte-identical for all attention options" if not mismatches else \
        f"CSV differs for {mismatches}"
    return ok, f"{what}; {_within(elapsed, 10)}"


# --------------------------------------------------------------------------
# 4 and 5. drift testbed


def _final_distance(cfg: RunConfig) -> float:
    task = build_task(cfg)
    result = run_training(cfg, task)
    return task.distance_to_optimum(result.server_state.params)


def criterion_4(workdir=None):
    start = time.perf_counter()
    cfg = RunConfig(local_steps=10, **DRIFT)
    d_avg = _final_distance(cfg.replace(algo="fedavg"))
    d_c = _final_distance(cfg.replace(algo="igfl_c"))
    elapsed = time.perf_counter() - start
    ratio = d_c / d_avg
    ok = d_c < d_avg and ratio <= 0.8 and elapsed < 10
    return ok, (f"|w-w*| FedAvg {d_avg:.4f}, IGFL-C {d_c:.4f}, ratio {ratio:.3f} "
                f"(target <= 0.8); {_within(elapsed, 10)}")


def criterion_5(workdir=None):
    start = time.perf_counter()
    advantage = []
    for T in (10, 50, 250):
        cfg = RunConfig(local_steps=T, **DRIFT)
        d_m = _final_distance(cfg.replace(algo="fedavgm"))
        d_c = _final_distance(cfg.replace(algo="igfl_c"))
        advantage.append(d_m - d_c)
    elapsed = time.perf_counter() - start
    monotone = all(a <= b for a, b in zip(advantage, advantage[1:]))
    ok = monotone and elapsed < 120
    adv = ", ".join(f"T={T}: {a:+.2e}" for T, a in zip((10, 50, 250), advantage))
    return ok, f"distance advantage FedAvgM - IGFL-C {adv}; {_within(elapsed, 120)}"


# --------------------------------------------------------------------------
# 6. desk-scale ordering


def criterion_6(workdir=None):
    """Each algorithm at its best local learning rate from the grid, 3 seeds."""
    start = time.perf_counter()
    best = {}
    for algo in ("fedavg", "igfl_c", "igfl_s", "igfl"):
        scores = {}
        for lr in LR_GRID:
            accs = []
            for seed in range(3):
                cfg = RunConfig(algo=algo, attention="time", clients=10, sample_rate=1.0,
                                epochs=1, batch_size=100, rounds=300, lr=lr, seed=seed,
                                model="mlp", partition="sort", timing=False, **DESK)
                accs.append(run_training(cfg).summary_accuracy)
            scores[lr] = 100 * float(np.mean(accs))
        lr = max(scores, key=scores.get)
        best[algo] = (scores[lr], lr)
    elapsed = time.perf_counter() - start
    acc = {a: v[0] for a, v in best.items()}
    ok = (acc["igfl"] >= acc["fedavg"] + 1.0
          and acc["igfl"] >= acc["igfl_c"] and acc["igfl"] >= acc["igfl_s"]
          and acc["igfl_c"] >= acc["fedavg"] - 0.5 and acc["igfl_s"] >= acc["fedavg"] - 0.5
          and elapsed < 900)
    detail = ", ".join(f"{a} {v[0]:.2f}% @ lr {v[1]:g}" for a, v in best.items())
    return ok, f"{detail}; {_within(elapsed, 900)}"


# --------------------------------------------------------------------------
# 7. attention properties


def _delta_sets():
    return st.integers(1, 8).flatmap(lambda n: st.integers(1, 32).flatmap(
        lambda d: st.tuples(
            st.lists(st.lists(st.floats(-10, 10), min_size=d, max_size=d),
                     min_size=n, max_size=n),
            st.lists(st.lists(st.floats(-10, 10), min_size=d, max_size=d),
                     min_size=n, max_size=n),
            st.permutations(list(range(n))),
        )))


def criterion_7(workdir=None):
    start = time.perf_counter()

    @settings(max_examples=60, deadline=None, database=None)
    @given(_delta_sets(), st.sampled_from(ATTENTION_OPTIONS))
    def check(sample, option):
        cur, prev, perm = sample
        cur = [np.array(v) for v in cur]
        prev = [np.array(v) for v in prev]
        n, d = len(cur), len(cur[0])
        ids = list(range(n))
        upd = RoundUpdates(ids, cur, prev)
        alpha = attention_scores(upd, option)
        # simplex rows
        assert np.all(alpha >= 0)
        assert np.max(np.abs(alpha.sum(axis=1) - 1.0)) <= 1e-12
        # permutation equivariance, exact
        shuffled = RoundUpdates([ids[p] for p in perm], [cur[p] for p in perm],
                                [prev[p] for p in perm])
        alpha_p = attention_scores(shuffled, option)
        assert np.array_equal(alpha_p, alpha[np.ix_(perm, perm)])
        s = ServerState.initial(np.zeros(d))
        step = igfl_server_aggregate(s, upd, option).prev_global_delta
        step_p = igfl_server_aggregate(s, shuffled, option).prev_global_delta
        assert np.array_equal(step, step_p)
        # convex hull, per coordinate
        stack = np.array(cur)
        tol = 1e-12 * (1 + np.abs(stack).max())
        assert np.all(step >= stack.min(axis=0) - tol)
        assert np.all(step <= stack.max(axis=0) + tol)
        # identical deltas reduce to plain averaging
        same = RoundUpdates(ids, [cur[0].copy() for _ in ids], prev)
        out = igfl_server_aggregate(s, same, option).prev_global_delta
        assert np.max(np.abs(out - cur[0])) <= 1e-12

    try:
        check()
        failure = None
    except AssertionError as exc:
        failure = f"property violated: {exc!r}"[:200]
    elapsed = time.perf_counter() - start
    ok = failure is None and elapsed < 5
    return ok, f"{failure or 'all properties hold on 60 random cases'}; {_within(elapsed, 5)}"


# --------------------------------------------------------------------------
# 8. heatmap matching


def criterion_8(workdir=None):
    start = time.perf_counter()
    matching, paired_top = [], []
    for seed in range(50):
        cfg = RunConfig(algo="igfl", attention="self", clients=10, rounds=300, lr=0.03,
                        seed=seed, partition="sort", timing=False, **DESK)
        matching.append(attention_heatmap(cfg).matching_rate)
    for seed in range(50):
        cfg = RunConfig(algo="igfl", attention="self", clients=10, rounds=300, lr=0.03,
                        seed=seed, partition="paired", timing=False, **DESK)
        paired_top.append(attention_heatmap(cfg).paired_top_rate)
    elapsed = time.perf_counter() - start
    m, p = float(np.mean(matching)), float(np.mean(paired_top))
    ok = m >= 0.90 and p >= 0.90 and elapsed < 1800
    return ok, (f"matching rate {m:.3f} (min {min(matching):.2f}) over 50 populations, "
                f"paired top-score rows {p:.3f}; {_within(elapsed, 1800)}")


# --------------------------------------------------------------------------
# 9. partitioner statistics


def criterion_9(workdir=None):
    start = time.perf_counter()
    full = synth_gaussian_mixture(10, 1250, 32, 3.0, 0)
    train, _ = train_test_split(full, 0.2, 0)

    def max_props(rho):
        out = []
        # P=100 clients over 50 seeded populations
        for seed in range(50):
            part = dirichlet_partition(train, 100, rho, seed)
            part.validate(len(train), full_cover=False)
            for idx in part.client_indices:
                counts = np.bincount(train.labels[idx], minlength=10)
                out.append(counts.max() / counts.sum())
        return np.array(out)

    flat = max_props(1000.0)
    share_flat = float(np.mean(np.abs(flat - 0.1) <= 0.05))
    skew_median = float(np.median(max_props(0.1)))
    max_labels = 0
    for seed in range(20):
        for paired in (False, True):
            part = sort_and_partition(train, 10, seed, paired=paired)
            part.validate(len(train), full_cover=True)
            max_labels = max(max_labels, max(len(np.unique(train.labels[i]))
                                             for i in part.client_indices))
    elapsed = time.perf_counter() - start
    ok = share_flat >= 0.95 and skew_median > 0.4 and max_labels <= 2 and elapsed < 10
    return ok, (f"rho=1000 share within 0.05 {share_flat:.3f}, rho=0.1 median max-class "
                f"{skew_median:.3f}, sort max labels {max_labels}, cover/disjoint exact; "
                f"{_within(elapsed, 10)}")


# --------------------------------------------------------------------------
# 10. determinism


def _csv_without_timing(path: Path):
    rows = [line.split(",") for line in path.read_text().splitlines()]
    return [r[:4] for r in rows]


def criterion_10(workdir):
    start = time.perf_counter()
    differing = []
    for algo in ALGORITHMS:
        cfg = RunConfig(algo=algo, clients=10, sample_rate=0.5, rounds=20, per_class=100,
                        dim=8, batch_size=25, seed=11, lr=0.05)
        a, b = Path(workdir) / f"c10_{algo}_a", Path(workdir) / f"c10_{algo}_b"
        run_experiment(cfg, a)
        run_experiment(cfg, b)
        if _csv_without_timing(a / "metrics.csv") != _csv_without_timing(b / "metrics.csv"):
            differing.append(algo)
    elapsed = time.perf_counter() - start
    ok = not differing and elapsed < 120
    what = f"identical CSVs for {len(ALGORITHMS)} algorithms" if not differing else \
        f"CSVs differ for {differing}"
    return ok, f"{what}; {_within(elapsed, 120)}"


CRITERIA = {
    1: ("gradient correctness", criterion_1),
    2: ("centralized equivalence", criterion_2),
    3: ("degenerate equivalence", criterion_3),
    4: ("drift reduction", criterion_4),
    5: ("amortization vs FedAvgM trend", criterion_5),
    6: ("desk-scale ordering", criterion_6),
    7: ("attention properties", criterion_7),
    8: ("heatmap matching rate", criterion_8),
    9: ("partitioner statistics", criterion_9),
    10: ("determinism", criterion_10),
}
SLOW = {6, 8}


def _line(number: int, ok: bool, detail: str) -> str:
    name = CRITERIA[number][0]
    return f"{'PASS' if ok else 'FAIL'} criterion {number} ({name}): {detail}"


@pytest.mark.parametrize("number", [
    pytest.param(n, marks=pytest.mark.slow) if n in SLOW else n for n in CRITERIA
])
def test_criterion(number, tmp_path, acceptance_lines):
    ok, detail = CRITERIA[number][1](tmp_path)
    line = _line(number, ok, detail)
    acceptance_lines.append(line)
    print(line)
    assert ok, line


def main(argv=None) -> int:
    picks = [int(a) for a in (argv or [])] or list(CRITERIA)
    failed = 0
    with tempfile.TemporaryDirectory() as tmp:
        for n in picks:
            ok, detail = CRITERIA[n][1](Path(tmp))
            failed += not ok
            print(_line(n, ok, detail), flush=True)
    return 1 if failed else 0


if __name__ == "__main__":
    sys.exit(main(sys.argv[1:]))
