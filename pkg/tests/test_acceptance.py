"""Acceptance suite: one test per criterion, each printing a single PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v`` (the lines appear in the output).
"""

import time

import numpy as np
import pytest

from pfgtd import envs
from pfgtd.cli import DEFAULT_STEPS
from pfgtd.envs import make_env
from pfgtd.experiments import (
    ExperimentConfig, run_cdf_study, run_learning_curves, run_regret_audit, sweep_step_sizes,
)
from pfgtd.gtd import pfgtd_factory, sp_reduction_step
from pfgtd.metrics import build_exact_model, duality_gap, rmspbe
from pfgtd.olo import (
    CWPF, PF, BettorState, ConstrainedClipping, FeasibleSet, FreeRange, HintState, PFPlus,
    constraint_set_reduce, gradient_clip, ons_hints_step, ons_regret_bound,
)

CLASSIC = ("random-walk-tabular", "random-walk-dependent", "random-walk-inverted", "boyan", "baird")


@pytest.fixture
def report(capsys):
    def _report(n, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {n}: {detail}")
        assert ok, detail
    return _report


# 1 ---------------------------------------------------------------------------

def test_c01_invariant_fuzz(report):
    t0 = time.time()
    rng = np.random.default_rng(2024)
    runs, steps, d = 100, 1000, 5  # 10^5 steps per property
    ball = FeasibleSet(1.0)
    learners = {
        "pf": ConstrainedClipping(PF(d, shape=(runs,)), ball),
        "cwpf": ConstrainedClipping(CWPF(d, shape=(runs,)), ball),
        "pfplus": ConstrainedClipping(PFPlus(d, shape=(runs,)), ball),
    }
    bad = {k: 0 for k in ("wealth", "beta", "hint", "norm", "domination", "additivity", "projection")}

    def bettors(inner):
        if isinstance(inner, PFPlus):
            return [(inner.pf.bettor, inner.pf.hint), (inner.cwpf.bettor, inner.cwpf.hint)]
        return [(inner.bettor, inner.hint)]

    for _ in range(steps):
        for name, cc in learners.items():
            inner = cc.learner
            if name == "pfplus":
                bad["additivity"] += int(not np.array_equal(inner.play(), inner.pf.play() + inner.cwpf.play()))
            proposed = inner.play()
            played = cc.play()
            bad["projection"] += int(not np.array_equal(ball.project(played), played))
            scale = np.exp(rng.uniform(np.log(1e-2), np.log(10.0), (runs, 1)))
            raw = rng.standard_normal((runs, d)) * scale
            h_before = cc.hint.value.copy()
            fed = cc.update(raw)
            bad["hint"] += int(np.any(cc.hint.value < h_before))
            bad["norm"] += int(np.any(np.linalg.norm(fed, axis=1) > np.linalg.norm(raw, axis=1) * (1 + 1e-12)))
            # surrogate domination on the same clipped gradient, random comparator in the ball
            cl, _ = gradient_clip(HintState(cc.hint.mode, h_before), raw)
            _, fed_raw = constraint_set_reduce(ball, proposed, cl)
            u = ball.project(rng.standard_normal((runs, d)))
            lhs = np.sum(cl * (played - u), axis=1)
            rhs = np.sum(fed_raw * (proposed - u), axis=1)
            bad["domination"] += int(np.any(lhs > rhs + 1e-12))
            for b, h in bettors(inner):
                bad["wealth"] += int(np.any(b.wealth <= 0))
                bad["beta"] += int(np.any(np.abs(b.beta) > 1 / (2 * h)))
    elapsed = time.time() - t0
    ok = all(v == 0 for v in bad.values()) and elapsed < 30
    report(1, ok, f"violations {bad}, {steps * runs} steps/property/learner, {elapsed:.1f}s (< 30 s)")


# 2 ---------------------------------------------------------------------------

def test_c02_one_dimensional_regret_bound(report):
    T, seeds = 10_000, 20
    coins = np.stack([np.random.default_rng(s).choice([-1.0, 1.0], T) for s in range(seeds)])
    state = BettorState.initial(1.0, shape=(seeds,))
    plays = np.empty((seeds, T))
    for t in range(T):
        plays[:, t] = state.bet()
        state = ons_hints_step(state, coins[:, t], 1.0, hint=1.0)
    loss_alg = np.sum(coins * plays, axis=1)
    g_sum = coins.sum(axis=1)
    g2 = float(T)
    violations = 0
    worst = -np.inf
    for u in range(-10, 11):
        regret = loss_alg - u * g_sum
        bound = ons_regret_bound(u, 1.0, 1.0, g2)
        violations += int(np.sum(regret > bound))
        worst = max(worst, float(np.max(regret - bound)))
    report(2, violations == 0,
           f"{violations} violations over {seeds} seeds x 21 comparators (max regret - bound = {worst:.1f})")


# 3 ---------------------------------------------------------------------------

def test_c03_folk_theorem_audit(report):
    rows = []
    exact_ok = True
    for env in ("random-walk-tabular", "random-walk-dependent", "random-walk-inverted", "boyan"):
        for algo in ("pfgtd", "cw-pfgtd", "pfgtd+"):
            rep = run_regret_audit(ExperimentConfig(env=env, algo=algo, runs=200, steps=3000))
            rows.append((env, algo, rep["pass_rate"]))
            exact_ok &= rep["exact_pass_rate"] == 1.0
    worst = min(rows, key=lambda r: r[2])
    ok = all(r[2] == 1.0 for r in rows)
    report(3, ok,
           f"min pass rate of gap <= (R_theta + R_y)/T + 1e-9 is {worst[2]:.3f} ({worst[0]}, {worst[1]}); "
           f"exact-gradient partial-gap inequality holds on all runs: {exact_ok}")


# 4 ---------------------------------------------------------------------------

def test_c04_gap_decay(report):
    spec = make_env("random-walk-dependent")
    m = build_exact_model(spec)
    marks = (500, 1000, 2000, 4000)
    L = pfgtd_factory("pfgtd+", spec.dim, shape=(200,), track_regret=False)
    s = envs.BatchSampler(spec, range(200))
    med = []
    for t in range(1, marks[-1] + 1):
        sp_reduction_step(L, s.sample())
        if t in marks:
            med.append(float(np.median(duality_gap(m, L.state.theta_avg, L.state.y_avg))))
    slope = float(np.polyfit(np.log(marks), np.log(med), 1)[0])
    ok = all(a > b for a, b in zip(med, med[1:])) and slope <= -0.35
    report(4, ok, f"PFGTD+ median gaps {[round(v, 4) for v in med]}, log-log slope {slope:.3f} (<= -0.35)")


# 5 ---------------------------------------------------------------------------

def test_c05_baird_reproduction(report):
    t0 = time.time()
    td = run_learning_curves(ExperimentConfig(env="baird", algo="td", alpha=0.1, runs=200, steps=5000,
                                              cadence=5000))
    pf = run_learning_curves(ExperimentConfig(env="baird", algo="pfgtd+", runs=200, steps=5000,
                                              cadence=5000))
    td_final = float(np.mean([r.final for r in td.records]))
    elapsed = time.time() - t0
    ok = (td_final > 10 * td.initial_mean and pf.n_diverged == 0
          and pf.final_mean < pf.initial_mean and elapsed < 120)
    report(5, ok, f"TD final {td_final:.3g} vs initial {td.initial_mean:.3f}; "
                  f"PFGTD+ final {pf.final_mean:.4f} vs initial {pf.initial_mean:.3f}; {elapsed:.0f}s")


# 6 ---------------------------------------------------------------------------

def test_c06_comparability(report):
    parts = []
    ok = True
    for env in CLASSIC:
        n = DEFAULT_STEPS[env]
        best, _ = sweep_step_sizes(ExperimentConfig(env=env, algo="gtd2", runs=200, steps=n))
        gtd2 = run_learning_curves(ExperimentConfig(env=env, algo="gtd2", alpha=best, runs=200, steps=n,
                                                    cadence=n))
        pf = run_learning_curves(ExperimentConfig(env=env, algo="pfgtd+", runs=200, steps=n, cadence=n))
        ratio = pf.final_mean / gtd2.final_mean
        ok &= ratio <= 2.5
        parts.append(f"{env} {ratio:.2f} (alpha 2^{int(np.log2(best))})")
    report(6, ok, "PFGTD+ / tuned GTD2 final RMSPBE: " + ", ".join(parts) + " (<= 2.5)")


# 7 ---------------------------------------------------------------------------

def test_c07_cdf_shape(report):
    g = run_cdf_study(ExperimentConfig(env="baird", algo="gtd2", runs=500, steps=5000, cadence=5000))
    p = run_cdf_study(ExperimentConfig(env="baird", algo="pfgtd+", runs=500, steps=5000, cadence=5000))
    ok = p.iqr() < g.iqr()
    report(7, ok, f"Baird final-RMSPBE IQR: PFGTD+ {p.iqr():.4g} vs GTD2 {g.iqr():.4g}")


# 8 ---------------------------------------------------------------------------

def _monte_carlo_abc(spec, xi, n, seed):
    rng = np.random.default_rng(seed)
    s = rng.choice(spec.n_states, n, p=xi)
    cum_b = np.cumsum(spec.behavior, axis=1)
    a = (cum_b[s] > rng.random(n)[:, None]).argmax(axis=1)
    cum_p = np.cumsum(spec.transition[s, a], axis=1)
    s2 = (cum_p > rng.random(n)[:, None]).argmax(axis=1)
    phi, phi2 = spec.features[s], spec.features[s2]
    rho = spec.rho[s, a][:, None]
    A = np.einsum("ni,nj->nij", rho * phi, phi - spec.gamma * phi2).reshape(n, -1)
    b = rho * spec.reward[s, a][:, None] * phi
    C = np.einsum("ni,nj->nij", phi, phi).reshape(n, -1)
    return A, b, C


def test_c08_oracle_identities(report):
    worst_rmspbe = 0.0
    worst_y = 0.0
    for name in sorted(envs.ENVIRONMENTS):
        m = build_exact_model(make_env(name))
        worst_rmspbe = max(worst_rmspbe, float(rmspbe(m, m.theta_star)))
        worst_y = max(worst_y, float(np.abs(m.y_star).max()))
    spec = make_env("random-walk-tabular")
    m = build_exact_model(spec)
    n = 1_000_000
    outside = 0
    total = 0
    for est, exact in zip(_monte_carlo_abc(spec, m.xi, n, seed=8), (m.A.ravel(), m.b, m.C.ravel())):
        mean = est.mean(axis=0)
        se = est.std(axis=0, ddof=1) / np.sqrt(n)
        outside += int(np.sum(np.abs(mean - exact) > 3 * se + 1e-12))
        total += exact.size
    ok = worst_rmspbe < 1e-10 and worst_y < 1e-10 and outside == 0
    report(8, ok, f"max rmspbe(theta*) {worst_rmspbe:.1e}, max |y*| {worst_y:.1e}, "
                  f"{outside}/{total} Monte-Carlo entries outside 3 sigma (random-walk tabular, 1e6 samples)")


# 9 ---------------------------------------------------------------------------

def _free_range_iterates(grads, hints, c):
    fr = FreeRange(grads.shape[1], c * hints[0])
    out = np.empty_like(grads)
    for t in range(len(grads)):
        out[t] = fr.play()
        fr.update(c * grads[t], c * hints[t + 1])
    return out


def test_c09_free_range_homogeneity(report):
    rng = np.random.default_rng(9)
    grads = rng.standard_normal((1000, 4)) * np.exp(rng.uniform(-2, 2, (1000, 1)))
    hints = np.maximum.accumulate(np.r_[1.0, np.linalg.norm(grads, axis=1)])
    base = _free_range_iterates(grads, hints, 1.0)
    nz = np.linalg.norm(base, axis=1) > 0
    errs = {}
    for c in (1e-3, 1e3):
        got = _free_range_iterates(grads, hints, c)
        errs[c] = float(np.max(np.linalg.norm(got[nz] - c * base[nz], axis=1)
                               / np.linalg.norm(c * base[nz], axis=1)))
    ok = all(e <= 1e-9 for e in errs.values())
    report(9, ok, "max relative error of iterates vs c x baseline: "
                  + ", ".join(f"c={c:g}: {e:.3g}" for c, e in errs.items()))


# 10 --------------------------------------------------------------------------

def test_c10_determinism(report, tmp_path):
    from pfgtd import cli
    commands = [
        ["run", "--env", "baird", "--algo", "pfgtd+", "--runs", "5", "--steps", "200"],
        ["run", "--env", "boyan", "--algo", "tdrc", "--runs", "5", "--steps", "200", "--workers", "2"],
        ["sweep", "--env", "random-walk-dependent", "--algo", "gtd2", "--runs", "3", "--steps", "50"],
        ["cdf", "--env", "baird", "--algo", "gtd2", "--runs", "10", "--steps", "100"],
        ["audit", "--env", "random-walk-inverted", "--algo", "cw-pfgtd", "--runs", "3", "--steps", "100"],
        ["dump-model", "--env", "boyan"],
    ]
    mismatched = []
    for i, cmd in enumerate(commands):
        blobs = []
        for k in range(2):
            prefix = str(tmp_path / f"c{i}_{k}")
            assert cli.main(cmd + ["--seed", "7", "--out", prefix]) == 0
            files = [prefix + ".json"] + ([prefix + ".csv"] if cmd[0] in ("run", "sweep", "cdf") else [])
            blobs.append([open(f, "rb").read() for f in files])
        if blobs[0] != blobs[1]:
            mismatched.append(cmd[0])
    report(10, not mismatched, f"{len(commands) - len(mismatched)}/{len(commands)} commands byte-identical "
                               f"on repeat {mismatched or ''}")
