"""The twelve acceptance criteria, one test each.

Every test records a one-line verdict that is printed in the terminal
summary, then asserts it.
"""

import functools
import math
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pandas as pd
import pytest
from helpers import balanced_pair, random_smooth_sample, record

from diffeo_pa import assoc, fpca, prep
from diffeo_pa.cli import SIM_KERNEL
from diffeo_pa.geodesics import KernelConfig, MatchingProblem, hamiltonian, match_curves, shoot
from diffeo_pa.pipeline import PipelineConfig, run_pipeline
from diffeo_pa.simulate import SimConfig, simulate_cohort

TESTS = Path(__file__).parent



def criterion(number, title):
    def wrap(fn):
        @functools.wraps(fn)
        def run(*args, **kwargs):
            try:
                return fn(*args, **kwargs)
            except Exception as exc:
                if number not in _recorded():
                    record(number, title, False, f"raised {type(exc).__name__}: {exc}")
                raise

        return run

    return wrap


def _recorded():
    from helpers import ACCEPTANCE

    return ACCEPTANCE


@pytest.fixture(scope="module", autouse=True)
def warm_jit():
    # compile the numba kernels outside the timed sections
    q = np.zeros((3, 2))
    match_curves(q + np.arange(3)[:, None] * [1.0, 0.0], q + np.arange(3)[:, None] * [1.0, 0.1],
                 KernelConfig(max_iters=2))


@criterion(1, "one-particle shooting")
def test_01_one_particle():
    rng = np.random.default_rng(101)
    cases = [(rng.normal(size=(1, 2)), rng.normal(size=(1, 2))) for _ in range(100)]
    t0 = time.perf_counter()
    err = max(float(np.linalg.norm(shoot(q, p, n_steps=20).q[-1] - (q + p))) for q, p in cases)
    dt = time.perf_counter() - t0
    ok = err < 1e-8 and dt < 1.0
    record(1, "one-particle shooting", ok, f"max error {err:.2e} (< 1e-8), {dt:.2f} s (< 1 s)")
    assert ok


@criterion(2, "Hamiltonian conservation")
def test_02_conservation():
    rng = np.random.default_rng(102)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(50):
        P = int(rng.integers(2, 51))
        q0 = rng.uniform(-1, 1, size=(P, 2))
        p0 = rng.normal(size=(P, 2)) * 0.05
        traj = shoot(q0, p0, sigma_v=0.2, n_steps=50)
        H = np.array([hamiltonian(q, p, 0.2) for q, p in zip(traj.q, traj.p)])
        worst = max(worst, float(np.max(np.abs(H - H[0])) / H[0]))
    dt = time.perf_counter() - t0
    ok = worst < 1e-6 and dt < 10.0
    record(2, "Hamiltonian conservation", ok, f"max relative drift {worst:.2e} (< 1e-6), {dt:.2f} s (< 10 s)")
    assert ok


def _fd_relative_errors(prob, p, h=1e-5):
    _, g, _, _ = prob.value_and_grad(p)
    fd = np.zeros_like(p)
    for idx in np.ndindex(p.shape):
        e = np.zeros_like(p)
        e[idx] = h
        fd[idx] = (prob.objective(p + e) - prob.objective(p - e)) / (2 * h)
    # relative error with a small absolute floor for components that are numerically zero
    return np.abs(g - fd) / np.maximum(np.abs(fd), 1e-6)


@criterion(3, "adjoint gradient")
def test_03_adjoint_gradient():
    rng = np.random.default_rng(103)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(20):
        P = int(rng.integers(3, 11))
        x = np.sort(rng.uniform(-1, 1, P))
        q0 = np.column_stack([x, 0.3 * np.sin(3 * x) + rng.normal(scale=0.02, size=P)])
        xt = np.sort(rng.uniform(-1, 1, P))
        target = np.column_stack([xt, 0.3 * np.sin(3 * xt + 0.4)])
        cfg = KernelConfig(sigma_v=0.4, sigma_w=0.3, n_steps=10)
        p = rng.normal(size=(P, 2)) * 0.05
        worst = max(worst, float(_fd_relative_errors(MatchingProblem(q0, target, cfg), p).max()))
    dt = time.perf_counter() - t0
    ok = worst < 1e-4 and dt < 30.0
    record(3, "adjoint gradient", ok, f"max componentwise relative error {worst:.2e} (< 1e-4), {dt:.2f} s (< 30 s)")
    assert ok


@criterion(4, "self-matching")
def test_04_self_matching():
    x = np.linspace(-1, 1, 108)
    q0 = np.column_stack([x, 0.3 * np.sin(np.pi * x)])
    res = match_curves(q0, q0)
    energy = res.momenta_field.energy
    pmax = float(np.max(np.abs(res.momenta_field.momenta)))
    ok = energy < 1e-9 and pmax < 1e-6
    record(4, "self-matching", ok, f"energy {energy:.1e} (< 1e-9), max |p| {pmax:.1e} (< 1e-6)")
    assert ok


@criterion(5, "planted-deformation round trip")
def test_05_planted_round_trip():
    cfg = KernelConfig()
    x = np.linspace(-1, 1, 108)
    t0 = time.perf_counter()
    good = 0
    for seed in range(100):
        rng = np.random.default_rng(500 + seed)
        c = rng.normal(size=3)
        q0 = np.column_stack([x, 0.3 * np.sin(np.pi * x + c[0]) + 0.1 * np.cos(3 * x + c[1])])
        a = rng.normal(size=(3, 2)) * 0.004
        p_star = a[0] + np.outer(np.sin(np.pi * x), a[1]) + np.outer(np.cos(2 * x), a[2])
        target = shoot(q0, p_star, cfg).q[-1]
        res = match_curves(q0, target, cfg)
        j_true = MatchingProblem(q0, target, cfg).objective(p_star)
        good += res.attachment_residual < 1e-3 and res.objective <= j_true + 1e-6
    dt = time.perf_counter() - t0
    ok = good >= 95 and dt < 300
    record(5, "planted-deformation round trip", ok, f"{good}/100 cases pass (>= 95), {dt:.0f} s (< 300 s)")
    assert ok


@criterion(6, "UFPCA oracle equivalence")
def test_06_ufpca_oracle():
    rng = np.random.default_rng(106)
    g, data = random_smooth_sample(rng, n=300, P=108, n_basis=10, noise=0.05)
    model = fpca.ufpca(fpca.FunctionalSample(g, data), pve_target=1.0)
    # oracle: dense weighted covariance, symmetric square-root similarity, numpy eigh
    w = fpca.trapezoid_weights(g)
    centered = data - data.mean(axis=0)
    C = centered.T @ centered / (data.shape[0] - 1)
    Wh = np.diag(np.sqrt(w))
    ev, vec = np.linalg.eigh(Wh @ C @ Wh)
    ev, vec = ev[::-1], vec[:, ::-1]
    phi = (vec / np.sqrt(w)[:, None]).T
    K = model.n_components
    scores = centered @ (w[:, None] * phi[:K].T)
    signs = np.sign(np.sum(model.eigenfunctions * phi[:K] * w, axis=1))
    ev_err = float(np.max(np.abs(model.all_eigenvalues - np.clip(ev, 0, None))))
    sc_err = float(np.max(np.abs(model.scores - scores * signs)))
    ok = ev_err < 1e-8 and sc_err < 1e-8
    record(6, "UFPCA oracle equivalence", ok, f"eigenvalue error {ev_err:.1e}, score error {sc_err:.1e} (< 1e-8)")
    assert ok


@criterion(7, "MFPCA internal consistency")
def test_07_mfpca_consistency():
    rng = np.random.default_rng(107)
    g, x, y = balanced_pair(rng, n=500)
    mx = fpca.ufpca(fpca.FunctionalSample(g, x, "X"))
    my = fpca.ufpca(fpca.FunctionalSample(g, y, "Y"))
    m = fpca.mfpca(mx, my)
    trace_err = abs(float(m.all_eigenvalues.sum() - np.trace(m.Z)))
    cov = np.atleast_2d(np.cov(m.scores, rowvar=False))
    cov_err = float(np.max(np.abs(cov - np.diag(m.eigenvalues))))
    swap_err = float(np.max(np.abs(fpca.mfpca(my, mx).all_eigenvalues - m.all_eigenvalues)))
    ok = trace_err < 1e-10 and cov_err < 1e-6 and swap_err < 1e-10
    record(
        7,
        "MFPCA internal consistency",
        ok,
        f"trace error {trace_err:.1e} (< 1e-10), score covariance error {cov_err:.1e} (< 1e-6), "
        f"swap error {swap_err:.1e} (< 1e-10)",
    )
    assert ok


@criterion(8, "component selection rule")
def test_08_selection_rule():
    rng = np.random.default_rng(108)
    spectra = [
        (np.array([5.0, 3.0, 2.0]), 0.8),  # exact equality at L = 2
        (np.array([1.0, 1.0, 1.0, 1.0]), 0.5),
        (np.array([9.0, 1.0]), 0.9),
        (np.array([1.0]), 0.9),
        (np.array([4.0, 0.0, 0.0]), 0.95),
        (np.array([0.5, 0.25, 0.125, 0.125]), 0.875),
    ]
    for _ in range(500):
        ev = np.sort(rng.exponential(size=int(rng.integers(1, 30))))[::-1]
        if rng.random() < 0.3:
            ev = np.round(ev * 4) / 4 + 0.25  # ties and dyadic sums
        spectra.append((ev, float(rng.choice([0.5, 0.75, 0.9, 0.99, rng.uniform(0.05, 1.0)]))))
    bad = 0
    for ev, target in spectra:
        L = fpca.select_count(ev, target)
        cum = np.cumsum(ev) / ev.sum()
        bad += not (cum[L - 1] >= target and (L == 1 or cum[L - 2] < target))
    ok = bad == 0
    record(8, "component selection rule", ok, f"{len(spectra) - bad}/{len(spectra)} spectra satisfy both-sided check")
    assert ok


@criterion(9, "concatenated UFPCA comparison")
def test_09_concat_comparison():
    rng = np.random.default_rng(109)
    g, x, y = balanced_pair(rng, n=300)
    sx, sy = fpca.FunctionalSample(g, x, "X"), fpca.FunctionalSample(g, y, "Y")
    m = fpca.mfpca(fpca.ufpca(sx), fpca.ufpca(sy))
    c = fpca.concat_ufpca(sx, sy, bandwidth=0.05)
    w = fpca.trapezoid_weights(g)
    cos = []
    for d in ("X", "Y"):
        a, b = m.eigenfunctions[d][0], c.eigenfunctions[0][c.domain_slice(d)]
        cos.append(abs(float(np.sum(w * a * b) / np.sqrt(np.sum(w * a * a) * np.sum(w * b * b)))))
    b_concat = abs(fpca.boundary_coupling(c, m.L))
    b_mfpca = abs(fpca.boundary_coupling(m))
    ok = min(cos) > 0.9 and b_concat > 100 * b_mfpca and b_concat > 1e-3
    record(
        9,
        "concatenated UFPCA comparison",
        ok,
        f"PC1 cosine X {cos[0]:.4f}, Y {cos[1]:.4f} (> 0.9); boundary coupling concat {b_concat:.2e} "
        f"vs MFPCA {b_mfpca:.2e} (ratio > 100)",
    )
    assert ok


def _grouped(rng, n_groups, per_group, tau, sigma, beta=(1.0, 2.0)):
    N = n_groups * per_group
    X = rng.normal(size=(N, len(beta)))
    df = pd.DataFrame(X, columns=[f"x{j}" for j in range(len(beta))])
    df["participant_id"] = np.repeat(np.arange(n_groups), per_group)
    u = np.repeat(rng.normal(scale=tau, size=n_groups), per_group)
    df["pf"] = 1.0 + X @ np.asarray(beta) + u + rng.normal(scale=sigma, size=N)
    return df


@criterion(10, "LMM oracles")
def test_10_lmm_oracles():
    rng = np.random.default_rng(110)
    t0 = time.perf_counter()
    # OLS: independent observations
    df = _grouped(rng, 300, 1, 0.0, 1.0)
    X = np.column_stack([np.ones(len(df)), df[["x0", "x1"]]])
    ols_err = float(np.max(np.abs(assoc.fit_lmm(df, ["x0", "x1"]).beta - np.linalg.lstsq(X, df["pf"], rcond=None)[0])))
    # GLS: balanced two-per-subject design, covariance built from the fitted components
    df = _grouped(rng, 200, 2, 1.2, 0.8)
    fit = assoc.fit_lmm(df, ["x0", "x1"])
    X = np.column_stack([np.ones(len(df)), df[["x0", "x1"]]])
    V = np.kron(np.eye(200), fit.var_random * np.ones((2, 2))) + fit.var_resid * np.eye(400)
    Vi = np.linalg.inv(V)
    gls = np.linalg.solve(X.T @ Vi @ X, X.T @ Vi @ df["pf"].to_numpy())
    gls_err = float(np.max(np.abs(fit.beta - gls)))
    # GLS with the true variances: identical designs within every subject, where
    # the true-variance GLS estimator is available in closed form
    per = 4
    Xg = np.column_stack([np.ones(per), rng.normal(size=(per, 2))])
    X = np.tile(Xg, (150, 1))
    V = np.kron(np.eye(150), 1.5**2 * np.ones((per, per))) + 0.7**2 * np.eye(150 * per)
    y = X @ [1.0, 0.5, -2.0] + np.linalg.cholesky(V) @ rng.normal(size=150 * per)
    d = pd.DataFrame({"x0": X[:, 1], "x1": X[:, 2], "pf": y, "participant_id": np.repeat(np.arange(150), per)})
    Vi = np.linalg.inv(V)
    gls_true = np.linalg.solve(X.T @ Vi @ X, X.T @ Vi @ y)
    gls_err = max(gls_err, float(np.max(np.abs(assoc.fit_lmm(d, ["x0", "x1"]).beta - gls_true))))
    # null LRT against chi-square(1)
    stats_ = []
    for _ in range(2000):
        d = _grouped(rng, 50, 2, 1.0, 1.0, beta=(0.7, 0.0))
        stats_.append(assoc.lrt(assoc.fit_lmm(d, ["x0", "x1"]), assoc.fit_lmm(d, ["x0"])).statistic)
    x = np.sort(stats_)
    cdf = np.array([math.erf(math.sqrt(v / 2.0)) for v in x])
    n = len(x)
    ks = float(max(np.max(np.arange(1, n + 1) / n - cdf), np.max(cdf - np.arange(n) / n)))
    dt = time.perf_counter() - t0
    ok = ols_err < 1e-6 and gls_err < 1e-6 and ks < 0.05 and dt < 120
    record(
        10,
        "LMM oracles",
        ok,
        f"OLS error {ols_err:.1e}, GLS error {gls_err:.1e} (< 1e-6); null LRT KS {ks:.3f} (< 0.05); {dt:.0f} s (< 120 s)",
    )
    assert ok


@criterion(11, "end-to-end recovery")
def test_11_end_to_end(tmp_path):
    t0 = time.perf_counter()
    cohort = simulate_cohort(SimConfig(n_participants=500))
    t_sim = time.perf_counter() - t0
    cfg = PipelineConfig(
        out_dir=tmp_path / "out",
        cache_dir=tmp_path / "cache",
        kernel=KernelConfig(**SIM_KERNEL),
    )
    inputs = {"minutes": cohort.minutes, "outcomes": cohort.outcomes, "covariates": cohort.covariates}
    result = run_pipeline(cfg, inputs=inputs, stages=("prep", "match", "mfpca", "features", "assoc"))
    dt = time.perf_counter() - t0
    report = result.state["assoc"]
    m1 = report.model1
    beta = m1.coef("pc1") if "pc1" in m1.names else float("nan")
    p_pc1 = float(m1.pvalues[m1.names.index("pc1")]) if "pc1" in m1.names else float("nan")
    p_int = report.lrt1.pvalue
    # recovery of the planted loading by the period-specific PC1 scores
    truth = {p["participant_id"]: p["loadings"] for p in cohort.truth["participants"]}
    scores = result.state["mfpca"]["scores"]
    r = [
        abs(np.corrcoef(block["pc1"], [truth[pid][eta] for pid in block["participant_id"]])[0, 1])
        for eta, block in scores.groupby("period")
    ]
    ok = beta > 0 and p_pc1 < 0.01 and p_int < 0.025 and dt < 600
    record(
        11,
        "end-to-end recovery",
        ok,
        f"PC1 beta {beta:.3f} p {p_pc1:.1e} (< 0.01); interaction LRT p {p_int:.1e} (< 0.025); "
        f"|r(PC1, loading)| {r[0]:.2f}/{r[1]:.2f}; {dt:.0f} s incl. {t_sim:.0f} s simulation (< 600 s)",
    )
    assert ok


@criterion(12, "prep unit suite")
def test_12_prep_suite():
    proc = subprocess.run(
        [sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", str(TESTS / "test_prep.py")],
        capture_output=True,
        text=True,
        cwd=TESTS.parent,
    )
    last = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr[-200:]
    grid = prep.minute_grid()
    df = prep.get_smoother(grid).trace(prep.smoothing_lambda(grid, 25.0))
    ok = proc.returncode == 0 and abs(df - 25.0) < 0.01
    record(12, "prep unit suite", ok, f"test_prep.py: {last}; smoother trace {df:.4f} (within 0.01 of 25)")
    assert ok
