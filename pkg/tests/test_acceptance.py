"""End-to-end acceptance suite.

Each test checks one numbered criterion at its stated tolerance and records
a PASS/FAIL line, printed in the terminal summary.
"""

import dataclasses
import json
import os
import time
from pathlib import Path

import numpy as np
import pytest

from pgnn import autodiff as ad
from pgnn.autodiff import Rng
from pgnn.cli import ExperimentConfig, _load_data, cmd_bench, main, run_one
from pgnn.data import load_dataset, make_split
from pgnn.graph import (
    apply_p_laplacian,
    dense_laplacian,
    divergence,
    edge_norms,
    from_edges,
    gradient,
    normalized_adjacency,
    variation_sp,
)
from pgnn.model import TrainConfig, frozen_weights_at, init_params, train, training_loss
from pgnn.solver import PlapConfig, closed_form_p2, ppr_matrix, ppr_recursion, run_smoother
from pgnn.spectral import EigenPair, eigenvalue_bound, eigh_p2, verify_p_eigenpair

from conftest import ACCEPTANCE, random_graph


def _report(k, ok, detail):
    verdict = "PASS" if ok else "FAIL"
    ACCEPTANCE[k] = (verdict, detail)
    print(f"criterion {k}: {verdict}  {detail}")
    assert ok, detail


@pytest.fixture
def criterion(request):
    k = request.node.get_closest_marker("criterion").args[0]
    yield k
    ACCEPTANCE.setdefault(k, ("FAIL", "raised before reporting"))


def _graph(rng, max_n):
    n = int(rng.integers(2, max_n + 1))
    return random_graph(rng, n, extra=float(rng.uniform(0.05, 0.5)))


def _row_normalized(rng, n, c):
    X = rng.uniform(0.0, 1.0, size=(n, c))
    return X / X.sum(axis=1, keepdims=True)


@pytest.mark.criterion(1)
def test_operator_identities(criterion):
    """Adjointness, Laplacian vs dense matrix, and <f, Lp f> = S_p on 200 graphs."""
    rng = np.random.default_rng(1001)
    start = time.perf_counter()
    worst_adj = worst_dense = worst_sp = 0.0
    for _ in range(200):
        g = _graph(rng, 50)
        c = int(rng.integers(1, 4))
        f = rng.normal(size=(g.n, c))
        field = rng.normal(size=(g.nnz, c))
        worst_adj = max(worst_adj, abs(np.sum(gradient(g, f) * field) + np.sum(f * divergence(g, field))))
        worst_dense = max(worst_dense, np.abs(apply_p_laplacian(g, f, 2) - dense_laplacian(g) @ f).max())
        assert edge_norms(g, f).min() > 0
        for p in (1.0, 1.5, 2.0, 2.5, 3.0):
            s = variation_sp(g, f, p)
            worst_sp = max(worst_sp, abs(np.sum(f * apply_p_laplacian(g, f, p)) - s) / s)
    elapsed = time.perf_counter() - start
    ok = worst_adj <= 1e-10 and worst_dense <= 1e-12 and worst_sp <= 1e-9 and elapsed < 10
    _report(criterion, ok, f"adjoint {worst_adj:.1e}, dense {worst_dense:.1e}, S_p rel {worst_sp:.1e}, {elapsed:.1f}s")


@pytest.mark.criterion(2)
def test_variation_gradient(criterion):
    """Central differences of S_p match p times the p-Laplacian."""
    rng = np.random.default_rng(1002)
    worst, h = 0.0, 1e-6
    for i in range(50):
        p = (1.5, 2.0, 3.0)[i % 3]
        g = _graph(rng, 12)
        f = rng.normal(size=(g.n, 2))
        fd = np.zeros_like(f)
        for idx in np.ndindex(f.shape):
            e = np.zeros_like(f)
            e[idx] = h
            fd[idx] = (variation_sp(g, f + e, p) - variation_sp(g, f - e, p)) / (2 * h)
        exact = p * apply_p_laplacian(g, f, p)
        worst = max(worst, np.abs(fd - exact).max() / np.abs(exact).max())
    _report(criterion, worst <= 1e-4, f"max rel err {worst:.1e} over 50 instances")


@pytest.mark.criterion(3)
def test_closed_form_and_ppr(criterion):
    """p=2 iteration reaches the closed form; PPR recursion reaches the resolvent."""
    rng = np.random.default_rng(1003)
    worst_cf = worst_ppr = 0.0
    for i, n in enumerate([2, 3, 8, 17, 33, 50, 64] * 3):
        g = random_graph(rng, n, extra=0.1)
        X = rng.normal(size=(n, 3))
        mu = (0.1, 1.0, 10.0)[i % 3]
        F, _ = run_smoother(g, X, PlapConfig(p=2, mu=mu, K=200))
        worst_cf = max(worst_cf, np.abs(F - closed_form_p2(g, X, mu)).max())
        worst_ppr = max(worst_ppr, np.abs(ppr_recursion(g, mu) - ppr_matrix(g, mu)).max())
    ok = worst_cf <= 1e-6 and worst_ppr <= 1e-8
    _report(criterion, ok, f"closed form {worst_cf:.1e}, PPR {worst_ppr:.1e}")


@pytest.mark.criterion(4)
def test_objective_shrinks(criterion):
    """The regularized objective never increases along the iteration."""
    rng = np.random.default_rng(1004)
    cases = [(2.0, mu, False) for mu in (0.1, 1.0, 10.0)]
    cases += [(p, mu, True) for p in (1.5, 2.5) for mu in (1.0, 10.0)]
    violations, worst = [], 0.0
    for p, mu, normalized in cases:
        for _ in range(100):
            g = _graph(rng, 40)
            X = _row_normalized(rng, g.n, 3) if normalized else rng.normal(size=(g.n, 3))
            _, trace = run_smoother(g, X, PlapConfig(p=p, mu=mu, K=20))
            rel = np.diff(trace) / np.maximum(np.abs(trace[:-1]), 1e-300)
            worst = max(worst, float(rel.max()))
            if rel.max() > 1e-9:
                violations.append((p, mu))
    _report(criterion, not violations, f"{len(cases) * 100} traces, worst relative step {worst:.1e}, "
                                       f"{len(violations)} violations")


@pytest.mark.criterion(5)
def test_polynomial_filter(criterion):
    """K-step p=2 passing equals the explicit matrix polynomial."""
    rng = np.random.default_rng(1005)
    worst = 0.0
    for K in range(1, 9):
        g = random_graph(rng, 25)
        X = rng.normal(size=(25, 4))
        mu = float(rng.uniform(0.05, 2.0))
        alpha, beta = 1 / (1 + mu), mu / (1 + mu)
        T = alpha * normalized_adjacency(g)
        expected = np.linalg.matrix_power(T, K) @ X
        expected += beta * sum(np.linalg.matrix_power(T, t) for t in range(K)) @ X
        F, _ = run_smoother(g, X, PlapConfig(p=2, mu=mu, K=K))
        worst = max(worst, np.abs(F - expected).max())
    _report(criterion, worst <= 1e-10, f"max abs err {worst:.1e} for K=1..8")


@pytest.mark.criterion(6)
def test_eigenvalue_bounds(criterion):
    """Laplacian spectrum in [0, 2]; the two-node p-eigenpair attains the bound."""
    rng = np.random.default_rng(1006)
    lo, hi = np.inf, -np.inf
    for _ in range(100):
        lams = [pr.lam for pr in eigh_p2(_graph(rng, 30))]
        lo, hi = min(lo, min(lams)), max(hi, max(lams))
    pair = from_edges(2, [(0, 1)])
    worst_res = worst_gap = 0.0
    for p in (1.5, 2.0, 3.0):
        lam = 2.0 ** (p - 1)
        worst_res = max(worst_res, verify_p_eigenpair(pair, EigenPair(lam, np.array([1.0, -1.0])), p))
        worst_gap = max(worst_gap, abs(eigenvalue_bound(pair, p) - lam))
    ok = lo >= -1e-10 and hi <= 2 + 1e-10 and worst_res <= 1e-10 and worst_gap <= 1e-12
    _report(criterion, ok, f"spectrum [{lo:.2e}, {hi:.6f}], pair residual {worst_res:.1e}, bound gap {worst_gap:.1e}")


@pytest.mark.criterion(7)
def test_training_gradients(criterion):
    """Training-loss gradients match central differences in both weight modes."""
    rng = np.random.default_rng(1007)
    worst = 0.0
    for i in range(20):
        n = int(rng.integers(4, 13))
        g = random_graph(rng, n)
        f, c = int(rng.integers(2, 5)), int(rng.integers(2, 4))
        X = rng.normal(size=(n, f))
        y = rng.integers(0, c, n)
        mask = np.arange(n)
        p = (1.5, 2.0, 2.5)[i % 3]
        K = int(rng.integers(1, 4))
        params = init_params(f, 4, c, Rng(i))
        for detach in (False, True):
            cfg = TrainConfig(dropout=0.0, plap=PlapConfig(p=p, mu=float(rng.uniform(0.1, 2.0)), K=K,
                                                           detach_weights=detach))
            frozen = frozen_weights_at(g, X, params.theta1, cfg) if detach else None

            def f1(t1):
                t2 = t1.tape.constant(params.theta2)
                return training_loss("pgnn", g, X, y, mask, t1, t2, cfg, None, False, frozen)

            def f2(t2):
                t1 = t2.tape.constant(params.theta1)
                return training_loss("pgnn", g, X, y, mask, t1, t2, cfg, None, False)

            worst = max(worst, ad.finite_diff_check(f1, params.theta1), ad.finite_diff_check(f2, params.theta2))
    _report(criterion, worst <= 1e-4, f"max rel err {worst:.1e} over 20 instances x 2 modes")


def _bench(tmp_path, name, **kw):
    cfg = ExperimentConfig(data={"csbm": {}}, split="sparse", repeat=10, out=str(tmp_path / name), **kw)
    rows = cmd_bench(cfg)
    return {float(r["phi"]): 100 * r["test_acc_mean"] for r in rows}


@pytest.mark.criterion(8)
def test_csbm_benchmark(criterion, tmp_path):
    """pGNN beats MLP by 15 points at phi = -1 and +1 and ties it at phi = 0."""
    start = time.perf_counter()
    pgnn = _bench(tmp_path, "pgnn", models=["pgnn"], p=2.0, mu=0.1, K=6, lr=0.05)
    mlp = _bench(tmp_path, "mlp", models=["mlp"], lr=0.01)
    elapsed = time.perf_counter() - start
    parts, ok = [], elapsed < 300
    for phi in (-1.0, 0.0, 1.0):
        gap = pgnn[phi] - mlp[phi]
        good = abs(gap) <= 5 if phi == 0 else gap >= 15
        ok &= good
        parts.append(f"phi={phi:+.0f}: {pgnn[phi]:.2f} vs {mlp[phi]:.2f} ({'ok' if good else 'miss'})")
    _report(criterion, ok, "; ".join(parts) + f"; {elapsed:.0f}s")


@pytest.mark.criterion(9)
def test_noisy_edges(criterion):
    """With every edge replaced, pGNN falls back to MLP-level accuracy."""
    accs = {}
    for model, lr in (("pgnn", 0.05), ("mlp", 0.01)):
        cfg = ExperimentConfig(model=model, p=2.0, lr=lr, rate=1.0, data={"csbm": {}}, repeat=10)
        ds = _load_data(cfg, 1.0)
        accs[model] = 100 * np.mean([run_one(cfg, ds, model, s, 1.0).test_acc for s in range(10)])
    gap = accs["pgnn"] - accs["mlp"]
    _report(criterion, abs(gap) <= 5, f"pgnn {accs['pgnn']:.2f} vs mlp {accs['mlp']:.2f}")


def _cora_paths():
    root = os.environ.get("PGNN_CORA_DIR")
    if not root:
        return None
    paths = [Path(root) / f"cora{ext}" for ext in (".edges", ".features.csv", ".labels")]
    return paths if all(p.exists() for p in paths) else None


@pytest.mark.criterion(10)
def test_cora(criterion):
    """Grid search on validation accuracy, then 20 seeds of the selected setting."""
    paths = _cora_paths()
    if paths is None:
        ACCEPTANCE[criterion] = ("SKIP", "set PGNN_CORA_DIR to a folder with cora.edges/.features.csv/.labels")
        pytest.skip("Cora files not supplied")
    ds = load_dataset(*paths)
    best = None
    for lr in (0.001, 0.01, 0.05):
        for dropout in (0.0, 0.5):
            for mu in (0.01, 0.1, 0.2, 1.0, 10.0):
                for K in (4, 6, 8):
                    for wd in (0.0, 5e-4):
                        cfg = TrainConfig(lr=lr, dropout=dropout, weight_decay=wd, seed=0,
                                          plap=PlapConfig(p=2.0, mu=mu, K=K))
                        _, m = train(ds.graph, ds.X, ds.labels, make_split(ds.graph.n, "sparse", seed=0), "pgnn", cfg)
                        if best is None or m.val_acc > best[0]:
                            best = (m.val_acc, cfg)
    accs = []
    for seed in range(20):
        cfg = dataclasses.replace(best[1], seed=seed)
        _, m = train(ds.graph, ds.X, ds.labels, make_split(ds.graph.n, "sparse", seed=seed), "pgnn", cfg)
        accs.append(100 * m.test_acc)
    mean = float(np.mean(accs))
    _report(criterion, abs(mean - 78.93) <= 2.0, f"mean test {mean:.2f} (target 78.93 +- 2)")


@pytest.mark.criterion(11)
def test_bench_determinism(criterion, tmp_path):
    """Two bench invocations with the same config give byte-identical runs.jsonl."""
    cfg = {"data": {"csbm": {"n": 200, "f": 30, "d": 6}}, "phis": [-0.5, 0.5], "repeat": 3,
           "max_epochs": 60, "patience": 30, "split": "dense", "p": 1.5}
    blobs = []
    for run in ("a", "b"):
        path = tmp_path / f"{run}.json"
        path.write_text(json.dumps({**cfg, "out": str(tmp_path / run)}))
        assert main(["bench", "--config", str(path)]) == 0
        blobs.append((tmp_path / run / "runs.jsonl").read_bytes())
    lines = blobs[0].count(b"\n")
    _report(criterion, blobs[0] == blobs[1] and lines == 12, f"{lines} records, identical={blobs[0] == blobs[1]}")
