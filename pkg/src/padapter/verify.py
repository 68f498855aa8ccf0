"""Named invariant checks driven by ``padapter verify``.

Each check returns measured error and tolerance; a check passes when
``error <= tol`` unless it reports its own verdict.  Checks are grouped so a
filter such as ``p2-degeneracy`` selects one suite.
"""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autograd as ag
from . import numeric as nc
from .adapters import Adapter, PAdapter, adapter_after_attention, adapter_forward, augmented_adapter_forward, p_adapter_forward
from .attention import AttentionWeights, attention, augment, averaged_output
from .experiments import random_weighted_graph, spectral_response, two_cluster_graph
from .graph import (build_graph, divergence, graph_gradient, homophily_metrics, laplacian,
                    normalized_adjacency, p_laplacian_apply, variation, variation_edges)
from .message_passing import PLaplacianConfig, p_normalize, p_solve, p_step

GROUPS = ("augmentation-equivalence", "adapter-cross-route", "p2-degeneracy", "operators",
          "solver", "gradients", "heterophily", "spectral", "numeric")

# Pinned solver instances: 10 twenty-node heterophilic graphs.
SOLVER_SEEDS = tuple(range(1000, 1010))
SOLVER_P = (1.25, 1.5, 1.75)
SOLVER_MU = (0.1, 1.0, 10.0)


@dataclass
class CheckResult:
    name: str
    group: str
    error: float
    tol: float
    passed: bool
    seconds: float
    detail: dict = field(default_factory=dict)


# ------------------------------------------------------------------ instances

def attention_case(seed: int, n_heads: int | None = None, cross: bool = True):
    """Random ``(inter, aug, N1, N2, d, n)`` attention instance."""
    rng = nc.make_rng(seed)
    n = int(rng.choice([1, 2, 4])) if n_heads is None else n_heads
    d = max(2, n * int(rng.integers(1, 5)))
    n1, n2 = int(rng.integers(1, 9)), int(rng.integers(1, 9))
    w = AttentionWeights.random(rng, d, d, n)
    q = rng.standard_normal((n1, d))
    kv = rng.standard_normal((n2, d)) if cross else q
    _, inter = attention(q, kv, kv, w)
    return inter, augment(inter, "query"), (n1, n2, d, n)


def random_adapter(rng, l1: int, l2: int) -> Adapter:
    """Adapter with nonzero up-projection so cross-route checks see the bottleneck."""
    return Adapter(rng.standard_normal((l1, l2)) * 0.5, rng.standard_normal((l2, l1)) * 0.5)


def p_adapter_case(seed: int, p_mode: str = "learnable", p: float = 1.5, mu: float = 1.0):
    rng = nc.make_rng(seed)
    n = int(rng.choice([1, 2]))
    d = 4 * n
    n1, n2 = int(rng.integers(2, 6)), int(rng.integers(2, 6))
    w = AttentionWeights.random(rng, d, d, n)
    _, inter = attention(rng.standard_normal((n1, d)), *(2 * [rng.standard_normal((n2, d))]), w)
    aug = augment(inter, "query")
    pa = PAdapter(random_adapter(rng, d, 2), rho=ag.Var(rng.normal(0.0, 0.5, 1), requires_grad=True),
                  mu=mu, p_mode=p_mode, p_fixed=p)
    return aug, pa, rng.standard_normal((n1, d))


def _max_abs(a, b) -> float:
    a, b = ag.value(a), ag.value(b)
    return float(np.max(np.abs(a - b))) if a.size else 0.0


# ------------------------------------------------------------------ checks

def check_aug_slice():
    err = 0.0
    for seed in range(50):
        inter, aug, _ = attention_case(seed)
        top = nc.slice_rows(ag.value(aug.m_tilde) @ ag.value(aug.v_tilde), 0, aug.n_query)
        err = max(err, _max_abs(top, ag.value(inter.m_avg) @ ag.value(inter.v_proj)))
    return {"error": err, "tol": 1e-12, "detail": {"cases": 50}}


def check_aug_output_route():
    """Query block of ``M~ V^`` against the attention output (single head) and the
    head-averaged output (multi-head)."""
    err = 0.0
    for seed in range(50):
        inter, aug, _ = attention_case(seed)
        top = nc.slice_rows(ag.value(aug.m_tilde) @ ag.value(aug.v_hat), 0, aug.n_query)
        err = max(err, _max_abs(top, averaged_output(inter)))
    for seed in range(50, 60):
        rng = nc.make_rng(seed)
        w = AttentionWeights.random(rng, 6, 6, 1)
        q, kv = rng.standard_normal((4, 6)), rng.standard_normal((5, 6))
        out, inter = attention(q, kv, kv, w)
        aug = augment(inter, "query")
        top = nc.slice_rows(ag.value(aug.m_tilde) @ ag.value(aug.v_hat), 0, 4)
        err = max(err, _max_abs(top, out))
    return {"error": err, "tol": 1e-12, "detail": {"cases": 60}}


def check_aug_structure():
    """``M~`` symmetric with zero diagonal blocks; query degrees are 1."""
    err = 0.0
    for seed in range(50):
        _, aug, _ = attention_case(seed)
        m = ag.value(aug.m_tilde)
        n1 = aug.n_query
        g = build_graph(aug)
        err = max(err, _max_abs(m, m.T), float(np.abs(m[:n1, :n1]).max()), float(np.abs(m[n1:, n1:]).max()),
                  float(np.abs(g.D[:n1] - 1.0).max()))
    return {"error": err, "tol": 1e-12}


def _cross_route(n_heads: int):
    err = 0.0
    for seed in range(50):
        inter, aug, (_, _, d, _) = attention_case(100 + seed, n_heads=n_heads)
        a = random_adapter(nc.make_rng(seed), d, d // 2)
        direct = adapter_after_attention(averaged_output(inter), a)
        routed = nc.slice_rows(ag.value(augmented_adapter_forward(aug, a)), 0, aug.n_query)
        err = max(err, _max_abs(direct, routed))
    return {"error": err, "tol": 1e-12, "detail": {"cases": 50, "heads": n_heads}}


def check_cross_route_single():
    return _cross_route(1)


def check_cross_route_multi():
    return _cross_route(2)


def _random_graphs(count: int, max_nodes: int, seed0: int):
    for k in range(count):
        rng = nc.make_rng(seed0 + k)
        n = int(rng.integers(2, max_nodes + 1))
        yield rng, random_weighted_graph(rng, n, int(rng.integers(1, 5)), float(rng.uniform(0.2, 1.0)))


def check_p2_normalize():
    """``p_normalize`` at p=2 returns the adjacency bit for bit."""
    bad, err = 0, 0.0
    for rng, g in _random_graphs(100, 24, 2000):
        mbar = p_normalize(g, g.X, 2.0)
        if not np.array_equal(mbar, g.A):
            bad += 1
        err = max(err, _max_abs(mbar, g.A))
    return {"error": err, "tol": 0.0, "passed": bad == 0, "detail": {"mismatched_graphs": bad}}


def check_p2_step():
    err = 0.0
    for rng, g in _random_graphs(100, 24, 3000):
        mu = float(rng.choice([0.1, 1.0, 10.0]))
        F = rng.standard_normal(g.X.shape)
        closed = (ag.value(normalized_adjacency(g)) @ F + mu * g.X) / (1.0 + mu)
        err = max(err, _max_abs(p_step(g, g.X, F, PLaplacianConfig(p=2.0, mu=mu)), closed))
    return {"error": err, "tol": 1e-12}


def check_p2_adapter():
    """Fixed-p=2 p-adapter against aggregation with the raw augmented matrix."""
    err = 0.0
    for seed in range(30):
        aug, pa, _ = p_adapter_case(seed, p_mode="fixed", p=2.0, mu=float([0.1, 1.0, 10.0][seed % 3]))
        g = build_graph(aug)
        inv = 1.0 / np.sqrt(g.D)
        s = inv[:, None] * g.A * inv[None, :]
        u_bar = (s @ g.X + pa.mu * g.X) / (1.0 + pa.mu)
        expected = nc.slice_rows(ag.value(adapter_forward(u_bar, pa.adapter)), 0, aug.n_query)
        err = max(err, _max_abs(p_adapter_forward(aug, pa), expected))
    return {"error": err, "tol": 1e-12, "detail": {"cases": 30}}


def check_variation_forms():
    err = 0.0
    for rng, g in _random_graphs(100, 16, 4000):
        p = float(rng.uniform(1.0, 3.0))
        a, b = variation(g, g.X, p), variation_edges(g, g.X, p)
        err = max(err, abs(a - b) / max(1.0, abs(a)))
    return {"error": err, "tol": 1e-12}


def check_delta2_routes():
    """Discrete Delta_2 against ``-1/2 div(grad F)`` and against ``(I - S) F``."""
    err = 0.0
    for rng, g in _random_graphs(100, 32, 5000):
        lap2 = p_laplacian_apply(g, g.X, 2.0)
        err = max(err, _max_abs(lap2, -0.5 * divergence(g, graph_gradient(g, g.X))),
                  _max_abs(lap2, g.X - ag.value(normalized_adjacency(g)) @ g.X))
    return {"error": err, "tol": 1e-10}


def check_gradient_antisymmetry():
    bad = 0
    for rng, g in _random_graphs(100, 32, 6000):
        grad_f = graph_gradient(g, g.X)
        if not np.array_equal(grad_f, -np.swapaxes(grad_f, 0, 1)):
            bad += 1
    return {"error": float(bad), "tol": 0.0, "detail": {"graphs": 100}}


def check_laplacian_psd():
    worst, rowsum = np.inf, 0.0
    for rng, g in _random_graphs(100, 64, 7000):
        L = laplacian(g)
        worst = min(worst, float(np.linalg.eigvalsh(L).min()))
        rowsum = max(rowsum, float(np.abs(L.sum(axis=1)).max()))
    return {"error": max(-worst, 0.0), "tol": 1e-8, "passed": worst >= -1e-8 and rowsum <= 1e-10,
            "detail": {"min_eigenvalue": worst, "max_row_sum": rowsum}}


def solver_graph(seed: int):
    return two_cluster_graph(10, 10, 8, 3.0, 1.0, seed)


def check_solver_descent():
    """Final objective never exceeds the initial one on the pinned instances."""
    worst, iters, unconverged = -np.inf, 0, 0
    for seed in SOLVER_SEEDS:
        g = solver_graph(seed)
        for p in SOLVER_P:
            for mu in SOLVER_MU:
                res = p_solve(g, g.X, PLaplacianConfig(p=p, mu=mu))
                worst = max(worst, (res.trace[-1] - res.trace[0]) / max(abs(res.trace[0]), 1e-300))
                iters = max(iters, res.iterations)
                unconverged += not res.converged
    return {"error": max(worst, 0.0), "tol": 0.0, "passed": worst <= 0.0,
            "detail": {"max_iterations": iters, "runs": 90, "unconverged_at_max_iter": unconverged}}


def check_solver_p2_fixed_point():
    """At p=2 the solver reaches ``F = (S F + mu X)/(1 + mu)``; run with a tight tolerance."""
    err = 0.0
    for seed in SOLVER_SEEDS:
        g = solver_graph(seed)
        S = ag.value(normalized_adjacency(g))
        for mu in SOLVER_MU:
            res = p_solve(g, g.X, PLaplacianConfig(p=2.0, mu=mu, tol=1e-13, max_iter=2000))
            err = max(err, float(np.linalg.norm(res.F - (S @ res.F + mu * g.X) / (1 + mu))))
    return {"error": err, "tol": 1e-8}


def p_adapter_loss_fn(aug, pa, target):
    """Closure ``(W_down, W_up, rho) -> squared error`` of the p-adapter output."""
    def f(w_down, w_up, rho):
        q = PAdapter(Adapter(w_down, w_up), rho=rho, mu=pa.mu, eps=pa.eps, p_mode="learnable")
        out = p_adapter_forward(aug, q)
        diff = ag.sub(out, target)
        return ag.reduce_sum(ag.mul(diff, diff))
    return f


def check_p_adapter_gradients():
    worst = 0.0
    for seed in range(10):
        aug, pa, target = p_adapter_case(8000 + seed)
        f = p_adapter_loss_fn(aug, pa, target)
        rep = ag.check_gradients(f, [pa.adapter.w_down, pa.adapter.w_up, pa.rho], h=1e-6, tol=1e-4)
        worst = max(worst, rep.max_rel_error)
    return {"error": worst, "tol": 1e-4, "detail": {"instances": 10, "h": 1e-6}}


def check_heterophily():
    m = homophily_metrics(two_cluster_graph())
    ok = m["edge_homophily"] < 0.5 and min(m["intra_query"], m["intra_value"]) > 0.8
    return {"error": m["edge_homophily"], "tol": 0.5, "passed": ok, "detail": m}


def check_spectral_order():
    rows = {r["p"]: r["retention"]["high"] for r in spectral_response(two_cluster_graph(), [1.25, 2.0])}
    ratio = rows[2.0] / rows[1.25]
    return {"error": ratio, "tol": 1.0, "passed": ratio < 1.0,
            "detail": {"high_retention_p1.25": rows[1.25], "high_retention_p2": rows[2.0]}}


def check_softmax_rows():
    err = 0.0
    for seed in range(20):
        rng = nc.make_rng(seed)
        x = rng.standard_normal((5, 7)) * 30
        err = max(err, float(np.abs(nc.row_softmax(x).sum(-1) - 1).max()))
    return {"error": err, "tol": 1e-12}


def check_clamped_pow_zero_exponent():
    x = np.array([0.0, 1e-300, 1.0, 1e300])
    return {"error": _max_abs(nc.clamped_pow(x, 0.0, 1e-8), np.ones(4)), "tol": 0.0}


CHECKS = [
    ("augmentation-equivalence", "aug.query_block_equals_MV", check_aug_slice),
    ("augmentation-equivalence", "aug.output_route", check_aug_output_route),
    ("augmentation-equivalence", "aug.symmetric_structure", check_aug_structure),
    ("adapter-cross-route", "adapter.cross_route_single_head", check_cross_route_single),
    ("adapter-cross-route", "adapter.cross_route_multi_head", check_cross_route_multi),
    ("p2-degeneracy", "p2.normalize_returns_A", check_p2_normalize),
    ("p2-degeneracy", "p2.step_closed_form", check_p2_step),
    ("p2-degeneracy", "p2.p_adapter_matches_raw_graph", check_p2_adapter),
    ("operators", "ops.variation_two_forms", check_variation_forms),
    ("operators", "ops.delta2_two_routes", check_delta2_routes),
    ("operators", "ops.gradient_antisymmetry", check_gradient_antisymmetry),
    ("operators", "ops.laplacian_psd", check_laplacian_psd),
    ("solver", "solver.objective_descent", check_solver_descent),
    ("solver", "solver.p2_fixed_point_residual", check_solver_p2_fixed_point),
    ("gradients", "grad.p_adapter_central_differences", check_p_adapter_gradients),
    ("heterophily", "heterophily.two_cluster_graph", check_heterophily),
    ("spectral", "spectral.high_band_retention_order", check_spectral_order),
    ("numeric", "numeric.softmax_rows_sum_to_one", check_softmax_rows),
    ("numeric", "numeric.clamped_pow_zero_exponent", check_clamped_pow_zero_exponent),
]


def select(filters=()) -> list:
    """Checks whose group or name contains any of ``filters`` (all when empty)."""
    if not filters:
        return list(CHECKS)
    chosen = [c for c in CHECKS if any(f in c[0] or f in c[1] for f in filters)]
    if not chosen:
        raise ValueError(f"no checks match filter {list(filters)}; groups are {', '.join(GROUPS)}")
    return chosen


def run_checks(filters=()) -> list[CheckResult]:
    results = []
    for group, name, fn in select(filters):
        t0 = time.perf_counter()
        try:
            out = fn()
            err, tol = float(out["error"]), float(out["tol"])
            passed = bool(out.get("passed", err <= tol))
            detail = out.get("detail", {})
        except Exception as exc:  # a crashing check is a failed invariant
            err, tol, passed, detail = float("nan"), float("nan"), False, {"exception": repr(exc)}
        results.append(CheckResult(name, group, err, tol, passed, time.perf_counter() - t0, detail))
    return results


def report_dict(results: list[CheckResult]) -> dict:
    """JSON-ready report; wall-clock times sit under the single ``timing`` key."""
    checks = []
    for r in results:
        d = asdict(r)
        del d["seconds"]
        checks.append(d)
    return {"passed": all(r.passed for r in results),
            "failed": [r.name for r in results if not r.passed],
            "checks": checks,
            "timing": {r.name: r.seconds for r in results}}
