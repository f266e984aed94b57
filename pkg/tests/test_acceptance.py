"""End-to-end acceptance checks, one test per numbered criterion.

Each test records a PASS/FAIL line (printed in the terminal summary) before
asserting, so a failing criterion still reports its measured numbers.
Criteria 8 and 9 run the full desk pipeline twice with the default
experiment config; expect roughly half an hour on a single core.
"""

import itertools
import json
import math
import os
import re
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from jetlab import diffengine as de
from jetlab.cli import VARIANTS, ExperimentConfig, RunDir, run_pipeline
from jetlab.curvature import hutchinson_trace, top_eigenpair
from jetlab.datasets import GLUON, WBOSON, generate_toy, pack
from jetlab.diffengine import HvpOperator, Layout, ParamVector, dense_hessian, make_hvp, value_and_grad
from jetlab.evalrobust import roc_auc
from jetlab.kinematics import FourVector, boost_array, feature_rows, jet_features, mass2_array, sample_boosts, wrap_phi
from jetlab.model import ModelConfig, Batch, forward, init_params, param_count, reconcile_param_count, student_readings, teacher_readings
from jetlab.objectives import bce_loss

ROOT = Path(__file__).resolve().parents[1]


def fd_grad(f, x, h):
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def toy_batch(n_jets, seed=0):
    data = generate_toy(GLUON, WBOSON, max(10, n_jets), seed=seed)
    return Batch.from_packed(pack(data.train[:n_jets]))


def smooth_params(cfg, seed):
    p = init_params(cfg, seed)
    return p.replace(p.values + np.random.default_rng(seed).normal(0, 0.05, len(p)))


# ------------------------------------------------------------------ 1


def test_criterion_1_autodiff(criterion):
    t0 = time.perf_counter()
    cfg = ModelConfig(d_model=8, n_layers=1, n_heads=2, ff_dim=8, head_dims=(8,))
    batch = toy_batch(8)
    p = smooth_params(cfg, 1)

    def loss_np(x):
        return float(bce_loss(forward(torch.as_tensor(x), cfg, batch), batch.labels))

    _, g = value_and_grad(lambda th: bce_loss(forward(th, cfg, batch), batch.labels), p)
    fd = fd_grad(loss_np, p.values, 1e-6)
    model_err = float(np.max(np.abs(g.values - fd) / np.maximum(np.abs(fd), 1e-6)))

    rng = np.random.default_rng(2)
    primitives = {
        "linear": ([("x", (3, 4)), ("w", (4, 2)), ("b", (2,))], lambda t: de.linear(t["x"], t["w"], t["b"])),
        "relu": ([("x", (10,))], lambda t: de.relu(t["x"])),
        "sigmoid": ([("x", (10,))], lambda t: de.sigmoid(t["x"])),
        "log": ([("x", (10,))], lambda t: de.log(t["x"] ** 2 + 0.5)),
        "square": ([("x", (10,))], lambda t: de.square(t["x"])),
        "add": ([("a", (5,)), ("b", (5,))], lambda t: de.add(t["a"], t["b"])),
        "softmax": ([("s", (2, 5))], lambda t: de.masked_softmax(t["s"], torch.tensor([True, True, False, True, True]))),
        "layer_norm": ([("x", (3, 6)), ("g", (6,)), ("o", (6,))], lambda t: de.layer_norm(t["x"], t["g"], t["o"])),
        "mean_pool": ([("x", (2, 4, 3))], lambda t: de.masked_mean(t["x"], torch.tensor([[True, True, False, True], [True, False, False, False]]))),
        "softplus": ([("x", (10,))], lambda t: de.softplus(t["x"])),
    }
    prim_err = {}
    for name, (shapes, fn) in primitives.items():
        lay = Layout.build(shapes)
        x0 = rng.uniform(-1.5, 1.5, lay.size)
        x0[np.abs(x0) < 0.05] = 0.3  # keep relu away from its kink
        proj = None

        def scalar(theta, fn=fn, lay=lay):
            nonlocal proj
            out = fn(lay.split(theta))
            if proj is None:
                proj = torch.as_tensor(np.random.default_rng(3).normal(size=tuple(out.shape)))
            return (out * proj).sum()

        _, gp = value_and_grad(scalar, ParamVector(x0, lay))
        fdp = fd_grad(lambda x: float(scalar(torch.as_tensor(x))), x0, 1e-6)
        prim_err[name] = float(np.max(np.abs(gp.values - fdp)) / max(np.max(np.abs(fdp)), 1e-12))
    elapsed = time.perf_counter() - t0
    worst = max(prim_err, key=prim_err.get)
    ok = model_err < 1e-4 and prim_err[worst] < 1e-6 and elapsed < 10
    criterion(1, ok, f"model grad max rel err {model_err:.2e} (<1e-4); worst primitive {worst} {prim_err[worst]:.2e} (<1e-6); {elapsed:.1f}s (<10s)")
    assert ok


# ------------------------------------------------------------------ 2


def test_criterion_2_hvp(criterion):
    t0 = time.perf_counter()
    cfg = ModelConfig(d_model=4, n_layers=1, n_heads=1, ff_dim=4, head_dims=(4,))
    assert param_count(cfg) <= 200
    batch = toy_batch(6, seed=1)
    p = smooth_params(cfg, 2)

    def loss(th):
        return bce_loss(forward(th, cfg, batch), batch.labels)

    H = dense_hessian(make_hvp(loss, p))

    def grad_at(x):
        return value_and_grad(loss, p.replace(x))[1].values

    h = 1e-5
    cols = []
    for i in range(len(p)):
        e = np.zeros(len(p))
        e[i] = h
        cols.append((grad_at(p.values + e) - grad_at(p.values - e)) / (2 * h))
    H_fd = np.stack(cols, axis=1)
    hess_err = float(np.max(np.abs(H - H_fd)) / np.max(np.abs(H_fd)))

    op = make_hvp(loss, p)
    rng = np.random.default_rng(0)
    sym = 0.0
    for _ in range(100):
        u, v = rng.normal(size=(2, len(p)))
        u /= np.linalg.norm(u)
        v /= np.linalg.norm(v)
        sym = max(sym, abs(u @ op(v) - v @ op(u)))
    elapsed = time.perf_counter() - t0
    ok = hess_err < 1e-4 and sym < 1e-7 and elapsed < 30
    criterion(2, ok, f"{len(p)} params; dense Hessian vs FD rel err {hess_err:.2e} (<1e-4); max symmetry gap {sym:.1e} (<1e-7); {elapsed:.1f}s (<30s)")
    assert ok


# ------------------------------------------------------------------ 3


def test_criterion_3_lanczos(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    worst_rel, residual_ok, runs = 0.0, True, 0
    for dim in (8, 16, 32, 64, 96, 128):
        for _ in range(3):
            a = rng.normal(size=(dim, dim))
            a = (a + a.T) / 2
            w = np.linalg.eigvalsh(a)
            ref = w[np.argmax(np.abs(w))]
            res = top_eigenpair(HvpOperator.from_matrix(a), max_iter=dim, tol=1e-10, seed=runs)
            worst_rel = max(worst_rel, abs(res.lambda_1 - ref) / abs(ref))
            true_res = np.linalg.norm(a @ res.nu_1 - res.lambda_1 * res.nu_1)
            residual_ok &= bool(true_res <= res.tol * max(1, abs(res.lambda_1)) and abs(np.linalg.norm(res.nu_1) - 1) < 1e-10)
            runs += 1
    elapsed = time.perf_counter() - t0
    ok = worst_rel < 1e-6 and residual_ok and elapsed < 5
    criterion(3, ok, f"{runs} matrices dim<=128; worst lambda1 rel err {worst_rel:.1e} (<1e-6); residual invariant {'held' if residual_ok else 'BROKEN'}; {elapsed:.2f}s (<5s)")
    assert ok


# ------------------------------------------------------------------ 4


def test_criterion_4_hutchinson(criterion):
    t0 = time.perf_counter()
    d = np.diag(np.arange(1.0, 11.0))
    res = hutchinson_trace(HvpOperator.from_matrix(d), n_probes=200, seed=0)
    # Rademacher probes make z^T D z exact for diagonal D, so also test a rotated copy
    q, _ = np.linalg.qr(np.random.default_rng(4).normal(size=(10, 10)))
    rot = hutchinson_trace(HvpOperator.from_matrix(q @ d @ q.T), n_probes=200, seed=0)
    within = abs(res.estimate - 55.0) <= 3 * res.stderr and abs(rot.estimate - 55.0) <= 3 * rot.stderr
    ident = hutchinson_trace(HvpOperator.from_matrix(np.eye(25)), n_probes=50, seed=1)
    exact = all(s == 25.0 for s in ident.samples)
    elapsed = time.perf_counter() - t0
    ok = within and exact and elapsed < 1
    criterion(
        4,
        ok,
        f"diag(1..10): {res.estimate:.3f} +- {res.stderr:.3f}; rotated: {rot.estimate:.3f} +- {rot.stderr:.3f} "
        f"({abs(rot.estimate - 55) / rot.stderr:.2f} stderr, <3); identity exact on every probe: {exact}; {elapsed:.3f}s (<1s)",
    )
    assert ok


# ------------------------------------------------------------------ 5


def test_criterion_5_kinematics(criterion):
    rng = np.random.default_rng(0)
    p3 = rng.normal(0, 50, (10_000, 3))
    m = rng.uniform(0, 20, 10_000)
    p4 = np.concatenate([np.sqrt(m**2 + (p3**2).sum(1))[:, None], p3], axis=1)
    n, y = sample_boosts(rng, 3.0, 10_000)
    out = boost_array(p4, n, y)
    m2_in, m2_out = mass2_array(p4), mass2_array(out)
    # rounding floor of E^2 - p^2 is set by E'^2; well-conditioned vectors are also checked against m^2
    mass_err = float(np.max(np.abs(m2_out - m2_in) / out[:, 0] ** 2))
    cond = m2_in > 1e-2 * p4[:, 0] ** 2
    mass_err_m2 = float(np.max(np.abs(m2_out - m2_in)[cond] / m2_in[cond]))
    back = boost_array(out, -n, y)
    inv_err = float(np.max(np.abs(back - p4) / np.abs(p4[:, :1])))

    def ptetaphi(pt, eta, phi):
        return FourVector(pt * math.cosh(eta), pt * math.cos(phi), pt * math.sin(phi), pt * math.sinh(eta))

    wrap = feature_rows(jet_features([ptetaphi(10.0, 0.0, 3.0)], ptetaphi(50.0, 0.0, -3.0)))[0]
    self_row = feature_rows(jet_features([ptetaphi(40.0, 0.2, 1.0)], ptetaphi(40.0, 0.2, 1.0)))[0]
    units = [
        wrap.d_phi == wrap_phi(6.0 - 2 * math.pi) and abs(wrap.d_phi - (6.0 - 2 * math.pi)) < 1e-12,
        wrap.d_r == math.hypot(wrap.d_eta, wrap.d_phi),
        self_row.d_r == 0.0 and self_row.d_phi == 0.0,
        wrap_phi(math.pi) == math.pi and wrap_phi(-math.pi) == math.pi,
        math.isclose(wrap_phi(3 * math.pi), math.pi, rel_tol=1e-15),
    ]
    ok = mass_err < 1e-9 and mass_err_m2 < 1e-9 and inv_err < 1e-9 and all(units)
    criterion(
        5,
        ok,
        f"10^4 boosts y<=3: mass^2 err {mass_err:.1e} of E'^2, {mass_err_m2:.1e} of m^2 (<1e-9); inverse err {inv_err:.1e} (<1e-9); dR/dphi unit cases {sum(units)}/{len(units)}",
    )
    assert ok


# ------------------------------------------------------------------ 6


def pair_auc(scores, labels):
    pos = [s for s, l in zip(scores, labels) if l == 1]
    neg = [s for s, l in zip(scores, labels) if l == 0]
    wins = sum(1.0 if a > b else 0.5 if a == b else 0.0 for a, b in itertools.product(pos, neg))
    return wins / (len(pos) * len(neg))


def test_criterion_6_auc(criterion):
    rng = np.random.default_rng(1)
    worst = 0.0
    for case in range(200):
        n = int(rng.integers(2, 30))
        labels = rng.integers(0, 2, n)
        labels[:2] = [0, 1]
        scores = rng.integers(0, 5, n) / 4.0 if case % 2 else rng.normal(size=n)
        worst = max(worst, abs(roc_auc(scores, labels) - pair_auc(scores, labels)))
    ok = worst <= 1e-12
    criterion(6, ok, f"200 random cases (half with ties): max |AUC - pair enumeration| = {worst:.1e} (<=1e-12)")
    assert ok


# ------------------------------------------------------------------ 7


def test_criterion_7_param_count(criterion):
    readme = (ROOT / "README.md").read_text()
    teacher = reconcile_param_count(1_256_356, teacher_readings())
    student = reconcile_param_count(487_665, student_readings())
    t_diff, t_count, _ = teacher[0]
    s_diff, s_count, _ = student[0]
    documented = all(
        f"{x:,}" in readme for x in (1_256_356, t_count, t_diff, 487_665, s_count, s_diff)
    ) and re.search(r"reconciliation", readme, re.I)
    exact = t_diff == 0 and s_diff == 0
    ok = bool(exact or documented)
    criterion(
        7,
        ok,
        f"teacher closest {t_count:,} (target 1,256,356, off by {t_diff}); student closest {s_count:,} (target 487,665, off by {s_diff}); reconciliation note in README: {bool(documented)}",
    )
    assert ok


# ------------------------------------------------------------------ 8, 9


def _pipeline(root: Path) -> tuple[Path, dict, float]:
    cfg = ExperimentConfig()
    rd = RunDir.open(str(root), cfg)
    t0 = time.perf_counter()
    code = run_pipeline(rd, jobs=min(4, os.cpu_count() or 1))
    elapsed = time.perf_counter() - t0
    report = json.loads((rd.root / "report.json").read_text())
    report["_exit_code"] = code
    return rd.root, report, elapsed


@pytest.fixture(scope="module")
def first_run(tmp_path_factory):
    return _pipeline(tmp_path_factory.mktemp("accept_a"))


def test_criterion_8_directional_pipeline(first_run, criterion):
    root, report, elapsed = first_run
    print((root / "report.txt").read_text())
    v = report["verdicts"]
    parts = {
        "(a) curvature ratios < 1": v["curvature_ratios_below_1"]["holds"],
        "(b) slice flatter": v["constrained_slice_flatter"]["holds"],
        "(b) median|R-1| smaller everywhere": v["goldstone_smaller_everywhere"]["holds"],
        "(c) smaller smearing degradation": v["constrained_smaller_smearing_degradation"]["holds"],
        "(d) distillation MSE not larger": v["constrained_teacher_distills_no_worse"]["holds"],
        "ID AUC gap < 0.02": v["id_auc_gap_below_0.02"]["holds"],
    }
    runs = sum(report["in_distribution"][k]["n_seeds"] for k in VARIANTS)
    ok = all(parts.values()) and runs == 6 and elapsed < 1800
    detail = "; ".join(f"{k}: {'yes' if x else 'NO'}" for k, x in parts.items())
    r = v["curvature_ratios_below_1"]
    criterion(
        8,
        ok,
        f"{detail}; lambda1 ratio {r['lambda1_ratio']:.3f}, trace ratio {r['trace_ratio']:.3f}; {runs} runs in {elapsed / 60:.1f} min",
    )
    assert ok


def test_criterion_9_determinism(first_run, tmp_path_factory, criterion):
    root_a = first_run[0]
    root_b, _, _ = _pipeline(tmp_path_factory.mktemp("accept_b"))
    names = ["metrics.csv"]
    for v in VARIANTS:
        names += [f"{v}/curvature.json", f"{v}/distill.csv"]
        names += [str(p.relative_to(root_a)) for p in sorted((root_a / v).glob("*/runrecord.json"))]
    diffs = [n for n in names if (root_a / n).read_bytes() != (root_b / n).read_bytes()]
    ok = not diffs and len(names) == 11
    criterion(9, ok, f"{len(names) - len(diffs)}/{len(names)} artifacts byte-identical" + (f"; differing: {diffs}" if diffs else ""))
    assert ok
