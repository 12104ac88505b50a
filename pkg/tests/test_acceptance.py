"""End-to-end acceptance checks; each prints one PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v``; the result lines are
written straight to the terminal even under output capture.
"""

import math

import numpy as np
import pytest

from maed.channel import JammerKind, SystemDims
from maed.emulator import calibrate_overhead, throughput_model
from maed.harness import SweepConfig, run_cycle_audit, run_sweep
from maed.reference import (
    MulCounter,
    evaluate_objective,
    gradient_naive,
    oblique_gradient_step,
    power_iteration_naive,
    power_iteration_step,
    residual_naive,
    residualize,
)

F_CLK = 1.492e9


def report(pytestconfig, number, ok, detail):
    line = f"[criterion {number}] {'PASS' if ok else 'FAIL'}: {detail}"
    capman = pytestconfig.pluginmanager.getplugin("capturemanager")
    with capman.global_and_fixture_disabled():
        print("\n" + line)
    assert ok, line


def cn(rng, *shape):
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / math.sqrt(2)


def rel(a, b):
    return float(np.linalg.norm(a - b) / np.linalg.norm(b))


@pytest.fixture(scope="module")
def sweep(tmp_path_factory):
    cfg = SweepConfig.default().replace(output_path=str(tmp_path_factory.mktemp("sweep") / "ber.csv"))
    recs = run_sweep(cfg)
    return cfg, {(r.receiver, r.jammer_kind, r.snr_db): r for r in recs}


def test_criterion_1_rearrangement(pytestconfig):
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(100):
        Y, s, u = cn(rng, 8, 32), cn(rng, 32), cn(rng, 8)
        x, E = residualize(Y, s)
        x_naive = Y @ np.conj(s) / np.vdot(s, s).real
        E_naive = residual_naive(Y, s)
        j = power_iteration_step(E, u)
        step = oblique_gradient_step(x, E, j, 1.0)
        worst = max(worst, rel(x, x_naive), rel(E, E_naive), rel(j, power_iteration_naive(E_naive, u)),
                    rel(step, -np.conj(gradient_naive(Y, s, j))))
    report(pytestconfig, 1, worst <= 1e-10, f"100 instances, max relative error {worst:.2e} (limit 1e-10)")


def test_criterion_2_gradient_oracle(pytestconfig):
    rng = np.random.default_rng(7)
    h = 1e-6
    worst = 0.0
    for _ in range(20):
        Y, s, j = cn(rng, 4, 8), cn(rng, 8), cn(rng, 4)
        x, E = residualize(Y, s)
        step = np.conj(oblique_gradient_step(x, E, j, 1.0))
        f = lambda v: evaluate_objective(Y, j, v)  # noqa: E731
        fd = np.zeros(8, dtype=complex)
        for k in range(8):
            e = np.zeros(8)
            e[k] = h
            fd[k] = 0.5 * ((f(s + e) - f(s - e)) + 1j * (f(s + 1j * e) - f(s - 1j * e))) / (2 * h)
        worst = max(worst, rel(step, -fd))
    report(pytestconfig, 2, worst <= 1e-5, f"20 instances, max relative error {worst:.2e} (limit 1e-5)")


def _top_snr_check(cfg, recs, receiver):
    top = max(cfg.snr_grid_db)
    rows = [recs[(receiver, k.value, top)] for k in JammerKind]
    ok = all(r.ber < 0.01 and r.ci_hi < 0.015 and r.bits_total >= 1.1e5 for r in rows)
    detail = ", ".join(f"{r.jammer_kind} {r.ber:.2e} (ci_hi {r.ci_hi:.2e})" for r in rows)
    return ok, f"{receiver} at {top:g} dB, {rows[0].bits_total} bits: {detail}"


def test_criterion_3_maed_float_ber(pytestconfig, sweep):
    cfg, recs = sweep
    assert cfg.t_max == 10 and all(j.rho_db == 30.0 for j in cfg.jammers)
    ok, detail = _top_snr_check(cfg, recs, "maed_float")
    report(pytestconfig, 3, ok, detail)


def test_criterion_4_lmmse_floor(pytestconfig, sweep):
    cfg, recs = sweep
    rows = [r for (rx, _, _), r in recs.items() if rx == "lmmse"]
    assert len(rows) == len(JammerKind) * len(cfg.snr_grid_db)
    worst = min(rows, key=lambda r: r.ci_lo)
    ok = all(r.ber >= 0.10 and r.ci_lo >= 0.08 for r in rows)
    report(pytestconfig, 4, ok, f"{len(rows)} points, min ber {min(r.ber for r in rows):.3f}, "
                                f"min ci_lo {worst.ci_lo:.3f} ({worst.jammer_kind} {worst.snr_db:g} dB)")


def test_criterion_5_fixed_point_fidelity(pytestconfig, sweep):
    cfg, recs = sweep
    ok3, detail = _top_snr_check(cfg, recs, "maed_fixed")
    worst_margin, worst_key = math.inf, None
    for (rx, kind, snr), fx in recs.items():
        if rx != "maed_fixed":
            continue
        fl = recs[("maed_float", kind, snr)]
        margin = max(0.5 * fl.ber, 0.002) - abs(fx.ber - fl.ber)
        if margin < worst_margin:
            worst_margin, worst_key = margin, (kind, snr)
    ok = ok3 and worst_margin >= 0
    report(pytestconfig, 5, ok, f"{detail}; tightest |fx-float| margin {worst_margin:.2e} at {worst_key}")


def test_criterion_6_cycle_counts(pytestconfig):
    rep = run_cycle_audit(SweepConfig.default())
    it = rep["iteration"]
    counts = (it["mv_8x32"], it["hermitian_mv"], it["row_scale"], it["inner8"], it["iteration_total"])
    ok = counts == (13, 10, 12, 5, 83) and rep["bit_exact"] and not rep["failures"] and rep["t_max"] == 10
    report(pytestconfig, 6, ok, f"phase counts {counts}, bit-exact over {rep['t_max']} iterations: {rep['bit_exact']}")


def test_criterion_7_throughput(pytestconfig):
    dims = SystemDims()
    budget = F_CLK * 2 * dims.D / 100e6
    overhead = calibrate_overhead(F_CLK, 100e6, 10, dims)
    total = 10 * 83 + overhead
    assert budget == pytest.approx(835.52) and total == 835
    tput = throughput_model(F_CLK, 10, dims, overhead)
    ok = abs(tput - 100e6) <= 0.5e6
    report(pytestconfig, 7, ok, f"{total} cycles/block, overhead {overhead}, {tput / 1e6:.3f} Mb/s (100 +- 0.5)")


def test_criterion_8_multiply_count(pytestconfig):
    E, u = np.ones((8, 32), dtype=complex), np.ones(8, dtype=complex)
    fast, naive = MulCounter(), MulCounter()
    power_iteration_step(E, u, fast)
    power_iteration_naive(E, u, naive)
    report(pytestconfig, 8, (fast.count, naive.count) == (512, 2112),
           f"rearranged {fast.count}, naive {naive.count} complex multiplies (want 512, 2112)")


def test_criterion_9_silicon_excluded(pytestconfig):
    capman = pytestconfig.pluginmanager.getplugin("capturemanager")
    with capman.global_and_fixture_disabled():
        print("\n[criterion 9] EXCLUDED: silicon area/power/energy measurements are out of scope")
