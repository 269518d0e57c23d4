"""End-to-end acceptance checks, one test per criterion.

The figure studies are expensive (hundreds of full runs), so each is run
once per session and shared. Every run they perform is also audited
against its own chain for criterion 6.
"""

import io
import subprocess
import sys
import time
from collections import defaultdict

import numpy as np
import pytest

from helpers import random_case
from nodsim import ledger
from nodsim.experiments import FIG3_LOADS, FIG4_FAILURE_RATES, FIG5_LOADS, SIZES, fig3_table, fig4_table, fig5_table
from nodsim.metrics import audit_run
from nodsim.registry import disseminate_and_map, matching_oracle, max_matching_size
from nodsim.sim import SimConfig, format_config, run_simulation

BASE = SimConfig()  # horizon 5000, p = 0.2
FIG3_SEEDS = range(30)
FIG4_SEEDS = range(10)
FIG5_SEEDS = range(3)

AUDITS = {"runs": 0, "problems": []}


def _audit(result):
    AUDITS["runs"] += 1
    for p in audit_run(result):
        AUDITS["problems"].append((result.config.num_devices, result.config.seed, p))


def _record(record, key, ok, detail):
    record[key] = (ok, detail)
    print(f"criterion {key}: {'PASS' if ok else 'FAIL'} - {detail}")
    assert ok, detail


def _means(table, field):
    acc = defaultdict(list)
    for (x, _, series), rep in table.items():
        acc[(x, series)].append(getattr(rep, field))
    return {k: float(np.mean(v)) for k, v in acc.items()}


@pytest.fixture(scope="module")
def fig3():
    t0 = time.perf_counter()
    table, _ = fig3_table(BASE, FIG3_SEEDS, inspect=_audit)
    return table, time.perf_counter() - t0


@pytest.fixture(scope="module")
def fig4():
    table, _ = fig4_table(BASE, FIG4_SEEDS, inspect=_audit)
    return table


@pytest.fixture(scope="module")
def fig5():
    table, _ = fig5_table(BASE, FIG5_SEEDS, inspect=_audit)
    return table


def test_criterion_1_acceptance_trend(fig3, acceptance_record):
    table, elapsed = fig3
    acc = _means(table, "acceptance_rate")
    up_in_size = all(acc[(a, L)] < acc[(b, L)] for L in FIG3_LOADS for a, b in zip(SIZES, SIZES[1:]))
    down_in_load = all(acc[(n, a)] > acc[(n, b)] for n in SIZES for a, b in zip(FIG3_LOADS, FIG3_LOADS[1:]))
    grid = "; ".join(f"n={n}: " + "/".join(f"{acc[(n, L)]:.4f}" for L in FIG3_LOADS) for n in SIZES)
    _record(acceptance_record, 1, up_in_size and down_in_load,
            f"mean acceptance by size (loads {FIG3_LOADS}) {grid}; sweep wall time {elapsed:.0f}s "
            f"on this machine (audits included)")


def test_criterion_2_visited_trend(fig3, acceptance_record):
    table, _ = fig3
    vis = _means(table, "mean_visited")
    down_in_size = all(vis[(a, L)] > vis[(b, L)] for L in FIG3_LOADS for a, b in zip(SIZES, SIZES[1:]))
    spreads = {n: (max(vis[(n, L)] for L in FIG3_LOADS) - min(vis[(n, L)] for L in FIG3_LOADS))
               / min(vis[(n, L)] for L in FIG3_LOADS) for n in SIZES}
    grid = "; ".join(f"n={n}: " + "/".join(f"{vis[(n, L)]:.1f}" for L in FIG3_LOADS) for n in SIZES)
    _record(acceptance_record, 2, down_in_size and max(spreads.values()) < 0.15,
            f"mean visited {grid}; max relative spread across loads {max(spreads.values()):.3f} (< 0.15)")


def test_criterion_3_recovery(fig4, acceptance_record):
    rec = _means(fig4, "recovery_rate")
    nondecreasing = all(rec[(a, f)] <= rec[(b, f)] for f in FIG4_FAILURE_RATES for a, b in zip(SIZES, SIZES[1:]))
    at_1000 = min(rec[(1000, f)] for f in FIG4_FAILURE_RATES)
    spread = max(max(rec[(n, f)] for f in FIG4_FAILURE_RATES) - min(rec[(n, f)] for f in FIG4_FAILURE_RATES)
                 for n in SIZES)
    grid = "; ".join(f"n={n}: " + "/".join(f"{rec[(n, f)]:.3f}" for f in FIG4_FAILURE_RATES) for n in SIZES)
    _record(acceptance_record, 3, nondecreasing and at_1000 >= 0.65 and spread < 0.10,
            f"recovery by size (f={FIG4_FAILURE_RATES}) {grid}; min at 1000 = {at_1000:.3f} (>= 0.65); "
            f"max spread {100 * spread:.1f} pp (< 10)")


def test_criterion_4_miner_frequency(fig5, acceptance_record):
    worst = max(rep.max_miner_freq for rep in fig5.values())
    fewest = min(len(rep.miner_frequencies) for rep in fig5.values())
    periods = min(rep.totals.blocks for rep in fig5.values())
    _record(acceptance_record, 4, worst <= 0.10 and fewest >= 50 and periods >= 3000,
            f"{len(fig5)} runs (loads {FIG5_LOADS}), >= {periods} periods each: max per-miner frequency "
            f"{worst:.4f} (<= 0.10), fewest distinct miners {fewest} (>= 50)")


def test_criterion_5_oracle_equivalence(acceptance_record):
    rng = np.random.default_rng(20240501)
    cases = false_accepts = disagreements = feasible = greedy_misses = 0
    while cases < 10_000:
        reg, req, radius = random_case(rng, max_devices=8, max_targets=3)
        exhaustive = matching_oracle(req, reg, radius, 0)
        if exhaustive != (max_matching_size(req, reg, radius, 0) == req.N):
            disagreements += 1
        res = disseminate_and_map(req, reg, rng, radius, 1)
        false_accepts += res.accepted and not exhaustive
        feasible += exhaustive
        greedy_misses += exhaustive and not res.accepted
        cases += 1
    _record(acceptance_record, 5, false_accepts == 0 and disagreements == 0,
            f"{cases} cases: {false_accepts} greedy accepts of infeasible requests, {disagreements} oracle "
            f"disagreements; completeness gap {greedy_misses}/{feasible} feasible requests rejected")


def test_criterion_6_ledger(fig3, fig4, fig5, acceptance_record):
    # extra runs exercising slow probing and multi-slot recovery deadlines
    for cfg in (SimConfig(num_devices=300, horizon=1500, failure_rate=0.2, probe_period=2, recovery_deadline=3),
                SimConfig(num_devices=200, num_miners=50, horizon=1000, mining_period=7, failure_rate=0.1,
                          miner_policy=ledger.MinerPolicy.UNIFORM)):
        _audit(run_simulation(cfg))
    # byte-level tamper detection on the export of a complete run with failures
    res = run_simulation(SimConfig(num_devices=40, num_miners=10, horizon=45, request_N=3, failure_rate=0.2))
    assert res.events and res.transfers
    buf = io.StringIO()
    ledger.export_chain(res.chain, buf)
    data = buf.getvalue().encode()
    assert ledger.verify_export(data)
    rng = np.random.default_rng(6)
    missed = tried = 0
    for pos in range(len(data)):
        for new in (data[pos] ^ 0x01, int(rng.integers(0, 256))):
            if new == data[pos]:
                continue
            bad = bytearray(data)
            bad[pos] = new
            tried += 1
            missed += bool(ledger.verify_export(bytes(bad)))
    problems = AUDITS["problems"]
    _record(acceptance_record, 6, not problems and missed == 0,
            f"{AUDITS['runs']} runs audited (verify_chain, length, conservation, exactly-once): "
            f"{len(problems)} problems {problems[:3]}; {tried} single-byte tampers over {len(data)} "
            f"positions, {missed} undetected")


def _cli(*args):
    return subprocess.run([sys.executable, "-m", "nodsim", *args], capture_output=True, check=True)


def test_criterion_7_cross_process_determinism(tmp_path, acceptance_record):
    cfg = tmp_path / "c.cfg"
    cfg.write_text(format_config(SimConfig(num_devices=250, horizon=1200, failure_rate=0.1)))
    outputs = []
    for k in range(2):
        d = tmp_path / f"p{k}"
        _cli("run", "--config", str(cfg), "--seed", "17", "--out", str(d / "run.csv"))
        _cli("sweep", "--config", str(cfg), "--axis", "failure_rate", "--values", "0.05,0.2", "--seeds", "2",
             "--out", str(d / "sweep.csv"))
        outputs.append({name: (d / name).read_bytes()
                        for name in ("run.csv", "run.chain.ndjson", "run.events.csv", "sweep.csv")})
    same = {name: outputs[0][name] == outputs[1][name] for name in outputs[0]}
    _record(acceptance_record, 7, all(same.values()) and all(outputs[0].values()),
            "two processes, byte-identical: " + ", ".join(f"{n}={s}" for n, s in same.items()))


def test_criterion_8_load_identity(fig3, acceptance_record):
    table, _ = fig3
    running = _means(table, "mean_running")
    acc = _means(table, "acceptance_rate")
    errs = {(n, L): abs(running[(n, L)] - L * acc[(n, L)]) / (L * acc[(n, L)]) for n in SIZES for L in FIG3_LOADS}
    worst = max(errs, key=errs.get)
    _record(acceptance_record, 8, errs[worst] < 0.10,
            f"steady-state mean running vs load x acceptance over {len(errs)} cells (failure rate 0): worst "
            f"relative error {errs[worst]:.4f} at n={worst[0]}, load={worst[1]} "
            f"({running[worst]:.4f} vs {worst[1] * acc[worst]:.4f})")
