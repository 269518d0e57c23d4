import dataclasses
import json

import numpy as np
import pytest

from nodsim import ledger
from nodsim.cli import main
from nodsim.experiments import fig5_config
from nodsim.metrics import (
    CSV_COLUMNS,
    EmptyTable,
    IncompleteLog,
    aggregate,
    emit_csv,
    read_csv,
)
from nodsim.registry import InstanceStatus
from nodsim.sim import SimConfig, SlotLog, Termination, format_config, run_simulation, sweep

TINY = SimConfig(num_devices=80, num_miners=30, horizon=150, seed=1)


def _genesis():
    return ledger.genesis(ledger.generate_keypair(np.random.default_rng(0)))


def test_recovery_rate_definition():
    cfg = SimConfig(horizon=10, warmup=0)
    logs = [SlotLog(i) for i in range(10)]
    outcomes = [(2, True), (1, True), (3, True), (1, False), (0, False)]
    for i, (failures, recovered) in enumerate(outcomes):
        logs[i].arrivals = logs[i].acceptances = 1
        logs[i].visited = [5]
        logs[9].terminations.append(Termination(i, i, InstanceStatus.COMPLETED, failures, recovered))
    rep = aggregate(logs, _genesis(), cfg)
    assert rep.recovery_rate == 0.75
    assert (rep.totals.failures, rep.totals.recoveries) == (4, 3)
    assert rep.acceptance_rate == 1.0 and rep.mean_visited == 5


def test_zero_arrivals_absent():
    cfg = SimConfig(horizon=6, warmup=0)
    rep = aggregate([SlotLog(i) for i in range(6)], _genesis(), cfg)
    assert rep.acceptance_rate is None and rep.recovery_rate is None and rep.mean_visited is None


def test_incomplete_log():
    cfg = SimConfig(horizon=6, warmup=0)
    with pytest.raises(IncompleteLog):
        aggregate([SlotLog(i) for i in range(5)], _genesis(), cfg)
    logs = [SlotLog(i) for i in range(6)]
    logs[2].arrivals = 1
    with pytest.raises(IncompleteLog):
        aggregate(logs, _genesis(), cfg)


def test_miner_frequencies_from_raw_export(tmp_path):
    res = run_simulation(TINY)
    path = tmp_path / "c.ndjson"
    with open(path, "w") as fp:
        ledger.export_chain(res.chain, fp)
    counts = {}
    lines = path.read_text().splitlines()
    for line in lines[1:]:
        m = json.loads(line)["miner_id"]
        counts[m] = counts.get(m, 0) + 1
    expected = {m: c / (len(lines) - 1) for m, c in counts.items()}
    assert res.report.miner_frequencies == expected
    assert sum(expected.values()) == pytest.approx(1.0, abs=1e-12)


def test_report_rates_in_range():
    rep = run_simulation(dataclasses.replace(TINY, failure_rate=0.1)).report
    t = rep.totals
    assert t.accepts + t.rejections == t.arrivals
    for rate in (rep.acceptance_rate, rep.recovery_rate):
        assert rate is None or 0 <= rate <= 1


def test_csv_one_entry_two_lines():
    data = emit_csv({(0.1, 0): run_simulation(TINY).report})
    lines = data.decode().splitlines()
    assert len(lines) == 2
    assert lines[0] == ",".join(CSV_COLUMNS)


def test_csv_empty_table():
    with pytest.raises(EmptyTable):
        emit_csv({})


def test_csv_deterministic_and_parses_back():
    a = emit_csv(sweep(TINY, "failure_rate", [0.0, 0.2], [0, 1]))
    b = emit_csv(sweep(TINY, "failure_rate", [0.0, 0.2], [0, 1]))
    assert a == b
    table = sweep(TINY, "failure_rate", [0.0, 0.2], [0, 1])
    for row, ((value, seed), rep) in zip(read_csv(a), table.items()):
        assert row["axis"] == value and row["seed"] == seed
        assert row["load"] == round(rep.network_load, 6)
        for col in ("acceptance_rate", "mean_visited", "recovery_rate"):
            v = getattr(rep, col)
            assert (row[col] is None) == (v is None)
            if v is not None:
                assert row[col] == round(v, 6)
        assert row["arrivals"] == rep.totals.arrivals


def test_csv_absent_is_empty_field():
    rep = run_simulation(dataclasses.replace(TINY, p=0.0)).report
    row = emit_csv({(0, 0): rep}).decode().splitlines()[1].split(",")
    assert row[CSV_COLUMNS.index("acceptance_rate")] == ""
    assert row[CSV_COLUMNS.index("recovery_rate")] == ""


@pytest.fixture
def cfg_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text(format_config(dataclasses.replace(TINY, failure_rate=0.1)))
    return path


def test_cli_run_and_verify(cfg_file, tmp_path, capsys):
    out = tmp_path / "out" / "run.csv"
    assert main(["run", "--config", str(cfg_file), "--seed", "4", "--out", str(out)]) == 0
    chain = out.with_suffix(".chain.ndjson")
    assert out.exists() and chain.exists() and out.with_suffix(".events.csv").exists()
    assert main(["verify", "--chain", str(chain)]) == 0
    data = bytearray(chain.read_bytes())
    data[len(data) // 2] ^= 0x04
    bad = tmp_path / "bad.ndjson"
    bad.write_bytes(bytes(data))
    assert main(["verify", "--chain", str(bad)]) == 2
    assert "violation" in capsys.readouterr().err


def test_cli_rejects_invalid_config(tmp_path, capsys):
    path = tmp_path / "bad.cfg"
    path.write_text("p = 1.5\n")
    assert main(["run", "--config", str(path), "--out", str(tmp_path / "x.csv")]) == 1
    assert "p:" in capsys.readouterr().err


def test_cli_missing_file(tmp_path):
    assert main(["run", "--config", str(tmp_path / "none.cfg"), "--out", str(tmp_path / "x.csv")]) == 1


def test_cli_sweep(cfg_file, tmp_path):
    out = tmp_path / "s.csv"
    assert main(["sweep", "--config", str(cfg_file), "--axis", "num_devices", "--values", "60,80",
                 "--seeds", "2", "--out", str(out)]) == 0
    rows = read_csv(out.read_bytes())
    assert [(r["axis"], r["seed"]) for r in rows] == [(60, 0), (60, 1), (80, 0), (80, 1)]
    assert main(["sweep", "--config", str(cfg_file), "--axis", "nope", "--values", "1", "--seeds", "1",
                 "--out", str(out)]) == 1


def test_cli_figures_fig5_matches_aggregate(tmp_path):
    cfg_path = tmp_path / "fig.cfg"
    base = SimConfig(horizon=30, seed=0)
    cfg_path.write_text(format_config(base))
    out = tmp_path / "figs"
    assert main(["figures", "--config", str(cfg_path), "--out", str(out), "--seeds", "1"]) == 0
    for name in ("fig3a.csv", "fig3b.csv", "fig4.csv", "fig5.csv"):
        assert (out / name).exists()
    rows = read_csv((out / "fig5.csv").read_bytes())
    direct = run_simulation(dataclasses.replace(fig5_config(base, 0.3), seed=0)).report
    row = next(r for r in rows if r["axis"] == 0.3 and r["seed"] == 0)
    assert row["max_miner_freq"] == round(direct.max_miner_freq, 6)
