"""The canonical parameter studies behind the figure CSVs."""

from __future__ import annotations

import dataclasses
import io
import csv

from .ledger import MinerPolicy
from .metrics import emit_csv, fmt
from .sim import SimConfig, sweep

SIZES = (200, 400, 600, 800, 1000)
FIG3_LOADS = (0.2, 0.4, 0.6)
FIG4_LOAD = 0.5
FIG4_FAILURE_RATES = (0.05, 0.1, 0.2)
FIG5_LOADS = (0.3, 0.6)
FIG5_PERIODS = 3000


def _sized(base: SimConfig, n: int) -> SimConfig:
    return dataclasses.replace(base, num_devices=n, num_miners=min(base.num_miners, n))


def _by_size(base: SimConfig, seeds, workers: int, inspect=None) -> dict:
    # num_miners is clamped per size, so this is a sweep over pre-sized configs
    table = {}
    for n in SIZES:
        part = sweep(_sized(base, n), "num_devices", [n], seeds, workers=workers, inspect=inspect)
        table.update(part)
    return table


def fig3_table(base: SimConfig, seeds, workers: int = 1, inspect=None) -> tuple[dict, dict]:
    """Acceptance and visited count vs. size, one series per load.

    p stays at the base value and q = p / load, so for a given seed the
    series share arrivals and request contents and differ only in durations.
    """
    table, series = {}, {}
    for load in FIG3_LOADS:
        cfg = dataclasses.replace(base.with_load(load, hold="p"), failure_rate=0.0)
        for (n, seed), rep in _by_size(cfg, seeds, workers, inspect).items():
            table[(n, seed, load)] = rep
            series[(n, seed, load)] = load
    return table, series


def fig4_table(base: SimConfig, seeds, workers: int = 1, inspect=None) -> tuple[dict, dict]:
    """Recovery rate vs. size, one series per failure rate, at load 0.5 (p = 0.5, q = 1)."""
    table, series = {}, {}
    for f in FIG4_FAILURE_RATES:
        cfg = dataclasses.replace(base, p=FIG4_LOAD, q=1.0, failure_rate=f)
        for (n, seed), rep in _by_size(cfg, seeds, workers, inspect).items():
            table[(n, seed, f)] = rep
            series[(n, seed, f)] = f
    return table, series


def fig5_config(base: SimConfig, load: float) -> SimConfig:
    cfg = dataclasses.replace(base, num_devices=400, num_miners=200, failure_rate=0.2,
                              miner_policy=MinerPolicy.STAKE_WEIGHTED,
                              horizon=max(base.horizon, FIG5_PERIODS * base.mining_period))
    return cfg.with_load(load, hold="p")


def fig5_table(base: SimConfig, seeds, workers: int = 1, inspect=None) -> tuple[dict, dict]:
    """Miner selection frequencies, 400 devices / 200 miners, one row per (load, seed)."""
    table, series = {}, {}
    for load in FIG5_LOADS:
        for (_, seed), rep in sweep(fig5_config(base, load), "failure_rate", [0.2], seeds, workers=workers,
                                    inspect=inspect).items():
            table[(load, seed, "fig5")] = rep
            series[(load, seed, "fig5")] = load
    return table, series


def miner_frequency_csv(table: dict) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("load", "seed", "miner_id", "frequency"))
    for (load, seed, _), rep in table.items():
        for miner, freq in rep.miner_frequencies.items():
            w.writerow((fmt(load), fmt(seed), miner, fmt(freq)))
    return buf.getvalue().encode("ascii")


def write_figures(base: SimConfig, out_dir, seeds, workers: int = 1) -> list:
    """Run all studies and write their CSVs into ``out_dir``; returns the paths."""
    from pathlib import Path

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    fig3, s3 = fig3_table(base, seeds, workers)
    data = emit_csv(fig3, s3)
    for name in ("fig3a.csv", "fig3b.csv"):
        (out / name).write_bytes(data)
        written.append(out / name)
    fig4, s4 = fig4_table(base, seeds, workers)
    (out / "fig4.csv").write_bytes(emit_csv(fig4, s4))
    fig5, s5 = fig5_table(base, seeds, workers)
    (out / "fig5.csv").write_bytes(emit_csv(fig5, s5))
    (out / "fig5_miners.csv").write_bytes(miner_frequency_csv(fig5))
    written += [out / "fig4.csv", out / "fig5.csv", out / "fig5_miners.csv"]
    return written
