"""Aggregation of slot logs into run reports, and CSV output."""

from __future__ import annotations

import csv
import dataclasses
import io
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .ledger import Chain, miner_counts


class IncompleteLog(ValueError):
    pass


class EmptyTable(ValueError):
    pass


@dataclass(frozen=True)
class Totals:
    arrivals: int
    accepts: int
    rejections: int
    failures: int
    recoveries: int
    blocks: int


@dataclass(frozen=True)
class MetricsReport:
    """Steady-state summary of one run. Undefined rates are ``None``."""

    network_load: float
    acceptance_rate: float | None
    mean_visited: float | None
    recovery_rate: float | None
    miner_frequencies: dict
    totals: Totals
    mean_running: float | None
    seed: int
    config: dict = field(default_factory=dict, compare=True)

    @property
    def max_miner_freq(self) -> float | None:
        return max(self.miner_frequencies.values()) if self.miner_frequencies else None


def _check_logs(logs: Sequence, horizon: int) -> None:
    if len(logs) < horizon:
        raise IncompleteLog(f"expected at least {horizon} slot logs, got {len(logs)}")
    for i, entry in enumerate(logs):
        if entry.slot != i:
            raise IncompleteLog(f"slot {i} missing (found {entry.slot})")
        if entry.acceptances + entry.rejections != entry.arrivals:
            raise IncompleteLog(f"slot {i}: accepts + rejections != arrivals")


def miner_frequencies(chain: Chain) -> dict[str, float]:
    counts = miner_counts(chain)
    total = sum(counts.values())
    return {m: c / total for m, c in sorted(counts.items())} if total else {}


def aggregate(logs: Sequence, chain: Chain, config) -> MetricsReport:
    """Reduce a run to its metrics.

    Arrival-side rates count requests arriving after the warm-up; recovery
    counts requests arriving after the warm-up that saw at least one failure.
    Miner frequencies cover every mining period on the chain.
    """
    _check_logs(logs, config.horizon)
    w = min(config.warmup_slots, config.horizon - 1)
    steady = logs[w:config.horizon]
    arrivals = sum(s.arrivals for s in steady)
    accepts = sum(s.acceptances for s in steady)
    rejections = sum(s.rejections for s in steady)
    visited = [v for s in steady for v in s.visited]
    terminated = [t for s in logs for t in s.terminations if w <= t.arrival_slot < config.horizon]
    failed = [t for t in terminated if t.failures > 0]
    recovered = sum(1 for t in failed if t.recovered)
    if len(terminated) != accepts:
        raise IncompleteLog(f"{accepts} accepted requests but {len(terminated)} terminations")
    return MetricsReport(
        network_load=config.network_load,
        acceptance_rate=accepts / arrivals if arrivals else None,
        mean_visited=sum(visited) / len(visited) if visited else None,
        recovery_rate=recovered / len(failed) if failed else None,
        miner_frequencies=miner_frequencies(chain),
        totals=Totals(arrivals, accepts, rejections, len(failed), recovered, len(chain) - 1),
        mean_running=sum(s.running for s in steady) / len(steady) if steady else None,
        seed=config.seed,
        config={k: v for k, v in dataclasses.asdict(config).items() if k != "seed"},
    )


CSV_COLUMNS = ("axis", "seed", "load", "acceptance_rate", "mean_visited", "recovery_rate", "max_miner_freq",
               "arrivals", "accepts", "failures", "recoveries")


def fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, int):
        return str(value)
    return f"{value:.6f}"


def report_row(axis_value, report: MetricsReport) -> list[str]:
    t = report.totals
    return [fmt(axis_value), fmt(report.seed), fmt(report.network_load), fmt(report.acceptance_rate),
            fmt(report.mean_visited), fmt(report.recovery_rate), fmt(report.max_miner_freq),
            fmt(t.arrivals), fmt(t.accepts), fmt(t.failures), fmt(t.recoveries)]


def emit_csv(table: Mapping, series: Mapping | None = None) -> bytes:
    """Render a ``{(axis value, seed): report}`` table.

    Rows keep the table's insertion order. ``series`` optionally maps each
    key to a label written in an extra trailing column.
    """
    if not table:
        raise EmptyTable("nothing to write")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS + (("series",) if series is not None else ()))
    for key, report in table.items():
        row = report_row(key[0], report)
        if series is not None:
            row.append(fmt(series[key]))
        writer.writerow(row)
    return buf.getvalue().encode("ascii")


def read_csv(data: bytes) -> list[dict]:
    rows = list(csv.DictReader(io.StringIO(data.decode("ascii"))))
    out = []
    for row in rows:
        out.append({k: (None if v == "" else float(v)) for k, v in row.items()})
    return out


def audit_run(result) -> list[str]:
    """Cross-check a finished run against its own chain; returns the problems found."""
    from .ledger import BROKER_ID, TxKind, transfer_totals, verify_chain

    problems = []
    chain, cfg, reg = result.chain, result.config, result.registry
    report = verify_chain(chain)
    if not report:
        problems.append(str(report))
    if len(chain) != cfg.horizon // cfg.mining_period + 1:
        problems.append(f"chain has {len(chain)} blocks, expected {cfg.horizon // cfg.mining_period + 1}")
    txs = [tx for block in chain.blocks[1:] for tx in block.transactions]
    if len(set(txs)) != len(txs):
        problems.append("a transaction appears more than once")
    if len(txs) != result.issued:
        problems.append(f"{result.issued} transactions issued but {len(txs)} on chain")

    debits, credits = transfer_totals(chain)
    balances = {d.wallet_id: d.wallet_balance for d in reg}
    if debits != sum(credits.values()) or debits != sum(balances.values()):
        problems.append(f"broker debits {debits} != wallet credits {sum(balances.values())}")
    for wallet, amount in credits.items():
        if balances.get(wallet) != amount:
            problems.append(f"wallet {wallet}: chain says {amount}, registry says {balances.get(wallet)}")
    paid = [tx for tx in txs if tx.kind is TxKind.FUND_TRANSFER]
    if sorted(paid, key=lambda t: t.body) != sorted(result.transfers, key=lambda t: t.body):
        problems.append("payments on chain differ from payments made")

    updates: dict[str, list] = {d.device_id: [] for d in reg}
    for tx in txs:
        if tx.kind is TxKind.REPUTATION_UPDATE:
            if tx.issuer_id != BROKER_ID:
                problems.append(f"reputation update issued by {tx.issuer_id}")
            updates[tx.payload["device_id"]].append((tx.payload["seq"], tx.payload["score"]))
    replay = {}
    for device_id, seq_scores in updates.items():
        seq_scores.sort()
        if [s for s, _ in seq_scores] != list(range(1, len(seq_scores) + 1)):
            problems.append(f"{device_id}: reputation updates missing or repeated")
        replay[device_id] = seq_scores[-1][1] if seq_scores else 0
    for d in reg:
        if replay[d.device_id] != d.reputation:
            problems.append(f"{d.device_id}: chain replay gives reputation {replay[d.device_id]}, "
                            f"registry has {d.reputation}")
    freqs = miner_frequencies(chain)
    if freqs and abs(sum(freqs.values()) - 1.0) > 1e-12:
        problems.append("miner frequencies do not sum to 1")
    return problems
