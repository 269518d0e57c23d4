"""Time-slotted experiment engine."""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import ledger
from .ledger import BROKER_ID, Chain, Issuer, MinerPolicy, TxKind
from .lifecycle import (
    FailureEvent,
    abandon,
    close_instance,
    probe_committed,
    recover_mapping,
)
from .registry import (
    RESOURCE_TYPES,
    DeviceProfile,
    DeviceStatus,
    InstanceStatus,
    NoDInstance,
    NoDRequest,
    Registry,
    announce,
    disseminate_and_map,
    register_device,
)

log = logging.getLogger(__name__)


class ConfigInvalid(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


class UnknownAxis(ValueError):
    pass


@dataclass(frozen=True)
class SimConfig:
    p: float = 0.2
    q: float = 0.5
    num_devices: int = 400
    num_miners: int = 200
    mining_period: int = 3
    monitor_count: int = 3
    failure_rate: float = 0.0
    request_N: int = 10
    bounty_range: tuple = (100, 1000)
    min_score: int = 0
    radius: float = 0.25
    horizon: int = 5000
    seed: int = 0
    miner_policy: MinerPolicy = MinerPolicy.STAKE_WEIGHTED
    join_probability: float = 1.0
    probe_period: int = 1
    recovery_deadline: int = 1
    # reconstruction knobs not fixed by the model description
    hop_range: float = 0.1
    ask_range: tuple = (90, 1000)
    num_resource_types: int = 3
    repair_slots: int = 10
    warmup: int | None = None

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        def need(cond, key, msg):
            if not cond:
                raise ConfigInvalid(key, msg)

        need(0 <= self.p <= 1, "p", f"arrival probability must lie in [0, 1], got {self.p}")
        need(0 < self.q <= 1, "q", f"completion parameter must lie in (0, 1], got {self.q}")
        need(self.num_devices >= 1, "num_devices", "need at least one device")
        need(0 <= self.num_miners <= self.num_devices, "num_miners", "miners are a subset of the devices")
        need(self.mining_period >= 1, "mining_period", "must be at least 1")
        need(self.monitor_count >= 1, "monitor_count", "must be at least 1")
        need(0 <= self.failure_rate <= 1, "failure_rate", "must lie in [0, 1]")
        need(self.request_N >= 1, "request_N", "must be at least 1")
        lo, hi = self.bounty_range
        need(0 < lo <= hi, "bounty_range", "need 0 < low <= high")
        alo, ahi = self.ask_range
        need(0 < alo <= ahi, "ask_range", "need 0 < low <= high")
        need(self.min_score >= 0, "min_score", "must be non-negative")
        need(self.radius > 0, "radius", "must be positive")
        need(self.hop_range > 0, "hop_range", "must be positive")
        need(self.horizon >= self.mining_period, "horizon", "must cover at least one mining period")
        need(0 <= self.seed < 2**64, "seed", "must be a 64-bit unsigned integer")
        need(0 <= self.join_probability <= 1, "join_probability", "must lie in [0, 1]")
        need(self.probe_period >= 1, "probe_period", "must be at least 1")
        need(self.recovery_deadline >= 1, "recovery_deadline", "must be at least 1")
        need(1 <= self.num_resource_types <= len(RESOURCE_TYPES), "num_resource_types",
             f"must lie in [1, {len(RESOURCE_TYPES)}]")
        need(self.repair_slots >= 1, "repair_slots", "must be at least 1")
        need(self.warmup is None or 0 <= self.warmup, "warmup", "must be non-negative")
        need(isinstance(self.miner_policy, MinerPolicy), "miner_policy", "must be uniform or stake_weighted")

    @property
    def network_load(self) -> float:
        return self.p / self.q

    @property
    def warmup_slots(self) -> int:
        return math.ceil(10 / self.q) if self.warmup is None else self.warmup

    @property
    def num_blocks(self) -> int:
        return self.horizon // self.mining_period

    def with_load(self, load: float, hold: str = "p") -> "SimConfig":
        """Same config at network load p/q = ``load``, holding p (or q) fixed."""
        if hold == "p":
            return dataclasses.replace(self, q=self.p / load)
        return dataclasses.replace(self, p=self.q * load)


FIELD_NAMES = tuple(f.name for f in dataclasses.fields(SimConfig))


def _parse_value(key: str, text: str):
    ftype = {f.name: f for f in dataclasses.fields(SimConfig)}[key].type
    try:
        if key in ("bounty_range", "ask_range"):
            parts = [int(x) for x in text.replace("(", "").replace(")", "").split(",")]
            if len(parts) != 2:
                raise ValueError("expected two values")
            return tuple(parts)
        if key == "miner_policy":
            return MinerPolicy(text.strip().lower())
        if key == "warmup":
            return None if text.strip().lower() in ("none", "") else int(text)
        if ftype in ("int", int):
            return int(text)
        return float(text)
    except ValueError as exc:
        raise ConfigInvalid(key, f"cannot parse {text!r} ({exc})") from None


def parse_config(text: str, **overrides) -> SimConfig:
    """Read flat ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigInvalid(f"line {lineno}", f"expected 'key = value', got {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in FIELD_NAMES:
            raise ConfigInvalid(key, "unknown key")
        values[key] = _parse_value(key, val)
    values.update(overrides)
    return SimConfig(**values)


def load_config(path, **overrides) -> SimConfig:
    with open(path, encoding="utf-8") as fp:
        return parse_config(fp.read(), **overrides)


def format_config(config: SimConfig) -> str:
    lines = []
    for name in FIELD_NAMES:
        val = getattr(config, name)
        if isinstance(val, tuple):
            val = ", ".join(str(v) for v in val)
        elif isinstance(val, MinerPolicy):
            val = val.value
        lines.append(f"{name} = {val}")
    return "\n".join(lines) + "\n"


def duration_from_uniform(u: float, q: float) -> int:
    """Geometric(q) on {1, 2, ...} by inversion; monotone in ``u`` and ``q``."""
    if q >= 1.0:
        return 1
    # 1 - u lies in (0, 1]
    return 1 + int(math.floor(math.log1p(-u) / math.log1p(-q)))


def draw_duration(q: float, rng: np.random.Generator) -> int:
    if not 0 < q <= 1:
        raise ValueError("q must lie in (0, 1]")
    return duration_from_uniform(rng.random(), q)


@dataclass(frozen=True)
class Termination:
    instance_id: int
    arrival_slot: int
    status: InstanceStatus
    failures: int
    recovered: bool


@dataclass
class SlotLog:
    slot: int
    arrivals: int = 0
    acceptances: int = 0
    rejections: int = 0
    # devices examined, one entry per accepted request
    visited: list = field(default_factory=list)
    failure_events: list = field(default_factory=list)
    completions: list = field(default_factory=list)
    terminations: list = field(default_factory=list)
    running: int = 0
    block: bool = False
    miner_id: str | None = None


@dataclass
class SimResult:
    report: "object"
    chain: Chain
    logs: list
    events: list
    transfers: list
    registry: Registry
    config: SimConfig
    issued: int = 0


def _streams(seed: int) -> dict:
    names = ("layout", "keys", "arrivals", "requests", "durations", "walks", "failures", "recovery", "mining")
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {name: np.random.default_rng(s) for name, s in zip(names, children)}


def device_id(i: int) -> str:
    return f"d{i:05d}"


class Simulation:
    """One isolated run; single-threaded by design."""

    def __init__(self, config: SimConfig):
        config.validate()
        self.cfg = config
        self.rng = _streams(config.seed)
        self.issuer = Issuer()
        self.registry = Registry(hop_range=config.hop_range)
        broker_key = ledger.generate_keypair(self.rng["keys"])
        self.issuer.keys[BROKER_ID] = broker_key
        self.chain = ledger.genesis(broker_key)
        self.instances: dict[int, NoDInstance] = {}
        self.open_events: list[tuple[FailureEvent, NoDInstance]] = []
        self.failed_at: dict[str, int] = {}
        self.repair_due: dict[str, int] = {}
        self.events: list[FailureEvent] = []
        self.transfers: list = []
        self.logs: list[SlotLog] = []
        self.next_request = 0
        self.deferred_miner: tuple | None = None
        self._populate()

    def _populate(self) -> None:
        cfg, lay = self.cfg, self.rng["layout"]
        n = cfg.num_devices
        loc = lay.random((n, 2))
        types = lay.integers(0, cfg.num_resource_types, n)
        caps = lay.integers(1, 5, n)
        asks = lay.integers(cfg.ask_range[0], cfg.ask_range[1] + 1, n)
        for i in range(n):
            key = ledger.generate_keypair(self.rng["keys"])
            did = device_id(i)
            self.issuer.keys[did] = key
            profile = DeviceProfile(
                device_id=did, wallet_id=f"w{i:05d}", public_key=key.public,
                resource_type=RESOURCE_TYPES[types[i]], capacity=int(caps[i]), availability=((0, None),),
                location=(float(loc[i, 0]), float(loc[i, 1])), ask_bounty=int(asks[i]),
            )
            register_device(announce(profile, key, 0), key.public, self.registry, self.issuer.pending)
        self.issuer.issued += n
        self.miners = [device_id(i) for i in range(cfg.num_miners)]

    # -- per-slot phases -------------------------------------------------

    def _repairs(self, slot: int) -> None:
        due = [d for d, t in self.repair_due.items() if t <= slot]
        for d in sorted(due):
            self.registry.repair(d)
            del self.repair_due[d]
            self.failed_at.pop(d, None)

    def _arrival(self, slot: int, log_: SlotLog, arrivals_open: bool) -> None:
        cfg, rng = self.cfg, self.rng
        # drawn every slot so streams line up across p and q
        u = rng["arrivals"].random()
        targets = rng["requests"].random((cfg.request_N, 2))
        rtype = RESOURCE_TYPES[int(rng["requests"].integers(0, cfg.num_resource_types))]
        bounty = int(rng["requests"].integers(cfg.bounty_range[0], cfg.bounty_range[1] + 1))
        u_dur = rng["durations"].random()
        walk_seed = int(rng["walks"].integers(0, 2**63))
        if not arrivals_open or u >= cfg.p:
            return
        req = NoDRequest(
            request_id=self.next_request, N=cfg.request_N, R=rtype,
            L=tuple((float(x), float(y)) for x, y in targets), T=duration_from_uniform(u_dur, cfg.q),
            C=bounty, S=cfg.min_score, arrival_slot=slot,
        )
        self.next_request += 1
        log_.arrivals += 1
        result = disseminate_and_map(req, self.registry, np.random.default_rng(walk_seed), cfg.radius,
                                     cfg.monitor_count, now=slot, join_probability=cfg.join_probability)
        if result.accepted:
            log_.visited.append(result.visited_count)
            log_.acceptances += 1
            self.instances[req.request_id] = result.instance
        else:
            log_.rejections += 1

    def _failures(self, slot: int, log_: SlotLog) -> None:
        cfg = self.cfg
        if cfg.failure_rate > 0:
            frng = self.rng["failures"]
            for iid in sorted(self.instances):
                inst = self.instances[iid]
                for device_id_ in inst.assignment:
                    if device_id_ is None:
                        continue
                    if frng.random() < cfg.failure_rate:
                        self.registry.fail(device_id_)
                        self.failed_at[device_id_] = slot
                        self.repair_due[device_id_] = slot + cfg.repair_slots
        if slot % cfg.probe_period == 0:
            for iid in sorted(self.instances):
                inst = self.instances[iid]
                new = probe_committed(inst, self.registry, slot, self.issuer, self.failed_at)
                self.events.extend(new)
                log_.failure_events.extend(new)
                self.open_events.extend((ev, inst) for ev in new)
        still_open = []
        for ev, inst in self.open_events:
            if inst.status is not InstanceStatus.RUNNING:
                continue
            seed = int(self.rng["recovery"].integers(0, 2**63))
            recover_mapping(ev, inst, self.registry, np.random.default_rng(seed), cfg.radius,
                            cfg.recovery_deadline, slot=slot, join_probability=cfg.join_probability)
            if inst.status is InstanceStatus.FAILED_UNRECOVERED:
                self._terminate(inst, slot, log_)
            elif not ev.resolved:
                still_open.append((ev, inst))
        self.open_events = still_open

    def _terminate(self, inst: NoDInstance, slot: int, log_: SlotLog) -> None:
        close_instance(inst, self.registry, self.issuer, slot)
        del self.instances[inst.instance_id]
        failures = len(inst.failure_events)
        recovered = failures > 0 and all(ev.recovered for ev in inst.failure_events)
        log_.terminations.append(Termination(inst.instance_id, inst.request.arrival_slot, inst.status, failures,
                                             recovered))
        if inst.status is InstanceStatus.COMPLETED:
            log_.completions.append(inst.instance_id)

    def _completions(self, slot: int, log_: SlotLog) -> None:
        for iid in sorted(self.instances):
            inst = self.instances[iid]
            if inst.end_slot != slot:
                continue
            if any(not ev.resolved for ev in inst.failure_events):
                abandon(inst, self.registry, slot)
            before = len(self.issuer.pending)
            self._terminate(inst, slot, log_)
            self.transfers.extend(tx for tx in self.issuer.pending[before:] if tx.kind is TxKind.FUND_TRANSFER)

    def _mine(self, slot: int, log_: SlotLog) -> None:
        cfg = self.cfg
        if (slot + 1) % cfg.mining_period:
            return
        period = slot // cfg.mining_period
        if period >= cfg.num_blocks:
            return
        reg = self.registry.arrays()
        m = len(self.miners)
        up = np.flatnonzero(reg.alive_mask()[:m])
        live = [(self.miners[i], int(r)) for i, r in zip(up, reg.reputation[up])]
        if not live:
            live = [(BROKER_ID, 0)]
        miner = ledger.select_miner(cfg.miner_policy, live, self.rng["mining"])
        log_.block, log_.miner_id = True, miner
        if period == cfg.num_blocks - 1:
            # the final period stays open until the run drains
            self.deferred_miner = (miner, period)
        else:
            self.chain = ledger.append_block(self.chain, self.issuer.drain(), miner, period)

    def step(self, slot: int, arrivals_open: bool = True) -> SlotLog:
        log_ = SlotLog(slot)
        self._repairs(slot)
        self._arrival(slot, log_, arrivals_open)
        log_.running = len(self.instances)
        self._failures(slot, log_)
        self._completions(slot, log_)
        if slot < self.cfg.horizon:
            self._mine(slot, log_)
        self.logs.append(log_)
        return log_

    def run(self) -> SimResult:
        from .metrics import aggregate

        slot = 0
        for slot in range(self.cfg.horizon):
            self.step(slot)
        slot = self.cfg.horizon
        while self.instances:
            self.step(slot, arrivals_open=False)
            slot += 1
        miner, period = self.deferred_miner
        self.chain = ledger.append_block(self.chain, self.issuer.drain(), miner, period)
        report = aggregate(self.logs, self.chain, self.cfg)
        return SimResult(report, self.chain, self.logs, self.events, self.transfers, self.registry, self.cfg,
                         self.issuer.issued)


def run_simulation(config: SimConfig) -> SimResult:
    """Run ``config.horizon`` slots, then drain running instances.

    Fully determined by the config (seed included).
    """
    return Simulation(config).run()


def _run_cell(args):
    cfg, keep, inspect = args
    res = run_simulation(cfg)
    if inspect is not None:
        inspect(res)
    return res if keep else res.report


def sweep(base: SimConfig, axis: str, values: Sequence, seeds: Iterable[int], keep_results: bool = False,
          workers: int = 1, inspect=None) -> dict:
    """Run every (value, seed) pair independently; results keyed by (value, seed).

    With ``workers > 1`` runs are farmed out to a process pool; each run owns
    its whole state, so the table is identical either way. ``inspect`` is
    called with every full result before it is reduced to its report.
    """
    if axis not in FIELD_NAMES or axis == "seed":
        raise UnknownAxis(axis)
    seeds = list(seeds)
    keys = [(value, seed) for value in values for seed in seeds]
    jobs = [(dataclasses.replace(base, **{axis: value, "seed": seed}), keep_results, inspect)
            for value, seed in keys]
    if workers > 1 and len(jobs) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_cell, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    else:
        results = [_run_cell(job) for job in jobs]
    for (value, seed), _ in zip(keys, results):
        log.debug("%s=%s seed=%s done", axis, value, seed)
    return dict(zip(keys, results))
