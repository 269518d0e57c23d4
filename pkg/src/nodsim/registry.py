"""Device registration, eligibility, and mapping of requests onto devices."""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import IO, Iterable, Sequence

import numpy as np
from scipy.spatial import cKDTree

from ._walk import walk_kernel
from .ledger import KeyPair, Issuer, Transaction, TxKind, InvalidSignature, make_transaction, registration_payload

RESOURCE_TYPES = ("camera", "sensor", "compute", "storage", "actuator")
UNIT_DEMAND = 1


class DuplicateDevice(Exception):
    pass


class OracleSizeExceeded(Exception):
    pass


class DeviceStatus(Enum):
    FREE = 0
    COMMITTED = 1
    FAILED = 2


@dataclass
class DeviceProfile:
    device_id: str
    wallet_id: str
    public_key: bytes
    resource_type: str
    capacity: int
    # half-open slot intervals; end None means open-ended
    availability: tuple
    location: tuple
    ask_bounty: int
    reputation: int = 0
    wallet_balance: int = 0
    status: DeviceStatus = DeviceStatus.FREE
    instance_id: int | None = None
    # number of reputation updates applied so far
    rating_count: int = 0

    def available(self, start: int, end: int) -> bool:
        """True if one interval covers every slot in [start, end)."""
        for lo, hi in self.availability:
            if lo <= start and (hi is None or end <= hi):
                return True
        return False


@dataclass(frozen=True)
class NoDRequest:
    request_id: int
    N: int
    R: str
    L: tuple
    T: int
    C: int
    S: int
    arrival_slot: int

    def __post_init__(self):
        if self.N < 1 or len(self.L) != self.N:
            raise ValueError("request needs N >= 1 target locations")
        if self.T < 1:
            raise ValueError("duration T must be at least one slot")
        if not self.C > 0:
            raise ValueError("bounty C must be positive")
        if self.S < 0:
            raise ValueError("minimum score S must be non-negative")


class InstanceStatus(Enum):
    RUNNING = "running"
    COMPLETED = "completed"
    FAILED_UNRECOVERED = "failed_unrecovered"


@dataclass
class NoDInstance:
    instance_id: int
    request: NoDRequest
    # assignment[j] serves request.L[j]; None while a failed device awaits replacement
    assignment: list
    monitors: list
    visited_count: int
    status: InstanceStatus = InstanceStatus.RUNNING
    failure_events: list = field(default_factory=list)
    participants: list = field(default_factory=list)
    flagged: set = field(default_factory=set)

    @property
    def end_slot(self) -> int:
        return self.request.arrival_slot + self.request.T - 1


@dataclass
class MappingResult:
    instance: NoDInstance | None
    visited_count: int

    @property
    def accepted(self) -> bool:
        return self.instance is not None


class Registry:
    """Registered devices plus array mirrors used by the mapping walk.

    Mutate device state only through the methods here so the mirrors stay
    in step with the profiles.
    """

    def __init__(self, hop_range: float = 0.1):
        self.devices: list[DeviceProfile] = []
        self.index: dict[str, int] = {}
        self.hop_range = hop_range
        self._loc: list = []
        self._type: list = []
        self._ask: list = []
        self._cap: list = []
        self._rep: list = []
        self._status: list = []
        self._dirty = True

    def __len__(self) -> int:
        return len(self.devices)

    def __iter__(self):
        return iter(self.devices)

    def __getitem__(self, device_id: str) -> DeviceProfile:
        return self.devices[self.index[device_id]]

    def __contains__(self, device_id: str) -> bool:
        return device_id in self.index

    def _add(self, profile: DeviceProfile) -> None:
        self.index[profile.device_id] = len(self.devices)
        self.devices.append(profile)
        self._dirty = True

    def _refresh(self) -> None:
        if not self._dirty:
            return
        devs = self.devices
        self.loc = np.array([d.location for d in devs], dtype=float).reshape(-1, 2)
        self.type_code = np.array([RESOURCE_TYPES.index(d.resource_type) for d in devs], dtype=np.int64)
        self.ask = np.array([d.ask_bounty for d in devs], dtype=np.int64)
        self.capacity = np.array([d.capacity for d in devs], dtype=np.int64)
        self.reputation = np.array([d.reputation for d in devs], dtype=np.int64)
        self.status = np.array([d.status.value for d in devs], dtype=np.int64)
        self._simple_avail = all(len(d.availability) == 1 for d in devs)
        if self._simple_avail:
            self.avail_lo = np.array([d.availability[0][0] for d in devs], dtype=float)
            self.avail_hi = np.array([math.inf if d.availability[0][1] is None else d.availability[0][1]
                                      for d in devs], dtype=float)
        self._build_graph()
        self._dirty = False

    def _build_graph(self) -> None:
        n = len(self.devices)
        if n == 0:
            self.indptr = np.zeros(1, dtype=np.int64)
            self.indices = np.zeros(0, dtype=np.int64)
            return
        pairs = cKDTree(self.loc).query_pairs(self.hop_range, output_type="ndarray")
        src = np.concatenate([pairs[:, 0], pairs[:, 1]]).astype(np.int64)
        dst = np.concatenate([pairs[:, 1], pairs[:, 0]]).astype(np.int64)
        order = np.lexsort((dst, src))
        src, dst = src[order], dst[order]
        self.indptr = np.zeros(n + 1, dtype=np.int64)
        np.add.at(self.indptr, src + 1, 1)
        self.indptr = np.cumsum(self.indptr)
        self.indices = dst

    def arrays(self) -> "Registry":
        self._refresh()
        return self

    # state transitions -------------------------------------------------

    def commit(self, device_id: str, instance_id: int) -> None:
        i = self.index[device_id]
        d = self.devices[i]
        if d.status is not DeviceStatus.FREE:
            raise RuntimeError(f"{device_id} is not free")
        d.status, d.instance_id = DeviceStatus.COMMITTED, instance_id
        if not self._dirty:
            self.status[i] = DeviceStatus.COMMITTED.value

    def release(self, device_id: str) -> None:
        i = self.index[device_id]
        d = self.devices[i]
        if d.status is DeviceStatus.COMMITTED:
            d.status, d.instance_id = DeviceStatus.FREE, None
            if not self._dirty:
                self.status[i] = DeviceStatus.FREE.value

    def fail(self, device_id: str) -> None:
        i = self.index[device_id]
        d = self.devices[i]
        d.status, d.instance_id = DeviceStatus.FAILED, None
        if not self._dirty:
            self.status[i] = DeviceStatus.FAILED.value

    def repair(self, device_id: str) -> None:
        i = self.index[device_id]
        d = self.devices[i]
        if d.status is DeviceStatus.FAILED:
            d.status = DeviceStatus.FREE
            if not self._dirty:
                self.status[i] = DeviceStatus.FREE.value

    def set_reputation(self, device_id: str, score: int) -> None:
        i = self.index[device_id]
        self.devices[i].reputation = score
        self.devices[i].rating_count += 1
        if not self._dirty:
            self.reputation[i] = score

    def credit(self, device_id: str, amount: int) -> None:
        self.devices[self.index[device_id]].wallet_balance += amount

    # masks ---------------------------------------------------------------

    def static_mask(self, request: NoDRequest, now: int) -> np.ndarray:
        """Ledger-visible requirements: type, capacity, availability, score, price."""
        self._refresh()
        if request.R not in RESOURCE_TYPES:
            return np.zeros(len(self), dtype=bool)
        mask = (self.type_code == RESOURCE_TYPES.index(request.R))
        mask &= self.capacity >= UNIT_DEMAND
        mask &= self.reputation >= request.S
        mask &= self.ask <= request.C
        end = now + request.T
        if self._simple_avail:
            mask &= (self.avail_lo <= now) & (end <= self.avail_hi)
        else:
            mask &= np.array([d.available(now, end) for d in self.devices], dtype=bool)
        return mask

    def alive_mask(self) -> np.ndarray:
        self._refresh()
        return self.status != DeviceStatus.FAILED.value

    def free_mask(self) -> np.ndarray:
        self._refresh()
        return self.status == DeviceStatus.FREE.value


# ---------------------------------------------------------------------------
# registration


def announce(profile: DeviceProfile, key: KeyPair, slot: int = 0, issuer: Issuer | None = None) -> Transaction:
    """Signed registration announcement carrying the device characteristics."""
    payload = registration_payload(
        profile.device_id, profile.wallet_id, key.public,
        resource_type=profile.resource_type,
        capacity=profile.capacity,
        availability=[[lo, hi] for lo, hi in profile.availability],
        location=list(profile.location),
        ask_bounty=profile.ask_bounty,
        reputation=0,
        wallet_balance=0,
    )
    if issuer is not None:
        return make_transaction(TxKind.REGISTRATION, profile.device_id, payload, slot, key, issuer.scheme)
    return make_transaction(TxKind.REGISTRATION, profile.device_id, payload, slot, key)


def register_device(announcement: Transaction, public_key: bytes, registry: Registry,
                    pending: list, scheme=None) -> DeviceProfile:
    """Admit an announced device with zero reputation and an empty wallet."""
    from .ledger import DEFAULT_SCHEME

    scheme = scheme or DEFAULT_SCHEME
    p = announcement.payload
    if announcement.kind is not TxKind.REGISTRATION:
        raise InvalidSignature(announcement, "not a registration")
    try:
        good = (bytes.fromhex(p["public_key"]) == public_key
                and scheme.verify(announcement.body, bytes.fromhex(announcement.signature), public_key))
    except ValueError:
        good = False
    if not good:
        raise InvalidSignature(announcement)
    if p["device_id"] in registry:
        raise DuplicateDevice(p["device_id"])
    profile = DeviceProfile(
        device_id=p["device_id"],
        wallet_id=p["wallet_id"],
        public_key=public_key,
        resource_type=p["resource_type"],
        capacity=p["capacity"],
        availability=tuple((lo, hi) for lo, hi in p["availability"]),
        location=tuple(p["location"]),
        ask_bounty=p["ask_bounty"],
    )
    registry._add(profile)
    pending.append(announcement)
    return profile


# ---------------------------------------------------------------------------
# eligibility


def eligibility_check(device: DeviceProfile, request: NoDRequest, target: Sequence[float], now: int,
                      radius: float) -> bool:
    if device.resource_type != request.R:
        return False
    if device.capacity < UNIT_DEMAND:
        return False
    if not device.available(now, now + request.T):
        return False
    if device.reputation < request.S:
        return False
    if device.ask_bounty > request.C:
        return False
    if device.status is not DeviceStatus.FREE:
        return False
    dx = device.location[0] - target[0]
    dy = device.location[1] - target[1]
    # squared comparison keeps the boundary inclusive without sqrt rounding
    return dx * dx + dy * dy <= radius * radius


# ---------------------------------------------------------------------------
# dissemination walk


def walk_inputs(rng: np.random.Generator, n: int, join_probability: float) -> tuple:
    """Random inputs of one walk: start draw, re-seed draws, willingness draws."""
    u_start = rng.random()
    uniforms = rng.random(n + 1)
    willing = rng.random(n) < join_probability
    return u_start, uniforms, willing


def reference_walk(loc, neighbors, alive, static_ok, free, targets, radius, start, uniforms):
    """Interpreted twin of the compiled walk, kept for cross-checking."""
    n = len(loc)
    k = len(targets)
    r2 = radius * radius

    def d2(a, b):
        return (a[0] - b[0]) ** 2 + (a[1] - b[1]) ** 2

    cand = [[bool(static_ok[i] and alive[i]) and d2(loc[i], targets[j]) <= r2 for j in range(k)] for i in range(n)]
    joinable = [sum(1 for i in range(n) if cand[i][j] and free[i]) for j in range(k)]
    assignment = [-1] * k
    if min(joinable) == 0:
        return assignment, n, False
    visited = [False] * n
    left = sum(1 for a in alive if a)
    count = 0
    draw = 0
    cur = start
    while True:
        visited[cur] = True
        left -= 1
        count += 1
        options = []
        if free[cur]:
            for j in range(k):
                if cand[cur][j]:
                    joinable[j] -= 1
                    if assignment[j] < 0:
                        options.append((d2(loc[cur], targets[j]), j))
        if options:
            assignment[min(options)[1]] = cur
            if all(a >= 0 for a in assignment):
                return assignment, count, True
        if any(assignment[j] < 0 and joinable[j] == 0 for j in range(k)):
            return assignment, n, False
        if left == 0:
            return assignment, n, False
        open_devices = [i for i in range(n)
                        if not visited[i] and any(cand[i][j] and assignment[j] < 0 for j in range(k))]
        goal = min(open_devices, key=lambda i: (d2(loc[i], loc[cur]), i))
        hops = [v for v in neighbors[cur] if not visited[v] and alive[v]]
        if hops:
            cur = min(hops, key=lambda v: (d2(loc[v], loc[goal]), hops.index(v)))
        else:
            pick = min(int(uniforms[draw] * left), left - 1)
            draw += 1
            cur = [v for v in range(n) if alive[v] and not visited[v]][pick]


def _pick_start(alive: np.ndarray, u: float) -> int:
    live = np.flatnonzero(alive)
    return int(live[min(int(u * len(live)), len(live) - 1)])


def run_walk(registry: Registry, static_ok, free, targets, radius: float, start: int, uniforms) -> tuple:
    reg = registry.arrays()
    assignment, visited, ok = walk_kernel(
        reg.loc, reg.indptr, reg.indices, reg.alive_mask(), np.asarray(static_ok, dtype=np.bool_),
        np.asarray(free, dtype=np.bool_), np.asarray(targets, dtype=float).reshape(-1, 2), float(radius),
        int(start), uniforms,
    )
    return assignment, int(visited), bool(ok)


def disseminate_and_map(request: NoDRequest, registry: Registry, rng: np.random.Generator, radius: float,
                        monitor_count: int, *, now: int | None = None, join_probability: float = 1.0,
                        instance_id: int | None = None) -> MappingResult:
    """Circulate ``request`` among devices and commit the ones that join.

    The broker seeds the request at a random live device. Each hop goes to
    an unvisited radio neighbour, heading for the nearest device that the
    ledger says could serve an unfilled target; whether that device is
    actually free (and willing) is only learned on arrival. A free eligible
    device claims the nearest unfilled target within ``radius``. A stuck
    walk is re-seeded by the broker at a random unvisited device.
    """
    now = request.arrival_slot if now is None else now
    n = len(registry)
    u_start, uniforms, willing = walk_inputs(rng, n, join_probability)
    reg = registry.arrays()
    alive = reg.alive_mask()
    if n == 0 or not alive.any():
        return MappingResult(None, n)
    static_ok = reg.static_mask(request, now)
    free = reg.free_mask() & willing
    start = _pick_start(alive, u_start)
    assignment, visited, ok = run_walk(registry, static_ok, free, request.L, radius, start, uniforms)
    if not ok:
        return MappingResult(None, n)

    ids = [registry.devices[i].device_id for i in assignment]
    for device_id, target in zip(ids, request.L):
        if not eligibility_check(registry[device_id], request, target, now, radius):
            raise RuntimeError(f"walk assigned ineligible device {device_id}")
    if len(set(ids)) != len(ids):
        raise RuntimeError("walk assigned a device twice")

    pool = np.flatnonzero(reg.free_mask())
    pool = pool[~np.isin(pool, assignment)]
    k = min(monitor_count, len(pool))
    monitors = [registry.devices[i].device_id for i in rng.choice(pool, size=k, replace=False)] if k else []

    iid = request.request_id if instance_id is None else instance_id
    for device_id in ids:
        registry.commit(device_id, iid)
    inst = NoDInstance(iid, request, ids, monitors, visited, participants=list(ids))
    return MappingResult(inst, visited)


# ---------------------------------------------------------------------------
# matching oracles


def _eligible_sets(request: NoDRequest, registry: Registry, radius: float, now: int) -> list[list[int]]:
    return [[i for i, d in enumerate(registry.devices) if eligibility_check(d, request, t, now, radius)]
            for t in request.L]


def matching_oracle(request: NoDRequest, registry: Registry, radius: float, now: int, bound: int = 12) -> bool:
    """Exhaustive search for N distinct eligible devices, one per target."""
    if len(registry) > bound:
        raise OracleSizeExceeded(f"registry has {len(registry)} devices, oracle bound is {bound}")
    sets = _eligible_sets(request, registry, radius, now)
    for combo in itertools.product(*sets):
        if len(set(combo)) == len(combo):
            return True
    return False


def max_matching_size(request: NoDRequest, registry: Registry, radius: float, now: int) -> int:
    """Maximum number of targets matched to distinct eligible devices (augmenting paths)."""
    sets = _eligible_sets(request, registry, radius, now)
    owner: dict[int, int] = {}

    def augment(j: int, seen: set) -> bool:
        for i in sets[j]:
            if i in seen:
                continue
            seen.add(i)
            if i not in owner or augment(owner[i], seen):
                owner[i] = j
                return True
        return False

    return sum(augment(j, set()) for j in range(len(sets)))


# ---------------------------------------------------------------------------
# export / import

REGISTRY_FIELDS = ("device_id", "resource_type", "capacity", "x", "y", "reputation", "ask_bounty", "wallet")


def export_registry(registry: Iterable[DeviceProfile], fp: IO[str]) -> None:
    writer = csv.writer(fp, lineterminator="\n")
    for d in registry:
        writer.writerow([d.device_id, d.resource_type, d.capacity, repr(float(d.location[0])),
                         repr(float(d.location[1])), d.reputation, d.ask_bounty, d.wallet_balance])


def import_registry(fp: IO[str]) -> list[dict]:
    rows = []
    for rec in csv.reader(fp):
        if len(rec) != len(REGISTRY_FIELDS):
            raise ValueError(f"expected {len(REGISTRY_FIELDS)} fields, got {len(rec)}")
        device_id, rtype, cap, x, y, rep, ask, wallet = rec
        rows.append({"device_id": device_id, "resource_type": rtype, "capacity": int(cap), "x": float(x),
                     "y": float(y), "reputation": int(rep), "ask_bounty": int(ask), "wallet": int(wallet)})
    return rows
