"""What happens to an instance after mapping: probing, recovery, rating, payment."""

from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass
from typing import IO, Iterable, Sequence

import numpy as np

from .ledger import BROKER_ID, Issuer, Transaction, TxKind
from .registry import (
    DeviceStatus,
    InstanceStatus,
    NoDInstance,
    Registry,
    _pick_start,
    eligibility_check,
    run_walk,
    walk_inputs,
)

DELIVERED = 1
NOT_DELIVERED = 0
REWARD = 1
PENALTY = 2


class NoBallots(Exception):
    pass


class InstanceNotTerminated(Exception):
    pass


@dataclass(frozen=True)
class RatingBallot:
    voter_id: str
    subject_id: str
    instance_id: int
    verdict: int

    def __post_init__(self):
        if self.voter_id == self.subject_id:
            raise ValueError("a device cannot rate itself")
        if self.verdict not in (DELIVERED, NOT_DELIVERED):
            raise ValueError("verdict is binary")


@dataclass
class FailureEvent:
    slot: int
    instance_id: int
    device_id: str
    detected_slot: int
    target_index: int
    # None until resolved
    recovered: bool | None = None
    replacement: str | None = None
    resolved_slot: int | None = None

    @property
    def resolved(self) -> bool:
        return self.recovered is not None


def _reporter(instance: NoDInstance, registry: Registry) -> str:
    for m in instance.monitors:
        if registry[m].status is not DeviceStatus.FAILED:
            return m
    return BROKER_ID


def probe_committed(instance: NoDInstance, registry: Registry, slot: int, issuer: Issuer,
                    failed_at: dict | None = None) -> list[FailureEvent]:
    """Flag every assigned device found down at this probe.

    ``failed_at`` maps a device to the slot it went down (defaults to now).
    A FailureFlag transaction is issued per event by the reporting monitor.
    """
    if instance.status is not InstanceStatus.RUNNING:
        raise ValueError("only running instances are probed")
    events = []
    for j, device_id in enumerate(instance.assignment):
        if device_id is None or registry[device_id].status is not DeviceStatus.FAILED:
            continue
        failed_slot = slot if failed_at is None else failed_at.get(device_id, slot)
        ev = FailureEvent(failed_slot, instance.instance_id, device_id, slot, j)
        issuer.issue(TxKind.FAILURE_FLAG, _reporter(instance, registry),
                     {"device_id": device_id, "instance_id": instance.instance_id, "slot": failed_slot}, slot)
        instance.assignment[j] = None
        instance.flagged.add(device_id)
        instance.failure_events.append(ev)
        events.append(ev)
    return events


def release_instance(instance: NoDInstance, registry: Registry) -> None:
    for device_id in instance.assignment:
        if device_id is not None:
            registry.release(device_id)


def recover_mapping(event: FailureEvent, instance: NoDInstance, registry: Registry, rng: np.random.Generator,
                    radius: float, deadline: int = 1, *, slot: int | None = None,
                    join_probability: float = 1.0) -> FailureEvent:
    """Look for a replacement serving the failed device's target.

    The search is a one-target dissemination walk started at the reporting
    monitor, restricted to the remaining service time. Without success by
    the last slot of ``deadline`` the instance is abandoned and every device
    it holds is released.
    """
    if event.resolved:
        raise ValueError("event already resolved")
    slot = event.detected_slot if slot is None else slot
    req = instance.request
    residual = instance.end_slot - slot + 1
    if residual >= 1:
        sub = dataclasses.replace(req, N=1, L=(req.L[event.target_index],), T=residual, arrival_slot=slot)
        n = len(registry)
        u_start, uniforms, willing = walk_inputs(rng, n, join_probability)
        reg = registry.arrays()
        alive = reg.alive_mask()
        free = reg.free_mask() & willing
        for m in instance.monitors:
            free[registry.index[m]] = False
        reporter = _reporter(instance, registry)
        if reporter != BROKER_ID:
            start = registry.index[reporter]
        else:
            start = _pick_start(alive, u_start)
        assignment, _, ok = run_walk(registry, reg.static_mask(sub, slot), free, sub.L, radius, start, uniforms)
        if ok:
            device_id = registry.devices[assignment[0]].device_id
            if not eligibility_check(registry[device_id], sub, sub.L[0], slot, radius):
                raise RuntimeError(f"replacement {device_id} is not eligible")
            registry.commit(device_id, instance.instance_id)
            instance.assignment[event.target_index] = device_id
            instance.participants.append(device_id)
            event.recovered, event.replacement, event.resolved_slot = True, device_id, slot
            return event
    if slot >= event.detected_slot + deadline - 1 or residual <= 1:
        abandon(instance, registry, slot)
    return event


def abandon(instance: NoDInstance, registry: Registry, slot: int) -> None:
    """Give up on an instance: open events become unrecovered, devices are released."""
    for ev in instance.failure_events:
        if not ev.resolved:
            ev.recovered, ev.resolved_slot = False, slot
    instance.status = InstanceStatus.FAILED_UNRECOVERED
    release_instance(instance, registry)


def honest_ballots(instance: NoDInstance, subject_id: str, delivered: bool) -> list[RatingBallot]:
    """Ballots from monitors, co-participants and the broker, all telling the truth."""
    verdict = DELIVERED if delivered else NOT_DELIVERED
    voters = [m for m in instance.monitors if m != subject_id]
    voters += [p for p in instance.participants if p != subject_id and p not in voters]
    voters.append(BROKER_ID)
    return [RatingBallot(v, subject_id, instance.instance_id, verdict) for v in voters]


def vote_rating(ballots: Sequence[RatingBallot], broker_verdict: int) -> int:
    """Strict majority of ballots; an exact tie goes to the broker's verdict."""
    if not ballots:
        raise NoBallots("no ballots cast")
    yes = sum(1 for b in ballots if b.verdict == DELIVERED)
    no = len(ballots) - yes
    if yes > no:
        return DELIVERED
    if no > yes:
        return NOT_DELIVERED
    return broker_verdict


def next_reputation(reputation: int, final_rating: int, flagged: bool) -> int:
    if final_rating == DELIVERED and not flagged:
        return reputation + REWARD
    return max(0, reputation - PENALTY)


def update_reputation(registry: Registry, device_id: str, final_rating: int, flagged: bool, issuer: Issuer,
                      slot: int, instance_id: int | None = None) -> int:
    new = next_reputation(registry[device_id].reputation, final_rating, flagged)
    registry.set_reputation(device_id, new)
    # seq orders updates that share a slot, so a chain replay is unambiguous
    payload = {"device_id": device_id, "score": new, "seq": registry[device_id].rating_count}
    if instance_id is not None:
        payload["instance_id"] = instance_id
    issuer.issue(TxKind.REPUTATION_UPDATE, BROKER_ID, payload, slot)
    return new


def settle_payment(instance: NoDInstance, registry: Registry, issuer: Issuer, slot: int,
                   ratings: dict) -> list[Transaction]:
    """Pay each device rated delivered its own ask, from the broker's wallet."""
    if instance.status is not InstanceStatus.COMPLETED:
        raise InstanceNotTerminated(f"instance {instance.instance_id} is {instance.status.value}")
    transfers = []
    for device_id in instance.participants:
        if ratings.get(device_id) != DELIVERED:
            continue
        dev = registry[device_id]
        tx = issuer.issue(TxKind.FUND_TRANSFER, BROKER_ID,
                          {"amount": dev.ask_bounty, "device_id": device_id, "from": BROKER_ID + "-wallet",
                           "instance_id": instance.instance_id, "to": dev.wallet_id}, slot)
        registry.credit(device_id, dev.ask_bounty)
        transfers.append(tx)
    return transfers


def close_instance(instance: NoDInstance, registry: Registry, issuer: Issuer, slot: int) -> dict:
    """Vote on every participant, update reputations, and pay if completed.

    A completed instance rates every participant; an abandoned one only
    settles the penalties of its flagged devices. Returns the ratings.
    """
    completed = instance.status is InstanceStatus.RUNNING
    if completed:
        instance.status = InstanceStatus.COMPLETED
    subjects = instance.participants if completed else [p for p in instance.participants if p in instance.flagged]
    ratings = {}
    for device_id in subjects:
        delivered = device_id not in instance.flagged
        broker_verdict = DELIVERED if delivered else NOT_DELIVERED
        ratings[device_id] = vote_rating(honest_ballots(instance, device_id, delivered), broker_verdict)
        update_reputation(registry, device_id, ratings[device_id], device_id in instance.flagged, issuer, slot,
                          instance.instance_id)
    if completed:
        settle_payment(instance, registry, issuer, slot, ratings)
        release_instance(instance, registry)
    return ratings


# ---------------------------------------------------------------------------
# event log

EVENT_FIELDS = ("record", "slot", "instance_id", "device_id", "detected_slot", "recovered", "replacement",
                "amount")


def event_rows(events: Iterable[FailureEvent], transfers: Iterable[Transaction]) -> list[list]:
    rows = []
    for ev in events:
        rows.append(["failure", ev.slot, ev.instance_id, ev.device_id, ev.detected_slot,
                     "" if ev.recovered is None else int(ev.recovered), ev.replacement or "", ""])
    for tx in transfers:
        p = tx.payload
        rows.append(["settlement", tx.slot, p["instance_id"], p["device_id"], "", "", "", p["amount"]])
    rows.sort(key=lambda r: (r[1], r[0], r[2], r[3]))
    return rows


def write_event_log(events: Iterable[FailureEvent], transfers: Iterable[Transaction], fp: IO[str]) -> None:
    writer = csv.writer(fp, lineterminator="\n")
    writer.writerow(EVENT_FIELDS)
    writer.writerows(event_rows(events, transfers))
