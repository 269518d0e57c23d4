"""Builders shared by the test modules."""

import numpy as np

from nodsim import ledger
from nodsim.registry import DeviceProfile, NoDRequest, Registry, announce, register_device


def add_device(registry, pending, rng, i, *, rtype="camera", loc=(0.5, 0.5), ask=100, capacity=1,
               availability=((0, None),), key=None):
    key = key or ledger.generate_keypair(rng)
    profile = DeviceProfile(f"d{i:05d}", f"w{i:05d}", key.public, rtype, capacity, availability, loc, ask)
    return register_device(announce(profile, key), key.public, registry, pending), key


def make_registry(locs, *, types=None, asks=None, hop_range=0.1, seed=0):
    rng = np.random.default_rng(seed)
    reg, pending = Registry(hop_range=hop_range), []
    for i, loc in enumerate(locs):
        add_device(reg, pending, rng, i, rtype=types[i] if types else "camera", loc=tuple(loc),
                   ask=asks[i] if asks else 100)
    return reg, pending


def make_request(targets, *, rtype="camera", T=5, C=500, S=0, slot=0, rid=0):
    return NoDRequest(rid, len(targets), rtype, tuple(tuple(t) for t in targets), T, C, S, slot)


def random_case(rng, max_devices=8, max_targets=3):
    """A small random registry plus request; some devices committed, failed or reputable."""
    n = int(rng.integers(1, max_devices + 1))
    k = int(rng.integers(1, max_targets + 1))
    locs = rng.random((n, 2))
    types = [str(t) for t in rng.choice(["camera", "sensor"], n, p=[0.75, 0.25])]
    asks = [int(a) for a in rng.integers(50, 400, n)]
    reg, _ = make_registry(locs, types=types, asks=asks, hop_range=float(rng.uniform(0.1, 0.6)),
                           seed=int(rng.integers(2**31)))
    for d in reg.devices:
        u = rng.random()
        if u < 0.1:
            reg.commit(d.device_id, 99)
        elif u < 0.2:
            reg.fail(d.device_id)
        reg.set_reputation(d.device_id, int(rng.integers(0, 4)))
    req = make_request(rng.random((k, 2)), C=int(rng.integers(100, 400)), S=int(rng.integers(0, 3)))
    radius = float(rng.uniform(0.2, 0.7))
    return reg, req, radius
