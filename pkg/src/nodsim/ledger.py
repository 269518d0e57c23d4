"""Append-only ledger of registrations, reputation updates, payments and flags.

Blocks are assembled deterministically: transactions are put in a canonical
order before hashing, so any two honest miners holding the same pending set
produce byte-identical blocks.
"""

from __future__ import annotations

import hashlib
import hmac
import json
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from functools import cached_property
from typing import IO, Iterable, Sequence

import numpy as np

BROKER_ID = "broker"
GENESIS_PREV = "0" * 64
GENESIS_MINER = "genesis"


class LedgerError(Exception):
    pass


class InvalidSignature(LedgerError):
    def __init__(self, tx: "Transaction", reason: str = "signature does not verify"):
        super().__init__(f"{reason}: {tx.kind.name} from {tx.issuer_id} at slot {tx.slot}")
        self.tx = tx


class BrokenChain(LedgerError):
    pass


class EmptyMinerSet(LedgerError):
    pass


class MalformedKey(LedgerError):
    pass


_ENCODER = json.JSONEncoder(sort_keys=True, separators=(",", ":"), ensure_ascii=True, allow_nan=False)


def canonical_json(obj) -> str:
    return _ENCODER.encode(obj)


def digest(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


# ---------------------------------------------------------------------------
# keys and signatures


@dataclass(frozen=True)
class KeyPair:
    private: bytes
    public: bytes


class KeyedTagScheme:
    """Deterministic HMAC-SHA256 tags.

    This is a symmetric stand-in: the verification key equals the signing
    key, which keeps per-transaction cost around a microsecond. It detects
    tampering and wrong-key verification, not forgery by a chain reader.
    """

    name = "hmac-sha256"
    key_size = 32

    def generate(self, rng: np.random.Generator) -> KeyPair:
        secret = rng.bytes(self.key_size)
        return KeyPair(private=secret, public=secret)

    def _check(self, key) -> bytes:
        if not isinstance(key, (bytes, bytearray)) or len(key) != self.key_size:
            raise MalformedKey(f"expected a {self.key_size}-byte key")
        return bytes(key)

    def sign(self, record: bytes, key: KeyPair) -> bytes:
        return hmac.new(self._check(key.private), record, hashlib.sha256).digest()

    def verify(self, record: bytes, signature: bytes, public: bytes) -> bool:
        expected = hmac.new(self._check(public), record, hashlib.sha256).digest()
        return hmac.compare_digest(expected, signature)


class Ed25519Scheme:
    """Real asymmetric signatures through the ``cryptography`` package."""

    name = "ed25519"

    def generate(self, rng: np.random.Generator) -> KeyPair:
        from cryptography.hazmat.primitives import serialization
        from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey

        sk = Ed25519PrivateKey.from_private_bytes(rng.bytes(32))
        pk = sk.public_key().public_bytes(serialization.Encoding.Raw, serialization.PublicFormat.Raw)
        return KeyPair(private=sk.private_bytes_raw(), public=pk)

    def sign(self, record: bytes, key: KeyPair) -> bytes:
        from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey

        try:
            sk = Ed25519PrivateKey.from_private_bytes(key.private)
        except (ValueError, TypeError) as exc:
            raise MalformedKey(str(exc)) from exc
        return sk.sign(record)

    def verify(self, record: bytes, signature: bytes, public: bytes) -> bool:
        from cryptography.exceptions import InvalidSignature as _Bad
        from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PublicKey

        try:
            pk = Ed25519PublicKey.from_public_bytes(public)
        except (ValueError, TypeError) as exc:
            raise MalformedKey(str(exc)) from exc
        try:
            pk.verify(signature, record)
        except _Bad:
            return False
        return True


SCHEMES = {s.name: s for s in (KeyedTagScheme(), Ed25519Scheme())}
DEFAULT_SCHEME = SCHEMES["hmac-sha256"]


def generate_keypair(rng: np.random.Generator, scheme=DEFAULT_SCHEME) -> KeyPair:
    return scheme.generate(rng)


def sign(record: bytes, key: KeyPair, scheme=DEFAULT_SCHEME) -> bytes:
    return scheme.sign(record, key)


def verify(record: bytes, signature: bytes, public: bytes, scheme=DEFAULT_SCHEME) -> bool:
    return scheme.verify(record, signature, public)


# ---------------------------------------------------------------------------
# transactions


class TxKind(IntEnum):
    # value doubles as the canonical kind rank
    REGISTRATION = 0
    REPUTATION_UPDATE = 1
    FUND_TRANSFER = 2
    FAILURE_FLAG = 3


@dataclass(frozen=True, eq=False)
class Transaction:
    kind: TxKind
    issuer_id: str
    payload: dict
    slot: int
    signature: str = ""

    @cached_property
    def body(self) -> bytes:
        """Canonical serialization of everything except the signature."""
        return canonical_json(
            {"issuer": self.issuer_id, "kind": self.kind.name, "payload": self.payload, "slot": self.slot}
        ).encode()

    @cached_property
    def payload_digest(self) -> str:
        return digest(canonical_json(self.payload).encode())

    @property
    def sort_key(self) -> tuple:
        return (self.slot, int(self.kind), self.issuer_id, self.payload_digest)

    def to_record(self) -> dict:
        return {
            "issuer": self.issuer_id,
            "kind": self.kind.name,
            "payload": self.payload,
            "signature": self.signature,
            "slot": self.slot,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "Transaction":
        if set(rec) != {"issuer", "kind", "payload", "signature", "slot"}:
            raise ValueError(f"unexpected transaction fields {sorted(rec)}")
        return cls(TxKind[rec["kind"]], rec["issuer"], rec["payload"], rec["slot"], rec["signature"])

    def __eq__(self, other):
        if not isinstance(other, Transaction):
            return NotImplemented
        return self.body == other.body and self.signature == other.signature

    def __hash__(self):
        return hash((self.body, self.signature))


def check_payload(kind: TxKind, payload: dict) -> None:
    if kind is TxKind.FUND_TRANSFER and not payload["amount"] > 0:
        raise ValueError("fund transfer amount must be positive")
    if kind is TxKind.REPUTATION_UPDATE and payload["score"] < 0:
        raise ValueError("reputation score must be non-negative")


def make_transaction(kind: TxKind, issuer_id: str, payload: dict, slot: int, key: KeyPair,
                     scheme=DEFAULT_SCHEME) -> Transaction:
    check_payload(kind, payload)
    unsigned = Transaction(kind, issuer_id, payload, slot)
    sig = scheme.sign(unsigned.body, key).hex()
    tx = Transaction(kind, issuer_id, payload, slot, sig)
    tx.__dict__["body"] = unsigned.body  # prime the cache; same fields, same bytes
    return tx


def registration_payload(device_id: str, wallet_id: str, public: bytes, **characteristics) -> dict:
    payload = {"device_id": device_id, "wallet_id": wallet_id, "public_key": public.hex()}
    payload.update(characteristics)
    return payload


class Issuer:
    """Signs transactions on behalf of known parties and collects them as pending."""

    def __init__(self, scheme=DEFAULT_SCHEME):
        self.scheme = scheme
        self.keys: dict[str, KeyPair] = {}
        self.pending: list[Transaction] = []
        self.issued = 0

    def issue(self, kind: TxKind, issuer_id: str, payload: dict, slot: int) -> Transaction:
        tx = make_transaction(kind, issuer_id, payload, slot, self.keys[issuer_id], self.scheme)
        self.pending.append(tx)
        self.issued += 1
        return tx

    def drain(self) -> list[Transaction]:
        out, self.pending = self.pending, []
        return out


# ---------------------------------------------------------------------------
# blocks and chains


@dataclass(frozen=True, eq=False)
class Block:
    index: int
    prev_hash: str
    transactions: tuple
    miner_id: str
    period: int
    hash: str

    @staticmethod
    def compute_hash(index: int, prev_hash: str, transactions: Sequence[Transaction], miner_id: str,
                     period: int) -> str:
        h = hashlib.sha256()
        h.update(canonical_json({"index": index, "miner_id": miner_id, "period": period,
                                 "prev_hash": prev_hash, "tx_count": len(transactions)}).encode())
        for tx in transactions:
            h.update(b"\n")
            h.update(tx.body)
            h.update(b"|")
            h.update(tx.signature.encode())
        return h.hexdigest()

    def recompute_hash(self) -> str:
        return self.compute_hash(self.index, self.prev_hash, self.transactions, self.miner_id, self.period)

    def to_record(self) -> dict:
        return {
            "index": self.index,
            "prev_hash": self.prev_hash,
            "miner_id": self.miner_id,
            "period": self.period,
            "tx_count": len(self.transactions),
            "hash": self.hash,
            "transactions": [tx.to_record() for tx in self.transactions],
        }

    def serialize(self) -> bytes:
        return canonical_json(self.to_record()).encode()


@dataclass(frozen=True)
class ChainReport:
    ok: bool
    block: int | None = None
    reason: str = ""

    def __bool__(self) -> bool:
        return self.ok

    def __str__(self) -> str:
        return "chain ok" if self.ok else f"violation at block {self.block}: {self.reason}"


@dataclass(frozen=True, eq=False)
class Chain:
    blocks: tuple
    scheme_name: str = DEFAULT_SCHEME.name
    # issuer -> verification key, built from registrations already on chain
    keys: dict = field(default_factory=dict, repr=False)
    trusted: bool = field(default=False, repr=False)

    def __len__(self) -> int:
        return len(self.blocks)

    @property
    def head(self) -> Block:
        return self.blocks[-1]

    @property
    def scheme(self):
        return SCHEMES[self.scheme_name]

    def transactions(self) -> Iterable[Transaction]:
        for block in self.blocks:
            yield from block.transactions


def canonical_order(pending: Iterable[Transaction]) -> list[Transaction]:
    # body and signature break ties so exact duplicates still sort stably
    return sorted(pending, key=lambda tx: (tx.sort_key, tx.body, tx.signature))


def _check_signatures(transactions: Sequence[Transaction], keys: dict, scheme) -> tuple[dict, Transaction | None, str]:
    """Verify transactions in order, learning keys from registrations.

    Returns the (possibly extended) key map and the first offender, if any.
    """
    learned = None
    for tx in transactions:
        if tx.kind is TxKind.REGISTRATION:
            try:
                pub = bytes.fromhex(tx.payload["public_key"])
            except (KeyError, TypeError, ValueError):
                return keys, tx, "registration without a readable public key"
            if tx.payload.get("device_id") != tx.issuer_id:
                return keys, tx, "registration issuer does not match device"
            if tx.issuer_id in keys or (learned and tx.issuer_id in learned):
                return keys, tx, "duplicate registration"
        else:
            pub = (learned or {}).get(tx.issuer_id) or keys.get(tx.issuer_id)
            if pub is None:
                return keys, tx, "issuer is not registered"
        try:
            sig = bytes.fromhex(tx.signature)
            good = scheme.verify(tx.body, sig, pub)
        except (ValueError, MalformedKey):
            good = False
        if not good:
            return keys, tx, "signature does not verify"
        try:
            check_payload(tx.kind, tx.payload)
        except (KeyError, TypeError, ValueError):
            return keys, tx, "payload violates transaction invariants"
        if tx.kind is TxKind.REGISTRATION:
            if learned is None:
                learned = {}
            learned[tx.issuer_id] = pub
    if learned:
        keys = {**keys, **learned}
    return keys, None, ""


def genesis(broker_key: KeyPair, scheme=DEFAULT_SCHEME) -> Chain:
    """Chain of one block carrying the broker's own registration."""
    reg = make_transaction(
        TxKind.REGISTRATION, BROKER_ID,
        registration_payload(BROKER_ID, BROKER_ID + "-wallet", broker_key.public), -1, broker_key, scheme,
    )
    txs = (reg,)
    block = Block(0, GENESIS_PREV, txs, GENESIS_MINER, -1, Block.compute_hash(0, GENESIS_PREV, txs, GENESIS_MINER, -1))
    return Chain((block,), scheme.name, {BROKER_ID: broker_key.public}, trusted=True)


def append_block(chain: Chain, pending: Iterable[Transaction], miner: str, period: int) -> Chain:
    """Return ``chain`` extended by one block holding ``pending`` in canonical order.

    An empty pending set still yields a (heartbeat) block.
    """
    if not chain.trusted:
        report = verify_chain(chain)
        if not report:
            raise BrokenChain(str(report))
        chain = Chain(chain.blocks, chain.scheme_name, report_keys(chain), trusted=True)
    txs = tuple(canonical_order(pending))
    keys, bad, why = _check_signatures(txs, chain.keys, chain.scheme)
    if bad is not None:
        raise InvalidSignature(bad, why)
    prev = chain.head
    index = prev.index + 1
    block = Block(index, prev.hash, txs, miner, period, Block.compute_hash(index, prev.hash, txs, miner, period))
    return Chain(chain.blocks + (block,), chain.scheme_name, keys, trusted=True)


def _walk_chain(chain: Chain) -> tuple[ChainReport, dict]:
    keys: dict = {}
    prev_hash = None
    for pos, block in enumerate(chain.blocks):
        if block.index != pos:
            return ChainReport(False, pos, f"index {block.index} where {pos} expected"), keys
        if pos == 0:
            if block.prev_hash != GENESIS_PREV:
                return ChainReport(False, 0, "genesis prev_hash is not null"), keys
        elif block.prev_hash != prev_hash:
            return ChainReport(False, pos, "prev_hash does not match predecessor"), keys
        if block.recompute_hash() != block.hash:
            return ChainReport(False, pos, "hash does not match content"), keys
        txs = list(block.transactions)
        if canonical_order(txs) != txs:
            return ChainReport(False, pos, "transactions not in canonical order"), keys
        keys, bad, why = _check_signatures(txs, keys, chain.scheme)
        if bad is not None:
            return ChainReport(False, pos, f"{why} ({bad.kind.name} from {bad.issuer_id})"), keys
        prev_hash = block.hash
    if not chain.blocks:
        return ChainReport(False, None, "empty chain"), keys
    return ChainReport(True), keys


def verify_chain(chain: Chain) -> ChainReport:
    """Check hashes, links, consecutive indices and every signature.

    The result is falsy on failure and names the first offending block.
    """
    return _walk_chain(chain)[0]


def report_keys(chain: Chain) -> dict:
    return _walk_chain(chain)[1]


# ---------------------------------------------------------------------------
# miner selection


class MinerPolicy(Enum):
    UNIFORM = "uniform"
    STAKE_WEIGHTED = "stake_weighted"


def selection_probabilities(policy: MinerPolicy, miners: Sequence[tuple[str, int]]) -> np.ndarray:
    if not miners:
        raise EmptyMinerSet("no eligible miners")
    if policy is MinerPolicy.UNIFORM:
        w = np.ones(len(miners))
    else:
        w = 1.0 + np.array([rep for _, rep in miners], dtype=float)
    return w / w.sum()


def select_miner(policy: MinerPolicy, miners: Sequence[tuple[str, int]], rng: np.random.Generator) -> str:
    """Pick one miner; consumes exactly one uniform draw from ``rng``."""
    probs = selection_probabilities(policy, miners)
    u = rng.random()
    idx = int(np.searchsorted(np.cumsum(probs), u, side="right"))
    return miners[min(idx, len(miners) - 1)][0]


# ---------------------------------------------------------------------------
# export / import


def export_chain(chain: Chain, fp: IO[str]) -> None:
    """One canonical JSON object per line, one line per block."""
    for block in chain.blocks:
        fp.write(block.serialize().decode())
        fp.write("\n")


def chain_from_lines(lines: Iterable[str], scheme_name: str = DEFAULT_SCHEME.name) -> Chain:
    """Parse an exported chain.

    Lines must be exactly canonical; any other spelling of the same data is
    rejected so that every byte of the file is covered by verification.
    """
    blocks = []
    for lineno, line in enumerate(lines):
        text = line[:-1] if line.endswith("\n") else line
        try:
            rec = json.loads(text)
        except ValueError as exc:
            raise BrokenChain(f"line {lineno}: not valid JSON ({exc})") from None
        try:
            canonical = isinstance(rec, dict) and canonical_json(rec) == text
        except ValueError:  # e.g. a digit edit turning 1e99 into 1e999 (inf)
            canonical = False
        if not canonical:
            raise BrokenChain(f"line {lineno}: not in canonical form")
        expected = {"index", "prev_hash", "miner_id", "period", "tx_count", "hash", "transactions"}
        if set(rec) != expected:
            raise BrokenChain(f"line {lineno}: unexpected fields")
        try:
            txs = tuple(Transaction.from_record(t) for t in rec["transactions"])
        except (KeyError, TypeError, ValueError) as exc:
            raise BrokenChain(f"line {lineno}: bad transaction ({exc})") from None
        if rec["tx_count"] != len(txs):
            raise BrokenChain(f"line {lineno}: tx_count does not match")
        blocks.append(Block(rec["index"], rec["prev_hash"], txs, rec["miner_id"], rec["period"], rec["hash"]))
    return Chain(tuple(blocks), scheme_name)


def load_chain(path, scheme_name: str = DEFAULT_SCHEME.name) -> Chain:
    with open(path, "r", encoding="ascii", newline="") as fp:
        return chain_from_lines(fp.read().splitlines(keepends=True), scheme_name)


def verify_export(data: bytes, scheme_name: str = DEFAULT_SCHEME.name) -> ChainReport:
    """verify_chain over the bytes of an exported chain."""
    try:
        text = data.decode("ascii")
    except UnicodeDecodeError:
        return ChainReport(False, None, "file is not ASCII")
    if not text.endswith("\n"):
        return ChainReport(False, None, "missing final newline")
    try:
        chain = chain_from_lines(text.splitlines(keepends=True), scheme_name)
    except BrokenChain as exc:
        msg = str(exc)
        line = msg.split(":", 1)[0].removeprefix("line ")
        return ChainReport(False, int(line) if line.isdigit() else None, msg)
    return verify_chain(chain)


# ---------------------------------------------------------------------------
# audits


def transfer_totals(chain: Chain) -> tuple[int, dict[str, int]]:
    """Broker debits and per-wallet credits from FundTransfer transactions."""
    debits = 0
    credits: dict[str, int] = {}
    for tx in chain.transactions():
        if tx.kind is TxKind.FUND_TRANSFER:
            amount = tx.payload["amount"]
            if tx.payload["from"] == BROKER_ID + "-wallet":
                debits += amount
            credits[tx.payload["to"]] = credits.get(tx.payload["to"], 0) + amount
    return debits, credits


def miner_counts(chain: Chain) -> dict[str, int]:
    counts: dict[str, int] = {}
    for block in chain.blocks[1:]:
        counts[block.miner_id] = counts.get(block.miner_id, 0) + 1
    return counts
