"""A directory of DQDR records plus a line-oriented manifest.

``manifest.txt`` starts with a header line naming the chain, followed by one
``step kind filename base`` line per record (``base`` is ``-`` for FULL
entries).  Every ``full_every``-th entry is a FULL record so a restore never
replays more than ``full_every - 1`` deltas.
"""
from __future__ import annotations

import math
import os
import uuid
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

from filelock import FileLock

from ..errors import ChainCorrupt, ChecksumMismatch, CorruptBitstream, QckptError, UnknownStep
from ..quantizer import QuantizedCheckpoint
from .delta import DeltaRecord, Scheme, decode_delta_record, encode_delta_record

MANIFEST = "manifest.txt"
HEADER = "# qckpt-chain v1"
DEFAULT_FULL_EVERY = 50
FULL = "full"
DELTA = "delta"


@dataclass(frozen=True)
class ManifestEntry:
    step: int
    kind: str
    filename: str
    base: int | None = None

    def line(self) -> str:
        return f"{self.step} {self.kind} {self.filename} {'-' if self.base is None else self.base}"


def _atomic_write(path: Path, data: bytes):
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(data)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)


def parse_manifest(text: str) -> tuple[str, list[ManifestEntry]]:
    lines = text.splitlines()
    if not lines or not lines[0].startswith(HEADER):
        raise ChainCorrupt("manifest header missing")
    head = lines[0][len(HEADER):].split()
    chain_id = next((h[3:] for h in head if h.startswith("id=")), "")
    entries = []
    for lineno, line in enumerate(lines[1:], 2):
        if not line.strip():
            continue
        parts = line.split()
        try:
            step, kind, fname, base = parts
            entry = ManifestEntry(int(step), kind, fname, None if base == "-" else int(base))
        except ValueError:
            raise ChainCorrupt(f"manifest line {lineno} is malformed: {line!r}") from None
        if kind not in (FULL, DELTA) or (kind == FULL) != (entry.base is None):
            raise ChainCorrupt(f"manifest line {lineno} has an invalid kind/base", step=entry.step)
        entries.append(entry)
    return chain_id, entries


class Chain:
    """One chain directory.  Appends are single-writer (see :meth:`lock`); reads are safe to share."""

    def __init__(self, directory: str | os.PathLike, full_every: int = DEFAULT_FULL_EVERY):
        if full_every < 1:
            raise ValueError("full_every must be at least 1")
        self.dir = Path(directory)
        self.full_every = full_every
        self._last: QuantizedCheckpoint | None = None
        if (self.dir / MANIFEST).exists():
            self.chain_id, self.entries = parse_manifest((self.dir / MANIFEST).read_text())
        else:
            self.chain_id, self.entries = uuid.uuid4().hex, []

    @classmethod
    def open(cls, directory, full_every: int = DEFAULT_FULL_EVERY) -> "Chain":
        """Open an existing chain; a missing directory or manifest is an error."""
        if not (Path(directory) / MANIFEST).is_file():
            raise FileNotFoundError(f"no chain manifest in {directory}")
        return cls(directory, full_every)

    def lock(self, timeout: float = -1) -> FileLock:
        self.dir.mkdir(parents=True, exist_ok=True)
        return FileLock(str(self.dir / ".lock"), timeout=timeout)

    # -- manifest -----------------------------------------------------------------

    @property
    def steps(self) -> list[int]:
        return [e.step for e in self.entries]

    def __len__(self):
        return len(self.entries)

    def _index(self, step: int) -> int:
        for i, e in enumerate(self.entries):
            if e.step == step:
                return i
        raise UnknownStep(f"step {step} is not in the chain")

    def _write_manifest(self):
        text = "\n".join([f"{HEADER} id={self.chain_id}"] + [e.line() for e in self.entries]) + "\n"
        _atomic_write(self.dir / MANIFEST, text.encode())

    def record_path(self, entry: ManifestEntry) -> Path:
        return self.dir / entry.filename

    def read_record(self, entry: ManifestEntry) -> DeltaRecord:
        try:
            data = self.record_path(entry).read_bytes()
        except OSError as exc:
            raise ChainCorrupt(f"step {entry.step}: cannot read record: {exc}", step=entry.step) from None
        try:
            rec = DeltaRecord.from_bytes(data)
        except (CorruptBitstream, ChecksumMismatch) as exc:
            raise ChainCorrupt(f"step {entry.step}: {exc}", step=entry.step) from None
        if rec.target_step != entry.step or rec.base_step != entry.base:
            raise ChainCorrupt(f"step {entry.step}: record steps disagree with the manifest", step=entry.step)
        return rec

    # -- append / restore ---------------------------------------------------------

    def latest(self) -> QuantizedCheckpoint | None:
        if not self.entries:
            return None
        if self._last is None or self._last.step != self.entries[-1].step:
            self._last = self.restore(self.entries[-1].step)
        return self._last

    def append(self, q: QuantizedCheckpoint, quality_delta: float = math.nan,
               scheme: Scheme = Scheme.PE, workers: int = 1) -> tuple[ManifestEntry, DeltaRecord, int]:
        """Append ``q``; returns the manifest entry, the record and its size in bytes."""
        if self.entries and q.step <= self.entries[-1].step:
            raise ValueError(f"step {q.step} does not follow the last step {self.entries[-1].step}")
        full = len(self.entries) % self.full_every == 0
        prev = None if full else self.latest()
        rec = encode_delta_record(prev, q, scheme, quality_delta, workers)
        entry = ManifestEntry(q.step, FULL if full else DELTA, f"{q.step:010d}.dqdr",
                              None if full else prev.step)
        data = rec.to_bytes()
        self.dir.mkdir(parents=True, exist_ok=True)
        _atomic_write(self.record_path(entry), data)
        self.entries.append(entry)
        self._write_manifest()
        self._last = q
        return entry, rec, len(data)

    def _apply(self, prev, entry: ManifestEntry) -> QuantizedCheckpoint:
        rec = self.read_record(entry)
        try:
            return decode_delta_record(prev, rec)
        except QckptError as exc:
            raise ChainCorrupt(f"step {entry.step}: {exc}", step=entry.step) from None

    def restore(self, step: int) -> QuantizedCheckpoint:
        """Replay from the nearest FULL entry at or before ``step``."""
        i = self._index(step)
        start = max(j for j in range(i + 1) if self.entries[j].kind == FULL) if any(
            e.kind == FULL for e in self.entries[:i + 1]) else None
        if start is None:
            raise ChainCorrupt("chain does not start with a FULL record", step=self.entries[0].step)
        state = None
        for entry in self.entries[start:i + 1]:
            state = self._apply(state if entry.kind == DELTA else None, entry)
        return state

    def replay(self) -> Iterator[tuple[ManifestEntry, QuantizedCheckpoint]]:
        """Every state in order, decoding each record once."""
        state = None
        for entry in self.entries:
            state = self._apply(state if entry.kind == DELTA else None, entry)
            yield entry, state

    def verify(self) -> int:
        """Check manifest structure and replay every record; returns the entry count."""
        prev = None
        for i, e in enumerate(self.entries):
            if i == 0 and e.kind != FULL:
                raise ChainCorrupt("first entry is not FULL", step=e.step)
            if prev is not None and e.step <= prev.step:
                raise ChainCorrupt("steps are not increasing", step=e.step)
            if e.kind == DELTA and e.base != prev.step:
                raise ChainCorrupt(f"delta base {e.base} is not the previous step {prev.step}", step=e.step)
            prev = e
        n = 0
        for _ in self.replay():
            n += 1
        return n


@dataclass(frozen=True)
class EntryStats:
    entry: ManifestEntry
    raw_bytes: int
    encoded_bytes: int
    cum_raw: int
    cum_encoded: int
    quality_delta: float
    config: object

    @property
    def ratio(self) -> float:
        return self.raw_bytes / self.encoded_bytes

    @property
    def cum_ratio(self) -> float:
        return self.cum_raw / self.cum_encoded


def chain_stats(chain: Chain) -> list[EntryStats]:
    """Per-entry sizes from the records on disk; raises ChainCorrupt on unreadable records."""
    out = []
    raw = enc = 0
    for e in chain.entries:
        rec = chain.read_record(e)
        size = chain.record_path(e).stat().st_size
        raw += rec.raw_bytes
        enc += size
        out.append(EntryStats(e, rec.raw_bytes, size, raw, enc, rec.quality_delta, rec.config))
    return out


def chain_append(chain: Chain, q: QuantizedCheckpoint, **kw) -> Chain:
    chain.append(q, **kw)
    return chain


def chain_restore(chain: Chain, step: int) -> QuantizedCheckpoint:
    return chain.restore(step)
