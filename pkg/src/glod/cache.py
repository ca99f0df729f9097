"""Device-cache simulation: one resident cut prefix per SPT, distance-ratio
hit test, LRU write-back eviction under a byte budget and periodic flush."""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field

from .store import AttributeBlock


class OverBudgetError(ValueError):
    pass


@dataclass(frozen=True)
class CacheConfig:
    budget_bytes: int
    d_min: float = 0.8
    d_max: float = 1.4
    flush_interval: int = 1000

    def __post_init__(self):
        if not (0 < self.d_min <= 1 <= self.d_max):
            raise ValueError("require 0 < d_min <= 1 <= d_max")
        if self.budget_bytes <= 0:
            raise ValueError("budget_bytes must be > 0")
        if self.flush_interval < 1:
            raise ValueError("flush_interval must be >= 1")


@dataclass
class CacheEntry:
    spt_id: int
    cached_distance: float
    prefix_len: int
    block: AttributeBlock
    nbytes: int
    dirty: bool = False
    lru_stamp: int = 0


@dataclass
class DeviceCache:
    config: CacheConfig
    entries: "OrderedDict[int, CacheEntry]" = field(default_factory=OrderedDict)
    resident_bytes: int = 0
    _stamp: int = 0
    hits: int = 0
    misses: int = 0

    def _touch(self, entry: CacheEntry):
        self._stamp += 1
        entry.lru_stamp = self._stamp
        self.entries.move_to_end(entry.spt_id)

    def lookup(self, spt_id: int, d_root: float):
        """Hit iff an entry exists and d_root/cached_distance lies within
        the configured ratio band; zero distances only match exactly."""
        entry = self.entries.get(spt_id)
        if entry is None:
            self.misses += 1
            return None
        if entry.cached_distance == 0.0:
            hit = d_root == 0.0
        else:
            ratio = d_root / entry.cached_distance
            hit = self.config.d_min <= ratio <= self.config.d_max
        if not hit:
            self.misses += 1
            return None
        self.hits += 1
        self._touch(entry)
        return entry

    def insert(self, entry: CacheEntry):
        """Make the entry resident, evicting LRU entries past the budget.
        Returns evicted (spt_id, block) pairs for dirty write-back."""
        if entry.nbytes > self.config.budget_bytes:
            raise OverBudgetError(
                f"entry of {entry.nbytes} B exceeds budget "
                f"{self.config.budget_bytes} B")
        evicted = []
        old = self.entries.pop(entry.spt_id, None)
        if old is not None:
            self.resident_bytes -= old.nbytes
            if old.dirty:
                evicted.append((old.spt_id, old.block))
        self.entries[entry.spt_id] = entry
        self.resident_bytes += entry.nbytes
        self._touch(entry)
        while self.resident_bytes > self.config.budget_bytes:
            _, victim = self.entries.popitem(last=False)
            self.resident_bytes -= victim.nbytes
            if victim.dirty:
                evicted.append((victim.spt_id, victim.block))
        return evicted

    def tick_and_maybe_flush(self, iteration: int):
        """Full flush every flush_interval iterations; dirty blocks are
        returned for write-back."""
        if iteration % self.config.flush_interval != 0:
            return []
        flushed = [(e.spt_id, e.block) for e in self.entries.values() if e.dirty]
        self.entries.clear()
        self.resident_bytes = 0
        return flushed

    def resident_ids(self):
        return list(self.entries)
