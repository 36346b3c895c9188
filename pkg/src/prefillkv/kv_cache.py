"""Per-layer, per-head key/value store and the memory tracer that watches it."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, InvalidArgument, InvalidState
from .vision_layout import kv_memory_bytes


@dataclass
class HeadStore:
    """Entries of one (layer, head), kept in increasing position order."""

    keys: np.ndarray
    values: np.ndarray
    positions: np.ndarray
    kinds: np.ndarray
    structure_ids: np.ndarray
    protected: np.ndarray

    @classmethod
    def empty(cls, dim: int) -> "HeadStore":
        return cls(
            keys=np.zeros((0, dim)),
            values=np.zeros((0, dim)),
            positions=np.zeros(0, dtype=np.int64),
            kinds=np.zeros(0, dtype=np.int8),
            structure_ids=np.zeros(0, dtype=np.int32),
            protected=np.zeros(0, dtype=bool),
        )

    def __len__(self) -> int:
        return len(self.positions)

    def take(self, idx: np.ndarray) -> "HeadStore":
        return HeadStore(*(getattr(self, f)[idx] for f in _FIELDS))

    def extend(self, other: "HeadStore") -> "HeadStore":
        return HeadStore(*(np.concatenate([getattr(self, f), getattr(other, f)]) for f in _FIELDS))


_FIELDS = ("keys", "values", "positions", "kinds", "structure_ids", "protected")


class KvCache:
    """``layers x heads`` grid of :class:`HeadStore`.

    Keys are stored after the rotary transform, so evicting entries never
    requires renumbering positions.
    """

    def __init__(self, layers: int, heads: int, dim: int):
        if min(layers, heads, dim) < 1:
            raise InvalidArgument("cache dimensions must be positive")
        self.layers, self.heads, self.dim = layers, heads, dim
        self.stores = [[HeadStore.empty(dim) for _ in range(heads)] for _ in range(layers)]
        # first position the next prefill block must start at
        self.next_position = 0

    def _check_layer(self, layer: int):
        if not 0 <= layer < self.layers:
            raise InvalidArgument(f"layer {layer} out of range")

    def store(self, layer: int, head: int) -> HeadStore:
        return self.stores[layer][head]

    def append_block(self, layer, K, V, positions, kinds=None, structure_ids=None, protected=None) -> None:
        """Append one block of keys/values to every head of ``layer``.

        ``K`` and ``V`` are ``(heads, b, dim)``, or ``(b, dim)`` to share one
        matrix across heads.
        """
        self._check_layer(layer)
        K = np.asarray(K, dtype=np.float64)
        V = np.asarray(V, dtype=np.float64)
        if K.ndim == 2:
            K = np.broadcast_to(K, (self.heads,) + K.shape)
        if V.ndim == 2:
            V = np.broadcast_to(V, (self.heads,) + V.shape)
        positions = np.asarray(positions, dtype=np.int64)
        b = len(positions)
        if K.shape != (self.heads, b, self.dim) or V.shape != K.shape:
            raise InvalidArgument(f"expected K/V of shape {(self.heads, b, self.dim)}, got {K.shape} / {V.shape}")
        if b and np.any(np.diff(positions) <= 0):
            raise InvalidArgument("positions within a block must strictly increase")
        kinds = np.zeros(b, dtype=np.int8) if kinds is None else np.asarray(kinds, dtype=np.int8)
        sids = np.full(b, -1, dtype=np.int32) if structure_ids is None else np.asarray(structure_ids, dtype=np.int32)
        prot = np.zeros(b, dtype=bool) if protected is None else np.asarray(protected, dtype=bool)
        for h, st in enumerate(self.stores[layer]):
            if b and len(st) and positions[0] <= st.positions[-1]:
                raise InvalidArgument(
                    f"position {positions[0]} not after last cached position {st.positions[-1]} (layer {layer})"
                )
        for h in range(self.heads):
            new = HeadStore(K[h].copy(), V[h].copy(), positions.copy(), kinds.copy(), sids.copy(), prot.copy())
            self.stores[layer][h] = self.stores[layer][h].extend(new)

    def retain(self, layer: int, head: int, keep) -> None:
        """Keep only the entries at indices ``keep``, in their original order."""
        self._check_layer(layer)
        st = self.stores[layer][head]
        keep = np.unique(np.asarray(keep, dtype=np.int64))
        if keep.size and (keep[0] < 0 or keep[-1] >= len(st)):
            raise InvalidArgument(f"keep index out of range for {len(st)} entries")
        dropped = np.ones(len(st), dtype=bool)
        dropped[keep] = False
        if np.any(st.protected & dropped):
            raise ContractViolation(f"retain would drop protected entries in layer {layer}, head {head}")
        self.stores[layer][head] = st.take(keep)

    def set_protected(self, layer: int, head: int, mask) -> None:
        self.stores[layer][head].protected = np.asarray(mask, dtype=bool).copy()

    def count(self, layer: int, head: int) -> int:
        return len(self.stores[layer][head])

    def counts(self) -> np.ndarray:
        return np.array([[len(s) for s in row] for row in self.stores], dtype=np.int64)

    def max_count(self) -> int:
        return int(self.counts().max())

    def positions(self, layer: int, head: int) -> np.ndarray:
        return self.stores[layer][head].positions.copy()

    def retained_positions(self) -> list[list[np.ndarray]]:
        return [[s.positions.copy() for s in row] for row in self.stores]

    def footprint(self, precision_bytes: int) -> int:
        return int(2 * self.counts().sum() * self.dim * precision_bytes)

    def copy(self) -> "KvCache":
        out = KvCache(self.layers, self.heads, self.dim)
        out.stores = [[st.take(np.arange(len(st))) for st in row] for row in self.stores]
        out.next_position = self.next_position
        return out

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(np.array([self.layers, self.heads, self.dim], dtype=np.int64).tobytes())
        for row in self.stores:
            for st in row:
                for f in _FIELDS:
                    h.update(np.ascontiguousarray(getattr(st, f)).tobytes())
        return h.hexdigest()

    def to_dict(self) -> dict:
        return {
            "header": {"layers": self.layers, "heads": self.heads, "dim": self.dim},
            "entries": [
                [{f: getattr(st, f).tolist() for f in _FIELDS} for st in row] for row in self.stores
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "KvCache":
        hdr = data["header"]
        cache = cls(hdr["layers"], hdr["heads"], hdr["dim"])
        dtypes = {"positions": np.int64, "kinds": np.int8, "structure_ids": np.int32, "protected": bool}
        for l, row in enumerate(data["entries"]):
            for h, ent in enumerate(row):
                arrs = {f: np.asarray(ent[f], dtype=dtypes.get(f, np.float64)) for f in _FIELDS}
                for f in ("keys", "values"):
                    arrs[f] = arrs[f].reshape(-1, cache.dim)
                cache.stores[l][h] = HeadStore(**arrs)
        cache.next_position = max(
            (int(st.positions[-1]) + 1 for row in cache.stores for st in row if len(st)), default=0
        )
        return cache

    def dumps(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def loads(cls, text: str) -> "KvCache":
        return cls.from_dict(json.loads(text))


@dataclass
class TraceEvent:
    label: str
    entries: int
    modeled_bytes: int
    block: int


@dataclass
class MemoryTrace:
    """Occupancy time series, sampled at block boundaries.

    ``modeled_bytes`` applies the KV footprint formula to the largest
    (layer, head) occupancy at each event.
    """

    layers: int
    heads: int
    dim_head: int
    precision_bytes: int = 2
    events: list[TraceEvent] = field(default_factory=list)

    def record(self, label: str, cache: KvCache, block: int = 0) -> TraceEvent:
        n = cache.max_count()
        ev = TraceEvent(label, n, kv_memory_bytes(self.layers, self.heads, self.dim_head, self.precision_bytes, n), block)
        self.events.append(ev)
        return ev

    @property
    def block_peaks(self) -> list[int]:
        peaks: dict[int, int] = {}
        for ev in self.events:
            peaks[ev.block] = max(peaks.get(ev.block, 0), ev.modeled_bytes)
        return [peaks[k] for k in sorted(peaks)]

    def global_peak(self) -> int:
        if not self.events:
            raise InvalidState("peak query on an empty trace")
        return max(ev.modeled_bytes for ev in self.events)

    def avg_block_peak(self) -> float:
        if not self.events:
            raise InvalidState("peak query on an empty trace")
        peaks = self.block_peaks
        return sum(peaks) / len(peaks)

    def peak_entries(self) -> int:
        if not self.events:
            raise InvalidState("peak query on an empty trace")
        return max(ev.entries for ev in self.events)
