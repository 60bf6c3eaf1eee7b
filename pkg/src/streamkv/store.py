"""Tiered key/value store: bounded hot tier, file-backed cold tier.

Granularity is one frame (tokens_per_frame positions); offload moves whole
clips, oldest first, so within every layer the cold positions all precede
the hot positions. A per-frame index of mean keys stays hot no matter what,
which is what lets relevance scoring run without touching cold files.

Cold file format (one file per clip, clip_<clip_id>.skvc):

    magic   4 bytes        b"SKVC"
    version u16 LE         1
    header  4 x u32 LE     layer count, n_kv_heads, d_head, entry count
    entries, one per stored token position, each:
        position  u64 LE
        frame_id  u64 LE
        keys      layer count x n_kv_heads x d_head float32 LE, row-major
        values    same shape as keys

Readers never mutate tiers; every cold file opened bumps the read counter.
"""

from __future__ import annotations

import os
import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (ConfigurationError, FrameLookupError, OrderingError,
                     ShapeError, StorageError, UsageError)
from .model import ModelConfig

COLD_MAGIC = b"SKVC"
COLD_VERSION = 1
BYTES_PER_FLOAT = 4

HOT = "hot"
COLD = "cold"


@dataclass(frozen=True)
class TierPolicy:
    """Offload policy: whole clips, oldest first, until under budget."""

    hot_budget_bytes: int

    def __post_init__(self) -> None:
        if self.hot_budget_bytes < 0:
            raise ConfigurationError(
                f"hot_budget_bytes must be >= 0, got {self.hot_budget_bytes}")


@dataclass
class FrameMeta:
    frame_id: int
    clip_id: int
    start: int          # first stream position, inclusive
    end: int            # last stream position, exclusive
    tier: str = HOT


@dataclass
class _ClipMeta:
    clip_id: int
    frame_ids: list[int] = field(default_factory=list)
    committed: bool = False
    tier: str = HOT
    path: Path | None = None


@dataclass
class _Descriptor:
    """Running mean key for one (layer, frame). Sum kept in float64."""

    total: np.ndarray   # (n_kv_heads, d_head) float64
    count: int = 0

    def update(self, keys: np.ndarray) -> None:
        self.total += keys.astype(np.float64).sum(axis=0)
        self.count += int(keys.shape[0])

    @property
    def mean(self) -> np.ndarray:
        if self.count == 0:
            raise UsageError("descriptor has no keys yet")
        return (self.total / self.count).astype(np.float32)


@dataclass(frozen=True)
class UsageReport:
    hot_entries: int
    cold_entries: int
    hot_bytes: int
    cold_bytes: int
    hot_clip_ids: tuple[int, ...]
    cold_clip_ids: tuple[int, ...]

    @property
    def total_entries(self) -> int:
        return self.hot_entries + self.cold_entries


@dataclass(frozen=True)
class OffloadReport:
    moved_clip_ids: tuple[int, ...]
    moved_bytes: int


class TieredKVStore:
    """Single-writer store; readers see whole clips only once committed."""

    def __init__(self, config: ModelConfig, cold_dir: str | Path | None = None):
        self.config = config
        self.cold_dir = Path(cold_dir) if cold_dir is not None else None
        self._lock = threading.RLock()
        self._frames: dict[int, FrameMeta] = {}
        self._frame_order: list[int] = []
        self._clips: dict[int, _ClipMeta] = {}
        self._clip_order: list[int] = []
        # (layer, frame_id) -> [keys (n, n_kv, dh) f32, values same]
        self._hot: dict[tuple[int, int], list[np.ndarray]] = {}
        self._index: dict[tuple[int, int], _Descriptor] = {}
        self._open_clip: int | None = None
        self.cold_reads = 0
        self.appended_entries = 0
        self.next_position = 0

    # ------------------------------------------------------------------
    # writer side
    # ------------------------------------------------------------------

    def begin_clip(self, clip_id: int) -> None:
        with self._lock:
            if self._open_clip is not None:
                raise OrderingError(f"clip {self._open_clip} is still open")
            if self._clip_order and clip_id <= self._clip_order[-1]:
                raise OrderingError(
                    f"clip_id {clip_id} does not follow {self._clip_order[-1]}")
            self._clips[clip_id] = _ClipMeta(clip_id=clip_id)
            self._clip_order.append(clip_id)
            self._open_clip = clip_id

    def commit_clip(self, clip_id: int) -> None:
        with self._lock:
            if self._open_clip != clip_id:
                raise OrderingError(f"clip {clip_id} is not the open clip")
            self._clips[clip_id].committed = True
            self._open_clip = None

    def abort_clip(self, clip_id: int) -> None:
        """Drop an uncommitted clip, e.g. after a failed prefill."""
        with self._lock:
            if self._open_clip != clip_id:
                raise OrderingError(f"clip {clip_id} is not the open clip")
            meta = self._clips.pop(clip_id)
            self._clip_order.remove(clip_id)
            for fid in meta.frame_ids:
                self._frames.pop(fid, None)
                self._frame_order.remove(fid)
                for layer in range(self.config.n_layers):
                    self._hot.pop((layer, fid), None)
                    self._index.pop((layer, fid), None)
            self._open_clip = None

    def register_frame(self, frame_id: int, clip_id: int, start: int, end: int) -> None:
        with self._lock:
            if self._open_clip != clip_id:
                raise OrderingError(f"clip {clip_id} is not open for writing")
            if frame_id in self._frames:
                raise OrderingError(f"frame {frame_id} already registered")
            if self._frame_order and frame_id <= self._frame_order[-1]:
                raise OrderingError(
                    f"frame_id {frame_id} does not follow {self._frame_order[-1]}")
            if start < self.next_position:
                raise OrderingError(
                    f"frame start {start} regresses before {self.next_position}")
            self._frames[frame_id] = FrameMeta(frame_id, clip_id, start, end)
            self._frame_order.append(frame_id)
            self._clips[clip_id].frame_ids.append(frame_id)
            self.next_position = end

    def append_kv(self, layer: int, frame_id: int,
                  keys: np.ndarray, values: np.ndarray) -> None:
        """Append key/value rows for one frame of one layer (hot tier).

        May be called more than once per frame; the frame's mean key is
        maintained incrementally across calls.
        """
        cfg = self.config
        if not 0 <= layer < cfg.n_layers:
            raise UsageError(f"layer {layer} out of range [0, {cfg.n_layers})")
        expected = (keys.shape[0], cfg.n_kv_heads, cfg.d_head)
        if keys.shape != expected or values.shape != expected:
            raise ShapeError(
                f"keys/values must be {expected}, got {keys.shape} / {values.shape}")
        if keys.dtype != np.float32 or values.dtype != np.float32:
            raise ShapeError("keys and values must be float32")
        with self._lock:
            if frame_id not in self._frames:
                raise FrameLookupError(f"frame {frame_id} not registered")
            if self._frames[frame_id].tier != HOT:
                raise OrderingError(f"frame {frame_id} is already cold")
            slot = self._hot.setdefault((layer, frame_id), [
                np.empty((0, cfg.n_kv_heads, cfg.d_head), dtype=np.float32),
                np.empty((0, cfg.n_kv_heads, cfg.d_head), dtype=np.float32),
            ])
            slot[0] = np.concatenate([slot[0], keys]) if slot[0].size else keys.copy()
            slot[1] = np.concatenate([slot[1], values]) if slot[1].size else values.copy()
            desc = self._index.get((layer, frame_id))
            if desc is None:
                desc = _Descriptor(total=np.zeros((cfg.n_kv_heads, cfg.d_head), dtype=np.float64))
                self._index[(layer, frame_id)] = desc
            desc.update(keys)
            self.appended_entries += int(keys.shape[0])

    # ------------------------------------------------------------------
    # offload
    # ------------------------------------------------------------------

    def _entry_bytes(self) -> int:
        # one (layer, position) entry: key and value vectors, float32
        return self.config.n_kv_heads * self.config.d_head * 2 * BYTES_PER_FLOAT

    def _clip_entry_count(self, clip_id: int) -> int:
        meta = self._clips[clip_id]
        tokens = sum(self._frames[fid].end - self._frames[fid].start
                     for fid in meta.frame_ids)
        return tokens * self.config.n_layers

    def maybe_offload(self, policy: TierPolicy) -> OffloadReport:
        """Move oldest committed clips to cold files until under budget."""
        moved: list[int] = []
        moved_bytes = 0
        with self._lock:
            while True:
                report = self.usage_report()
                if report.hot_bytes <= policy.hot_budget_bytes:
                    break
                candidates = [cid for cid in self._clip_order
                              if self._clips[cid].tier == HOT and self._clips[cid].committed]
                if not candidates:
                    break
                cid = candidates[0]
                nbytes = self._offload_clip(cid)
                moved.append(cid)
                moved_bytes += nbytes
        return OffloadReport(moved_clip_ids=tuple(moved), moved_bytes=moved_bytes)

    def _offload_clip(self, clip_id: int) -> int:
        if self.cold_dir is None:
            raise StorageError("no cold_dir configured; cannot offload")
        meta = self._clips[clip_id]
        path = Path(self.cold_dir) / f"clip_{clip_id}.skvc"
        payload = self._serialize_clip(clip_id)
        tmp = path.with_suffix(".skvc.tmp")
        try:
            self.cold_dir.mkdir(parents=True, exist_ok=True)
            with open(tmp, "wb") as fh:
                fh.write(payload)
                fh.flush()
                os.fsync(fh.fileno())
            os.replace(tmp, path)
        except OSError as exc:
            try:
                tmp.unlink()
            except OSError:
                pass
            raise StorageError(f"cold write for clip {clip_id} failed: {exc}") from exc
        # only after a durable write do the hot arrays go away
        for fid in meta.frame_ids:
            self._frames[fid].tier = COLD
            for layer in range(self.config.n_layers):
                self._hot.pop((layer, fid), None)
        meta.tier = COLD
        meta.path = path
        return len(payload)

    def _serialize_clip(self, clip_id: int) -> bytes:
        cfg = self.config
        meta = self._clips[clip_id]
        positions: list[int] = []
        frame_of: list[int] = []
        for fid in meta.frame_ids:
            fm = self._frames[fid]
            for pos in range(fm.start, fm.end):
                positions.append(pos)
                frame_of.append(fid)
        out = bytearray()
        out += COLD_MAGIC
        out += struct.pack("<H", COLD_VERSION)
        out += struct.pack("<IIII", cfg.n_layers, cfg.n_kv_heads, cfg.d_head,
                           len(positions))
        for pos, fid in zip(positions, frame_of):
            fm = self._frames[fid]
            row = pos - fm.start
            keys = np.empty((cfg.n_layers, cfg.n_kv_heads, cfg.d_head), dtype=np.float32)
            values = np.empty_like(keys)
            for layer in range(cfg.n_layers):
                slot = self._hot.get((layer, fid))
                if slot is None or slot[0].shape[0] <= row:
                    raise StorageError(
                        f"clip {clip_id} frame {fid} layer {layer} is missing rows")
                keys[layer] = slot[0][row]
                values[layer] = slot[1][row]
            out += struct.pack("<QQ", pos, fid)
            out += keys.astype("<f4").tobytes(order="C")
            out += values.astype("<f4").tobytes(order="C")
        return bytes(out)

    def _read_clip_file(self, clip_id: int) -> dict[int, list[np.ndarray]]:
        """Parse a cold file into frame -> [keys, values, positions].

        keys/values come back as (n, n_layers, n_kv, d_head).
        """
        meta = self._clips[clip_id]
        if meta.path is None:
            raise StorageError(f"clip {clip_id} has no cold file")
        self.cold_reads += 1
        try:
            raw = meta.path.read_bytes()
        except OSError as exc:
            raise StorageError(f"cold read for clip {clip_id} failed: {exc}") from exc
        return parse_cold_file(raw, self.config)

    # ------------------------------------------------------------------
    # reader side
    # ------------------------------------------------------------------

    def frame_ids(self) -> tuple[int, ...]:
        """Committed frames in temporal order."""
        with self._lock:
            return tuple(fid for fid in self._frame_order
                         if self._clips[self._frames[fid].clip_id].committed)

    def frame_meta(self, frame_id: int) -> FrameMeta:
        with self._lock:
            meta = self._frames.get(frame_id)
            if meta is None:
                raise FrameLookupError(f"frame {frame_id} not registered")
            return meta

    def descriptors(self, layer: int) -> tuple[tuple[int, ...], np.ndarray]:
        """Mean keys for all committed frames: (frame_ids, (F, n_kv, d_head))."""
        with self._lock:
            ids = self.frame_ids()
            if not ids:
                return (), np.empty((0, self.config.n_kv_heads, self.config.d_head),
                                    dtype=np.float32)
            means = np.stack([self._index[(layer, fid)].mean for fid in ids])
            return ids, means

    def descriptor_mean(self, layer: int, frame_id: int) -> np.ndarray:
        with self._lock:
            desc = self._index.get((layer, frame_id))
            if desc is None:
                raise FrameLookupError(f"no descriptor for layer {layer} frame {frame_id}")
            return desc.mean

    def fetch(self, layer: int, frame_ids) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Keys, values, positions for the frames, in temporal order.

        Cold frames are read from their clip files; tiers never change.
        """
        if not 0 <= layer < self.config.n_layers:
            raise UsageError(f"layer {layer} out of range")
        with self._lock:
            wanted = list(frame_ids)
            for fid in wanted:
                if fid not in self._frames:
                    raise FrameLookupError(f"frame {fid} not registered")
            wanted.sort(key=lambda fid: self._frames[fid].start)
            cold_clips = {self._frames[fid].clip_id for fid in wanted
                          if self._frames[fid].tier == COLD}
            cold_cache = {cid: self._read_clip_file(cid) for cid in sorted(cold_clips)}
            keys_parts, value_parts, pos_parts = [], [], []
            for fid in wanted:
                fm = self._frames[fid]
                if fm.tier == HOT:
                    slot = self._hot.get((layer, fid))
                    if slot is None:
                        raise FrameLookupError(
                            f"frame {fid} has no layer {layer} rows yet")
                    keys_parts.append(slot[0])
                    value_parts.append(slot[1])
                    pos_parts.append(np.arange(fm.start, fm.start + slot[0].shape[0],
                                               dtype=np.int64))
                else:
                    entry = cold_cache[fm.clip_id].get(fid)
                    if entry is None:
                        raise StorageError(f"cold file lacks frame {fid}")
                    keys_parts.append(entry[0][:, layer])
                    value_parts.append(entry[1][:, layer])
                    pos_parts.append(entry[2])
            if not keys_parts:
                empty = np.empty((0, self.config.n_kv_heads, self.config.d_head),
                                 dtype=np.float32)
                return empty, empty.copy(), np.empty((0,), dtype=np.int64)
            return (np.concatenate(keys_parts), np.concatenate(value_parts),
                    np.concatenate(pos_parts))

    def fetch_all(self, layer: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.fetch(layer, self.frame_ids())

    def iter_layer_blocks(self, layer: int):
        """Yield (keys, values, positions) per committed frame, temporal order."""
        for fid in self.frame_ids():
            yield self.fetch(layer, [fid])

    def layer_entries(self, layer: int, tier: str) -> list[tuple[int, int]]:
        """(position, frame_id) pairs stored in the given tier, temporal order."""
        with self._lock:
            out = []
            for fid in self._frame_order:
                fm = self._frames[fid]
                if fm.tier != tier:
                    continue
                for pos in range(fm.start, fm.end):
                    out.append((pos, fid))
            return out

    def usage_report(self) -> UsageReport:
        with self._lock:
            entry_bytes = self._entry_bytes()
            hot_entries = 0
            cold_entries = 0
            hot_clips: list[int] = []
            cold_clips: list[int] = []
            for cid in self._clip_order:
                count = self._clip_entry_count(cid)
                if self._clips[cid].tier == HOT:
                    hot_entries += count
                    hot_clips.append(cid)
                else:
                    cold_entries += count
                    cold_clips.append(cid)
            return UsageReport(
                hot_entries=hot_entries,
                cold_entries=cold_entries,
                hot_bytes=hot_entries * entry_bytes,
                cold_bytes=cold_entries * entry_bytes,
                hot_clip_ids=tuple(hot_clips),
                cold_clip_ids=tuple(cold_clips),
            )


def parse_cold_file(raw: bytes, config: ModelConfig) -> dict[int, list[np.ndarray]]:
    """Decode one clip file. Returns frame_id -> [keys, values, positions]

    with keys/values shaped (n, n_layers, n_kv_heads, d_head), float32.
    """
    if len(raw) < 22:
        raise StorageError(f"cold file truncated at {len(raw)} bytes")
    if raw[:4] != COLD_MAGIC:
        raise StorageError(f"bad magic {raw[:4]!r}")
    (version,) = struct.unpack_from("<H", raw, 4)
    if version != COLD_VERSION:
        raise StorageError(f"unsupported cold file version {version}")
    n_layers, n_kv, d_head, n_entries = struct.unpack_from("<IIII", raw, 6)
    if (n_layers, n_kv, d_head) != (config.n_layers, config.n_kv_heads, config.d_head):
        raise StorageError(
            f"cold file geometry ({n_layers}, {n_kv}, {d_head}) does not match "
            f"config ({config.n_layers}, {config.n_kv_heads}, {config.d_head})")
    vec = n_layers * n_kv * d_head
    entry_size = 16 + 2 * vec * BYTES_PER_FLOAT
    offset = 22
    if len(raw) != offset + n_entries * entry_size:
        raise StorageError(
            f"cold file length {len(raw)} does not match {n_entries} entries")
    frames: dict[int, list[list]] = {}
    for _ in range(n_entries):
        pos, fid = struct.unpack_from("<QQ", raw, offset)
        offset += 16
        keys = np.frombuffer(raw, dtype="<f4", count=vec, offset=offset)
        offset += vec * BYTES_PER_FLOAT
        values = np.frombuffer(raw, dtype="<f4", count=vec, offset=offset)
        offset += vec * BYTES_PER_FLOAT
        bucket = frames.setdefault(int(fid), [[], [], []])
        bucket[0].append(keys.reshape(n_layers, n_kv, d_head))
        bucket[1].append(values.reshape(n_layers, n_kv, d_head))
        bucket[2].append(int(pos))
    out: dict[int, list[np.ndarray]] = {}
    for fid, (k_rows, v_rows, positions) in frames.items():
        out[fid] = [np.ascontiguousarray(np.stack(k_rows), dtype=np.float32),
                    np.ascontiguousarray(np.stack(v_rows), dtype=np.float32),
                    np.asarray(positions, dtype=np.int64)]
    return out
