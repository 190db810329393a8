"""Sparse 3D map: points, word-partitioned descriptors, covisibility, file I/O.

A map is built by adding observations (point, word, descriptor, frame).
Observations of the same (point, word) pair are averaged through a running
(sum, count) so the result does not depend on insertion order.  ``freeze``
turns the builder state into flat arrays (inverted index by word, CSR
covisibility tables) that the matcher reads; frozen maps are immutable.
"""

from __future__ import annotations

import io
import json
import struct
import zlib
from pathlib import Path

import numpy as np

from mcloc.vocabulary import PQCodebook, Vocabulary, pq_encode, pq_reconstruct

MAGIC = b"MCLMAP01"
FORMAT_VERSION = 1

_POINT_DTYPE = np.dtype([("point_id", "<u8"), ("position", "<f8", (3,)),
                         ("entry_count", "<u4"), ("frame_count", "<u4")])


class MapFormatError(ValueError):
    """Unreadable map file: bad magic, version, checksum or truncation."""


class FrozenMapError(RuntimeError):
    pass


class GlobalMap:
    def __init__(self, vocabulary: Vocabulary, pq: PQCodebook | None = None):
        if pq is not None and pq.dim != vocabulary.dim:
            raise ValueError("PQ codebook and vocabulary dimensions differ")
        self.vocabulary = vocabulary
        self.pq = pq
        self.frozen = False
        self._positions: dict[int, np.ndarray] = {}
        # pending observation chunks, consolidated lazily
        self._obs_keys: list[np.ndarray] = []   # (n, 2) int64: point_id, word_id
        self._obs_desc: list[np.ndarray] = []   # (n, D) float32 or float64
        self._frame_pairs: list[np.ndarray] = []  # (n, 2) int64: point_id, frame_id
        self._sums: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None

    # -- construction -------------------------------------------------------

    @property
    def dim(self) -> int:
        return self.vocabulary.dim

    def _check_mutable(self) -> None:
        if self.frozen:
            raise FrozenMapError("map is frozen")

    def add_point(self, point_id: int, position) -> None:
        self._check_mutable()
        self._positions[int(point_id)] = np.asarray(position, dtype=np.float64).reshape(3).copy()

    def add_points(self, point_ids: np.ndarray, positions: np.ndarray) -> None:
        self._check_mutable()
        for pid, pos in zip(np.asarray(point_ids).tolist(), np.asarray(positions, dtype=np.float64)):
            self._positions[int(pid)] = pos.copy()

    def add_observation(self, point_id: int, word_id: int, descriptor, frame_id: int,
                        position=None) -> GlobalMap:
        """Average ``descriptor`` into the (point, word) entry and record the frame."""
        if int(point_id) not in self._positions:
            if position is None:
                raise KeyError(f"point {point_id} does not exist; pass its position")
            self.add_point(point_id, position)
        self.add_observations(np.array([point_id]), np.array([word_id]),
                              np.asarray(descriptor)[None, :], np.array([frame_id]))
        return self

    def add_observations(self, point_ids, word_ids, descriptors, frame_ids) -> GlobalMap:
        self._check_mutable()
        point_ids = np.asarray(point_ids, dtype=np.int64).ravel()
        word_ids = np.asarray(word_ids, dtype=np.int64).ravel()
        frame_ids = np.asarray(frame_ids, dtype=np.int64).ravel()
        desc = np.atleast_2d(np.asarray(descriptors))
        if desc.dtype not in (np.float32, np.float64):
            desc = desc.astype(np.float64)
        if desc.shape[1] != self.dim:
            raise ValueError(f"descriptor dimension {desc.shape[1]} != map dimension {self.dim}")
        if not (len(point_ids) == len(word_ids) == len(frame_ids) == len(desc)):
            raise ValueError("observation arrays have different lengths")
        if np.any(word_ids < 0) or np.any(word_ids >= self.vocabulary.size):
            raise ValueError("word id out of range")
        missing = set(np.unique(point_ids).tolist()) - self._positions.keys()
        if missing:
            raise KeyError(f"unknown point ids: {sorted(missing)[:5]}")
        self._obs_keys.append(np.stack([point_ids, word_ids], axis=1))
        self._obs_desc.append(desc)
        self._frame_pairs.append(np.stack([point_ids, frame_ids], axis=1))
        return self

    def _consolidate(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Merge pending chunks into sorted unique (point, word) sums and counts."""
        if self._obs_keys:
            keys = np.concatenate(self._obs_keys)
            desc = np.concatenate(self._obs_desc)
            counts = np.ones(len(keys), dtype=np.int64)
            if self._sums is not None:
                keys = np.concatenate([self._sums[0], keys])
                desc = np.concatenate([self._sums[1], desc])
                counts = np.concatenate([self._sums[2], counts])
            order = np.lexsort((keys[:, 1], keys[:, 0]))
            keys, desc, counts = keys[order], desc[order], counts[order]
            start = np.ones(len(keys), dtype=bool)
            start[1:] = np.any(keys[1:] != keys[:-1], axis=1)
            idx = np.nonzero(start)[0]
            self._sums = (keys[idx], np.add.reduceat(desc, idx, axis=0, dtype=np.float64),
                          np.add.reduceat(counts, idx))
            self._obs_keys.clear()
            self._obs_desc.clear()
        if self._sums is None:
            return (np.zeros((0, 2), np.int64), np.zeros((0, self.dim)), np.zeros(0, np.int64))
        return self._sums

    def entry_descriptor(self, point_id: int, word_id: int) -> np.ndarray:
        """Current averaged (unit) descriptor of a (point, word) entry."""
        if self.frozen:
            p = self.point_index(point_id)
            lo, hi = self.point_entry_offsets[p], self.point_entry_offsets[p + 1]
            hits = np.nonzero(self.entry_word[lo:hi] == word_id)[0]
            if not len(hits):
                raise KeyError((point_id, word_id))
            return self.entry_descriptors(np.array([lo + hits[0]]))[0]
        keys, sums, counts = self._consolidate()
        hit = np.nonzero((keys[:, 0] == point_id) & (keys[:, 1] == word_id))[0]
        if not len(hit):
            raise KeyError((point_id, word_id))
        mean = sums[hit[0]] / counts[hit[0]]
        return mean / np.linalg.norm(mean)

    def freeze(self) -> GlobalMap:
        """Finalize into immutable arrays; further additions raise."""
        if self.frozen:
            return self
        keys, sums, _ = self._consolidate()
        point_ids = np.array(sorted(self._positions), dtype=np.uint64)
        positions = np.array([self._positions[int(p)] for p in point_ids]).reshape(-1, 3)
        entry_point = np.searchsorted(point_ids, keys[:, 0].astype(np.uint64)).astype(np.int64)
        norms = np.linalg.norm(sums, axis=1, keepdims=True)
        if np.any(norms == 0):
            raise ValueError("averaged descriptor vanished (opposite observations cancel)")
        desc = (sums / norms).astype(np.float32)
        if self._frame_pairs:
            pairs = np.unique(np.concatenate(self._frame_pairs), axis=0)
        else:
            pairs = np.zeros((0, 2), dtype=np.int64)
        frame_point = np.searchsorted(point_ids, pairs[:, 0].astype(np.uint64)).astype(np.int64)
        codes = pq_encode(self.pq, desc) if self.pq is not None and len(desc) else None
        if self.pq is not None and codes is None:
            codes = np.zeros((0, self.pq.M), dtype=np.uint8)
        self._install(point_ids, positions, entry_point, keys[:, 1].astype(np.uint32),
                      None if self.pq is not None else desc, codes,
                      frame_point, pairs[:, 1].astype(np.uint64))
        self._positions.clear()
        self._frame_pairs.clear()
        self._sums = None
        return self

    def _install(self, point_ids, positions, entry_point, entry_word, entry_desc, entry_code,
                 frame_point, frame_ids) -> None:
        """Set frozen arrays.  Entries and frame pairs must be sorted by point."""
        P = len(point_ids)
        self.point_ids = point_ids
        self.positions = positions
        self.entry_point = entry_point
        self.entry_word = entry_word
        self.entry_desc = entry_desc
        self.entry_code = entry_code
        self.point_entry_offsets = np.searchsorted(entry_point, np.arange(P + 1))
        self.point_frame_offsets = np.searchsorted(frame_point, np.arange(P + 1))
        self.point_frames = frame_ids
        counts_e = np.diff(self.point_entry_offsets)
        counts_f = np.diff(self.point_frame_offsets)
        if P and (np.any(counts_e == 0) or np.any(counts_f == 0)):
            raise ValueError("every map point needs at least one word entry and one frame")
        # inverted index: entries grouped by word, then by point
        self.word_order = np.lexsort((entry_point, entry_word)).astype(np.int64)
        self.word_offsets = np.searchsorted(entry_word[self.word_order],
                                            np.arange(self.vocabulary.size + 1))
        # frame -> points
        order = np.lexsort((frame_point, frame_ids))
        fids = frame_ids[order]
        self.frame_ids, first = np.unique(fids, return_index=True)
        self.frame_point_offsets = np.append(first, len(fids)).astype(np.int64)
        self.frame_points = frame_point[order]
        self._frame_of_point = np.searchsorted(self.frame_ids, frame_ids)
        self._index = {int(p): i for i, p in enumerate(point_ids)}
        self._recon = None
        for arr in (self.point_ids, self.positions, self.entry_point, self.entry_word,
                    self.entry_desc, self.entry_code, self.point_frames):
            if arr is not None:
                arr.flags.writeable = False
        self.frozen = True

    # -- queries (frozen maps) -----------------------------------------------

    def _require_frozen(self) -> None:
        if not self.frozen:
            raise FrozenMapError("map must be frozen before queries")

    @property
    def num_points(self) -> int:
        self._require_frozen()
        return len(self.point_ids)

    @property
    def num_entries(self) -> int:
        self._require_frozen()
        return len(self.entry_point)

    def point_index(self, point_id: int) -> int:
        self._require_frozen()
        try:
            return self._index[int(point_id)]
        except KeyError:
            raise KeyError(f"unknown point id {point_id}") from None

    def word_entries(self, word_id: int) -> np.ndarray:
        """Entry indices assigned to ``word_id``."""
        self._require_frozen()
        return self.word_order[self.word_offsets[word_id]:self.word_offsets[word_id + 1]]

    def word_sizes(self) -> np.ndarray:
        self._require_frozen()
        return np.diff(self.word_offsets)

    def entry_descriptors(self, entries: np.ndarray) -> np.ndarray:
        """Plain descriptors, or PQ reconstructions, of the given entries (float32)."""
        self._require_frozen()
        if self.entry_desc is not None:
            return self.entry_desc[entries]
        if self._recon is None:
            self._recon = pq_reconstruct(self.pq, self.entry_code).astype(np.float32)
        return self._recon[entries]

    def point_entries(self, point_index: int) -> np.ndarray:
        return np.arange(self.point_entry_offsets[point_index],
                         self.point_entry_offsets[point_index + 1])

    def observing_frames(self, point_id: int) -> np.ndarray:
        p = self.point_index(point_id)
        return self.point_frames[self.point_frame_offsets[p]:self.point_frame_offsets[p + 1]]

    def covisible_indices(self, point_index: int) -> np.ndarray:
        """Indices of points sharing a frame with ``point_index`` (excluding it)."""
        self._require_frozen()
        lo, hi = self.point_frame_offsets[point_index], self.point_frame_offsets[point_index + 1]
        slots = self._frame_of_point[lo:hi]
        parts = [self.frame_points[self.frame_point_offsets[s]:self.frame_point_offsets[s + 1]]
                 for s in slots]
        out = np.unique(np.concatenate(parts)) if parts else np.zeros(0, np.int64)
        return out[out != point_index]

    def covisible_points(self, point_id: int) -> set[int]:
        idx = self.covisible_indices(self.point_index(point_id))
        return {int(p) for p in self.point_ids[idx]}

    def frames_of_indices(self, point_index: int) -> np.ndarray:
        lo, hi = self.point_frame_offsets[point_index], self.point_frame_offsets[point_index + 1]
        return self.point_frames[lo:hi]

    def check_consistency(self) -> None:
        """Full scan: inverted index mirrors per-point entries, word ids in range."""
        self._require_frozen()
        W = self.vocabulary.size
        if len(self.entry_word) and int(self.entry_word.max()) >= W:
            raise AssertionError("word id out of range")
        from_index = set()
        for w in range(W):
            for e in self.word_entries(w):
                from_index.add((int(self.entry_point[e]), w))
        from_points = set()
        for p in range(len(self.point_ids)):
            for e in self.point_entries(p):
                from_points.add((p, int(self.entry_word[e])))
        if from_index != from_points:
            raise AssertionError("inverted index and point entries disagree")

    def equals(self, other: GlobalMap) -> bool:
        self._require_frozen()
        other._require_frozen()
        if not self.vocabulary.equals(other.vocabulary):
            return False
        if (self.pq is None) != (other.pq is None):
            return False
        if self.pq is not None and not self.pq.equals(other.pq):
            return False
        pairs = [(self.point_ids, other.point_ids), (self.positions, other.positions),
                 (self.entry_point, other.entry_point), (self.entry_word, other.entry_word),
                 (self.point_frames, other.point_frames),
                 (self.point_frame_offsets, other.point_frame_offsets)]
        if self.pq is None:
            pairs.append((self.entry_desc, other.entry_desc))
        else:
            pairs.append((self.entry_code, other.entry_code))
        return all(a.shape == b.shape and np.array_equal(a, b) for a, b in pairs)


# -- file format -----------------------------------------------------------------

def save_map(gmap: GlobalMap, path: str | Path) -> None:
    gmap._require_frozen()
    W, D = gmap.vocabulary.centroids.shape
    pq = gmap.pq
    header = {
        "version": FORMAT_VERSION,
        "descriptor_dim": D,
        "word_count": W,
        "point_count": int(len(gmap.point_ids)),
        "pq": {"enabled": pq is not None, "M": pq.M if pq else 0, "K": pq.K if pq else 0},
        "endianness": "little",
    }
    hdr = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", len(hdr)))
    buf.write(hdr)
    buf.write(gmap.vocabulary.centroids.astype("<f4").tobytes())
    if pq is not None:
        buf.write(pq.centroids.astype("<f4").tobytes())
    table = np.zeros(len(gmap.point_ids), dtype=_POINT_DTYPE)
    table["point_id"] = gmap.point_ids
    table["position"] = gmap.positions
    table["entry_count"] = np.diff(gmap.point_entry_offsets)
    table["frame_count"] = np.diff(gmap.point_frame_offsets)
    buf.write(table.tobytes())
    if pq is None:
        entry_dtype = np.dtype([("word_id", "<u4"), ("desc", "<f4", (D,))])
        entries = np.zeros(len(gmap.entry_word), dtype=entry_dtype)
        entries["desc"] = gmap.entry_desc
    else:
        entry_dtype = np.dtype([("word_id", "<u4"), ("code", "u1", (pq.M,))])
        entries = np.zeros(len(gmap.entry_word), dtype=entry_dtype)
        entries["code"] = gmap.entry_code
    entries["word_id"] = gmap.entry_word
    buf.write(entries.tobytes())
    buf.write(gmap.point_frames.astype("<u8").tobytes())
    payload = buf.getvalue()
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    Path(path).write_bytes(payload + struct.pack("<I", crc))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise MapFormatError("truncated map file")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def array(self, dtype, count: int) -> np.ndarray:
        dtype = np.dtype(dtype)
        return np.frombuffer(self.take(dtype.itemsize * count), dtype=dtype, count=count).copy()


def load_map(path: str | Path) -> GlobalMap:
    data = Path(path).read_bytes()
    if len(data) < len(MAGIC) or data[:len(MAGIC)] != MAGIC:
        raise MapFormatError("bad magic bytes; not a map file")
    if len(data) < len(MAGIC) + 8:
        raise MapFormatError("truncated map file")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    r = _Reader(body)
    r.take(len(MAGIC))
    (hlen,) = struct.unpack("<I", r.take(4))
    try:
        header = json.loads(r.take(hlen).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        if zlib.crc32(body) & 0xFFFFFFFF != crc:
            raise MapFormatError("checksum mismatch") from exc
        raise MapFormatError(f"unreadable header: {exc}") from exc
    if header.get("version") != FORMAT_VERSION:
        raise MapFormatError(f"unsupported map version {header.get('version')}")
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise MapFormatError("checksum mismatch")
    if header.get("endianness") != "little":
        raise MapFormatError("only little-endian maps are supported")
    D, W, P = header["descriptor_dim"], header["word_count"], header["point_count"]
    vocab = Vocabulary(r.array("<f4", W * D).reshape(W, D))
    pq = None
    if header["pq"]["enabled"]:
        M, K = header["pq"]["M"], header["pq"]["K"]
        pq = PQCodebook(r.array("<f4", M * K * (D // M)).reshape(M, K, D // M))
    table = r.array(_POINT_DTYPE, P)
    E = int(table["entry_count"].sum())
    if pq is None:
        entries = r.array(np.dtype([("word_id", "<u4"), ("desc", "<f4", (D,))]), E)
    else:
        entries = r.array(np.dtype([("word_id", "<u4"), ("code", "u1", (pq.M,))]), E)
    NF = int(table["frame_count"].sum())
    frames = r.array("<u8", NF)
    if r.pos != len(body):
        raise MapFormatError("trailing bytes after map sections")
    gmap = GlobalMap(vocab, pq)
    entry_point = np.repeat(np.arange(P), table["entry_count"].astype(np.int64))
    frame_point = np.repeat(np.arange(P), table["frame_count"].astype(np.int64))
    gmap._install(
        table["point_id"].astype(np.uint64), table["position"].astype(np.float64),
        entry_point, entries["word_id"].astype(np.uint32),
        None if pq is not None else np.ascontiguousarray(entries["desc"], dtype=np.float32),
        None if pq is None else np.ascontiguousarray(entries["code"], dtype=np.uint8),
        frame_point, frames)
    return gmap
