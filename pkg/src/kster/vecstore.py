"""Token-level key/value datastore with exact and IVF-PQ search.

Keys are stored as binary16 bit patterns and decoded to float32 for search.
Record ids are dense and follow insertion order. Every search returns
neighbors sorted by distance, ties broken by ascending id.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from kster._validation import check_matrix, check_positive_int
from kster.fp16 import fp16_decode, fp16_encode

MAGIC = b"KSTR"
VERSION = 1
FLAG_DOMAINS = 1
FLAG_IVFPQ = 2
PQ_CENTROIDS = 256

# float32 elements per distance block
_BLOCK = 1 << 22


class DatastoreFormatError(ValueError):
    pass


@dataclass(frozen=True)
class ExampleRecord:
    key: np.ndarray
    value: int
    domain: int | None = None


@dataclass(frozen=True)
class Neighbor:
    id: int
    value: int
    distance: float


def _l2(queries, keys):
    """Pairwise float32 L2 distances by explicit differences, blockwise."""
    queries = np.asarray(queries, dtype=np.float32)
    keys = np.asarray(keys, dtype=np.float32)
    out = np.empty((queries.shape[0], keys.shape[0]), dtype=np.float32)
    if keys.shape[0] == 0 or queries.shape[0] == 0:
        return out
    rows = max(1, _BLOCK // max(1, keys.size))
    for start in range(0, queries.shape[0], rows):
        diff = queries[start:start + rows, None, :] - keys[None, :, :]
        out[start:start + rows] = np.sqrt(
            np.einsum("ijk,ijk->ij", diff, diff, dtype=np.float32))
    return out


def _topk(dist_row, ids, k):
    """Indices into ``ids`` of the k smallest distances, ties by id.

    ``ids`` must be ascending so that a stable sort breaks ties by id.
    """
    n = dist_row.shape[0]
    if k >= n:
        return np.argsort(dist_row, kind="stable")
    kth = np.partition(dist_row, k - 1)[k - 1]
    cand = np.flatnonzero(dist_row <= kth)
    return cand[np.argsort(dist_row[cand], kind="stable")][:k]


def kmeans(points, k, iters=20, seed=0, return_history=False):
    """Lloyd's algorithm from k-means++ seeding.

    Empty clusters are re-seeded with the point farthest from its centroid.
    With ``return_history`` the within-cluster distortion after seeding and
    after every iteration is returned as well.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2:
        raise ValueError("points must be 2-D")
    if k < 1:
        raise ValueError("k must be >= 1")
    if pts.shape[0] < k:
        raise ValueError(f"need at least {k} points, got {pts.shape[0]}")
    check_positive_int(iters, "iters")
    rng = np.random.default_rng(seed)
    n = pts.shape[0]
    sq_norms = np.einsum("ij,ij->i", pts, pts)

    def sqdist(centroids):
        d = pts @ (-2.0 * centroids.T)
        d += np.einsum("ij,ij->i", centroids, centroids)[None, :]
        d += sq_norms[:, None]
        return np.maximum(d, 0.0, out=d)

    centroids = np.empty((k, pts.shape[1]))
    centroids[0] = pts[rng.integers(n)]
    closest = np.sum((pts - centroids[0]) ** 2, axis=1)
    for c in range(1, k):
        total = closest.sum()
        if total > 0:
            idx = rng.choice(n, p=closest / total)
        else:
            idx = rng.integers(n)
        centroids[c] = pts[idx]
        closest = np.minimum(closest, np.sum((pts - centroids[c]) ** 2, axis=1))

    history = []
    d = sqdist(centroids)
    assign = np.argmin(d, axis=1)
    history.append(float(d[np.arange(n), assign].sum()))
    for _ in range(iters):
        counts = np.bincount(assign, minlength=k)
        sums = np.zeros_like(centroids)
        np.add.at(sums, assign, pts)
        nonempty = counts > 0
        centroids[nonempty] = sums[nonempty] / counts[nonempty, None]
        d = sqdist(centroids)
        assign = np.argmin(d, axis=1)
        counts = np.bincount(assign, minlength=k)
        for c in np.flatnonzero(counts == 0):
            own = d[np.arange(n), assign]
            far = int(np.argmax(own))
            if own[far] <= 0:
                break
            centroids[c] = pts[far]
            d[:, c] = np.sum((pts - centroids[c]) ** 2, axis=1)
            assign[far] = c
        history.append(float(d[np.arange(n), assign].sum()))
    if return_history:
        return centroids, history
    return centroids


@dataclass
class IvfPqIndex:
    nlist: int
    m: int
    coarse_centroids: np.ndarray   # (nlist, d) float32
    codebooks: np.ndarray          # (m, 256, d/m) float32
    codes: np.ndarray              # (count, m) uint8
    list_offsets: np.ndarray       # (nlist + 1,) uint64
    list_ids: np.ndarray           # (count,) uint64, grouped by cell
    nprobe_default: int = 1

    def __post_init__(self):
        counts = np.diff(self.list_offsets.astype(np.int64))
        self.record_cell = np.empty(self.codes.shape[0], dtype=np.int64)
        self.record_cell[self.list_ids.astype(np.int64)] = np.repeat(
            np.arange(self.nlist), counts)

    def list_members(self, cell):
        lo, hi = int(self.list_offsets[cell]), int(self.list_offsets[cell + 1])
        return self.list_ids[lo:hi]

    def reconstruct(self, ids):
        sub = self.codebooks[np.arange(self.m)[None, :], self.codes[ids]]
        return sub.reshape(len(ids), -1) + self.coarse_centroids[self.record_cell[ids]]


def default_index_params(count, dim):
    """Pragmatic nlist/m/nprobe defaults: sqrt(count), dim/8, nlist/8."""
    nlist = max(1, int(round(math.sqrt(max(count, 1)))))
    m = max(1, dim // 8)
    while dim % m:
        m -= 1
    return nlist, m, max(1, nlist // 8)


class Datastore:
    """Immutable key/value store. Build with :func:`ds_build`."""

    def __init__(self, dim, key_bits, values, domains=None, index=None):
        self.dim = int(dim)
        self.key_bits = np.ascontiguousarray(key_bits, dtype=np.uint16).reshape(-1, self.dim)
        self.values = np.ascontiguousarray(values, dtype=np.uint32)
        self.domains = None if domains is None else np.ascontiguousarray(domains, dtype=np.uint16)
        if self.values.shape[0] != self.key_bits.shape[0]:
            raise ValueError("keys and values differ in length")
        if self.domains is not None and self.domains.shape[0] != self.count:
            raise ValueError("keys and domains differ in length")
        self.keys = fp16_decode(self.key_bits)
        for arr in (self.key_bits, self.values, self.keys):
            arr.setflags(write=False)
        if self.domains is not None:
            self.domains.setflags(write=False)
        self.index = index

    @property
    def count(self):
        return self.key_bits.shape[0]

    def __len__(self):
        return self.count

    def __repr__(self):
        kind = "IvfPq" if self.index is not None else "ExactOnly"
        return f"Datastore(dim={self.dim}, count={self.count}, index={kind})"

    def _check_queries(self, queries):
        q = np.asarray(queries, dtype=np.float32)
        single = q.ndim == 1
        q = check_matrix(q[None] if single else q, self.dim, "query", np.float32)
        return q, single

    def search_batch(self, queries, k):
        """Exact k-NN for a batch of queries -> (distances, ids) arrays.

        Rows are padded with ``inf`` / ``-1`` when the store holds fewer
        than k records.
        """
        check_positive_int(k, "k")
        q, _ = self._check_queries(queries)
        n_out = min(k, self.count)
        dist = np.full((q.shape[0], n_out), np.inf, dtype=np.float32)
        ids = np.full((q.shape[0], n_out), -1, dtype=np.int64)
        if n_out == 0:
            return dist, ids
        all_ids = np.arange(self.count)
        rows = max(1, _BLOCK // max(1, self.keys.size))
        for start in range(0, q.shape[0], rows):
            block = _l2(q[start:start + rows], self.keys)
            for r, row in enumerate(block):
                sel = _topk(row, all_ids, n_out)
                dist[start + r] = row[sel]
                ids[start + r] = sel
        return dist, ids

    def neighbors(self, dist_row, id_row):
        return [Neighbor(int(i), int(self.values[i]), float(d))
                for d, i in zip(dist_row, id_row) if i >= 0]


def ds_build(records, dim):
    """Build a finalized datastore from :class:`ExampleRecord` objects."""
    dim = check_positive_int(dim, "dim")
    records = list(records)
    keys = np.zeros((len(records), dim), dtype=np.float32)
    values = np.zeros(len(records), dtype=np.uint32)
    has_domains = any(r.domain is not None for r in records)
    domains = np.zeros(len(records), dtype=np.uint16) if has_domains else None
    for i, rec in enumerate(records):
        key = np.asarray(rec.key, dtype=np.float32)
        if key.shape != (dim,):
            raise ValueError(f"record {i} has key shape {key.shape}, expected ({dim},)")
        keys[i] = key
        values[i] = rec.value
        if has_domains:
            domains[i] = 0 if rec.domain is None else rec.domain
    return Datastore(dim, fp16_encode(keys), values, domains)


def ds_from_arrays(keys, values, domains=None):
    keys = check_matrix(keys, name="keys", dtype=np.float32)
    return Datastore(keys.shape[1], fp16_encode(keys), values, domains)


def exact_search(ds, q, k):
    """Exact k nearest neighbors of one query as a list of :class:`Neighbor`."""
    dist, ids = ds.search_batch(np.asarray(q, dtype=np.float32)[None], k)
    return ds.neighbors(dist[0], ids[0])


def ivfpq_train(ds, nlist=None, m=None, iters=20, seed=0, nprobe_default=None,
                max_train_points=32768):
    """Train a coarse quantizer plus residual product quantizer on ``ds``.

    Coarse centroids are snapped to the binary16 grid, which keeps the
    residual ``key - centroid`` exact for keys of comparable magnitude: when
    every residual subvector is a codebook entry, reconstruction is lossless.
    """
    d_nlist, d_m, d_nprobe = default_index_params(ds.count, ds.dim)
    nlist = d_nlist if nlist is None else check_positive_int(nlist, "nlist")
    m = d_m if m is None else check_positive_int(m, "m")
    if ds.dim % m:
        raise ValueError(f"dim {ds.dim} is not divisible by m={m}")
    if nlist > ds.count:
        raise ValueError(f"nlist={nlist} exceeds record count {ds.count}")
    rng = np.random.default_rng(seed)
    keys = ds.keys
    train = keys
    if keys.shape[0] > max_train_points:
        train = keys[np.sort(rng.choice(keys.shape[0], max_train_points, replace=False))]

    coarse = fp16_decode(fp16_encode(kmeans(train, nlist, iters, seed)))
    assign = np.empty(ds.count, dtype=np.int64)
    rows = max(1, _BLOCK // max(1, coarse.size))
    for start in range(0, ds.count, rows):
        assign[start:start + rows] = np.argmin(_l2(keys[start:start + rows], coarse), axis=1)
    residuals = keys - coarse[assign]
    if train is not keys:
        train_assign = np.argmin(_l2(train, coarse), axis=1)
        train = train - coarse[train_assign]
    else:
        train = residuals

    dsub = ds.dim // m
    codebooks = np.zeros((m, PQ_CENTROIDS, dsub), dtype=np.float32)
    codes = np.empty((ds.count, m), dtype=np.uint8)
    for s in range(m):
        sl = slice(s * dsub, (s + 1) * dsub)
        sub_train = train[:, sl]
        distinct = np.unique(sub_train, axis=0).shape[0]
        ksub = min(PQ_CENTROIDS, distinct)
        book = kmeans(sub_train, ksub, iters, seed + 1 + s).astype(np.float32)
        codebooks[s, :ksub] = book
        codebooks[s, ksub:] = book[0]
        sub_keys = residuals[:, sl]
        crow = max(1, _BLOCK // max(1, book.size))
        for start in range(0, ds.count, crow):
            codes[start:start + crow, s] = np.argmin(_l2(sub_keys[start:start + crow], book), axis=1)

    order = np.argsort(assign, kind="stable")
    counts = np.bincount(assign, minlength=nlist)
    offsets = np.zeros(nlist + 1, dtype=np.uint64)
    offsets[1:] = np.cumsum(counts)
    if nprobe_default is None:
        nprobe_default = max(1, nlist // 8)
    ds.index = IvfPqIndex(nlist, m, coarse, codebooks, codes, offsets,
                          order.astype(np.uint64), min(nprobe_default, nlist))
    return ds.index


def ivfpq_search_batch(ds, queries, k, nprobe=None):
    """Approximate k-NN -> (distances, ids), padded like ``search_batch``."""
    index = ds.index
    if index is None:
        raise RuntimeError("datastore has no trained IVF-PQ index")
    nprobe = index.nprobe_default if nprobe is None else nprobe
    if not 1 <= nprobe <= index.nlist:
        raise ValueError(f"nprobe must be in [1, {index.nlist}], got {nprobe}")
    check_positive_int(k, "k")
    q, _ = ds._check_queries(queries)
    dist = np.full((q.shape[0], k), np.inf, dtype=np.float32)
    ids = np.full((q.shape[0], k), -1, dtype=np.int64)
    cell_dist = _l2(q, index.coarse_centroids)
    cells_all = np.arange(index.nlist)
    for r in range(q.shape[0]):
        cells = _topk(cell_dist[r], cells_all, nprobe)
        cand = np.sort(np.concatenate([index.list_members(c) for c in cells])).astype(np.int64)
        if cand.size == 0:
            continue
        # asymmetric distances: exact query against reconstructed keys
        row = _l2(q[r:r + 1], index.reconstruct(cand))[0]
        sel = _topk(row, cand, k)
        dist[r, :sel.size] = row[sel]
        ids[r, :sel.size] = cand[sel]
    return dist, ids


def ivfpq_search(ds, q, k, nprobe=None):
    dist, ids = ivfpq_search_batch(ds, np.asarray(q, dtype=np.float32)[None], k, nprobe)
    return ds.neighbors(dist[0], ids[0])


def ds_save(ds, path):
    flags = 0
    if ds.domains is not None:
        flags |= FLAG_DOMAINS
    if ds.index is not None:
        flags |= FLAG_IVFPQ
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IIQI", VERSION, ds.dim, ds.count, flags))
        fh.write(ds.key_bits.astype("<u2").tobytes())
        fh.write(ds.values.astype("<u4").tobytes())
        if ds.domains is not None:
            fh.write(ds.domains.astype("<u2").tobytes())
        if ds.index is not None:
            ix = ds.index
            fh.write(struct.pack("<II", ix.nlist, ix.m))
            fh.write(ix.coarse_centroids.astype("<f4").tobytes())
            fh.write(ix.codebooks.astype("<f4").tobytes())
            fh.write(ix.codes.astype(np.uint8).tobytes())
            fh.write(ix.list_offsets.astype("<u8").tobytes())
            fh.write(ix.list_ids.astype("<u8").tobytes())


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise DatastoreFormatError("truncated datastore file")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, dtype, count):
        dtype = np.dtype(dtype)
        return np.frombuffer(self.take(dtype.itemsize * count), dtype=dtype).copy()


def ds_load(path):
    reader = _Reader(Path(path).read_bytes())
    if reader.take(4) != MAGIC:
        raise DatastoreFormatError("bad magic, not a datastore file")
    version, dim, count, flags = reader.unpack("<IIQI")
    if version != VERSION:
        raise DatastoreFormatError(f"unsupported datastore version {version}")
    key_bits = reader.array("<u2", count * dim).reshape(count, dim)
    values = reader.array("<u4", count)
    domains = reader.array("<u2", count) if flags & FLAG_DOMAINS else None
    index = None
    if flags & FLAG_IVFPQ:
        nlist, m = reader.unpack("<II")
        coarse = reader.array("<f4", nlist * dim).reshape(nlist, dim)
        books = reader.array("<f4", m * PQ_CENTROIDS * (dim // m)).reshape(m, PQ_CENTROIDS, dim // m)
        codes = reader.array(np.uint8, count * m).reshape(count, m)
        offsets = reader.array("<u8", nlist + 1)
        ids = reader.array("<u8", count)
        index = IvfPqIndex(nlist, m, coarse, books, codes, offsets, ids,
                           max(1, nlist // 8))
    if reader.pos != len(reader.data):
        raise DatastoreFormatError("trailing bytes after datastore payload")
    return Datastore(dim, key_bits, values, domains, index)


class KeyValueIndex(BaseEstimator):
    """Estimator front-end over :class:`Datastore`.

    ``fit(X, y)`` stores keys ``X`` with token values ``y``; ``kneighbors``
    mirrors the scikit-learn neighbors API.
    """

    def __init__(self, n_neighbors=16, algorithm="exact", nlist=None, m=None,
                 nprobe=None, n_iter=20, random_state=0):
        self.n_neighbors = n_neighbors
        self.algorithm = algorithm
        self.nlist = nlist
        self.m = m
        self.nprobe = nprobe
        self.n_iter = n_iter
        self.random_state = random_state

    def fit(self, X, y, domains=None):
        if self.algorithm not in ("exact", "ivfpq"):
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        X = check_matrix(X, name="X", dtype=np.float32)
        y = np.asarray(y)
        if y.shape != (X.shape[0],):
            raise ValueError("y must hold one token id per key")
        self.datastore_ = ds_from_arrays(X, y, domains)
        if self.algorithm == "ivfpq":
            ivfpq_train(self.datastore_, self.nlist, self.m, self.n_iter,
                        self.random_state, self.nprobe)
        self.n_features_in_ = X.shape[1]
        return self

    def kneighbors(self, X, n_neighbors=None):
        check_is_fitted(self, "datastore_")
        k = self.n_neighbors if n_neighbors is None else n_neighbors
        if self.algorithm == "ivfpq":
            return ivfpq_search_batch(self.datastore_, X, k, self.nprobe)
        return self.datastore_.search_batch(X, k)
