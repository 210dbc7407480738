"""Geographical and sequential POI graph construction.

The geographical graph is a global undirected graph linking POIs whose
haversine distance lies in (0, delta_d] km. Construction buckets POIs into a
lat/lon grid sized so that any qualifying pair falls in adjacent cells, which
keeps the scan near O(E) instead of O(V^2); a brute-force pairwise oracle in
the tests guards the bucketing.

Sequential graphs are per-sample directed graphs over the distinct POIs of a
context, with separate in/out row-normalized adjacency blocks.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DataError

EARTH_RADIUS_KM = 6371.0088

# worst-case km per degree of latitude; used to size conservative grid cells
_KM_PER_DEG_LAT = 110.574
_KM_PER_DEG_LON_EQUATOR = 111.320

_GEO_MAGIC = b"DPGG"


def haversine_km(a: tuple[float, float], b: tuple[float, float]) -> float:
    """Great-circle distance in km between two (lat, lon) points in degrees."""
    lat1, lon1 = math.radians(a[0]), math.radians(a[1])
    lat2, lon2 = math.radians(b[0]), math.radians(b[1])
    s = (math.sin((lat2 - lat1) / 2.0) ** 2
         + math.cos(lat1) * math.cos(lat2) * math.sin((lon2 - lon1) / 2.0) ** 2)
    return 2.0 * EARTH_RADIUS_KM * math.asin(min(1.0, math.sqrt(s)))


def haversine_km_vec(lat1, lon1, lat2, lon2) -> np.ndarray:
    """Vectorized haversine over degree arrays (broadcasting allowed)."""
    lat1, lon1 = np.radians(lat1), np.radians(lon1)
    lat2, lon2 = np.radians(lat2), np.radians(lon2)
    s = (np.sin((lat2 - lat1) / 2.0) ** 2
         + np.cos(lat1) * np.cos(lat2) * np.sin((lon2 - lon1) / 2.0) ** 2)
    return 2.0 * EARTH_RADIUS_KM * np.arcsin(np.minimum(1.0, np.sqrt(s)))


@dataclass
class GeoGraph:
    """Global undirected POI graph in CSR form.

    offsets[i]:offsets[i+1] delimits node i's neighbors in nbr_index /
    nbr_dist_km, sorted by neighbor index. Symmetric, no self loops, every
    stored distance in (0, delta_d].
    """

    num_nodes: int
    delta_d: float
    offsets: np.ndarray      # int64, num_nodes + 1
    nbr_index: np.ndarray    # int64, num_edges * 2 (both directions stored)
    nbr_dist_km: np.ndarray  # float64, same length as nbr_index

    @property
    def degree(self) -> np.ndarray:
        return np.diff(self.offsets)

    def neighbors(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = self.offsets[i], self.offsets[i + 1]
        return self.nbr_index[lo:hi], self.nbr_dist_km[lo:hi]

    def adjacency(self, i: int) -> list[tuple[int, float]]:
        idx, dist = self.neighbors(i)
        return list(zip(idx.tolist(), dist.tolist()))

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(_GEO_MAGIC)
            fh.write(struct.pack("<qd", self.num_nodes, self.delta_d))
            fh.write(struct.pack("<q", len(self.nbr_index)))
            fh.write(self.offsets.astype("<i8").tobytes())
            fh.write(self.nbr_index.astype("<i8").tobytes())
            fh.write(self.nbr_dist_km.astype("<f8").tobytes())

    @classmethod
    def load(cls, path) -> "GeoGraph":
        with open(path, "rb") as fh:
            magic = fh.read(4)
            if magic != _GEO_MAGIC:
                raise DataError(f"not a geo graph file: {path}")
            num_nodes, delta_d = struct.unpack("<qd", fh.read(16))
            (num_entries,) = struct.unpack("<q", fh.read(8))
            offsets = np.frombuffer(fh.read(8 * (num_nodes + 1)), dtype="<i8")
            nbr_index = np.frombuffer(fh.read(8 * num_entries), dtype="<i8")
            nbr_dist = np.frombuffer(fh.read(8 * num_entries), dtype="<f8")
        if len(offsets) != num_nodes + 1 or offsets[-1] != num_entries:
            raise DataError(f"corrupt geo graph file: {path}")
        return cls(num_nodes, delta_d,
                   offsets.astype(np.int64), nbr_index.astype(np.int64),
                   nbr_dist.astype(np.float64))


def build_geo_graph(poi_table, delta_d: float) -> GeoGraph:
    """Link every POI pair with 0 < haversine distance <= delta_d km.

    poi_table is a sequence of (lat, lon) indexed by poi index. Co-located
    distinct POIs (distance exactly 0) get no edge.
    """
    if delta_d <= 0:
        raise DataError(f"delta_d must be positive, got {delta_d}")
    n = len(poi_table)
    lat = np.array([p[0] for p in poi_table], dtype=np.float64)
    lon = np.array([p[1] for p in poi_table], dtype=np.float64)

    pairs_i: list[np.ndarray] = []
    pairs_j: list[np.ndarray] = []
    pairs_d: list[np.ndarray] = []
    if n > 1:
        # conservative cell sizes: a delta_d-km step can never leave the 3x3
        # neighborhood of a cell
        cell_lat = delta_d / _KM_PER_DEG_LAT * 1.001
        max_cos = math.cos(math.radians(min(89.0, np.max(np.abs(lat)))))
        if max_cos < 0.02:
            cell_lon = 360.0  # polar data: degenerate to one longitude band
        else:
            cell_lon = delta_d / (_KM_PER_DEG_LON_EQUATOR * max_cos) * 1.001

        cells: dict[tuple[int, int], list[int]] = {}
        cix = np.floor(lat / cell_lat).astype(np.int64)
        ciy = np.floor(lon / cell_lon).astype(np.int64)
        for idx in range(n):
            cells.setdefault((int(cix[idx]), int(ciy[idx])), []).append(idx)

        for (cx, cy), members in cells.items():
            mem = np.array(members, dtype=np.int64)
            for dx in (-1, 0, 1):
                for dy in (-1, 0, 1):
                    other = cells.get((cx + dx, cy + dy))
                    if other is None:
                        continue
                    oth = np.array(other, dtype=np.int64)
                    ii = np.repeat(mem, len(oth))
                    jj = np.tile(oth, len(mem))
                    keep = ii < jj  # each unordered pair once
                    if not keep.any():
                        continue
                    ii, jj = ii[keep], jj[keep]
                    d = haversine_km_vec(lat[ii], lon[ii], lat[jj], lon[jj])
                    within = (d > 0.0) & (d <= delta_d)
                    if within.any():
                        pairs_i.append(ii[within])
                        pairs_j.append(jj[within])
                        pairs_d.append(d[within])

    if pairs_i:
        ei = np.concatenate(pairs_i)
        ej = np.concatenate(pairs_j)
        ed = np.concatenate(pairs_d)
    else:
        ei = np.empty(0, dtype=np.int64)
        ej = np.empty(0, dtype=np.int64)
        ed = np.empty(0, dtype=np.float64)

    # expand to both directions, then sort into CSR (stable by (src, dst))
    src = np.concatenate([ei, ej])
    dst = np.concatenate([ej, ei])
    dist = np.concatenate([ed, ed])
    order = np.lexsort((dst, src))
    src, dst, dist = src[order], dst[order], dist[order]

    offsets = np.zeros(n + 1, dtype=np.int64)
    np.add.at(offsets, src + 1, 1)
    offsets = np.cumsum(offsets)
    return GeoGraph(n, float(delta_d), offsets, dst, dist)


@dataclass
class SeqGraph:
    """Directed session graph over the distinct POIs of one context.

    nodes lists distinct POI indices in first-occurrence order; alias maps
    each context position to its row in nodes. out_mat[i, j] > 0 iff the
    session stepped node_i -> node_j; rows of out_mat / in_mat are divided by
    the node's out/in degree so nonzero rows sum to 1.
    """

    nodes: list[int]
    alias: list[int]
    in_mat: np.ndarray
    out_mat: np.ndarray


def build_seq_graph(context: list[int]) -> SeqGraph:
    if not context:
        raise DataError("empty context")
    nodes: list[int] = []
    index: dict[int, int] = {}
    for poi in context:
        if poi not in index:
            index[poi] = len(nodes)
            nodes.append(poi)
    alias = [index[poi] for poi in context]

    n = len(nodes)
    adj = np.zeros((n, n), dtype=np.float64)
    for a, b in zip(alias, alias[1:]):
        # consecutive repeat visits keep their self-transition edge
        adj[a, b] = 1.0

    out_deg = adj.sum(axis=1, keepdims=True)
    in_deg = adj.sum(axis=0, keepdims=True).T
    out_mat = np.divide(adj, out_deg, out=np.zeros_like(adj), where=out_deg > 0)
    in_mat = np.divide(adj.T, in_deg, out=np.zeros_like(adj), where=in_deg > 0)
    return SeqGraph(nodes, alias, in_mat, out_mat)
