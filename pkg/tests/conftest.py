"""Shared toy-data builders for the test suite."""

import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).parent))

from disenpoi.graphs import build_geo_graph
from disenpoi.ingest import build_histories, generate_samples, parse_checkins


def toy_corpus_lines(num_users=12, num_pois=30, seed=0, min_visits=3,
                     max_visits=8, span_deg=0.02):
    """Random-walk check-in TSV lines over a small coordinate box."""
    rng = np.random.default_rng(seed)
    lat0, lon0 = 35.0, 139.0
    coords = [(lat0 + float(rng.uniform(0, span_deg)),
               lon0 + float(rng.uniform(0, span_deg)))
              for _ in range(num_pois)]
    lines = []
    ts = 1_300_000_000
    for u in range(num_users):
        length = int(rng.integers(min_visits, max_visits + 1))
        for _ in range(length):
            p = int(rng.integers(num_pois))
            lat, lon = coords[p]
            lines.append(f"u{u}\tp{p}\t{lat!r}\t{lon!r}\t{ts}\n")
            ts += 60
    return lines


def make_toy_dataset(num_users=12, num_pois=30, seed=0, delta_d=1.0,
                     max_seq_len=100, **kwargs):
    """(split, geo_graph) pair from a random toy corpus."""
    lines = toy_corpus_lines(num_users=num_users, num_pois=num_pois,
                             seed=seed, **kwargs)
    build = build_histories(parse_checkins(lines).records)
    split = generate_samples(build.histories, build.poi_table,
                             rng_seed=seed, max_seq_len=max_seq_len)
    geo = build_geo_graph(split.poi_table, delta_d)
    return split, geo
