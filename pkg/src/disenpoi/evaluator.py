"""AUC / logloss metrics, batch scoring, and disentanglement diagnostics.

Scoring shares the training forward pass but runs outside any tape, so it is
pure numpy. Samples are scored in fixed-size groups that share one geo
propagation; groups can be fanned out over a thread pool and are reassembled
in order, keeping results independent of the worker count.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DegenerateLabels, ManifestMismatch
from .graphs import GeoGraph, haversine_km
from .ingest import Sample
from .model import (GeoCache, ModelParams, forward_batch, forward_sample,
                    geo_propagate)

SCORE_BATCH = 512
LOGLOSS_EPS = 1e-7


def auc(scores, labels) -> float:
    """Probability a random positive outranks a random negative; ties count 0.5.

    Computed by rank-sum with midranks in O(n log n).
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise DegenerateLabels(f"need both classes, got {n_pos} pos / {n_neg} neg")
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores), dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0  # midrank, 1-based
        i = j + 1
    pos_rank_sum = float(ranks[labels == 1].sum())
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def logloss(scores, labels) -> float:
    """Mean binary cross-entropy with scores clamped to [1e-7, 1 - 1e-7]."""
    p = np.clip(np.asarray(scores, dtype=np.float64),
                LOGLOSS_EPS, 1.0 - LOGLOSS_EPS)
    y = np.asarray(labels, dtype=np.float64)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))


def _check_compatible(params: ModelParams, geo: GeoGraph, samples) -> None:
    if params.dims.num_pois != geo.num_nodes:
        raise ManifestMismatch(
            f"checkpoint covers {params.dims.num_pois} POIs, "
            f"geo graph has {geo.num_nodes}")
    for s in samples:
        if s.target >= params.dims.num_pois or any(
                c >= params.dims.num_pois for c in s.context):
            raise ManifestMismatch("sample indices exceed checkpoint POI count")


def _propagate_for(params, batch, geo, cache, disable_geo):
    if disable_geo:
        return None
    nodes = set()
    for s in batch:
        nodes.update(s.context)
        nodes.add(s.target)
    return geo_propagate(params, geo, nodes, cache=cache)


def _score_batch(params, batch, geo, cache, disable_geo, disable_seq):
    state = _propagate_for(params, batch, geo, cache, disable_geo)
    out = forward_batch(params, batch, geo, state,
                        disable_geo=disable_geo, disable_seq=disable_seq)
    return out.y_hat.data[:, 0].copy()


def _outputs_batch(params, batch, geo, cache, disable_geo, disable_seq):
    """Per-sample ForwardOutput list (reference path; used for diagnostics)."""
    state = _propagate_for(params, batch, geo, cache, disable_geo)
    return [forward_sample(params, list(s.context), s.target, geo, state,
                           disable_geo=disable_geo, disable_seq=disable_seq)
            for s in batch]


def score_samples(params: ModelParams, samples: list[Sample], geo: GeoGraph,
                  disable_geo: bool = False, disable_seq: bool = False,
                  cache: GeoCache | None = None, threads: int = 1) -> np.ndarray:
    """Deterministic y_hat scores for the samples, in input order."""
    _check_compatible(params, geo, samples)
    if not samples:
        return np.empty(0)
    cache = cache or GeoCache(geo)
    batches = [samples[i:i + SCORE_BATCH]
               for i in range(0, len(samples), SCORE_BATCH)]

    def run(batch):
        return _score_batch(params, batch, geo, cache,
                            disable_geo, disable_seq)

    if threads > 1 and len(batches) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, batches))
    else:
        parts = [run(b) for b in batches]
    return np.concatenate(parts)


@dataclass
class MetricsReport:
    auc: float
    logloss: float
    n_samples: int
    slices: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        out = {"auc": self.auc, "logloss": self.logloss,
               "n_samples": self.n_samples}
        if self.slices:
            out["slices"] = self.slices
        if self.diagnostics:
            out["diagnostics"] = self.diagnostics
        return out

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def evaluate_split(params: ModelParams, extra: dict, samples: list[Sample],
                   geo: GeoGraph, diagnostics: bool = False,
                   embeddings_path=None, threads: int = 1) -> MetricsReport:
    """Score a sample list and assemble the metrics report.

    ``extra`` is the checkpoint side-channel carrying the ablation flags the
    model was trained with.
    """
    disable_geo = bool(extra.get("disable_geo_graph", False))
    disable_seq = bool(extra.get("disable_seq_graph", False))
    scores = score_samples(params, samples, geo, disable_geo=disable_geo,
                           disable_seq=disable_seq, threads=threads)
    labels = [s.label for s in samples]
    report = MetricsReport(auc=auc(scores, labels),
                           logloss=logloss(scores, labels),
                           n_samples=len(samples))
    if diagnostics:
        report.diagnostics = disentanglement_diagnostics(
            params, extra, samples, geo, embeddings_path=embeddings_path)
    return report


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(a.ravel() @ b.ravel() / (na * nb))


_EXPORT_ROLES = ("e_geo", "e_seq", "p_geo", "p_seq",
                 "e_geo_proj", "e_seq_proj", "p_geo_proj", "p_seq_proj")


def disentanglement_diagnostics(params: ModelParams, extra: dict,
                                samples: list[Sample], geo: GeoGraph,
                                embeddings_path=None) -> dict:
    """Mean cosine similarity of each (embedding, proxy) pairing.

    Optionally dumps every per-sample vector to a TSV (sample id, role,
    D values) for offline projection.
    """
    disable_geo = bool(extra.get("disable_geo_graph", False))
    disable_seq = bool(extra.get("disable_seq_graph", False))
    _check_compatible(params, geo, samples)
    cache = GeoCache(geo)
    sums = {"cos_e_geo_p_geo": 0.0, "cos_e_geo_p_seq": 0.0,
            "cos_e_seq_p_seq": 0.0, "cos_e_seq_p_geo": 0.0}
    writer = None
    if embeddings_path is not None:
        writer = open(embeddings_path, "w", encoding="utf-8")
        writer.write("sample\trole\t" +
                     "\t".join(f"v{i}" for i in range(params.dims.D)) + "\n")
    try:
        done = 0
        for start in range(0, len(samples), SCORE_BATCH):
            batch = samples[start:start + SCORE_BATCH]
            outs = _outputs_batch(params, batch, geo, cache,
                                  disable_geo, disable_seq)
            for offset, out in enumerate(outs):
                sums["cos_e_geo_p_geo"] += _cosine(out.e_geo_proj.data,
                                                   out.p_geo_proj.data)
                sums["cos_e_geo_p_seq"] += _cosine(out.e_geo_proj.data,
                                                   out.p_seq_proj.data)
                sums["cos_e_seq_p_seq"] += _cosine(out.e_seq_proj.data,
                                                   out.p_seq_proj.data)
                sums["cos_e_seq_p_geo"] += _cosine(out.e_seq_proj.data,
                                                   out.p_geo_proj.data)
                if writer is not None:
                    for role in _EXPORT_ROLES:
                        vec = getattr(out, role).data.ravel()
                        writer.write(f"{start + offset}\t{role}\t"
                                     + "\t".join(repr(v) for v in vec) + "\n")
                done += 1
    finally:
        if writer is not None:
            writer.close()
    n = max(done, 1)
    return {k: v / n for k, v in sums.items()}


def recommendation_distance(params: ModelParams, extra: dict, geo: GeoGraph,
                            poi_table, context: list[int],
                            candidate_pool: list[int], top_k: int) -> float:
    """Mean km between the user's last visit and the top-k scored candidates."""
    if not context or not candidate_pool:
        raise DegenerateLabels("context and candidate pool must be nonempty")
    probe = [Sample(user_index=0, context=tuple(context), target=c, label=1)
             for c in candidate_pool]
    disable_geo = bool(extra.get("disable_geo_graph", False))
    disable_seq = bool(extra.get("disable_seq_graph", False))
    scores = score_samples(params, probe, geo, disable_geo=disable_geo,
                           disable_seq=disable_seq)
    top_k = min(top_k, len(candidate_pool))
    top = np.argsort(-scores, kind="mergesort")[:top_k]  # stable under ties
    anchor = poi_table[context[-1]]
    dists = [haversine_km(anchor, poi_table[candidate_pool[i]]) for i in top]
    return float(np.mean(dists))
