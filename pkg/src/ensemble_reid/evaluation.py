"""Retrieval evaluation under the single-query protocol, plus re-ranking.

For every query, gallery entries with the same person id taken by the same
camera are excluded, junk entries (person id -1) are excluded, and distractor
entries (person id 0) stay as guaranteed non-matches. Queries left without
any true cross-camera match are dropped from the averages and counted.

AP for one query is the mean of the precision values at each true positive,
with the number of valid true matches as the denominator. Ties in distance
break deterministically toward the lower gallery index.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass

import numpy as np

DISTANCE_METRICS = ("cosine", "euclidean", "reranked")


@dataclass
class DistanceMatrix:
    values: np.ndarray
    metric_tag: str

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError(f"distance matrix must be 2-D, got shape {self.values.shape}")
        if self.metric_tag not in DISTANCE_METRICS:
            raise ValueError(f"metric_tag must be one of {DISTANCE_METRICS}, "
                             f"got {self.metric_tag!r}")


@dataclass(frozen=True)
class RerankParams:
    k1: int = 20
    k2: int = 6
    lambda_value: float = 0.3

    def __post_init__(self):
        if self.k1 < 1:
            raise ValueError(f"k1 must be >= 1, got {self.k1}")
        if not 1 <= self.k2 <= self.k1:
            raise ValueError(f"k2 must satisfy 1 <= k2 <= k1, got k2={self.k2}, k1={self.k1}")
        if not 0.0 <= self.lambda_value <= 1.0:
            raise ValueError(f"lambda_value must be in [0, 1], got {self.lambda_value}")

    def to_dict(self) -> dict:
        return {"k1": self.k1, "k2": self.k2, "lambda_value": self.lambda_value}

    @classmethod
    def from_dict(cls, d: dict) -> "RerankParams":
        return cls(**d)


@dataclass
class EvalReport:
    mAP: float
    cmc: dict[int, float]
    num_valid_queries: int
    num_dropped_queries: int

    def to_text(self) -> str:
        lines = [f"mAP={self.mAP!r}"]
        for k in sorted(self.cmc):
            lines.append(f"cmc_{k}={self.cmc[k]!r}")
        lines.append(f"num_valid_queries={self.num_valid_queries}")
        lines.append(f"num_dropped_queries={self.num_dropped_queries}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "EvalReport":
        fields: dict[str, str] = {}
        for line in text.splitlines():
            line = line.strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ValueError(f"bad report line {line!r}")
            fields[key] = value
        cmc = {int(k[len("cmc_"):]): float(v) for k, v in fields.items()
               if k.startswith("cmc_")}
        return cls(mAP=float(fields["mAP"]), cmc=cmc,
                   num_valid_queries=int(fields["num_valid_queries"]),
                   num_dropped_queries=int(fields["num_dropped_queries"]))

    def csv_header(self) -> list[str]:
        return (["mAP"] + [f"cmc_{k}" for k in sorted(self.cmc)]
                + ["num_valid_queries", "num_dropped_queries"])

    def csv_row(self) -> list[str]:
        return ([repr(self.mAP)] + [repr(self.cmc[k]) for k in sorted(self.cmc)]
                + [str(self.num_valid_queries), str(self.num_dropped_queries)])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.csv_header())
            writer.writerow(self.csv_row())


def _vectors(x) -> np.ndarray:
    return np.asarray(getattr(x, "vectors", x), dtype=np.float64)


def cosine_distance(query, gallery) -> DistanceMatrix:
    """1 - cosine similarity between every query row and every gallery row.

    Inputs are feature matrices or plain (n, D) arrays. Rows are normalized
    internally; a zero-norm row cannot be normalized and raises an error
    naming the side and row index.
    """
    q, g = _vectors(query), _vectors(gallery)
    if q.ndim != 2 or g.ndim != 2:
        raise ValueError(f"feature arrays must be 2-D, got {q.shape} and {g.shape}")
    if q.shape[1] != g.shape[1]:
        raise ValueError(f"query features have dimension {q.shape[1]} but gallery "
                         f"features have {g.shape[1]}")
    for name, arr in (("query", q), ("gallery", g)):
        norms = np.linalg.norm(arr, axis=1)
        bad = np.nonzero(norms == 0.0)[0]
        if bad.size:
            raise ValueError(f"{name} row {int(bad[0])} has zero norm; "
                             "cosine distance is undefined")
    qn = q / np.linalg.norm(q, axis=1, keepdims=True)
    gn = g / np.linalg.norm(g, axis=1, keepdims=True)
    values = np.clip(1.0 - qn @ gn.T, 0.0, 2.0)
    return DistanceMatrix(values, "cosine")


def euclidean_distance(query, gallery) -> DistanceMatrix:
    q, g = _vectors(query), _vectors(gallery)
    if q.ndim != 2 or g.ndim != 2 or q.shape[1] != g.shape[1]:
        raise ValueError(f"incompatible feature shapes {q.shape} and {g.shape}")
    sq = np.sum(q * q, axis=1)[:, None] + np.sum(g * g, axis=1)[None, :] - 2.0 * (q @ g.T)
    return DistanceMatrix(np.sqrt(np.clip(sq, 0.0, None)), "euclidean")


def evaluate(dist, query_ids, query_cams, gallery_ids, gallery_cams,
             ranks: tuple[int, ...] = (1, 5, 10, 20)) -> EvalReport:
    """CMC at the requested ranks and mAP over all valid queries."""
    values = dist.values if isinstance(dist, DistanceMatrix) else np.asarray(dist, float)
    query_ids = np.asarray(query_ids)
    query_cams = np.asarray(query_cams)
    gallery_ids = np.asarray(gallery_ids)
    gallery_cams = np.asarray(gallery_cams)
    if values.ndim != 2:
        raise ValueError(f"distance matrix must be 2-D, got {values.shape}")
    n_q, n_g = values.shape
    if query_ids.shape != (n_q,) or query_cams.shape != (n_q,):
        raise ValueError(f"query metadata must have length {n_q}")
    if gallery_ids.shape != (n_g,) or gallery_cams.shape != (n_g,):
        raise ValueError(f"gallery metadata must have length {n_g}")
    if not ranks or any(k < 1 for k in ranks):
        raise ValueError(f"ranks must be positive, got {ranks}")

    aps = []
    hits = np.zeros(len(ranks))
    dropped = 0
    for i in range(n_q):
        valid = (gallery_ids != -1) & ~((gallery_ids == query_ids[i])
                                        & (gallery_cams == query_cams[i]))
        valid_idx = np.nonzero(valid)[0]
        order = np.argsort(values[i, valid_idx], kind="stable")
        matches = gallery_ids[valid_idx[order]] == query_ids[i]
        n_rel = int(matches.sum())
        if n_rel == 0:
            dropped += 1
            continue
        positions = np.flatnonzero(matches)
        aps.append(float(np.mean(np.arange(1, n_rel + 1) / (positions + 1))))
        first = positions[0]
        hits += [first < k for k in ranks]

    n_valid = len(aps)
    if n_valid == 0:
        return EvalReport(mAP=float("nan"), cmc={k: float("nan") for k in ranks},
                          num_valid_queries=0, num_dropped_queries=dropped)
    return EvalReport(
        mAP=float(np.mean(aps)),
        cmc={k: float(h / n_valid) for k, h in zip(ranks, hits)},
        num_valid_queries=n_valid,
        num_dropped_queries=dropped,
    )


def _reciprocal_sets(positions: np.ndarray, ordering: np.ndarray, k: int) -> list[np.ndarray]:
    """k-reciprocal neighbor set of every row.

    ``ordering[i]`` is row i's full stable ranking, ``positions[i, j]`` the
    position of j inside it. The window "k nearest including self" is the
    first k+1 positions.
    """
    sets = []
    for i in range(ordering.shape[0]):
        forward = ordering[i, :k + 1]
        sets.append(forward[positions[forward, i] <= k])
    return sets


def rerank(d_qg, d_qq, d_gg, params: RerankParams = RerankParams()) -> DistanceMatrix:
    """k-reciprocal re-ranking over raw distances.

    The three blocks are assembled into one (q+g) x (q+g) matrix. Every row
    gets a k1-reciprocal neighbor set, expanded by candidates whose half-k1
    reciprocal sets overlap the original by strictly more than two thirds.
    Neighbor weights exp(-d) are normalized per row, optionally smoothed by
    averaging over each row's k2 nearest rows, and query-to-gallery Jaccard
    distances are blended with the original: (1 - lambda) * jaccard +
    lambda * original. lambda=0 is pure Jaccard, lambda=1 returns the
    original distances exactly. Distances are used as given: no squaring and
    no per-row rescaling. An oversized k1 is clipped with a warning.
    """
    d_qg = np.asarray(d_qg.values if isinstance(d_qg, DistanceMatrix) else d_qg, float)
    d_qq = np.asarray(d_qq.values if isinstance(d_qq, DistanceMatrix) else d_qq, float)
    d_gg = np.asarray(d_gg.values if isinstance(d_gg, DistanceMatrix) else d_gg, float)
    n_q, n_g = d_qg.shape
    if d_qq.shape != (n_q, n_q):
        raise ValueError(f"query-query block must be {(n_q, n_q)}, got {d_qq.shape}")
    if d_gg.shape != (n_g, n_g):
        raise ValueError(f"gallery-gallery block must be {(n_g, n_g)}, got {d_gg.shape}")

    m = n_q + n_g
    k1, k2 = params.k1, params.k2
    if k1 > m - 1:
        warnings.warn(f"k1={k1} exceeds the combined set size {m}; clipping to {m - 1}")
        k1 = m - 1
        k2 = min(k2, k1)

    original = np.empty((m, m))
    original[:n_q, :n_q] = d_qq
    original[:n_q, n_q:] = d_qg
    original[n_q:, :n_q] = d_qg.T
    original[n_q:, n_q:] = d_gg

    ordering = np.argsort(original, axis=1, kind="stable")
    positions = np.empty_like(ordering)
    rows = np.arange(m)[:, None]
    positions[rows, ordering] = np.arange(m)[None, :]

    k_half = int(round(k1 / 2.0))
    base_sets = _reciprocal_sets(positions, ordering, k1)
    half_sets = _reciprocal_sets(positions, ordering, k_half) if k_half >= 1 else None

    weights = np.zeros((m, m))
    member = np.zeros(m, dtype=bool)
    for i in range(m):
        expanded = [base_sets[i]]
        if half_sets is not None:
            member[base_sets[i]] = True
            for c in base_sets[i]:
                candidate = half_sets[c]
                if member[candidate].sum() > (2.0 / 3.0) * len(candidate):
                    expanded.append(candidate)
            member[base_sets[i]] = False
        neighborhood = np.unique(np.concatenate(expanded))
        w = np.exp(-original[i, neighborhood])
        weights[i, neighborhood] = w / w.sum()

    if k2 > 1:
        smoothed = np.empty_like(weights)
        for i in range(m):
            smoothed[i] = weights[ordering[i, :k2]].mean(axis=0)
        weights = smoothed

    jaccard = np.empty((n_q, n_g))
    gallery_rows = weights[n_q:]
    for i in range(n_q):
        min_sum = np.minimum(weights[i], gallery_rows).sum(axis=1)
        max_sum = np.maximum(weights[i], gallery_rows).sum(axis=1)
        jaccard[i] = 1.0 - min_sum / max_sum

    lam = params.lambda_value
    return DistanceMatrix((1.0 - lam) * jaccard + lam * d_qg, "reranked")


def evaluate_features(query_fm, gallery_fm, ranks: tuple[int, ...] = (1, 5, 10, 20),
                      rerank_params: RerankParams | None = None):
    """Cosine evaluation of two feature matrices, optionally re-ranked.

    Returns (baseline_report, reranked_report_or_None).
    """
    dist = cosine_distance(query_fm, gallery_fm)
    report = evaluate(dist, query_fm.person_ids, query_fm.camera_ids,
                      gallery_fm.person_ids, gallery_fm.camera_ids, ranks)
    if rerank_params is None:
        return report, None
    d_qq = cosine_distance(query_fm, query_fm)
    d_gg = cosine_distance(gallery_fm, gallery_fm)
    reranked = rerank(dist, d_qq, d_gg, rerank_params)
    re_report = evaluate(reranked, query_fm.person_ids, query_fm.camera_ids,
                         gallery_fm.person_ids, gallery_fm.camera_ids, ranks)
    return report, re_report
