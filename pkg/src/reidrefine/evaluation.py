"""Person-search retrieval metrics: CMC and mAP under an IoU >= 0.5 match rule.

A gallery candidate is a predicted box in some gallery scene. It counts as
a true positive for a query when it overlaps a not-yet-matched ground-truth
box of the query identity in that scene by at least ``IOU_THRESHOLD``.
Ground truths are matched greedily in rank order, each at most once.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from .numgrid import make_rng
from .roi import BBox

IOU_THRESHOLD = 0.5


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union of two boxes in continuous coordinates."""
    iw = min(a.m2, b.m2) - max(a.m1, b.m1)
    ih = min(a.n2, b.n2) - max(a.n1, b.n1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.width * a.height + b.width * b.height - inter)


@dataclass
class QueryResult:
    identity: int
    order: np.ndarray  # gallery indices, best first
    similarity: np.ndarray  # in ranked order
    tp: np.ndarray  # bool, in ranked order
    n_gt: int
    ap_exact: Fraction

    @property
    def ap(self) -> float:
        return float(self.ap_exact)

    @property
    def first_hit(self) -> int | None:
        hits = np.flatnonzero(self.tp)
        return int(hits[0]) if hits.size else None


@dataclass
class RetrievalResult:
    queries: list[QueryResult]
    cmc: np.ndarray  # cmc[k-1] = fraction of queries with a hit in the top k

    @property
    def mean_ap(self) -> float:
        # exact rational mean, rounded once
        return float(sum((q.ap_exact for q in self.queries), Fraction(0)) / len(self.queries))

    def rank(self, k: int) -> float:
        if k < 1:
            raise ValueError("rank k must be >= 1")
        return float(self.cmc[min(k, len(self.cmc)) - 1])


def rank_order(similarity) -> np.ndarray:
    """Indices by decreasing similarity; equal scores keep gallery order."""
    s = np.asarray(similarity, dtype=np.float64)
    return np.lexsort((np.arange(len(s)), -s))


def average_precision(tp, n_gt: int) -> Fraction:
    """Mean of precision@k over true-positive ranks, normalized by ``n_gt``.

    Ground truths never retrieved contribute zero precision. The value is an
    exact rational so that aggregates do not depend on summation order.
    """
    tp = np.asarray(tp, dtype=bool)
    if n_gt < 1:
        raise ValueError("average precision needs at least one ground truth")
    if tp.sum() > n_gt:
        raise ValueError("more true positives than ground truths")
    ranks = np.flatnonzero(tp) + 1
    return sum((Fraction(i, int(r)) for i, r in enumerate(ranks, 1)), Fraction(0)) / n_gt


def match_ranked(ranked_scenes, ranked_boxes, gt_by_scene: dict[int, list[BBox]],
                 threshold: float = IOU_THRESHOLD) -> np.ndarray:
    """Greedy one-to-one matching of ranked candidates against ground truth.

    Each candidate claims the unmatched same-scene ground truth it overlaps
    most, provided the overlap reaches ``threshold``.
    """
    used = {s: [False] * len(g) for s, g in gt_by_scene.items()}
    tp = np.zeros(len(ranked_boxes), dtype=bool)
    for r, (scene, box) in enumerate(zip(ranked_scenes, ranked_boxes)):
        best, best_j = -1.0, -1
        for j, g in enumerate(gt_by_scene.get(scene, ())):
            if used[scene][j]:
                continue
            o = iou(box, g)
            if o >= threshold and o > best:
                best, best_j = o, j
        if best_j >= 0:
            used[scene][best_j] = True
            tp[r] = True
    return tp


def evaluate(query_emb, query_ids, gallery_emb, gallery_scenes, gallery_boxes,
             gt_annotations: dict[int, list[tuple[BBox, int]]]) -> RetrievalResult:
    """Rank gallery candidates for every query by negative squared distance.

    ``gt_annotations`` maps a gallery scene index to its ``(box, identity)``
    pairs. Raises ``ValueError`` when a query identity has no ground truth
    anywhere in the gallery.
    """
    query_emb = np.atleast_2d(np.asarray(query_emb, dtype=np.float64))
    gallery_emb = np.atleast_2d(np.asarray(gallery_emb, dtype=np.float64))
    query_ids = np.asarray(query_ids, dtype=np.int64)
    gallery_scenes = np.asarray(gallery_scenes, dtype=np.int64)
    if len(gallery_boxes) != len(gallery_emb) or len(gallery_scenes) != len(gallery_emb):
        raise ValueError("gallery embeddings, scenes and boxes must align")
    if len(gallery_emb) == 0:
        raise ValueError("empty gallery")

    results = []
    for f, ident in zip(query_emb, query_ids):
        gt = {s: [b for b, i in anns if i == ident] for s, anns in gt_annotations.items()}
        n_gt = sum(len(v) for v in gt.values())
        if n_gt == 0:
            raise ValueError(f"query identity {int(ident)} has no ground truth in the gallery")
        diff = gallery_emb - f
        sim = -np.einsum("ij,ij->i", diff, diff)
        order = rank_order(sim)
        tp = match_ranked(gallery_scenes[order], [gallery_boxes[k] for k in order], gt)
        results.append(QueryResult(int(ident), order, sim[order], tp, n_gt, average_precision(tp, n_gt)))

    n = len(gallery_emb)
    cmc = np.zeros(n)
    for q in results:
        if q.first_hit is not None:
            cmc[q.first_hit:] += 1
    return RetrievalResult(results, cmc / len(results))


def subsample_gallery(scene_indices, size: int | None, seed: int) -> list[int]:
    """Seeded subset of ``size`` gallery scenes, kept in index order."""
    scene_indices = sorted(scene_indices)
    if size is None or size >= len(scene_indices):
        return scene_indices
    if size < 1:
        raise ValueError("gallery size must be >= 1")
    pick = make_rng(seed).choice(len(scene_indices), size=size, replace=False)
    return [scene_indices[k] for k in sorted(pick)]


def metrics_dict(result: RetrievalResult, gallery_size: int, seed: int) -> dict:
    return {
        "map": result.mean_ap,
        "rank1": result.rank(1),
        "rank5": result.rank(5),
        "cmc": [float(v) for v in result.cmc],
        "gallery_size": int(gallery_size),
        "seed": int(seed),
    }


def write_metrics(path, result: RetrievalResult, gallery_size: int, seed: int) -> dict:
    metrics = metrics_dict(result, gallery_size, seed)
    Path(path).write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    return metrics


def write_pr_curves(out_dir, result: RetrievalResult, gallery_scenes, gallery_boxes) -> None:
    """One ``pr_query_%d.csv`` per query with the ranked precision/recall trace."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for qi, q in enumerate(result.queries):
        hits = np.cumsum(q.tp)
        with open(out / f"pr_query_{qi}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["rank", "scene", "x1", "y1", "x2", "y2", "similarity", "tp", "precision", "recall"])
            for r, k in enumerate(q.order):
                b = gallery_boxes[k]
                w.writerow([r + 1, int(gallery_scenes[k]), *(repr(float(v)) for v in b.as_tuple()),
                            repr(float(q.similarity[r])), int(q.tp[r]),
                            repr(float(hits[r] / (r + 1))), repr(float(hits[r] / q.n_gt))])
