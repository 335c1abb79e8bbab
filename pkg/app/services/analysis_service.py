"""
Router-induced task clustering and the span F1 metric
"""
import logging
from collections import Counter
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy.cluster.hierarchy import cut_tree, is_valid_linkage, leaves_list
from scipy.spatial.distance import pdist, squareform
from sklearn.metrics import adjusted_rand_score

from app.core.errors import ConfigError, ShapeError
from app.models.modular_prompt import binarize_router
from app.models.mp2_model import ModularPromptModel
from app.schemas.analysis import ClusterResult, Dendrogram, Merge

logger = logging.getLogger(__name__)


def router_matrix(model: ModularPromptModel, task_ids: Sequence[int], use_logits: bool = False) -> np.ndarray:
    """One row per task: binarized gates (or raw logits) of every bank, concatenated"""
    rows = []
    for tid in task_ids:
        routers = model.routers[tid]
        if use_logits:
            rows.append(np.concatenate([r.w.data.astype(np.float64) for r in routers]))
        else:
            rows.append(np.concatenate([binarize_router(r) for r in routers]))
    return np.vstack(rows)


def average_linkage(distances: np.ndarray) -> np.ndarray:
    """
    Agglomerative average linkage over a square distance matrix

    Equal merge distances go to the pair holding the smallest task index.
    Returns a scipy-style linkage matrix.
    """
    n = distances.shape[0]
    members: Dict[int, List[int]] = {i: [i] for i in range(n)}
    Z = np.zeros((n - 1, 4))
    for step in range(n - 1):
        best = None
        ids = sorted(members)
        for i, a in enumerate(ids):
            for b in ids[i + 1:]:
                d = distances[np.ix_(members[a], members[b])].mean()
                lo, hi = sorted((min(members[a]), min(members[b])))
                key = (round(float(d), 12), lo, hi)
                if best is None or key < best[0]:
                    best = (key, a, b, float(d))
        _, a, b, d = best
        merged = members.pop(a) + members.pop(b)
        members[n + step] = merged
        Z[step] = [min(a, b), max(a, b), d, len(merged)]
    return Z


def _canonical(labels: Sequence[int]) -> List[int]:
    """Relabel groups by order of first appearance"""
    mapping: Dict[int, int] = {}
    return [mapping.setdefault(int(g), len(mapping)) for g in labels]


def cluster_routers(
    matrix: np.ndarray,
    n_groups: int,
    names: Optional[Sequence[str]] = None,
    use_logits: bool = False,
    truth: Optional[Sequence[int]] = None,
) -> ClusterResult:
    """
    Hierarchical clustering of task routers

    Binarized rows use Hamming distance; logits use Euclidean distance.
    Cutting the tree yields exactly ``n_groups`` clusters.
    """
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2 or matrix.shape[0] < 1:
        raise ShapeError(f"router matrix must be 2-D with at least one row, got {matrix.shape}")
    n = matrix.shape[0]
    if n_groups < 1 or n_groups > n:
        raise ConfigError(f"n_groups must be in [1, {n}], got {n_groups}")
    if not use_logits and not np.isin(matrix, (0.0, 1.0)).all():
        raise ShapeError("binarized router matrix must contain only 0 and 1")
    names = list(names) if names is not None else [f"task{i}" for i in range(n)]

    if n == 1:
        dendrogram = Dendrogram(merges=[], leaf_order=[0], names=names)
        return ClusterResult(groups=[0], names=names, dendrogram=dendrogram)

    distances = squareform(pdist(matrix, metric="euclidean" if use_logits else "hamming"))
    Z = average_linkage(distances)
    if not is_valid_linkage(Z):
        raise ShapeError("average linkage produced an invalid tree")
    groups = _canonical(cut_tree(Z, n_clusters=n_groups).reshape(-1))
    dendrogram = Dendrogram(
        merges=[Merge(cluster_a=int(a), cluster_b=int(b), distance=float(d), size=int(s)) for a, b, d, s in Z],
        leaf_order=[int(i) for i in leaves_list(Z)],
        names=names,
    )
    ari = float(adjusted_rand_score(truth, groups)) if truth is not None else None
    if ari is not None:
        logger.info(f"Clustering of {n} tasks into {n_groups} groups: adjusted Rand {ari:.3f}")
    return ClusterResult(groups=groups, names=names, dendrogram=dendrogram, adjusted_rand=ari)


def span_f1(predicted: Sequence, gold: Sequence) -> float:
    """Token-overlap F1 between a predicted and a gold span"""
    if not predicted or not gold:
        return 0.0
    overlap = sum((Counter(predicted) & Counter(gold)).values())
    if overlap == 0:
        return 0.0
    precision = overlap / len(predicted)
    recall = overlap / len(gold)
    return 2 * precision * recall / (precision + recall)
