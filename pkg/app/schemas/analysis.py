"""Router analysis schemas"""
from typing import List, Optional

from pydantic import BaseModel


class Merge(BaseModel):
    """One agglomeration step; ids >= n_leaves refer to earlier merges"""
    cluster_a: int
    cluster_b: int
    distance: float
    size: int


class Dendrogram(BaseModel):
    merges: List[Merge]
    leaf_order: List[int]
    names: List[str]

    def to_text(self) -> str:
        """Nested-parenthesis rendering of the tree"""
        n = len(self.names)
        nodes = {i: name for i, name in enumerate(self.names)}
        for k, m in enumerate(self.merges):
            nodes[n + k] = f"({nodes[m.cluster_a]},{nodes[m.cluster_b]}):{m.distance:.4f}"
        return nodes[n + len(self.merges) - 1] + ";" if self.merges else f"{self.names[0]};"


class ClusterResult(BaseModel):
    groups: List[int]  # group id per task row
    names: List[str]
    dendrogram: Dendrogram
    adjusted_rand: Optional[float] = None

    def partition_lines(self) -> List[str]:
        return [f"{name}\t{group}" for name, group in zip(self.names, self.groups)]
