"""Online cover tree over a metric space, stored in reduced (explicit) form.

Every inserted point owns exactly one node.  Nodes carry an integer cover
level; the neighbourhood of a node is the metric ball of radius zoom**level
around its point.  The tree maintains three audited structural properties:

* refinement: the root has depth 0 and a child's depth is its parent's plus 1;
* parent proximity: d(child, parent) <= zoom**parent.level, where the root's
  level is live (it is raised lazily so the root ball covers every inserted
  point) and all other levels are frozen at insertion time;
* sibling separation: distinct children of one parent are more than
  zoom**min(level_a, level_b) apart, which for same-level siblings is the
  usual pairwise zoom**level bound.

Radius table: a node inserted at depth k while the root level was L gets
level L - k, further lowered to ceil(log_zoom d) - 1 when its distance d to
the attach parent is much smaller than the parent ball.  Insertion descends
exactly like :meth:`CoverTree.containing_path` (closest covering child,
first-inserted wins ties), so a freshly inserted point is always the deepest
element of its own containing path.
"""

from __future__ import annotations

import math
from typing import Callable, Iterator, Optional

import numpy as np

from .errors import EmptyTreeError

__all__ = ["CoverNode", "CoverTree"]


class CoverNode:
    """One stored point plus its place in the hierarchy."""

    __slots__ = (
        "point",
        "level",
        "depth",
        "order",
        "parent",
        "children",
        "subtree_radius",
        "payload",
        "_child_matrix",
    )

    def __init__(self, point: np.ndarray, level: int, depth: int, order: int, parent: Optional["CoverNode"]):
        self.point = point
        self.level = level
        self.depth = depth
        self.order = order
        self.parent = parent
        self.children: list[CoverNode] = []
        self.subtree_radius = 0.0
        self.payload = None
        self._child_matrix: Optional[np.ndarray] = None

    def __repr__(self):
        return f"CoverNode(order={self.order}, depth={self.depth}, level={self.level})"


class _InsertPlan:
    __slots__ = ("point", "new_root_level", "parent", "level", "path", "dists")

    def __init__(self, point, new_root_level, parent, level, path, dists):
        self.point = point
        self.new_root_level = new_root_level
        self.parent = parent
        self.level = level
        self.path = path
        self.dists = dists


class CoverTree:
    """Reduced cover tree with online insertion, exact nearest neighbour and
    containing-path queries.

    Parameters
    ----------
    zoom : float, > 1
        Ball shrink factor between consecutive levels.
    metric : callable or None
        Two-argument distance satisfying the metric axioms.  None selects the
        built-in L1 distance, which is evaluated vectorised over child blocks.
    """

    def __init__(self, zoom: float = 2.0, metric: Optional[Callable] = None):
        if not zoom > 1.0:
            raise ValueError("zoom must be greater than 1")
        self.zoom = float(zoom)
        self.metric = metric
        self.root: Optional[CoverNode] = None
        self.nodes: list[CoverNode] = []

    # -- metric helpers -----------------------------------------------------

    def _dist(self, a: np.ndarray, b: np.ndarray) -> float:
        if self.metric is None:
            return float(np.abs(a - b).sum())
        return float(self.metric(a, b))

    def _dists_to_children(self, node: CoverNode, point: np.ndarray, limit: int) -> np.ndarray:
        """Distances from point to node.children[:limit]."""
        if self.metric is not None:
            return np.array([self.metric(point, c.point) for c in node.children[:limit]])
        if node._child_matrix is None or node._child_matrix.shape[0] != len(node.children):
            node._child_matrix = np.stack([c.point for c in node.children])
        return np.abs(node._child_matrix[:limit] - point).sum(axis=1)

    def radius_of(self, node: CoverNode) -> float:
        return self.zoom ** node.level

    def __len__(self) -> int:
        return len(self.nodes)

    # -- insertion ----------------------------------------------------------

    def insert(self, point) -> CoverNode:
        """Insert a point and return its new node.

        Duplicates are not merged; a repeated point becomes a child one level
        below the node holding the earlier copy.
        """
        return self.apply_plan(self.plan_insert(point))

    def plan_insert(self, point) -> _InsertPlan:
        """Read-only first phase of insertion.

        Returns the descent path, the attach parent and the level the new node
        will get.  Nothing is mutated, so callers may compute derived state
        (and possibly fail) before committing with :meth:`apply_plan`.
        """
        point = np.asarray(point, dtype=float)
        if self.root is None:
            return _InsertPlan(point, 0, None, 0, [], [])
        d_root = self._dist(point, self.root.point)
        new_root_level = None
        root_level = self.root.level
        if d_root > self.zoom ** root_level:
            new_root_level = max(root_level + 1, math.ceil(math.log(d_root, self.zoom)))
            root_level = new_root_level
        path, dists = self._descend(point, live_root_level=root_level)
        parent = path[-1]
        d_parent = dists[-1]
        if d_parent == 0.0:
            level = parent.level - 1
        else:
            level = min(parent.level - 1, math.ceil(math.log(d_parent, self.zoom)) - 1)
        return _InsertPlan(point, new_root_level, parent, level, path, dists)

    def apply_plan(self, plan: _InsertPlan) -> CoverNode:
        """Commit a plan produced by :meth:`plan_insert`."""
        if plan.parent is None:
            node = CoverNode(plan.point, level=plan.new_root_level, depth=0, order=0, parent=None)
            self.root = node
            self.nodes.append(node)
            return node
        if plan.new_root_level is not None:
            self.root.level = plan.new_root_level
        node = CoverNode(plan.point, plan.level, plan.parent.depth + 1, len(self.nodes), plan.parent)
        plan.parent.children.append(node)
        plan.parent._child_matrix = None
        self.nodes.append(node)
        for ancestor, d in zip(plan.path, plan.dists):
            if d > ancestor.subtree_radius:
                ancestor.subtree_radius = d
        return node

    def _descend(self, point: np.ndarray, live_root_level: Optional[int] = None,
                 order_cutoff: Optional[int] = None) -> tuple[list[CoverNode], list[float]]:
        """Walk from the root through closest covering children.

        The root heads the path unconditionally.  At each node the children
        whose balls contain the point compete; the closest wins, with ties
        going to the earliest-inserted child.  A point equal to the current
        node's stops the walk there, so duplicates attach directly beneath
        their original.
        """
        node = self.root
        d = self._dist(point, node.point)
        path = [node]
        dists = [d]
        while True:
            if d == 0.0:
                return path, dists
            limit = len(node.children)
            if order_cutoff is not None:
                while limit > 0 and node.children[limit - 1].order >= order_cutoff:
                    limit -= 1
            if limit == 0:
                return path, dists
            child_d = self._dists_to_children(node, point, limit)
            radii = self.zoom ** np.array([c.level for c in node.children[:limit]], dtype=float)
            inside = child_d <= radii
            if not inside.any():
                return path, dists
            pick = int(np.flatnonzero(inside)[np.argmin(child_d[inside])])
            node = node.children[pick]
            d = float(child_d[pick])
            path.append(node)
            dists.append(d)

    # -- queries ------------------------------------------------------------

    def nearest(self, point) -> CoverNode:
        """Exact nearest stored node; ties resolve to the first inserted."""
        if self.root is None:
            raise EmptyTreeError("nearest on empty tree")
        point = np.asarray(point, dtype=float)
        best = self.root
        best_d = self._dist(point, self.root.point)
        stack = [self.root]
        while stack:
            node = stack.pop()
            n_children = len(node.children)
            if n_children == 0:
                continue
            child_d = self._dists_to_children(node, point, n_children)
            for i in range(n_children):
                child = node.children[i]
                d = float(child_d[i])
                if d < best_d or (d == best_d and child.order < best.order):
                    best, best_d = child, d
                # Descendants sit within child.subtree_radius of the child, so
                # the subtree is only skippable when even that cannot beat best.
                if d - child.subtree_radius <= best_d:
                    stack.append(child)
        return best

    def containing_path(self, point) -> list[CoverNode]:
        """Maximal root-rooted path of nodes whose balls contain the point."""
        if self.root is None:
            raise EmptyTreeError("containing_path on empty tree")
        path, _ = self._descend(np.asarray(point, dtype=float))
        return path

    def containing_path_frozen(self, point, order_cutoff: int) -> list[CoverNode]:
        """Containing path as it was when only the first order_cutoff nodes existed."""
        if self.root is None or order_cutoff <= 0:
            raise EmptyTreeError("containing_path on empty tree")
        path, _ = self._descend(np.asarray(point, dtype=float), order_cutoff=order_cutoff)
        return path

    def iter_nodes(self) -> Iterator[CoverNode]:
        return iter(self.nodes)

    # -- verification and serialisation --------------------------------------

    def audit(self) -> None:
        """Raise AssertionError if any structural property fails."""
        if self.root is None:
            return
        assert self.root.depth == 0
        seen = 0
        stack = [self.root]
        while stack:
            node = stack.pop()
            seen += 1
            radius = self.zoom ** node.level
            for child in node.children:
                assert child.parent is node
                assert child.depth == node.depth + 1
                assert child.level <= node.level - 1
                d = self._dist(child.point, node.point)
                assert d <= radius + 1e-12, "parent proximity violated"
                assert d <= node.subtree_radius + 1e-12
                stack.append(child)
            for i in range(len(node.children)):
                for j in range(i + 1, len(node.children)):
                    a, b = node.children[i], node.children[j]
                    gap = self.zoom ** min(a.level, b.level)
                    assert self._dist(a.point, b.point) > gap, "sibling separation violated"
        assert seen == len(self.nodes)

    def to_records(self) -> list[dict]:
        """Flat serialisable form: one record per node, parents by index."""
        return [
            {
                "order": n.order,
                "point": n.point.tolist(),
                "level": n.level,
                "parent": n.parent.order if n.parent is not None else -1,
            }
            for n in self.nodes
        ]

    @classmethod
    def from_records(cls, records: list[dict], zoom: float = 2.0, metric: Optional[Callable] = None) -> "CoverTree":
        tree = cls(zoom=zoom, metric=metric)
        for rec in sorted(records, key=lambda r: r["order"]):
            point = np.asarray(rec["point"], dtype=float)
            if rec["parent"] < 0:
                node = CoverNode(point, rec["level"], 0, rec["order"], None)
                tree.root = node
            else:
                parent = tree.nodes[rec["parent"]]
                node = CoverNode(point, rec["level"], parent.depth + 1, rec["order"], parent)
                parent.children.append(node)
                parent._child_matrix = None
            tree.nodes.append(node)
        for node in tree.nodes:
            anc = node.parent
            while anc is not None:
                d = tree._dist(node.point, anc.point)
                if d > anc.subtree_radius:
                    anc.subtree_radius = d
                anc = anc.parent
        return tree
