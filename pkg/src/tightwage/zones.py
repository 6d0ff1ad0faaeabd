"""Commuting-zone delineation from district-level commuting flows.

Districts are merged along dominant commuting links until no link is strong
enough, for each threshold on a grid; the delineation with the highest
modularity wins.  Zones that are not geographically connected are repaired
afterwards.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import pandas as pd
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from .errors import ValidationError

log = logging.getLogger(__name__)


class UnionFind:
    """Disjoint sets over ``0..n-1``; the root of a set is its smallest member."""

    def __init__(self, n):
        self.parent = list(range(n))

    def find(self, a):
        root = a
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[a] != root:
            self.parent[a], a = root, self.parent[a]
        return root

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return False
        if rb < ra:
            ra, rb = rb, ra
        self.parent[rb] = ra
        return True

    def labels(self):
        """Dense labels numbered by first appearance (i.e. by smallest member)."""
        roots = [self.find(i) for i in range(len(self.parent))]
        return canonical_labels(roots)


@dataclass(frozen=True)
class FlowMatrix:
    """Directed commuter counts ``flow[i, j]`` from district i to district j."""

    districts: tuple
    flow: np.ndarray
    adjacency: Optional[np.ndarray] = None

    def __post_init__(self):
        n = len(self.districts)
        if self.flow.shape != (n, n):
            raise ValidationError(f"flow matrix must be {n}x{n}, got {self.flow.shape}")
        if (self.flow < 0).any():
            raise ValidationError("flows must be nonnegative")
        if self.adjacency is not None:
            if self.adjacency.shape != (n, n):
                raise ValidationError("adjacency must match the flow matrix")
            if not (self.adjacency == self.adjacency.T).all():
                raise ValidationError("adjacency must be symmetric")

    @property
    def n(self):
        return len(self.districts)

    @classmethod
    def from_tables(cls, flows: pd.DataFrame, adjacency: Optional[pd.DataFrame] = None):
        names = set(flows["origin_district"]) | set(flows["destination_district"])
        if adjacency is not None:
            names |= set(adjacency["district_a"]) | set(adjacency["district_b"])
        districts = tuple(sorted(names))
        pos = {d: i for i, d in enumerate(districts)}
        n = len(districts)
        f = np.zeros((n, n))
        np.add.at(f, (flows["origin_district"].map(pos).to_numpy(),
                      flows["destination_district"].map(pos).to_numpy()), flows["commuters"].to_numpy(float))
        adj = None
        if adjacency is not None:
            adj = np.zeros((n, n), dtype=bool)
            a = adjacency["district_a"].map(pos).to_numpy()
            b = adjacency["district_b"].map(pos).to_numpy()
            adj[a, b] = True
            adj[b, a] = True
            np.fill_diagonal(adj, False)
        return cls(districts, f, adj)


@dataclass(frozen=True)
class ZonePartition:
    districts: tuple
    assignment: np.ndarray
    q: float
    threshold: Optional[float]
    contiguous: Optional[bool]
    passes: int = 0

    @property
    def n_zones(self):
        return int(self.assignment.max()) + 1 if len(self.assignment) else 0

    def as_mapping(self):
        return {d: int(z) for d, z in zip(self.districts, self.assignment)}

    def to_frame(self):
        return pd.DataFrame({
            "district": list(self.districts),
            "zone": self.assignment.astype(int),
            "threshold": self.threshold,
            "q": self.q,
        })


def canonical_labels(labels) -> np.ndarray:
    """Relabel so zone ids are 0, 1, ... in order of first appearance."""
    _, first, inverse = np.unique(np.asarray(labels), return_index=True, return_inverse=True)
    order = np.argsort(np.argsort(first))
    return order[inverse]


def _symmetric(flow):
    return flow + flow.T


def modularity(flow: np.ndarray, assignment) -> float:
    """Newman modularity of a partition of the symmetrised flow graph.

    The graph has weights ``flow[i, j] + flow[j, i]``; within-district
    commuting sits on the diagonal as a self-loop and counts as internal weight.
    """
    a = _symmetric(np.asarray(flow, dtype=float))
    two_m = a.sum()
    if two_m <= 0:
        raise ValidationError("modularity undefined on a graph without weight")
    labels = canonical_labels(assignment)
    k = labels.max() + 1
    member = np.zeros((len(labels), k))
    member[np.arange(len(labels)), labels] = 1.0
    internal = np.einsum("ic,ij,jc->c", member, a, member)
    degree = member.T @ a.sum(axis=1)
    return float(np.sum(internal / two_m - (degree / two_m) ** 2))


def aggregate(flow: np.ndarray, assignment) -> np.ndarray:
    labels = np.asarray(assignment)
    k = labels.max() + 1
    member = np.zeros((len(labels), k))
    member[np.arange(len(labels)), labels] = 1.0
    return member.T @ flow @ member


def dominant_links(flow: np.ndarray):
    """Dominant partner and its share of each region's commuting activity.

    The share is the tie ``flow[i, j] + flow[j, i]`` divided by the region's
    total symmetrised degree, within-region commuting included.  Regions
    without any between-region tie get partner -1.
    """
    a = _symmetric(flow)
    degree = a.sum(axis=1)
    off = a.copy()
    np.fill_diagonal(off, -np.inf)
    partner = np.argmax(off, axis=1)  # first maximum: lowest id wins ties
    tie = off[np.arange(len(a)), partner]
    share = np.where(degree > 0, tie / np.where(degree > 0, degree, 1.0), 0.0)
    partner = np.where(tie > 0, partner, -1)
    share = np.where(tie > 0, share, 0.0)
    return partner, share


def merge_pass(flow: np.ndarray, threshold: float):
    """One round of dominant-flow merging.

    Returns ``(aggregated_flow, assignment)`` where ``assignment`` maps every
    input region to a merged region.  Merges go through union-find, so chains
    of dominant links collapse within a single pass.
    """
    if not 0 < threshold < 1:
        raise ValidationError(f"threshold must lie in (0, 1), got {threshold}")
    partner, share = dominant_links(flow)
    uf = UnionFind(len(flow))
    for i in range(len(flow)):
        if partner[i] >= 0 and share[i] >= threshold:
            uf.union(i, int(partner[i]))
    assignment = uf.labels()
    return aggregate(flow, assignment), assignment


def merge_to_fixpoint(flow: np.ndarray, threshold: float, max_passes: int = 1000):
    """Repeat :func:`merge_pass` until nothing merges; returns (assignment, passes)."""
    assignment = np.arange(len(flow))
    current = flow
    for passes in range(1, max_passes + 1):
        nxt, step = merge_pass(current, threshold)
        assignment = step[assignment]
        if len(nxt) == len(current):
            return assignment, passes
        current = nxt
    raise RuntimeError("merge_to_fixpoint did not settle")  # cannot happen: every pass shrinks


def is_contiguous(assignment, adjacency: np.ndarray) -> bool:
    for zone in np.unique(assignment):
        members = np.flatnonzero(assignment == zone)
        sub = csr_matrix(adjacency[np.ix_(members, members)])
        if connected_components(sub, directed=False)[0] > 1:
            return False
    return True


def repair_contiguity(flow: np.ndarray, assignment, adjacency: np.ndarray, max_rounds: int = 100):
    """Reassign geographically detached pieces of a zone.

    Each zone keeps its piece with the largest commuting degree; every other
    piece moves to the adjacent zone it shares the most symmetrised flow with.
    A piece with no neighbour outside its zone becomes a zone of its own.
    """
    a = _symmetric(flow)
    degree = a.sum(axis=1)
    labels = np.asarray(assignment).copy()
    for _ in range(max_rounds):
        changed = False
        next_id = labels.max() + 1
        for zone in np.unique(labels):
            members = np.flatnonzero(labels == zone)
            ncomp, comp = connected_components(csr_matrix(adjacency[np.ix_(members, members)]), directed=False)
            if ncomp == 1:
                continue
            weights = np.bincount(comp, weights=degree[members], minlength=ncomp)
            keep = int(np.argmax(weights))
            for c in range(ncomp):
                if c == keep:
                    continue
                piece = members[comp == c]
                outside = np.flatnonzero(adjacency[piece].any(axis=0) & (labels != zone))
                if len(outside) == 0:
                    labels[piece] = next_id
                    next_id += 1
                else:
                    cand = np.unique(labels[outside])
                    tie = np.array([a[np.ix_(piece, np.flatnonzero(labels == z))].sum() for z in cand])
                    labels[piece] = cand[int(np.argmax(tie))]
                changed = True
        if not changed:
            break
    return canonical_labels(labels)


def parse_grid(spec: str) -> list[float]:
    """Parse ``start:stop:step`` (inclusive) or a comma list into thresholds."""
    if ":" in spec:
        start, stop, step = (float(x) for x in spec.split(":"))
        n = int(np.floor((stop - start) / step + 1e-9)) + 1
        return [round(start + i * step, 12) for i in range(n)]
    return [float(x) for x in spec.split(",") if x.strip()]


def delineate(flows: FlowMatrix, threshold_grid: Sequence[float]) -> ZonePartition:
    """Pick the highest-modularity fixpoint delineation over a threshold grid.

    Ties in modularity go to the lower threshold.  The unmerged map (one zone
    per district, ``threshold=None``) is the baseline a grid result must beat.
    """
    grid = sorted(float(t) for t in threshold_grid)
    if not grid:
        raise ValidationError("threshold grid is empty")
    identity = np.arange(flows.n)
    contiguous = True if flows.adjacency is not None else None
    best = ZonePartition(flows.districts, identity, modularity(flows.flow, identity), None, contiguous, 0)
    for t in grid:
        assignment, passes = merge_to_fixpoint(flows.flow, t)
        contiguous = None
        if flows.adjacency is not None:
            assignment = repair_contiguity(flows.flow, assignment, flows.adjacency)
            contiguous = is_contiguous(assignment, flows.adjacency)
        q = modularity(flows.flow, assignment)
        log.debug("threshold %.4f: %d zones, Q=%.6f, %d passes", t, assignment.max() + 1, q, passes)
        if q > best.q:
            best = ZonePartition(flows.districts, assignment, q, t, contiguous, passes)
    return best
