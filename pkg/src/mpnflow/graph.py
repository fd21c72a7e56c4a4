"""Tracking graphs over detections.

Nodes are detections, edges connect detections in different frames that
could belong to the same object.  Candidate edges are limited by a frame
gap and pruned to mutual top-k nearest neighbors in appearance space.
Nodes are held in a content-keyed canonical order (frame, box, id) so a
relabeling of node ids leaves every internal array, and therefore every
downstream float operation, unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, FeasibilityError
from .synthdata import Detection, Scenario


@dataclass
class TrackGraph:
    """Immutable edge structure; embeddings live with the forward pass."""

    detections: list[Detection]              # canonical node order
    edge_src: np.ndarray                     # positions into detections, earlier frame
    edge_dst: np.ndarray                     # positions, later frame
    edge_app_dist: np.ndarray                # appearance distance per edge
    node_ids: np.ndarray = field(init=False)
    frames: np.ndarray = field(init=False)

    def __post_init__(self):
        self.node_ids = np.asarray([d.node_id for d in self.detections], dtype=np.int64)
        self.frames = np.asarray([d.frame for d in self.detections], dtype=np.int64)

    @property
    def num_nodes(self) -> int:
        return len(self.detections)

    @property
    def num_edges(self) -> int:
        return len(self.edge_src)

    def edge_pairs(self) -> list[tuple[int, int]]:
        """Edges as (node_id_earlier, node_id_later) pairs in edge order."""
        return [(int(self.node_ids[u]), int(self.node_ids[v]))
                for u, v in zip(self.edge_src, self.edge_dst)]

    def past_neighbors(self, pos: int) -> np.ndarray:
        return self.edge_src[self.edge_dst == pos]

    def fut_neighbors(self, pos: int) -> np.ndarray:
        return self.edge_dst[self.edge_src == pos]


def _canonical_order(detections: list[Detection]) -> list[Detection]:
    # sort key uses detection content first so relabeled ids cannot change
    # the order (and with it the float summation order) of distinct boxes
    return sorted(detections, key=lambda d: (d.frame, d.box, d.node_id))


def build_graph(detections: list[Detection], max_frame_gap: int, top_k: int) -> TrackGraph:
    """Connect detections across frames, then keep mutual top-k neighbors.

    Ranking uses Euclidean distance between appearance vectors, ties broken
    by lower node id.  Edges always point from the earlier frame to the
    later one.
    """
    if max_frame_gap < 1:
        raise ConfigError(f"max_frame_gap must be >= 1, got {max_frame_gap}")
    if top_k < 1:
        raise ConfigError(f"top_k must be >= 1, got {top_k}")
    seen = set()
    for d in detections:
        if d.appearance is None:
            raise ConfigError(f"detection {d.node_id} has no appearance vector")
        if d.node_id in seen:
            raise ConfigError(f"duplicate node id {d.node_id}")
        seen.add(d.node_id)
    ordered = _canonical_order(detections)
    n = len(ordered)
    if n == 0:
        return TrackGraph([], np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0))
    frames = np.asarray([d.frame for d in ordered])
    ids = np.asarray([d.node_id for d in ordered])
    app = np.stack([d.appearance for d in ordered])
    diff = app[:, None, :] - app[None, :, :]
    dist = np.sqrt((diff * diff).sum(axis=2))

    gap = frames[None, :] - frames[:, None]
    candidate = (gap >= 1) & (gap <= max_frame_gap)   # u earlier than v

    # per node: partners in either direction ranked by (distance, node id)
    keep = [set() for _ in range(n)]
    partner_mask = candidate | candidate.T
    for u in range(n):
        partners = np.nonzero(partner_mask[u])[0]
        if partners.size == 0:
            continue
        order = sorted(partners, key=lambda v: (dist[u, v], ids[v]))
        keep[u] = set(order[:top_k])

    src, dst, d_app = [], [], []
    for u in range(n):
        for v in np.nonzero(candidate[u])[0]:
            if v in keep[u] and u in keep[v]:
                src.append(u)
                dst.append(int(v))
                d_app.append(dist[u, v])
    order = sorted(range(len(src)), key=lambda e: (src[e], dst[e]))
    return TrackGraph(
        ordered,
        np.asarray([src[e] for e in order], dtype=np.int64),
        np.asarray([dst[e] for e in order], dtype=np.int64),
        np.asarray([d_app[e] for e in order], dtype=np.float64),
    )


def graph_from_edge_list(detections: list[Detection], pairs) -> TrackGraph:
    """Build a graph from explicit (node_id, node_id) cross-frame pairs."""
    ordered = _canonical_order(detections)
    pos = {d.node_id: i for i, d in enumerate(ordered)}
    frames = {d.node_id: d.frame for d in ordered}
    src, dst = [], []
    seen = set()
    for i, j in pairs:
        if i not in pos or j not in pos:
            raise ConfigError(f"edge ({i}, {j}) references unknown node ids")
        if frames[i] == frames[j]:
            raise ConfigError(f"edge ({i}, {j}) connects detections in the same frame")
        if frames[i] > frames[j]:
            i, j = j, i
        if (i, j) in seen:
            continue
        seen.add((i, j))
        src.append(pos[i])
        dst.append(pos[j])
    order = sorted(range(len(src)), key=lambda e: (src[e], dst[e]))
    src = np.asarray([src[e] for e in order], dtype=np.int64)
    dst = np.asarray([dst[e] for e in order], dtype=np.int64)
    d_app = np.zeros(len(src))
    for e in range(len(src)):
        a, b = ordered[src[e]].appearance, ordered[dst[e]].appearance
        if a is not None and b is not None:
            d_app[e] = float(np.linalg.norm(np.asarray(a) - np.asarray(b)))
    return TrackGraph(ordered, src, dst, d_app)


def split_windows(detections: list[Detection], frames_per_graph: int) -> list[tuple[int, int]]:
    """Frame windows [f, f + n - 1] for every present start frame that fits.

    A sequence spanning at most n frames yields exactly one window covering
    everything.  Consecutive windows overlap by n - 1 frames.
    """
    if frames_per_graph < 2:
        raise ConfigError(f"frames_per_graph must be >= 2, got {frames_per_graph}")
    if not detections:
        return []
    present = sorted({d.frame for d in detections})
    first, last = present[0], present[-1]
    if last - first + 1 <= frames_per_graph:
        return [(first, last)]
    n = frames_per_graph
    return [(f, f + n - 1) for f in present if f + n - 1 <= last]


def detections_in_window(detections: list[Detection], window: tuple[int, int]) -> list[Detection]:
    lo, hi = window
    return [d for d in detections if lo <= d.frame <= hi]


@dataclass
class EdgeLabels:
    """Binary target per edge, keyed by (node_id, node_id) in edge direction."""

    y: dict[tuple[int, int], int]

    def as_array(self, graph: TrackGraph) -> np.ndarray:
        return np.asarray([self.y[pair] for pair in graph.edge_pairs()], dtype=np.float64)

    def num_positive(self) -> int:
        return sum(self.y.values())


def ground_truth_labels(graph: TrackGraph, scenario: Scenario) -> EdgeLabels:
    """Mark edges joining consecutive same-identity detections as positive.

    Consecutive means consecutive among the trajectory's detections that
    are present in the graph, so a dropped middle detection makes the
    surviving skip edge the positive one.  Detections without an identity
    count as background and keep all incident edges negative.
    """
    in_graph = set(int(i) for i in graph.node_ids)
    frame_of = {d.node_id: d.frame for d in graph.detections}
    positive: set[tuple[int, int]] = set()
    for ids in scenario.gt_trajectories.values():
        present = [i for i in ids if i in in_graph]
        present.sort(key=lambda i: frame_of[i])
        for a, b in zip(present, present[1:]):
            positive.add((a, b))
    y = {}
    for pair in graph.edge_pairs():
        y[pair] = 1 if pair in positive else 0
    labels = EdgeLabels(y)
    _check_label_feasibility(graph, labels)
    return labels


def _check_label_feasibility(graph: TrackGraph, labels: EdgeLabels) -> None:
    # ground-truth labels must satisfy the unit in/out degree constraints
    arr = labels.as_array(graph)
    outdeg = np.zeros(graph.num_nodes)
    indeg = np.zeros(graph.num_nodes)
    np.add.at(outdeg, graph.edge_src, arr)
    np.add.at(indeg, graph.edge_dst, arr)
    if outdeg.max(initial=0) > 1 or indeg.max(initial=0) > 1:
        raise FeasibilityError("ground-truth labels violate the degree constraints")
