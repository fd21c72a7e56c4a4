"""Turning edge probabilities into feasible trajectories.

Thresholded labels may violate the unit-degree flow constraints (at most
one active incoming edge from the past and one outgoing to the future per
node).  Rounding restricts attention to the violating subgraph and either
solves it exactly, via maximum-weight bipartite matching on a node-split
graph, or greedily by descending probability.  Feasible labels decompose
into node-disjoint paths, which become tracks after per-coordinate linear
interpolation over dropped frames.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import tensorkit as tk
from .errors import ConfigError, FeasibilityError
from .graph import (TrackGraph, build_graph, detections_in_window, graph_from_edge_list,
                    split_windows)
from .mpn import ModelParams, mpn_forward, predict_masks
from .synthdata import Box, Detection


def threshold(probs: np.ndarray, tau: float = 0.5) -> np.ndarray:
    """Binary labels from probabilities; a tie at tau counts as active."""
    if not 0.0 < tau < 1.0:
        raise ConfigError(f"tau must be in (0, 1), got {tau}")
    return (np.asarray(probs) >= tau).astype(np.int64)


@dataclass
class ConstraintReport:
    violations: list[tuple[int, str, int]]   # (node_id, side, active degree)
    satisfied: int
    total: int

    @property
    def rate(self) -> float:
        return 1.0 if self.total == 0 else self.satisfied / self.total


def _degrees(graph: TrackGraph, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    outdeg = np.zeros(graph.num_nodes, dtype=np.int64)
    indeg = np.zeros(graph.num_nodes, dtype=np.int64)
    active = np.asarray(y, dtype=np.int64)
    np.add.at(outdeg, graph.edge_src, active)
    np.add.at(indeg, graph.edge_dst, active)
    return outdeg, indeg


def check_constraints(graph: TrackGraph, y: np.ndarray) -> ConstraintReport:
    """Count the satisfied unit-degree inequalities, two per node."""
    if len(y) != graph.num_edges:
        raise ConfigError(f"got {len(y)} labels for {graph.num_edges} edges")
    outdeg, indeg = _degrees(graph, y)
    violations = []
    for pos in range(graph.num_nodes):
        nid = int(graph.node_ids[pos])
        if indeg[pos] > 1:
            violations.append((nid, "past", int(indeg[pos])))
        if outdeg[pos] > 1:
            violations.append((nid, "future", int(outdeg[pos])))
    total = 2 * graph.num_nodes
    return ConstraintReport(violations=violations, satisfied=total - len(violations),
                            total=total)


def violating_edges(graph: TrackGraph, y: np.ndarray) -> np.ndarray:
    """Boolean mask of active edges that participate in a violated inequality."""
    outdeg, indeg = _degrees(graph, y)
    active = np.asarray(y, dtype=bool)
    return active & ((outdeg[graph.edge_src] > 1) | (indeg[graph.edge_dst] > 1))


def exact_round(graph: TrackGraph, probs: np.ndarray, tau: float = 0.5) -> np.ndarray:
    """Feasible labels maximizing the sum of (p - tau) over kept active edges.

    Only the violating subgraph is re-decided; its optimum is a maximum
    weight bipartite matching between future-slot copies of the earlier
    endpoints and past-slot copies of the later ones.  Edges untouched by
    any violation keep their thresholded labels.
    """
    probs = np.asarray(probs, dtype=np.float64)
    y = threshold(probs, tau)
    sub = np.nonzero(violating_edges(graph, y))[0]
    if sub.size == 0:
        return y
    left_ids = {}
    right_ids = {}
    for e in sub:
        left_ids.setdefault(int(graph.edge_src[e]), len(left_ids))
        right_ids.setdefault(int(graph.edge_dst[e]), len(right_ids))
    weights = np.zeros((len(left_ids), len(right_ids)))
    edge_at = {}
    for e in sub:
        i = left_ids[int(graph.edge_src[e])]
        j = right_ids[int(graph.edge_dst[e])]
        weights[i, j] = probs[e] - tau
        edge_at[(i, j)] = e
    rows, cols = linear_sum_assignment(weights, maximize=True)
    y[sub] = 0
    for i, j in zip(rows, cols):
        e = edge_at.get((int(i), int(j)))
        if e is not None:
            y[e] = 1
    _assert_feasible(graph, y)
    return y


def greedy_round(graph: TrackGraph, probs: np.ndarray, tau: float = 0.5) -> np.ndarray:
    """Feasible labels by accepting violating-subgraph edges in descending
    probability order (ties to the lower edge index) when both endpoint
    slots are still free."""
    probs = np.asarray(probs, dtype=np.float64)
    y = threshold(probs, tau)
    sub = np.nonzero(violating_edges(graph, y))[0]
    if sub.size == 0:
        return y
    keep = y.copy()
    keep[sub] = 0
    out_used, in_used = _degrees(graph, keep)
    for e in sorted(sub, key=lambda e: (-probs[e], e)):
        u, v = graph.edge_src[e], graph.edge_dst[e]
        if out_used[u] == 0 and in_used[v] == 0:
            keep[e] = 1
            out_used[u] += 1
            in_used[v] += 1
    _assert_feasible(graph, keep)
    return keep


def _assert_feasible(graph: TrackGraph, y: np.ndarray) -> None:
    outdeg, indeg = _degrees(graph, y)
    if (outdeg > 1).any() or (indeg > 1).any():
        raise FeasibilityError("rounding left a degree constraint violated")


def extract_trajectories(graph: TrackGraph, y: np.ndarray) -> list[list[int]]:
    """Decompose feasible labels into node-disjoint paths of node ids.

    Every node appears in exactly one trajectory; nodes without active
    edges become singletons.
    """
    outdeg, indeg = _degrees(graph, y)
    if (outdeg > 1).any() or (indeg > 1).any():
        raise FeasibilityError("labels violate the degree constraints")
    succ = {}
    has_pred = np.zeros(graph.num_nodes, dtype=bool)
    for e in range(graph.num_edges):
        if y[e]:
            succ[int(graph.edge_src[e])] = int(graph.edge_dst[e])
            has_pred[graph.edge_dst[e]] = True
    trajectories = []
    for pos in range(graph.num_nodes):
        if has_pred[pos]:
            continue
        path = [pos]
        while path[-1] in succ:
            path.append(succ[path[-1]])
        trajectories.append([int(graph.node_ids[p]) for p in path])
    return trajectories


# ---------------------------------------------------------------------------
# window-level inference

@dataclass
class WindowResult:
    window: tuple[int, int]
    edge_probs: dict[tuple[int, int], float]
    node_masks: dict[int, np.ndarray] = field(default_factory=dict)


def merge_windows(results: list[WindowResult]) -> tuple[dict[tuple[int, int], float],
                                                        dict[int, np.ndarray]]:
    """Average per-edge probabilities and per-node masks over windows.

    Contributions are accumulated in window order, so the outcome does not
    depend on the order the windows were processed in.
    """
    ordered = sorted(results, key=lambda r: r.window)
    edge_acc: dict[tuple[int, int], list[float]] = {}
    mask_acc: dict[int, list[np.ndarray]] = {}
    for r in ordered:
        for pair, p in sorted(r.edge_probs.items()):
            edge_acc.setdefault(pair, []).append(p)
        for nid, grid in sorted(r.node_masks.items()):
            mask_acc.setdefault(nid, []).append(grid)
    edge_probs = {pair: float(np.sum(vals) / len(vals)) for pair, vals in edge_acc.items()}
    node_masks = {nid: np.sum(grids, axis=0) / len(grids) for nid, grids in mask_acc.items()}
    return edge_probs, node_masks


def interpolate_track(node_ids: list[int], det_by_id: dict[int, Detection]
                      ) -> list[tuple[int, Box, float]]:
    """Full per-frame series for a trajectory, filling frame gaps linearly.

    Each box coordinate (and the confidence) is interpolated independently
    between consecutive detections; nothing is extrapolated beyond the ends.
    """
    dets = sorted((det_by_id[i] for i in node_ids), key=lambda d: d.frame)
    series: list[tuple[int, Box, float]] = []
    for a, b in zip(dets, dets[1:]):
        series.append((a.frame, a.box, a.confidence))
        span = b.frame - a.frame
        for f in range(a.frame + 1, b.frame):
            t = (f - a.frame) / span
            box = tuple((1 - t) * va + t * vb for va, vb in zip(a.box, b.box))
            conf = (1 - t) * a.confidence + t * b.confidence
            series.append((f, box, conf))
    last = dets[-1]
    series.append((last.frame, last.box, last.confidence))
    return series


@dataclass
class Solution:
    edge_probs: dict[tuple[int, int], float]
    labels: dict[tuple[int, int], int]
    trajectories: list[list[int]]                      # every node, incl. singletons
    tracks: list[list[tuple[int, Box, float]]]         # min-length filtered, interpolated
    track_node_ids: list[list[int]]
    node_masks: dict[int, np.ndarray]
    constraint_report: ConstraintReport


ROUNDERS = ("exact", "greedy")


def run_inference(detections: list[Detection], params: ModelParams, *,
                  frames_per_graph: int, top_k: int, max_frame_gap: int | None = None,
                  tau: float = 0.5, rounder: str = "exact", min_track_len: int = 2,
                  threads: int = 1) -> Solution:
    """Window the sequence, classify, merge, round, and extract tracks."""
    if rounder not in ROUNDERS:
        raise ConfigError(f"rounder must be one of {ROUNDERS}, got {rounder!r}")
    if min_track_len < 1:
        raise ConfigError(f"min_track_len must be >= 1, got {min_track_len}")
    if threads < 1:
        raise ConfigError(f"threads must be >= 1, got {threads}")
    gap = max_frame_gap or frames_per_graph
    cfg = params.config
    windows = split_windows(detections, frames_per_graph)

    def process(window) -> WindowResult | None:
        dets_w = detections_in_window(detections, window)
        if len(dets_w) < 2:
            return None
        g = build_graph(dets_w, max_frame_gap=gap, top_k=top_k)
        with tk.no_grad():
            state = mpn_forward(g, params)
            probs = state.final_probs()
            masks = {}
            if cfg.with_masks:
                grids = predict_masks(state, params).data
                masks = {int(g.node_ids[i]): grids[i] for i in range(g.num_nodes)}
        edge_probs = {pair: float(p) for pair, p in zip(g.edge_pairs(), probs)}
        return WindowResult(window=window, edge_probs=edge_probs, node_masks=masks)

    if threads == 1:
        raw = [process(w) for w in windows]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            raw = list(pool.map(process, windows))
    results = [r for r in raw if r is not None]
    edge_probs, node_masks = merge_windows(results)

    union = graph_from_edge_list(detections, list(edge_probs))
    probs_arr = np.asarray([edge_probs[pair] for pair in union.edge_pairs()])
    tentative = threshold(probs_arr, tau)
    report = check_constraints(union, tentative)
    y = exact_round(union, probs_arr, tau) if rounder == "exact" \
        else greedy_round(union, probs_arr, tau)
    trajectories = extract_trajectories(union, y)

    det_by_id = {d.node_id: d for d in detections}
    tracks = []
    track_node_ids = []
    for traj in trajectories:
        if len(traj) < min_track_len:
            continue
        tracks.append(interpolate_track(traj, det_by_id))
        track_node_ids.append(traj)
    labels = {pair: int(v) for pair, v in zip(union.edge_pairs(), y)}
    return Solution(edge_probs=edge_probs, labels=labels, trajectories=trajectories,
                    tracks=tracks, track_node_ids=track_node_ids,
                    node_masks=node_masks, constraint_report=report)


# ---------------------------------------------------------------------------
# mask output

def write_mask_pgm(path, grid: np.ndarray) -> None:
    """Store a probability grid as an ASCII PGM with maxval 255."""
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 2:
        raise ConfigError(f"mask grid must be 2-D, got shape {grid.shape}")
    levels = np.clip(np.rint(grid * 255.0), 0, 255).astype(int)
    h, w = grid.shape
    lines = ["P2", f"{w} {h}", "255"]
    for row in levels:
        lines.append(" ".join(str(v) for v in row))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_mask_pgm(path) -> np.ndarray:
    """Load an ASCII PGM back into a [0, 1] probability grid."""
    with open(path) as fh:
        tokens = fh.read().split()
    if not tokens or tokens[0] != "P2":
        raise ConfigError(f"{path}: not an ASCII PGM file")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    vals = np.asarray([int(t) for t in tokens[4:]], dtype=np.float64)
    if vals.size != w * h:
        raise ConfigError(f"{path}: expected {w * h} pixels, got {vals.size}")
    return vals.reshape(h, w) / maxval
