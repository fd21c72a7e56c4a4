import numpy as np
import pytest

from oracles import brute_force_round, random_rounding_instance, subgraph_objective

from mpnflow.errors import ConfigError, FeasibilityError
from mpnflow.graph import build_graph, graph_from_edge_list
from mpnflow.infer import (WindowResult, check_constraints, exact_round,
                           extract_trajectories, greedy_round, interpolate_track,
                           merge_windows, read_mask_pgm, run_inference, threshold,
                           violating_edges, write_mask_pgm)
from mpnflow.mpn import ModelParams, MpnConfig
from mpnflow.synthdata import Detection, ScenarioConfig, generate_scenario


def _det(nid, frame):
    # box x grows with the id so canonical node order matches id order
    return Detection(node_id=nid, frame=frame, box=(10.0 * nid, 5.0, 4.0, 4.0),
                     confidence=1.0, appearance=np.zeros(3))


def test_threshold_tie_counts_as_active():
    y = threshold(np.array([0.5, 0.4999, 0.5001]), tau=0.5)
    assert y.tolist() == [1, 0, 1]
    with pytest.raises(ConfigError):
        threshold(np.array([0.5]), tau=0.0)


def test_constraint_report_on_clean_chain():
    dets = [_det(0, 1), _det(1, 2), _det(2, 3)]
    g = graph_from_edge_list(dets, [(0, 1), (1, 2)])
    report = check_constraints(g, np.array([1, 1]))
    assert report.violations == []
    assert report.satisfied == report.total == 6
    assert report.rate == 1.0


def test_constraint_report_star_violation():
    # one node feeding two successors, plus an isolated node: 7 of the
    # 8 degree inequalities hold
    dets = [_det(0, 1), _det(1, 2), _det(2, 2), _det(3, 3)]
    g = graph_from_edge_list(dets, [(0, 1), (0, 2)])
    report = check_constraints(g, np.array([1, 1]))
    assert report.violations == [(0, "future", 2)]
    assert report.satisfied == 7
    assert report.total == 8
    assert report.rate == pytest.approx(0.875, abs=1e-12)


def test_exact_round_resolves_crossing():
    # two tracks crossing between frames: the matching keeps the two
    # high-probability edges and drops the cross pair
    dets = [_det(0, 1), _det(1, 1), _det(2, 2), _det(3, 2)]
    g = graph_from_edge_list(dets, [(0, 2), (0, 3), (1, 2), (1, 3)])
    assert g.edge_pairs() == [(0, 2), (0, 3), (1, 2), (1, 3)]
    probs = np.array([0.9, 0.6, 0.55, 0.9])
    y = exact_round(g, probs)
    assert y.tolist() == [1, 0, 0, 1]
    assert check_constraints(g, y).violations == []


def test_exact_round_matches_brute_force():
    rng = np.random.default_rng(7)
    for _ in range(100):
        g, probs = random_rounding_instance(rng)
        tentative = threshold(probs, 0.5)
        sub = violating_edges(g, tentative)
        y = exact_round(g, probs)
        _, best = brute_force_round(g, probs)
        assert subgraph_objective(g, probs, 0.5, y) == pytest.approx(best, abs=1e-9)
        # edges outside the violating subgraph keep their thresholded labels
        assert np.array_equal(y[~sub], tentative[~sub])
        assert check_constraints(g, y).violations == []


def test_greedy_round_feasible_and_never_beats_exact():
    rng = np.random.default_rng(8)
    for _ in range(100):
        g, probs = random_rounding_instance(rng)
        y_greedy = greedy_round(g, probs)
        y_exact = exact_round(g, probs)
        assert check_constraints(g, y_greedy).violations == []
        assert (subgraph_objective(g, probs, 0.5, y_greedy)
                <= subgraph_objective(g, probs, 0.5, y_exact) + 1e-12)


def test_greedy_tie_prefers_lower_edge_index():
    dets = [_det(0, 1), _det(1, 2), _det(2, 2)]
    g = graph_from_edge_list(dets, [(0, 1), (0, 2)])
    y = greedy_round(g, np.array([0.8, 0.8]))
    assert y.tolist() == [1, 0]


def test_extract_trajectories_paths_and_singletons():
    dets = [_det(0, 1), _det(1, 2), _det(2, 3), _det(3, 2)]
    g = graph_from_edge_list(dets, [(0, 1), (1, 2)])
    trajectories = extract_trajectories(g, np.array([1, 1]))
    assert sorted(trajectories) == [[0, 1, 2], [3]]


def test_extract_trajectories_rejects_violations():
    dets = [_det(0, 1), _det(1, 2), _det(2, 2)]
    g = graph_from_edge_list(dets, [(0, 1), (0, 2)])
    with pytest.raises(FeasibilityError):
        extract_trajectories(g, np.array([1, 1]))


def test_merge_windows_averages_and_is_order_invariant():
    a = WindowResult(window=(1, 3), edge_probs={(0, 1): 0.8},
                     node_masks={5: np.full((2, 2), 0.2)})
    b = WindowResult(window=(2, 4), edge_probs={(0, 1): 0.6, (1, 2): 0.5},
                     node_masks={5: np.full((2, 2), 0.4)})
    probs1, masks1 = merge_windows([a, b])
    probs2, masks2 = merge_windows([b, a])
    assert probs1 == {(0, 1): 0.7, (1, 2): 0.5}
    assert probs1 == probs2
    assert np.array_equal(masks1[5], masks2[5])
    assert masks1[5] == pytest.approx(np.full((2, 2), 0.3))
    assert merge_windows([]) == ({}, {})


def test_interpolation_fills_gap_linearly():
    dets = {
        0: Detection(node_id=0, frame=1, box=(0.0, 0.0, 4.0, 4.0),
                     confidence=1.0, appearance=np.zeros(2)),
        1: Detection(node_id=1, frame=3, box=(10.0, 2.0, 4.0, 8.0),
                     confidence=0.5, appearance=np.zeros(2)),
    }
    series = interpolate_track([0, 1], dets)
    assert [f for f, _, _ in series] == [1, 2, 3]
    frame, box, conf = series[1]
    assert box == pytest.approx((5.0, 1.0, 4.0, 6.0))
    assert conf == pytest.approx(0.75)


def test_interpolation_adjacent_frames_inserts_nothing():
    dets = {
        0: Detection(node_id=0, frame=4, box=(0.0, 0.0, 4.0, 4.0),
                     confidence=1.0, appearance=np.zeros(2)),
        1: Detection(node_id=1, frame=5, box=(2.0, 0.0, 4.0, 4.0),
                     confidence=1.0, appearance=np.zeros(2)),
    }
    series = interpolate_track([0, 1], dets)
    assert [f for f, _, _ in series] == [4, 5]


def test_pgm_round_trip(tmp_path):
    grid = np.array([[0.0, 0.5, 1.0]])
    path = tmp_path / "mask.pgm"
    write_mask_pgm(path, grid)
    text = path.read_text().splitlines()
    assert text[0] == "P2"
    assert text[1] == "3 1"
    assert text[2] == "255"
    assert text[3].split() == ["0", "128", "255"]
    back = read_mask_pgm(path)
    assert back == pytest.approx(grid, abs=1.0 / 255.0)


def _inference_fixture():
    scenario = generate_scenario(ScenarioConfig(
        num_frames=10, num_identities=3, detection_dropout=0.1, d_app=8, seed=3))
    cfg = MpnConfig(num_steps=2, variant="time_aware", d_node=8, d_edge=6, hidden=8)
    params = ModelParams(cfg, d_app=8, seed=0)
    return scenario, params


def test_run_inference_produces_feasible_partition():
    scenario, params = _inference_fixture()
    sol = run_inference(scenario.detections, params, frames_per_graph=5, top_k=3)
    assert sol.constraint_report.total == 2 * len(scenario.detections)
    union = graph_from_edge_list(scenario.detections, list(sol.labels))
    y = np.array([sol.labels[pair] for pair in union.edge_pairs()])
    assert check_constraints(union, y).violations == []
    covered = sorted(n for traj in sol.trajectories for n in traj)
    assert covered == sorted(d.node_id for d in scenario.detections)
    for track, ids in zip(sol.tracks, sol.track_node_ids):
        assert len(ids) >= 2
        frames = [f for f, _, _ in track]
        assert frames == list(range(frames[0], frames[-1] + 1))


def test_run_inference_thread_count_does_not_change_results():
    scenario, params = _inference_fixture()
    one = run_inference(scenario.detections, params, frames_per_graph=5, top_k=3,
                        threads=1)
    two = run_inference(scenario.detections, params, frames_per_graph=5, top_k=3,
                        threads=3)
    assert one.edge_probs == two.edge_probs
    assert one.labels == two.labels
    assert one.trajectories == two.trajectories


def test_run_inference_greedy_rounder_feasible():
    scenario, params = _inference_fixture()
    sol = run_inference(scenario.detections, params, frames_per_graph=5, top_k=3,
                        rounder="greedy")
    union = graph_from_edge_list(scenario.detections, list(sol.labels))
    y = np.array([sol.labels[pair] for pair in union.edge_pairs()])
    assert check_constraints(union, y).violations == []
    with pytest.raises(ConfigError):
        run_inference(scenario.detections, params, frames_per_graph=5, top_k=3,
                      rounder="fancy")


def test_run_inference_emits_masks_when_enabled():
    scenario = generate_scenario(ScenarioConfig(
        num_frames=4, num_identities=2, d_app=6, roi_h=4, roi_w=4, d_roi=2, seed=1))
    cfg = MpnConfig(num_steps=2, with_masks=True, d_node=8, d_edge=6, hidden=8,
                    conv_hidden=4, roi_h=4, roi_w=4, d_roi=2)
    params = ModelParams(cfg, d_app=6, seed=0)
    sol = run_inference(scenario.detections, params, frames_per_graph=4, top_k=3)
    node_ids = {d.node_id for d in scenario.detections}
    assert set(sol.node_masks) <= node_ids
    assert sol.node_masks, "expected at least one predicted mask"
    for grid in sol.node_masks.values():
        assert grid.shape == (4, 4)
        assert np.all((grid >= 0.0) & (grid <= 1.0))
