"""Loss functions, graph augmentation, and the training loop.

Each step samples one frame window from one scenario, augments it with node
dropout and box jitter, rebuilds the graph and its labels, and descends the
joint objective: positive-weighted edge cross-entropy over the last m
message passing steps, plus mean per-pixel mask cross-entropy when masks
are enabled.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, fields, replace

import numpy as np

from . import tensorkit as tk
from .errors import ConfigError, TrainingError
from .graph import build_graph, detections_in_window, ground_truth_labels, split_windows
from .mpn import ModelParams, MpnConfig, mpn_forward, predict_masks
from .synthdata import Detection, Scenario, ScenarioConfig, generate_scenario

log = logging.getLogger(__name__)

PROB_EPS = 1e-7


@dataclass
class TrainConfig:
    iterations: int = 500
    lr: float = 3e-4
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    frames_per_graph: int = 15
    top_k: int = 10
    max_frame_gap: int | None = None     # None means frames_per_graph
    node_drop_p: float = 0.05
    box_shift_std: float = 1.0
    shift_position_only: bool = False
    graphs_per_step: int = 1
    seed: int = 0
    checkpoint_every: int = 0            # 0 disables periodic snapshots

    def validate(self) -> None:
        if self.iterations < 1:
            raise ConfigError(f"iterations must be >= 1, got {self.iterations}")
        if self.lr < 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if not 0.0 <= self.node_drop_p <= 1.0:
            raise ConfigError(f"node_drop_p must be in [0, 1], got {self.node_drop_p}")
        if self.box_shift_std < 0:
            raise ConfigError(f"box_shift_std must be >= 0, got {self.box_shift_std}")
        if self.frames_per_graph < 2:
            raise ConfigError(f"frames_per_graph must be >= 2, got {self.frames_per_graph}")
        if self.top_k < 1:
            raise ConfigError(f"top_k must be >= 1, got {self.top_k}")
        if self.max_frame_gap is not None and self.max_frame_gap < 1:
            raise ConfigError(f"max_frame_gap must be >= 1, got {self.max_frame_gap}")
        if self.graphs_per_step < 1:
            raise ConfigError(f"graphs_per_step must be >= 1, got {self.graphs_per_step}")
        if self.checkpoint_every < 0:
            raise ConfigError(f"checkpoint_every must be >= 0, got {self.checkpoint_every}")


def train_config_from_dict(raw: dict) -> TrainConfig:
    known = {f.name for f in fields(TrainConfig)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
    cfg = TrainConfig(**raw)
    cfg.validate()
    return cfg


@dataclass
class LossReport:
    iteration: int
    edge: float
    mask: float
    total: float
    w_pos: float
    per_step: list[float]


def edge_loss(probs_by_step: dict[int, tk.Tensor], y: np.ndarray,
              m: int | None = None) -> tuple[tk.Tensor, float, list[float]]:
    """Positive-weighted binary cross-entropy averaged over the last m steps.

    The positive weight is edges/positives for this graph; with no positive
    edge it falls back to 1 with a warning.  Probabilities are clamped to
    [1e-7, 1 - 1e-7] so the loss stays finite for any input.
    """
    if not probs_by_step:
        raise ConfigError("edge_loss needs at least one recorded step")
    steps = sorted(probs_by_step)
    if m is not None:
        steps = steps[-m:]
    y = np.asarray(y, dtype=np.float64)
    n_edges = y.size
    if n_edges == 0:
        raise ConfigError("edge_loss needs at least one edge")
    n_pos = float(y.sum())
    if n_pos > 0:
        w_pos = n_edges / n_pos
    else:
        w_pos = 1.0
        log.warning("graph has no positive edges; positive weight falls back to 1")
    pos_coef = tk.Tensor(w_pos * y)
    neg_coef = tk.Tensor(1.0 - y)
    total = None
    per_step = []
    for l in steps:
        p = tk.clip(probs_by_step[l], PROB_EPS, 1.0 - PROB_EPS)
        ce = tk.neg(tk.mean(tk.add(tk.mul(pos_coef, tk.log(p)),
                                   tk.mul(neg_coef, tk.log(tk.sub(1.0, p))))))
        per_step.append(ce.item())
        total = ce if total is None else tk.add(total, ce)
    loss = tk.mul(total, 1.0 / len(steps))
    return loss, w_pos, per_step


def mask_loss(masks_by_step: dict[int, tk.Tensor], gt_masks: list[np.ndarray | None],
              m: int | None = None) -> tuple[tk.Tensor, int]:
    """Mean per-pixel cross-entropy over supervised nodes, averaged over steps.

    Nodes without a ground-truth mask are excluded; with none at all the
    loss is the constant zero.
    """
    if not masks_by_step:
        raise ConfigError("mask_loss needs at least one recorded step")
    steps = sorted(masks_by_step)
    if m is not None:
        steps = steps[-m:]
    sup = [i for i, g in enumerate(gt_masks) if g is not None]
    if not sup:
        return tk.Tensor(0.0), 0
    target = tk.Tensor(np.stack([gt_masks[i] for i in sup]))
    inv_target = tk.Tensor(1.0 - target.data)
    idx = np.asarray(sup, dtype=np.intp)
    total = None
    for l in steps:
        p = tk.clip(tk.rows(masks_by_step[l], idx), PROB_EPS, 1.0 - PROB_EPS)
        ce = tk.neg(tk.mean(tk.add(tk.mul(target, tk.log(p)),
                                   tk.mul(inv_target, tk.log(tk.sub(1.0, p))))))
        total = ce if total is None else tk.add(total, ce)
    return tk.mul(total, 1.0 / len(steps)), len(sup)


def augment(detections: list[Detection], p_drop: float, shift_std: float,
            rng: np.random.Generator, position_only: bool = False) -> list[Detection]:
    """Randomly drop detections and jitter surviving boxes.

    Widths and heights stay floored at one pixel.  Identities, appearance
    vectors, and mask payloads are carried over untouched, so labels can be
    recomputed on the augmented graph.
    """
    out = []
    for d in detections:
        if rng.uniform() < p_drop:
            continue
        x, y, w, h = d.box
        dx, dy = rng.normal(0.0, shift_std, size=2)
        if position_only:
            dw = dh = 0.0
        else:
            dw, dh = rng.normal(0.0, shift_std, size=2)
        box = (x + dx, y + dy, max(w + dw, 1.0), max(h + dh, 1.0))
        out.append(Detection(node_id=d.node_id, frame=d.frame, box=box,
                             confidence=d.confidence, appearance=d.appearance,
                             roi_grid=d.roi_grid, gt_identity=d.gt_identity,
                             gt_mask=d.gt_mask))
    return out


def joint_loss(state, params: ModelParams, labels_arr: np.ndarray,
               gt_masks: list[np.ndarray | None] | None) -> tuple[tk.Tensor, LossReport]:
    loss_e, w_pos, per_step = edge_loss(state.edge_probs, labels_arr)
    mask_val = 0.0
    total = loss_e
    if state.config.with_masks:
        masks_by_step = {l: predict_masks(state, params, step=l)
                         for l in state.recorded_steps()}
        loss_m, n_sup = mask_loss(masks_by_step, gt_masks or [])
        if n_sup:
            mask_val = loss_m.item()
            total = tk.add(loss_e, loss_m)
    report = LossReport(iteration=0, edge=loss_e.item(), mask=mask_val,
                        total=loss_e.item() + mask_val, w_pos=w_pos, per_step=per_step)
    return total, report


def _sample_graph(scenario: Scenario, windows, cfg: TrainConfig, rng, mpn_cfg: MpnConfig):
    gap = cfg.max_frame_gap or cfg.frames_per_graph
    for _ in range(50):
        window = windows[rng.integers(len(windows))]
        dets = detections_in_window(scenario.detections, window)
        aug = augment(dets, cfg.node_drop_p, cfg.box_shift_std, rng,
                      cfg.shift_position_only)
        if len(aug) < 2:
            continue
        graph = build_graph(aug, max_frame_gap=gap, top_k=cfg.top_k)
        if graph.num_edges == 0:
            continue
        return graph
    raise TrainingError("could not sample a window with edges after 50 tries")


def train_loop(scenarios: list[Scenario], cfg: TrainConfig, mpn_cfg: MpnConfig,
               params: ModelParams | None = None,
               snapshot=None) -> tuple[ModelParams, list[LossReport]]:
    """Optimize model parameters on scenario windows.

    snapshot, if given, is called as snapshot(iteration, params) every
    checkpoint_every iterations.  Returns the trained parameters and the
    per-iteration loss history.  The (seed, config, data) triple fully
    determines the outcome.
    """
    cfg.validate()
    mpn_cfg.validate()
    if not scenarios or all(not s.detections for s in scenarios):
        raise ConfigError("training needs at least one scenario with detections")
    d_app = None
    for s in scenarios:
        for d in s.detections:
            if d.appearance is not None:
                d_app = d.appearance.size
                break
        if d_app is not None:
            break
    if d_app is None:
        raise ConfigError("training scenarios carry no appearance vectors")
    if params is None:
        params = ModelParams(mpn_cfg, d_app=d_app, seed=cfg.seed)
    rng = np.random.default_rng([cfg.seed, 0x5EED])
    usable = [(s, split_windows(s.detections, cfg.frames_per_graph))
              for s in scenarios if s.detections]
    adam = tk.AdamState(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2,
                        weight_decay=cfg.weight_decay)
    named = params.named_parameters()
    history: list[LossReport] = []
    for it in range(1, cfg.iterations + 1):
        params.zero_grad()
        agg = LossReport(iteration=it, edge=0.0, mask=0.0, total=0.0, w_pos=0.0,
                         per_step=[])
        for _ in range(cfg.graphs_per_step):
            scenario, windows = usable[rng.integers(len(usable))]
            graph = _sample_graph(scenario, windows, cfg, rng, mpn_cfg)
            labels = ground_truth_labels(graph, scenario)
            state = mpn_forward(graph, params)
            gt_masks = [d.gt_mask for d in graph.detections] if mpn_cfg.with_masks else None
            total, report = joint_loss(state, params, labels.as_array(graph), gt_masks)
            if not np.isfinite(report.total):
                raise TrainingError(f"non-finite loss at iteration {it}")
            tk.backward(tk.mul(total, 1.0 / cfg.graphs_per_step))
            agg.edge += report.edge / cfg.graphs_per_step
            agg.mask += report.mask / cfg.graphs_per_step
            agg.total += report.total / cfg.graphs_per_step
            agg.w_pos += report.w_pos / cfg.graphs_per_step
            agg.per_step = report.per_step
        tk.adam_step(named, None, adam)
        history.append(agg)
        if cfg.checkpoint_every and snapshot and it % cfg.checkpoint_every == 0:
            snapshot(it, params)
    return params, history


def write_history(history: list[LossReport], path) -> None:
    with open(path, "w") as fh:
        fh.write("iter,edge_loss,mask_loss,total_loss\n")
        for r in history:
            fh.write(f"{r.iteration},{r.edge!r},{r.mask!r},{r.total!r}\n")


# ---------------------------------------------------------------------------
# gradient checking on the full objective

def build_gradcheck_case(with_masks: bool, seed: int = 0):
    """Small graph plus a closure computing the full training loss.

    Returns (f, params) suitable for tensorkit.grad_check: ten detections
    or fewer, two message passing steps, and every parameter group of the
    chosen model variant exercised by f.
    """
    sc_cfg = ScenarioConfig(num_frames=4, num_identities=2, d_app=3,
                            pos_noise_std=2.0, detection_dropout=0.1,
                            false_positive_rate=0.3, roi_h=4, roi_w=4, d_roi=2,
                            seed=seed)
    scenario = generate_scenario(sc_cfg)
    dets = scenario.detections[:10]
    scenario = replace(scenario, detections=dets)
    graph = build_graph(dets, max_frame_gap=4, top_k=3)
    labels = ground_truth_labels(graph, scenario).as_array(graph)
    mpn_cfg = MpnConfig(num_steps=2, variant="time_aware", with_masks=with_masks,
                        d_node=4, d_edge=3, hidden=4, conv_hidden=2,
                        roi_h=4, roi_w=4, d_roi=2)
    params = ModelParams(mpn_cfg, d_app=3, seed=seed + 1)
    gt_masks = [d.gt_mask for d in graph.detections]

    def f():
        state = mpn_forward(graph, params)
        total, _ = joint_loss(state, params, labels, gt_masks if with_masks else None)
        return total

    return f, params
