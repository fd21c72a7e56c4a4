"""Message passing network that classifies tracking-graph edges.

Node embeddings start from encoded appearance, edge embeddings from pairwise
geometry/appearance evidence.  Each step updates edges from their endpoints
(with a skip to the initial edge embedding), then nodes from their incident
edges.  The time-aware variant aggregates past and future neighbors through
separate networks before fusing; the attentive variant additionally routes
RoI feature grids through per-neighborhood softmax attention and decodes
them into per-pixel masks.  The same logit head drives both the edge
classifier and the attention weights.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import tensorkit as tk
from .errors import CheckpointError, ConfigError
from .graph import TrackGraph

EDGE_FEATURE_DIM = 6
VARIANTS = ("vanilla", "time_aware")


@dataclass
class MpnConfig:
    num_steps: int = 4
    variant: str = "time_aware"
    with_masks: bool = False
    d_node: int = 32
    d_edge: int = 16
    hidden: int = 32
    conv_hidden: int = 8
    roi_h: int = 8
    roi_w: int = 8
    d_roi: int = 4
    last_m_steps: int | None = None   # None resolves to min(num_steps, 6)
    aggregation: str = "sum"

    def resolved_last_m(self) -> int:
        if self.num_steps == 0:
            return 1
        if self.last_m_steps is None:
            return min(self.num_steps, 6)
        return self.last_m_steps

    def validate(self) -> None:
        if self.num_steps < 0:
            raise ConfigError(f"num_steps must be >= 0, got {self.num_steps}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.aggregation != "sum":
            raise ConfigError(f"aggregation must be 'sum', got {self.aggregation!r}")
        for name in ("d_node", "d_edge", "hidden", "conv_hidden", "d_roi"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.roi_h < 4 or self.roi_w < 4:
            raise ConfigError(f"roi grid must be at least 4x4, got {self.roi_h}x{self.roi_w}")
        m = self.resolved_last_m()
        if not 1 <= m <= max(self.num_steps, 1):
            raise ConfigError(
                f"last_m_steps={self.last_m_steps} out of range for num_steps={self.num_steps}")


def mpn_config_from_dict(raw: dict) -> MpnConfig:
    known = {f.name for f in fields(MpnConfig)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
    cfg = MpnConfig(**raw)
    cfg.validate()
    return cfg


class ModelParams:
    """All trainable parameter groups for one model configuration."""

    def __init__(self, config: MpnConfig, d_app: int, seed: int = 0):
        config.validate()
        if d_app < 1:
            raise ConfigError(f"d_app must be >= 1, got {d_app}")
        self.config = config
        self.d_app = d_app
        rng = np.random.default_rng(seed)
        dn, de, hid = config.d_node, config.d_edge, config.hidden
        self.node_encoder = tk.DenseStack([d_app, hid, dn], rng=rng, name="node_encoder")
        self.edge_encoder = tk.DenseStack([EDGE_FEATURE_DIM, hid, de], rng=rng,
                                          name="edge_encoder")
        self.edge_update = tk.DenseStack([2 * dn + 2 * de, hid, de], rng=rng,
                                         name="edge_update")
        if config.variant == "vanilla":
            self.node_update = tk.DenseStack([dn + de, hid, dn], rng=rng, name="node_update")
            self.node_update_past = None
            self.node_update_fut = None
        else:
            self.node_update_past = tk.DenseStack([2 * dn + de, hid, dn], rng=rng,
                                                  name="node_update_past")
            self.node_update_fut = tk.DenseStack([2 * dn + de, hid, dn], rng=rng,
                                                 name="node_update_fut")
            self.node_update = tk.DenseStack([2 * dn, hid, dn], rng=rng, name="node_update")
        # one logit head serves classification and attention
        self.edge_logits = tk.DenseStack([de, hid, 1], rng=rng, name="edge_logits")
        if config.with_masks:
            dr, ch = config.d_roi, config.conv_hidden
            self.context_update = tk.ConvStack([3 * dr, ch, dr], rng=rng,
                                               name="context_update")
            self.mask_head = tk.ConvStack([2 * dr] + [ch] * 6 + [1],
                                          out_activation="sigmoid", rng=rng,
                                          name="mask_head")
        else:
            self.context_update = None
            self.mask_head = None

    def stacks(self):
        out = [self.node_encoder, self.edge_encoder, self.edge_update]
        if self.node_update_past is not None:
            out.extend([self.node_update_past, self.node_update_fut])
        out.append(self.node_update)
        out.append(self.edge_logits)
        if self.context_update is not None:
            out.extend([self.context_update, self.mask_head])
        return out

    def named_parameters(self) -> list[tuple[str, tk.Tensor]]:
        params = []
        for stack in self.stacks():
            params.extend(stack.parameters())
        return params

    def zero_grad(self) -> None:
        for _, p in self.named_parameters():
            p.grad = None

    def save(self, path) -> None:
        tk.save_checkpoint(path, self.named_parameters(),
                           extra={"model": asdict(self.config), "d_app": self.d_app})

    @classmethod
    def load(cls, path) -> "ModelParams":
        groups, extra = tk.load_checkpoint(path)
        if "model" not in extra or "d_app" not in extra:
            raise CheckpointError(f"{path}: missing model config metadata")
        config = mpn_config_from_dict(extra["model"])
        params = cls(config, int(extra["d_app"]), seed=0)
        tk.assign_parameters(params.named_parameters(), groups)
        return params


@dataclass
class MpnState:
    """Embeddings and per-step outputs of one forward pass."""

    graph: TrackGraph
    config: MpnConfig
    node_h: list[tk.Tensor] = field(default_factory=list)
    edge_h: list[tk.Tensor] = field(default_factory=list)
    tilde_h: list[tk.Tensor] = field(default_factory=list)
    edge_probs: dict[int, tk.Tensor] = field(default_factory=dict)
    attention: dict[int, tuple[tk.Tensor, tk.Tensor]] = field(default_factory=dict)

    def recorded_steps(self) -> list[int]:
        return sorted(self.edge_probs)

    def final_probs(self) -> np.ndarray:
        last = max(self.edge_probs)
        return self.edge_probs[last].data.copy()


def encode_geometry(det_i, det_j, appearance_distance: float) -> np.ndarray:
    """Raw 6-vector of pairwise evidence for the edge (det_i -> det_j).

    Components: size-normalized x and y offsets, log height and width
    ratios, frame difference, appearance distance.
    """
    xi, yi, wi, hi = det_i.box
    xj, yj, wj, hj = det_j.box
    if det_i.frame == det_j.frame:
        raise ConfigError(f"edge ({det_i.node_id}, {det_j.node_id}) joins equal frames")
    if min(wi, hi, wj, hj) <= 0:
        raise ConfigError(f"edge ({det_i.node_id}, {det_j.node_id}) has non-positive box dims")
    return np.asarray([
        2.0 * (xj - xi) / (hi + hj),
        2.0 * (yj - yi) / (hi + hj),
        np.log(hi / hj),
        np.log(wi / wj),
        float(det_j.frame - det_i.frame),
        float(appearance_distance),
    ])


def edge_feature_matrix(graph: TrackGraph) -> np.ndarray:
    feats = np.zeros((graph.num_edges, EDGE_FEATURE_DIM))
    for e, (u, v) in enumerate(zip(graph.edge_src, graph.edge_dst)):
        feats[e] = encode_geometry(graph.detections[u], graph.detections[v],
                                   graph.edge_app_dist[e])
    return feats


def encode_nodes(graph: TrackGraph, params: ModelParams) -> tk.Tensor:
    app = np.stack([d.appearance for d in graph.detections]) if graph.num_nodes \
        else np.zeros((0, params.d_app))
    if app.shape[1] != params.d_app:
        raise ConfigError(f"appearance dim {app.shape[1]} does not match model {params.d_app}")
    return params.node_encoder(tk.Tensor(app))


def encode_edges(graph: TrackGraph, params: ModelParams) -> tk.Tensor:
    return params.edge_encoder(tk.Tensor(edge_feature_matrix(graph)))


def _roi_tensor(graph: TrackGraph, config: MpnConfig) -> tk.Tensor:
    grids = []
    for d in graph.detections:
        if d.roi_grid is None:
            raise ConfigError(f"detection {d.node_id} has no roi grid but masks are enabled")
        if d.roi_grid.shape != (config.roi_h, config.roi_w, config.d_roi):
            raise ConfigError(
                f"detection {d.node_id}: roi grid {d.roi_grid.shape} does not match "
                f"({config.roi_h}, {config.roi_w}, {config.d_roi})")
        grids.append(d.roi_grid)
    data = np.stack(grids) if grids else np.zeros((0, config.roi_h, config.roi_w, config.d_roi))
    return tk.Tensor(data)


def attention_weights(state: MpnState, params: ModelParams, l: int) -> tuple[tk.Tensor, tk.Tensor]:
    """Per-neighborhood softmax over the shared edge logits of step l - 1.

    Each node normalizes separately over its past and future incident
    edges, so one edge gets one weight per endpoint.
    """
    if l < 1:
        raise ConfigError(f"attention needs step >= 1, got {l}")
    g = state.graph
    logits = tk.reshape(params.edge_logits(state.edge_h[l - 1]), (g.num_edges,))
    a_past = tk.segment_softmax(logits, g.edge_dst, g.num_nodes)   # receiver is the later node
    a_fut = tk.segment_softmax(logits, g.edge_src, g.num_nodes)    # receiver is the earlier node
    state.attention[l] = (a_past, a_fut)
    return a_past, a_fut


def classify_edges(state: MpnState, params: ModelParams, l: int) -> tk.Tensor:
    logits = tk.reshape(params.edge_logits(state.edge_h[l]), (state.graph.num_edges,))
    probs = tk.sigmoid(logits)
    state.edge_probs[l] = probs
    return probs


def _edge_step(state: MpnState, params: ModelParams, l: int) -> None:
    g = state.graph
    h_prev = state.node_h[l - 1]
    inp = tk.concat([
        tk.rows(h_prev, g.edge_src),
        tk.rows(h_prev, g.edge_dst),
        state.edge_h[l - 1],
        state.edge_h[0],
    ], axis=1)
    state.edge_h.append(params.edge_update(inp))


def _node_step_vanilla(state: MpnState, params: ModelParams, l: int) -> None:
    g = state.graph
    h_prev = state.node_h[l - 1]
    e_l = state.edge_h[l]
    to_dst = params.node_update(tk.concat([tk.rows(h_prev, g.edge_dst), e_l], axis=1))
    to_src = params.node_update(tk.concat([tk.rows(h_prev, g.edge_src), e_l], axis=1))
    agg = tk.add(tk.segment_sum(to_dst, g.edge_dst, g.num_nodes),
                 tk.segment_sum(to_src, g.edge_src, g.num_nodes))
    state.node_h.append(agg)


def _node_step_time_aware(state: MpnState, params: ModelParams, l: int) -> None:
    g = state.graph
    h_prev = state.node_h[l - 1]
    h0 = state.node_h[0]
    e_l = state.edge_h[l]
    msg_past = params.node_update_past(tk.concat(
        [tk.rows(h_prev, g.edge_dst), e_l, tk.rows(h0, g.edge_dst)], axis=1))
    msg_fut = params.node_update_fut(tk.concat(
        [tk.rows(h_prev, g.edge_src), e_l, tk.rows(h0, g.edge_src)], axis=1))
    h_past = tk.segment_sum(msg_past, g.edge_dst, g.num_nodes)
    h_fut = tk.segment_sum(msg_fut, g.edge_src, g.num_nodes)
    state.node_h.append(params.node_update(tk.concat([h_past, h_fut], axis=1)))


def _mask_step(state: MpnState, params: ModelParams, l: int) -> None:
    g = state.graph
    a_past, a_fut = attention_weights(state, params, l)
    tilde_prev = state.tilde_h[l - 1]
    from_past = tk.mul(tk.rows(tilde_prev, g.edge_src),
                       tk.reshape(a_past, (g.num_edges, 1, 1, 1)))
    from_fut = tk.mul(tk.rows(tilde_prev, g.edge_dst),
                      tk.reshape(a_fut, (g.num_edges, 1, 1, 1)))
    c_past = tk.segment_sum(from_past, g.edge_dst, g.num_nodes)
    c_fut = tk.segment_sum(from_fut, g.edge_src, g.num_nodes)
    joined = tk.concat([c_past, c_fut, state.tilde_h[0]], axis=3)
    state.tilde_h.append(params.context_update(joined))


def mpn_forward(graph: TrackGraph, params: ModelParams, config: MpnConfig | None = None) -> MpnState:
    """Run the full forward pass, recording probabilities for the last m steps."""
    config = config or params.config
    config.validate()
    if config is not params.config and asdict(config) != asdict(params.config):
        raise ConfigError("forward config does not match the parameters' config")
    state = MpnState(graph=graph, config=config)
    state.node_h.append(encode_nodes(graph, params))
    state.edge_h.append(encode_edges(graph, params))
    if config.with_masks:
        state.tilde_h.append(_roi_tensor(graph, config))
    m = config.resolved_last_m()
    first_recorded = config.num_steps - m + 1
    for l in range(1, config.num_steps + 1):
        _edge_step(state, params, l)
        if config.variant == "vanilla":
            _node_step_vanilla(state, params, l)
        else:
            _node_step_time_aware(state, params, l)
        if config.with_masks:
            _mask_step(state, params, l)
        if l >= first_recorded:
            classify_edges(state, params, l)
    if config.num_steps == 0:
        classify_edges(state, params, 0)
    return state


def predict_masks(state: MpnState, params: ModelParams, step: int | None = None) -> tk.Tensor:
    """Per-node (H, W) mask probabilities from the RoI embeddings of a step."""
    if not state.config.with_masks:
        raise ConfigError("mask prediction requires with_masks=True")
    if step is None:
        step = len(state.tilde_h) - 1
    if not 0 <= step < len(state.tilde_h):
        raise ConfigError(f"step {step} outside computed range 0..{len(state.tilde_h) - 1}")
    joined = tk.concat([state.tilde_h[step], state.tilde_h[0]], axis=3)
    grids = params.mask_head(joined)
    n = state.graph.num_nodes
    return tk.reshape(grids, (n, state.config.roi_h, state.config.roi_w))
