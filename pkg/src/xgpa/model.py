"""The graph pyramid forecaster: feature-map grid, per-cell heads, CAM fusion, explanations."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Any

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError
from .nn import AttentionVariant, Linear, Module, parameter
from .spatial import GraphAttentionLayer, TrafficGraph
from .tensor import ShapeError, Tensor
from .temporal import AutocorrAttentionLayer, PatchAttentionLayer

ALIGNMENTS = ("wrap", "tail")


@dataclass
class XGPAConfig:
    m_gc: int = 1
    patch_sizes: list[int] = field(default_factory=lambda: [2])
    k: int = 3
    d_in: int = 1
    d_hidden: int = 8
    input_len: int = 336
    horizon: int = 24
    variant: str = AttentionVariant.IDENTITY_VALUE.value
    score_activation: str = "tanh"
    feature_activation: str = "tanh"
    alignment: str = "wrap"
    case: str | None = None  # window layout the model was built for, if any
    seed: int = 0
    lr: float = 1e-3
    batch_size: int = 8
    patience: int = 10
    max_epochs: int = 50
    max_batches_per_epoch: int | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        self.patch_sizes = [int(p) for p in self.patch_sizes]
        self.variant = AttentionVariant(self.variant).value

    @property
    def m_p(self) -> int:
        return len(self.patch_sizes)

    def level_ratios(self) -> list[int]:
        ratios = [1]
        for ps in self.patch_sizes:
            ratios.append(ratios[-1] * ps)
        return ratios

    def level_lengths(self) -> list[int]:
        lengths = [self.input_len]
        for ps in self.patch_sizes:
            lengths.append(-(-lengths[-1] // ps))
        return lengths

    def validate(self) -> XGPAConfig:
        if self.input_len < 2:
            raise ConfigError(f"input_len must be at least 2, got {self.input_len}")
        if self.horizon < 1:
            raise ConfigError(f"horizon must be at least 1, got {self.horizon}")
        if self.m_gc < 0:
            raise ConfigError(f"m_gc must be nonnegative, got {self.m_gc}")
        if self.d_in < 1 or self.d_hidden < 1:
            raise ConfigError("feature widths must be positive")
        bad = [p for p in self.patch_sizes if p < 2]
        if bad:
            raise ConfigError(f"patch sizes must be at least 2, got {bad}")
        shortest = self.level_lengths()[-1]
        if not 1 <= self.k <= shortest - 1:
            raise ConfigError(
                f"top-k count {self.k} must lie in 1..{shortest - 1} (L-1 of the shortest pyramid level)"
            )
        if self.alignment not in ALIGNMENTS:
            raise ConfigError(f"alignment must be one of {ALIGNMENTS}, got {self.alignment!r}")
        for name in ("score_activation", "feature_activation"):
            if getattr(self, name) not in ("tanh", "sigmoid", "identity"):
                raise ConfigError(f"{name} must be tanh, sigmoid or identity")
        if self.lr < 0 or self.batch_size < 1 or self.patience < 1 or self.max_epochs < 0:
            raise ConfigError("optimizer settings out of range")
        return self

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> XGPAConfig:
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown model config fields: {unknown}")
        return cls(**d).validate()


def forecast_positions(input_len: int, horizon: int, ratio: int, level_len: int, alignment: str) -> np.ndarray:
    """Pseudo-time index feeding each forecast step at a level compressed by ``ratio``.

    ``wrap`` continues the window circularly: future step h sits at raw time
    ``L + h``, i.e. pseudo position ``(L + h) // ratio`` modulo the level length.
    ``tail`` reads the last ``ceil(Q / ratio)`` pseudo steps and repeats each
    ``ratio`` times.
    """
    h = np.arange(horizon)
    if alignment == "wrap":
        return ((input_len + h) // ratio) % level_len
    n = -(-horizon // ratio)
    return np.clip(level_len - n + h // ratio, 0, level_len - 1)


Cell = tuple[int, int]


@dataclass
class FeatureMapGrid:
    """Per-cell features and the attention state needed to explain or replay a forward."""

    cells: dict[Cell, Tensor]
    outputs: dict[Cell, Tensor]
    alphas: list[np.ndarray]  # per graph layer, [B, E, L]
    patch_scores: dict[Cell, np.ndarray]  # (i, j) -> scores of the level producing cell (i, j), [B, N, P, ps]
    delays: dict[Cell, np.ndarray]  # [B, k]
    scores: dict[Cell, np.ndarray]  # [B, k]
    positions: dict[Cell, np.ndarray]  # [Q]
    cam_weights: np.ndarray  # [B, cells] in cell_order
    cell_order: list[Cell]
    retained: bool = True

    @property
    def batch_size(self) -> int:
        return self.cam_weights.shape[0]

    def weight(self, cell: Cell, b: int = 0) -> float:
        return float(self.cam_weights[b, self.cell_order.index(cell)])


class CAMNetwork(Module):
    """Scores a cell from its mean-pooled features; ``exp`` of the score is its fusion weight."""

    def __init__(self, rng: np.random.Generator, dim: int, num_cells: int):
        self.hidden = Linear(rng, dim, dim)
        self.out = Linear(rng, dim, 1)
        self.cell_bias = parameter(np.zeros(num_cells))

    def score(self, feats: Tensor, cell_index: int) -> Tensor:
        pooled = T.reduce_mean(feats, axis=(1, 2))  # [B, D]
        s = self.out(T.tanh(self.hidden(pooled)))
        s = T.reshape(s, (s.shape[0],))
        return s + T.slice_axis(self.cell_bias, cell_index, cell_index + 1)


class XGPAModel(Module):
    def __init__(self, config: XGPAConfig):
        self.config = config.validate()
        c = config
        rng = np.random.default_rng(c.seed)
        variant = AttentionVariant(c.variant)
        self.embed = Linear(rng, c.d_in, c.d_hidden)
        self.graph_layers = [
            GraphAttentionLayer(rng, c.d_hidden, variant, c.score_activation, c.feature_activation)
            for _ in range(c.m_gc)
        ]
        self.patch_layers = [PatchAttentionLayer(rng, c.d_hidden, ps, variant, c.score_activation) for ps in c.patch_sizes]
        self.heads = [
            [AutocorrAttentionLayer(rng, c.d_hidden, c.k, variant) for _ in range(c.m_p + 1)] for _ in range(c.m_gc + 1)
        ]
        self.cam = CAMNetwork(rng, c.d_hidden, self.num_cells)
        self.head = Linear(rng, c.d_hidden, c.d_in)
        self.head.weight.data[...] = 0.0
        self.norm_mean: np.ndarray | None = None
        self.norm_std: np.ndarray | None = None
        ratios, lengths = c.level_ratios(), c.level_lengths()
        self._positions = [forecast_positions(c.input_len, c.horizon, r, n, c.alignment) for r, n in zip(ratios, lengths)]

    @property
    def num_cells(self) -> int:
        return (self.config.m_gc + 1) * (self.config.m_p + 1)

    def cell_order(self) -> list[Cell]:
        return [(i, j) for i in range(self.config.m_gc + 1) for j in range(self.config.m_p + 1)]

    def set_normalization(self, mean: np.ndarray, std: np.ndarray) -> None:
        mean = np.asarray(mean, dtype=np.float64)
        std = np.asarray(std, dtype=np.float64)
        if mean.ndim != 2 or mean.shape[1] != self.config.d_in or mean.shape != std.shape:
            raise ShapeError(f"normalization stats must be [N, {self.config.d_in}], got {mean.shape} and {std.shape}")
        self.norm_mean, self.norm_std = mean.copy(), std.copy()

    def forward(self, x, graph: TrafficGraph, retain: bool = True, replay: FeatureMapGrid | None = None):
        """x: [N, L, D_in] or [B, N, L, D_in] (normalized) -> (prediction, grid, cam weights).

        ``replay`` reuses a grid's attention coefficients, delays, scores and CAM
        weights as constants, which makes the map from ``x`` to the prediction
        exactly affine under identity-value variants.
        """
        c = self.config
        x = T.as_tensor(x)
        squeeze = x.ndim == 3
        if squeeze:
            x = T.expand_dims(x, 0)
        if x.ndim != 4:
            raise ShapeError(f"expected input [N, L, D_in] or [B, N, L, D_in], got {x.shape}")
        _, n, length, d_in = x.shape
        if length != c.input_len or d_in != c.d_in:
            raise ShapeError(f"input window (L={length}, D_in={d_in}) does not match config (L={c.input_len}, D_in={c.d_in})")
        if n != graph.num_nodes:
            raise ShapeError(f"input has {n} nodes but the graph has {graph.num_nodes}")
        if replay is not None and replay.batch_size != x.shape[0]:
            raise ContractError("replayed grid was recorded on a different batch size")

        h = self.embed(x)
        spatial = [h]
        alphas = []
        for i, layer in enumerate(self.graph_layers):
            h, alpha = layer(h, graph, alpha=None if replay is None else replay.alphas[i])
            spatial.append(h)
            alphas.append(alpha.data)

        order = self.cell_order()
        cells: dict[Cell, Tensor] = {}
        outputs: dict[Cell, Tensor] = {}
        patch_scores, delays, scores, positions = {}, {}, {}, {}
        cam_logits = []
        for i, hi in enumerate(spatial):
            seq = hi
            for j in range(c.m_p + 1):
                if j > 0:
                    seq, ps = self.patch_layers[j - 1](seq, scores=None if replay is None else replay.patch_scores[(i, j)])
                    patch_scores[(i, j)] = ps.data
                cells[(i, j)] = seq
                pos = self._positions[j]
                out, dl, s = self.heads[i][j](
                    seq,
                    positions=pos,
                    delays=None if replay is None else replay.delays[(i, j)],
                    scores=None if replay is None else replay.scores[(i, j)],
                )
                outputs[(i, j)] = out
                delays[(i, j)], scores[(i, j)], positions[(i, j)] = dl, s.data, pos
                if replay is None:
                    cam_logits.append(self.cam.score(out, order.index((i, j))))

        if replay is None:
            w = T.exp(T.stack(cam_logits, axis=1))  # [B, cells]
        else:
            w = Tensor(replay.cam_weights)
        fused = None
        for idx, cell in enumerate(order):
            wc = T.reshape(T.slice_axis(w, idx, idx + 1, axis=1), (w.shape[0], 1, 1, 1))
            term = wc * outputs[cell]
            fused = term if fused is None else fused + term
        pred = self.head(fused)

        grid = FeatureMapGrid(
            cells=cells,
            outputs=outputs,
            alphas=alphas,
            patch_scores=patch_scores,
            delays=delays,
            scores=scores,
            positions=positions,
            cam_weights=w.data,
            cell_order=order,
            retained=retain,
        )
        if squeeze:
            pred = T.reshape(pred, pred.shape[1:])
        return pred, grid, w.data[0] if squeeze else w.data

    __call__ = forward

    def fused_features(self, grid: FeatureMapGrid) -> Tensor:
        """Pre-head fused feature ``sum_c w_c * chi'_c`` for an existing grid."""
        out = None
        for idx, cell in enumerate(grid.cell_order):
            wc = grid.cam_weights[:, idx].reshape(-1, 1, 1, 1)
            term = Tensor(wc) * grid.outputs[cell]
            out = term if out is None else out + term
        return out

    def gain(self) -> np.ndarray:
        """Linear map from an input channel to an output channel through embed and head: [D_in, D_in]."""
        return self.embed.weight.data @ self.head.weight.data


def forward(model: XGPAModel, x, graph: TrafficGraph, retain: bool = True, replay: FeatureMapGrid | None = None):
    return model.forward(x, graph, retain=retain, replay=replay)


# --- explanation -----------------------------------------------------------------


def chained_attention(grid: FeatureMapGrid, graph: TrafficGraph, layers: int, b: int = 0) -> np.ndarray:
    """Effective node-to-node coefficients after ``layers`` graph layers: [L, N, N] per time step."""
    n = graph.num_nodes
    length = grid.cells[(0, 0)].shape[2]
    eff = np.broadcast_to(np.eye(n), (length, n, n)).copy()
    for alpha in grid.alphas[:layers]:
        dense = np.zeros((length, n, n))
        dense[:, graph.src, graph.dst] = alpha[b].T
        eff = dense @ eff
    return eff


def patch_coefficients(grid: FeatureMapGrid, cell: Cell, input_len: int, b: int = 0) -> np.ndarray:
    """Weights of raw steps inside each pseudo step of ``cell``: [N, L_j, L] (rows sum to 1)."""
    i, j = cell
    n = grid.cells[(0, 0)].shape[1]
    coef = np.broadcast_to(np.eye(input_len), (n, input_len, input_len)).copy()
    for level in range(1, j + 1):
        s = grid.patch_scores[(i, level)][b]  # [N, P, ps]
        p, ps = s.shape[1], s.shape[2]
        prev = coef.shape[1]
        idx = np.minimum(np.arange(p * ps), prev - 1)  # padded frames repeat the last one
        gathered = coef[:, idx, :].reshape(n, p, ps, input_len)
        coef = np.einsum("nps,npsl->npl", s, gathered)
    return coef


def cell_coefficients(grid: FeatureMapGrid, graph: TrafficGraph, cell: Cell, input_len: int, b: int = 0) -> np.ndarray:
    """Coefficient of cell input (node l, raw step t) in the cell output (node k, step p): [N, Q, N, L].

    Exact under identity-value variants with the grid's scores held fixed.
    """
    i, _ = cell
    eff = chained_attention(grid, graph, i, b)  # [L, N, N]
    patch = patch_coefficients(grid, cell, input_len, b)  # [N, L_j, L]
    level_len = patch.shape[1]
    delays, scores, pos = grid.delays[cell][b], grid.scores[cell][b], grid.positions[cell]
    n, q = graph.num_nodes, pos.size
    temporal = np.zeros((n, q, input_len))
    for tau, s in zip(delays, scores):
        temporal += s * patch[:, (pos + tau) % level_len, :]
    # out[k, p] = sum_t temporal[k, p, t] * sum_l eff[t, k, l] * in[l, t]
    return np.einsum("kpt,tkl->kplt", temporal, eff)


def input_coefficients(model: XGPAModel, grid: FeatureMapGrid, graph: TrafficGraph, b: int = 0) -> np.ndarray:
    """d prediction[k, p, e] / d input[l, t, a] for the normalized model: [N, Q, D_in, N, L, D_in].

    Holds exactly when the grid's scores are replayed; under live scores it is
    the attention-weighted part of the Jacobian.
    """
    _require_linear(model, grid)
    c = model.config
    total = None
    for idx, cell in enumerate(grid.cell_order):
        term = grid.cam_weights[b, idx] * cell_coefficients(grid, graph, cell, c.input_len, b)
        total = term if total is None else total + term
    return np.einsum("kplt,ae->kpelta", total, model.gain())


def _require_linear(model: XGPAModel, grid: FeatureMapGrid) -> None:
    if not grid.retained:
        raise ContractError("explanation requested from a forward run without score retention")
    if not AttentionVariant(model.config.variant).identity_value:
        raise ContractError("exact input coefficients need an identity-value attention variant")


@dataclass
class CellExplanation:
    cell: Cell
    cam_weight: float
    delays: list[int]
    scores: list[float]
    positions: list[int]  # pseudo-time index read by each delay for this step
    spatial: dict[int, float]  # chained alpha_kl at the time step each delay reads (first delay)
    importances: list[dict[str, Any]]  # rows: node l, step t, delay q, S_q, alpha_kl, patch weight, importance

    def total_importance(self) -> float:
        return float(sum(r["importance"] for r in self.importances))


@dataclass
class Explanation:
    node: int
    step: int
    spatial: dict[int, float]  # chained alpha_kl over all graph layers at the last input step
    cells: list[CellExplanation]
    cam_weights: dict[str, float]

    def to_dict(self, node_ids: list[str] | None = None) -> dict[str, Any]:
        name = (lambda i: node_ids[i]) if node_ids else (lambda i: i)
        return {
            "node": name(self.node),
            "horizon_step": self.step,
            "spatial": {str(name(l)): a for l, a in self.spatial.items()},
            "cam_weights": self.cam_weights,
            "cells": [
                {
                    "cell": list(ce.cell),
                    "cam_weight": ce.cam_weight,
                    "delays": ce.delays,
                    "scores": ce.scores,
                    "positions": ce.positions,
                    "spatial": {str(name(l)): a for l, a in ce.spatial.items()},
                    "importances": [dict(r, node=name(r["node"])) for r in ce.importances],
                }
                for ce in self.cells
            ],
        }


def extract_explanation(
    model: XGPAModel, grid: FeatureMapGrid, graph: TrafficGraph, node: int, step: int, b: int = 0
) -> Explanation:
    """Importance of (node l, step p + tau_q) for the prediction at (node k, step p) as ``S_q * alpha_kl``.

    Graph layers are composed by multiplying their coefficient matrices per
    time step.  Cells above pyramid level 0 read pseudo steps; their rows are
    expanded back to raw steps through the retained patch scores.
    """
    if not grid.retained:
        raise ContractError("explanation requested from a forward run without score retention")
    c = model.config
    if not 0 <= node < graph.num_nodes:
        raise IndexError(f"node {node} outside 0..{graph.num_nodes - 1}")
    if not 0 <= step < c.horizon:
        raise IndexError(f"horizon step {step} outside 0..{c.horizon - 1}")
    length = c.input_len
    cells = []
    for idx, cell in enumerate(grid.cell_order):
        i, j = cell
        eff = chained_attention(grid, graph, i, b)
        patch = patch_coefficients(grid, cell, length, b)[node]  # [L_j, L]
        level_len = patch.shape[0]
        delays = grid.delays[cell][b]
        scores = grid.scores[cell][b]
        pos = int(grid.positions[cell][step])
        rows = []
        read = []
        for q, (tau, s) in enumerate(zip(delays, scores)):
            m = (pos + int(tau)) % level_len
            read.append(m)
            for t in np.flatnonzero(patch[m]):
                for l in np.flatnonzero(eff[t, node]):
                    rows.append(
                        {
                            "node": int(l),
                            "step": int(t),
                            "delay_index": q,
                            "delay": int(tau),
                            "score": float(s),
                            "alpha": float(eff[t, node, l]),
                            "patch_weight": float(patch[m, t]),
                            "importance": float(s * patch[m, t] * eff[t, node, l]),
                        }
                    )
        t0 = int(np.argmax(patch[read[0]])) if read else length - 1
        spatial_cell = {int(l): float(eff[t0, node, l]) for l in np.flatnonzero(eff[t0, node])}
        cells.append(
            CellExplanation(
                cell=cell,
                cam_weight=float(grid.cam_weights[b, idx]),
                delays=[int(d) for d in delays],
                scores=[float(s) for s in scores],
                positions=read,
                spatial=spatial_cell,
                importances=rows,
            )
        )
    eff = chained_attention(grid, graph, c.m_gc, b)
    spatial = {int(l): float(eff[-1, node, l]) for l in np.flatnonzero(eff[-1, node])}
    cam = {f"{i},{j}": float(grid.cam_weights[b, idx]) for idx, (i, j) in enumerate(grid.cell_order)}
    return Explanation(node=node, step=step, spatial=spatial, cells=cells, cam_weights=cam)
