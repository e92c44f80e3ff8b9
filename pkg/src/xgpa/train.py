"""Training loop, per-horizon MAE, and the historical-average baseline."""

from __future__ import annotations

import logging
import time
import warnings
from dataclasses import asdict, dataclass, field
from typing import Any

import numpy as np

from . import tensor as T
from .data import TrafficDataset, WindowSet, WindowSpec, make_windows
from .errors import ContractError, DivergenceError
from .model import XGPAModel
from .optim import Adam
from .spatial import TrafficGraph
from .tensor import Tensor

log = logging.getLogger(__name__)

BUCKETS_MIN = (15, 30, 60, 120, 240, 480, 720)


def bucket_label(minutes: int) -> str:
    return f"{minutes}min" if minutes < 60 else f"{minutes // 60}h"


@dataclass
class HorizonMAE:
    resolution_min: int
    per_step: list[float]  # index h -> MAE at lead (h + 1) * resolution
    buckets: dict[str, float]

    @classmethod
    def from_per_step(cls, per_step: np.ndarray, resolution_min: int) -> HorizonMAE:
        per_step = np.asarray(per_step, dtype=np.float64)
        lead = (np.arange(per_step.size) + 1) * resolution_min
        buckets = {}
        prev = 0
        for b in BUCKETS_MIN:
            sel = (lead > prev) & (lead <= b)
            if sel.any():
                buckets[bucket_label(b)] = float(per_step[sel].mean())
            prev = b
        return cls(resolution_min, [float(v) for v in per_step], buckets)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def evaluate_mae(predictions, targets, resolution_min: int = 30) -> HorizonMAE:
    """Per-step MAE averaged over windows, nodes and channels. Inputs [W, N, Q, D] or [N, Q, D]."""
    p = np.asarray(predictions, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if p.shape != t.shape:
        raise ContractError(f"prediction shape {p.shape} does not match target shape {t.shape}")
    if p.ndim == 3:
        p, t = p[None], t[None]
    if p.ndim != 4:
        raise ContractError(f"expected [W, N, Q, D] or [N, Q, D], got {p.shape}")
    err = np.abs(p - t)
    return HorizonMAE.from_per_step(err.mean(axis=(0, 1, 3)), resolution_min)


def ha_forecast(dataset: TrafficDataset, spec: WindowSpec, split_name: str) -> np.ndarray:
    """Same-time-of-week mean over whole weeks before each forecast time, inside the split: [W, N, Q, 1].

    Slots without any earlier observation in the split fall back to the node's training mean.
    """
    windows = make_windows(dataset, spec, split_name)
    lo, _ = dataset.split_range(split_name)
    week = dataset.steps_per_week
    mean, _ = dataset.normalization()
    out = np.empty((len(windows), dataset.num_nodes, spec.horizon, 1))
    for w, origin in enumerate(windows.target_starts):
        for h in range(spec.horizon):
            t = int(origin) + h
            back = t - week * np.arange(1, t // week + 2)
            back = back[(back >= lo) & (back < origin)]
            out[w, :, h, 0] = dataset.speeds[:, back].mean(axis=1) if back.size else mean[:, 0]
    return out


def window_targets(windows: WindowSet) -> np.ndarray:
    if len(windows) == 0:
        return np.zeros((0, windows.dataset.num_nodes, windows.spec.horizon, 1))
    return windows.batch(np.arange(len(windows)))[1]


def predict_windows(model: XGPAModel, graph: TrafficGraph, windows: WindowSet, batch_size: int = 16) -> np.ndarray:
    """Predictions in mph for every window: [W, N, Q, D_in]."""
    mean, std = _stats(model, windows.dataset)
    norm = make_windows(windows.dataset, windows.spec, windows.split_name, normalize=True)
    out = []
    with T.no_grad():
        for lo in range(0, len(norm), batch_size):
            x, _ = norm.batch(np.arange(lo, min(lo + batch_size, len(norm))))
            pred, _, _ = model(x, graph, retain=False)
            out.append(pred.data * std[..., None] + mean[..., None])
    if not out:
        return np.zeros((0, windows.dataset.num_nodes, windows.spec.horizon, model.config.d_in))
    return np.concatenate(out, axis=0)


def _stats(model: XGPAModel, dataset: TrafficDataset) -> tuple[np.ndarray, np.ndarray]:
    if model.norm_mean is not None:
        if model.norm_mean.shape[0] != dataset.num_nodes:
            raise ContractError(f"model normalization covers {model.norm_mean.shape[0]} nodes, dataset has {dataset.num_nodes}")
        return model.norm_mean, model.norm_std
    return dataset.normalization()


def predict(model: XGPAModel, dataset: TrafficDataset, window_start: int, graph: TrafficGraph, spec: WindowSpec | None = None) -> np.ndarray:
    """Forecast [N, Q, D_in] in mph for the window whose history begins at ``window_start``."""
    c = model.config
    if spec is None:
        spec = WindowSpec("custom", c.input_len, c.horizon)
    if spec.input_len != c.input_len or spec.horizon != c.horizon:
        raise ContractError(f"window layout (L={spec.input_len}, Q={spec.horizon}) does not match the model (L={c.input_len}, Q={c.horizon})")
    if c.d_in != 1:
        raise ContractError(f"datasets carry one speed channel but the model expects D_in={c.d_in}")
    origin = int(window_start) + spec.lookback
    if window_start < 0 or origin > dataset.num_steps:
        raise IndexError(f"window starting at {window_start} needs steps up to {origin}, dataset has {dataset.num_steps}")
    mean, std = _stats(model, dataset)
    x = dataset.speeds[:, spec.input_indices(origin)][..., None]
    x = (x - mean[:, None, :]) / std[:, None, :]
    with T.no_grad():
        pred, _, _ = model(x, graph, retain=False)
    return pred.data * std[:, None, :] + mean[:, None, :]


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_mae: float
    wall_time: float


@dataclass
class TrainReport:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_val_mae: float = float("inf")
    initial_val_mae: float = float("inf")
    validation_source: str = "val"
    improved: bool = False
    test: HorizonMAE | None = None
    ha_test: HorizonMAE | None = None

    def to_dict(self, include_timing: bool = True) -> dict[str, Any]:
        d = asdict(self)
        if not include_timing:
            for e in d["epochs"]:
                e.pop("wall_time")
        return d


def _loss(pred: Tensor, y: np.ndarray, std: np.ndarray) -> Tensor:
    """Mean absolute error in mph for normalized predictions and targets."""
    scale = Tensor(np.broadcast_to(std[:, None, :], pred.shape[1:]))
    return T.reduce_mean(T.absolute(pred - Tensor(y)) * scale)


def _mae(model, graph, windows: WindowSet, std, batch_size: int, max_windows: int | None = None) -> float:
    n = len(windows) if max_windows is None else min(len(windows), max_windows)
    total = 0.0
    with T.no_grad():
        for lo in range(0, n, batch_size):
            x, y = windows.batch(np.arange(lo, min(lo + batch_size, n)))
            pred, _, _ = model(x, graph, retain=False)
            total += float(np.sum(np.abs(pred.data - y) * std[None, :, None, :]))
    return total / (n * windows.dataset.num_nodes * windows.spec.horizon * model.config.d_in)


def train(
    model: XGPAModel,
    dataset: TrafficDataset,
    graph: TrafficGraph,
    spec: WindowSpec,
    *,
    evaluate_test: bool = True,
    max_eval_windows: int | None = None,
) -> TrainReport:
    """Minimize MAE on training windows with Adam; early stop on validation MAE and restore the best epoch."""
    c = model.config
    if spec.input_len != c.input_len or spec.horizon != c.horizon:
        raise ContractError(f"window layout (L={spec.input_len}, Q={spec.horizon}) does not match the model (L={c.input_len}, Q={c.horizon})")
    if graph.num_nodes != dataset.num_nodes or list(graph.node_ids) != list(dataset.node_ids):
        raise ContractError("graph and dataset node ids differ")
    mean, std = dataset.normalization()
    model.set_normalization(mean, std)
    train_w = make_windows(dataset, spec, "train", normalize=True)
    if len(train_w) == 0:
        raise ContractError("no training windows: training split shorter than lookback + horizon")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        val_w = make_windows(dataset, spec, "val", normalize=True)
    report = TrainReport()
    if len(val_w) == 0:
        warnings.warn("validation split has no windows; early stopping monitors training MAE instead", stacklevel=2)
        val_w, report.validation_source = train_w, "train"

    rng = np.random.default_rng(c.seed)
    params = model.parameters()
    opt = Adam(params, c.lr, c.beta1, c.beta2, c.eps)
    best = [p.data.copy() for p in params]
    report.initial_val_mae = report.best_val_mae = _mae(model, graph, val_w, std, c.batch_size, max_eval_windows)
    stale = 0
    step = 0
    for epoch in range(1, c.max_epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(train_w))
        batches = [order[i : i + c.batch_size] for i in range(0, len(order), c.batch_size)]
        if c.max_batches_per_epoch is not None:
            batches = batches[: c.max_batches_per_epoch]
        losses = []
        for idx in batches:
            x, y = train_w.batch(np.sort(idx))
            opt.zero_grad()
            pred, _, _ = model(x, graph, retain=False)
            loss = _loss(pred, y, std)
            if not np.isfinite(loss.item()):
                raise DivergenceError(f"non-finite training loss at step {step} (epoch {epoch})", step)
            loss.backward()
            opt.step()
            losses.append(loss.item())
            step += 1
        val = _mae(model, graph, val_w, std, c.batch_size, max_eval_windows)
        if not np.isfinite(val):
            raise DivergenceError(f"non-finite validation MAE after step {step} (epoch {epoch})", step)
        report.epochs.append(EpochRecord(epoch, float(np.mean(losses)), val, time.perf_counter() - t0))
        log.info("epoch %d train %.4f val %.4f", epoch, report.epochs[-1].train_loss, val)
        if val < report.best_val_mae:
            report.best_val_mae, report.best_epoch, stale = val, epoch, 0
            best = [p.data.copy() for p in params]
        else:
            stale += 1
            if stale >= c.patience:
                break
    for p, b in zip(params, best):
        p.data[...] = b
    report.improved = report.best_val_mae < report.initial_val_mae

    if evaluate_test:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            test_w = make_windows(dataset, spec, "test")
        if len(test_w):
            report.test = evaluate_mae(predict_windows(model, graph, test_w, c.batch_size), window_targets(test_w), dataset.resolution_min)
            report.ha_test = evaluate_mae(ha_forecast(dataset, spec, "test"), window_targets(test_w), dataset.resolution_min)
    return report
