"""Synthetic traffic generation, CSV ingestion, splits and forecasting windows."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import asdict, dataclass, field
from datetime import datetime, timedelta
from pathlib import Path
from typing import Any, Iterator

import numpy as np

from .errors import ConfigError, FormatError, IngestionError
from .spatial import TrafficGraph

TOPOLOGIES = ("ring", "grid", "two-highway-cross")
CASES = ("case1", "case2", "case3", "case4")
MINUTES_PER_DAY = 1440


@dataclass
class SyntheticSpec:
    topology: str = "ring"
    num_nodes: int = 20
    weeks: int = 10
    resolution_min: int = 30
    base_speed: float = 65.0
    dip_depth: float = 25.0
    dip_width_min: float = 60.0
    morning_peak_hour: float = 8.0
    evening_peak_hour: float = 17.5
    weekend_factor: float = 0.3
    node_spacing_m: float = 1500.0
    event_rate_per_day: float = 0.15
    event_depth: float = 15.0
    event_duration_min: float = 90.0
    propagation_speed_kmh: float = 20.0
    propagation_hops: int = 2
    noise_std: float = 2.0
    seed: int = 0
    start: str = "2017-01-02T00:00:00"

    def validate(self) -> SyntheticSpec:
        problems = []
        if self.topology not in TOPOLOGIES:
            problems.append(f"topology: must be one of {TOPOLOGIES}, got {self.topology!r}")
        if self.num_nodes < 2:
            problems.append("num_nodes: must be at least 2")
        if self.topology == "two-highway-cross" and self.num_nodes < 3:
            problems.append("num_nodes: two-highway-cross needs at least 3 nodes")
        if self.weeks < 1:
            problems.append("weeks: must be at least 1")
        if self.resolution_min < 1 or MINUTES_PER_DAY % self.resolution_min:
            problems.append("resolution_min: must be a positive divisor of 1440")
        for name in ("base_speed", "dip_depth", "dip_width_min", "node_spacing_m", "event_duration_min", "propagation_speed_kmh"):
            if not getattr(self, name) > 0:
                problems.append(f"{name}: must be positive")
        for name in ("weekend_factor", "event_rate_per_day", "event_depth", "noise_std"):
            if getattr(self, name) < 0:
                problems.append(f"{name}: must be nonnegative")
        if self.propagation_hops < 0:
            problems.append("propagation_hops: must be nonnegative")
        if self.dip_depth >= self.base_speed:
            problems.append(f"dip_depth: {self.dip_depth} must be below base_speed {self.base_speed}")
        try:
            datetime.fromisoformat(self.start)
        except ValueError:
            problems.append(f"start: not an ISO-8601 timestamp: {self.start!r}")
        if problems:
            raise ConfigError("invalid synthetic spec: " + "; ".join(problems))
        return self

    @property
    def steps_per_day(self) -> int:
        return MINUTES_PER_DAY // self.resolution_min

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> SyntheticSpec:
        unknown = sorted(set(d) - set(cls.__dataclass_fields__))
        if unknown:
            raise ConfigError(f"invalid synthetic spec: unknown fields {unknown}")
        return cls(**d).validate()


@dataclass(frozen=True)
class SplitBounds:
    train: tuple[int, int]
    val: tuple[int, int]
    test: tuple[int, int]

    def range(self, name: str) -> tuple[int, int]:
        if name not in ("train", "val", "test"):
            raise ValueError(f"unknown split {name!r}")
        return getattr(self, name)


@dataclass(eq=False)
class TrafficDataset:
    node_ids: list[str]
    resolution_min: int
    start: datetime
    speeds: np.ndarray  # [N, T] mph
    bounds: SplitBounds | None = None
    _mean: np.ndarray | None = field(default=None, repr=False)
    _std: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.speeds = np.asarray(self.speeds, dtype=np.float64)
        if self.speeds.ndim != 2 or self.speeds.shape[0] != len(self.node_ids):
            raise FormatError(f"speeds must be [N={len(self.node_ids)}, T], got {self.speeds.shape}")
        if not np.all(np.isfinite(self.speeds)) or np.any(self.speeds < 0):
            raise FormatError("speeds must be finite and nonnegative")
        if self.resolution_min < 1 or MINUTES_PER_DAY % self.resolution_min:
            raise FormatError(f"resolution {self.resolution_min} min does not divide a day")
        if self.bounds is None and self.num_steps >= 3 * self.steps_per_day:
            self.bounds = split(self)

    @property
    def num_nodes(self) -> int:
        return self.speeds.shape[0]

    @property
    def num_steps(self) -> int:
        return self.speeds.shape[1]

    @property
    def steps_per_day(self) -> int:
        return MINUTES_PER_DAY // self.resolution_min

    @property
    def steps_per_week(self) -> int:
        return 7 * self.steps_per_day

    def timestamp(self, index: int) -> datetime:
        return self.start + timedelta(minutes=self.resolution_min * int(index))

    def index_at(self, when: datetime | str) -> int:
        if isinstance(when, str):
            when = datetime.fromisoformat(when)
        minutes = (when - self.start).total_seconds() / 60.0
        idx = minutes / self.resolution_min
        if idx != int(idx):
            raise ValueError(f"{when.isoformat()} is not on the {self.resolution_min}-minute grid")
        return int(idx)

    def split_range(self, name: str) -> tuple[int, int]:
        if self.bounds is None:
            raise ConfigError(f"dataset spans {self.num_steps} steps, too short for a train/val/test split (3 days minimum)")
        return self.bounds.range(name)

    def with_split(self, fractions=(0.7, 0.1, 0.2)) -> TrafficDataset:
        return TrafficDataset(self.node_ids, self.resolution_min, self.start, self.speeds, split(self, fractions))

    def normalization(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-node mean and std over the training range: two [N, 1] arrays."""
        if self._mean is None:
            lo, hi = self.split_range("train")
            if hi <= lo:
                raise ConfigError("training split is empty; normalization needs training data")
            seg = self.speeds[:, lo:hi]
            std = seg.std(axis=1)
            self._mean = seg.mean(axis=1)[:, None]
            self._std = np.where(std > 1e-8, std, 1.0)[:, None]
        return self._mean, self._std


def split(dataset: TrafficDataset, fractions=(0.7, 0.1, 0.2)) -> SplitBounds:
    """Chronological train/val/test ranges with boundaries rounded down to whole days."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"split fractions must be three nonnegative numbers summing to 1, got {fractions}")
    total = dataset.num_steps
    day = dataset.steps_per_day
    if total < 3 * day:
        raise ValueError(f"dataset spans {total} steps, shorter than 3 days ({3 * day} steps)")
    a = int(math.floor(total * fractions[0] / day + 1e-9)) * day
    b = int(math.floor(total * (fractions[0] + fractions[1]) / day + 1e-9)) * day
    if fractions[1] == 0 and fractions[2] == 0:
        a = b = total
    return SplitBounds(train=(0, a), val=(a, b), test=(b, total))


# --- synthetic generation -------------------------------------------------------


def build_topology(spec: SyntheticSpec) -> TrafficGraph:
    n, d = spec.num_nodes, spec.node_spacing_m
    ids = [f"s{i:03d}" for i in range(n)]
    edges: list[tuple[int, int, float]] = []
    if spec.topology == "ring":
        edges = [(i, (i + 1) % n, d) for i in range(n)] if n > 2 else [(0, 1, d)]
    elif spec.topology == "grid":
        cols = int(math.ceil(math.sqrt(n)))
        for i in range(n):
            r, c = divmod(i, cols)
            if c + 1 < cols and i + 1 < n:
                edges.append((i, i + 1, d))
            if i + cols < n:
                edges.append((i, i + cols, d))
    else:
        # two straight highways sharing the middle node of the first one
        half = n // 2 + n % 2
        edges = [(i, i + 1, d) for i in range(half - 1)]
        cross = half // 2
        second = list(range(half, n))
        mid = len(second) // 2
        chain = second[:mid] + [cross] + second[mid:]
        edges += [(a, b, d) for a, b in zip(chain, chain[1:])]
    return TrafficGraph(ids, edges)


def _hop_distances(graph: TrafficGraph, max_hops: int) -> list[dict[int, tuple[int, float]]]:
    """For each source node: reachable node -> (hops, meters along the shortest-hop path)."""
    out = []
    for s in range(graph.num_nodes):
        seen = {s: (0, 0.0)}
        frontier = [s]
        for hop in range(1, max_hops + 1):
            nxt = []
            for u in frontier:
                for v in graph.neighbors(u):
                    if v not in seen:
                        seen[v] = (hop, seen[u][1] + graph.distance(u, v))
                        nxt.append(v)
            frontier = nxt
        out.append(seen)
    return out


def seasonal_profile(spec: SyntheticSpec, num_steps: int) -> np.ndarray:
    """Unit rush-hour dip profile per step (1 at the deepest point), exactly weekly periodic."""
    step = np.arange(num_steps, dtype=np.int64)
    minute = (step * spec.resolution_min) % MINUTES_PER_DAY
    weekday = ((step * spec.resolution_min) // MINUTES_PER_DAY + datetime.fromisoformat(spec.start).weekday()) % 7
    width = spec.dip_width_min
    dips = np.zeros(num_steps)
    for peak in (spec.morning_peak_hour, spec.evening_peak_hour):
        delta = minute - peak * 60.0
        dips += np.exp(-0.5 * (delta / width) ** 2)
    return np.where(weekday >= 5, spec.weekend_factor, 1.0) * dips


def generate_synthetic(spec: SyntheticSpec) -> tuple[TrafficGraph, TrafficDataset]:
    spec.validate()
    graph = build_topology(spec)
    rng = np.random.default_rng(spec.seed)
    n = spec.num_nodes
    total = spec.weeks * 7 * spec.steps_per_day
    offsets = rng.normal(0.0, 2.0, size=n)
    depth = spec.dip_depth * rng.uniform(0.7, 1.3, size=n)
    depth = np.minimum(depth, spec.base_speed + offsets - 1.0)
    speeds = (spec.base_speed + offsets)[:, None] - depth[:, None] * seasonal_profile(spec, total)[None, :]

    if spec.event_rate_per_day > 0 and spec.event_depth > 0:
        reach = _hop_distances(graph, spec.propagation_hops)
        days = total / spec.steps_per_day
        t = np.arange(total) * float(spec.resolution_min)
        sigma = spec.event_duration_min / 2.0
        meters_per_min = spec.propagation_speed_kmh * 1000.0 / 60.0
        for origin in range(n):
            count = rng.poisson(spec.event_rate_per_day * days)
            starts = rng.uniform(0.0, total * spec.resolution_min, size=count)
            mags = spec.event_depth * rng.uniform(0.5, 1.0, size=count)
            for t0, mag in zip(starts, mags):
                for node, (hops, meters) in reach[origin].items():
                    centre = t0 + meters / meters_per_min
                    lo = np.searchsorted(t, centre - 4 * sigma)
                    hi = np.searchsorted(t, centre + 4 * sigma)
                    bump = np.exp(-0.5 * ((t[lo:hi] - centre) / sigma) ** 2)
                    speeds[node, lo:hi] -= mag * (0.5 ** hops) * bump

    if spec.noise_std > 0:
        speeds = speeds + rng.normal(0.0, spec.noise_std, size=speeds.shape)
    speeds = np.round(np.clip(speeds, 0.0, None), 3)
    speeds[speeds == 0] = 0.0  # drop negative zeros
    dataset = TrafficDataset(graph.node_ids, spec.resolution_min, datetime.fromisoformat(spec.start), speeds)
    return graph, dataset


# --- CSV ------------------------------------------------------------------------


def _fmt(v: float) -> str:
    return np.format_float_positional(float(v), trim="-")


def load_csv(speeds_path: str | Path, graph_path: str | Path) -> tuple[TrafficGraph, TrafficDataset]:
    speeds_path, graph_path = Path(speeds_path), Path(graph_path)
    for p in (speeds_path, graph_path):
        if not p.is_file():
            raise FileNotFoundError(f"no such file: {p}")
    with speeds_path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or not rows[0] or rows[0][0].strip() != "timestamp":
        raise FormatError(f"{speeds_path}: header must start with 'timestamp'")
    node_ids = [c.strip() for c in rows[0][1:]]
    if not node_ids or len(set(node_ids)) != len(node_ids):
        raise FormatError(f"{speeds_path}: header needs distinct node ids")
    body = [r for r in rows[1:] if any(c.strip() for c in r)]
    if len(body) < 2:
        raise FormatError(f"{speeds_path}: need at least two timestamped rows")
    stamps = []
    values = np.full((len(node_ids), len(body)), np.nan)
    for i, r in enumerate(body):
        line = i + 2
        if len(r) != len(node_ids) + 1:
            raise FormatError(f"{speeds_path}: row {line} has {len(r)} cells, expected {len(node_ids) + 1}")
        try:
            stamps.append(datetime.fromisoformat(r[0].strip()))
        except ValueError:
            raise FormatError(f"{speeds_path}: row {line} has a bad timestamp {r[0]!r}") from None
        for j, cell in enumerate(r[1:]):
            cell = cell.strip()
            if not cell:
                continue
            try:
                v = float(cell)
            except ValueError:
                raise FormatError(f"{speeds_path}: row {line} has a non-numeric speed {cell!r}") from None
            if not math.isfinite(v) or v < 0:
                raise FormatError(f"{speeds_path}: row {line} has an invalid speed {cell}")
            values[j, i] = v
    gaps = [(b - a).total_seconds() for a, b in zip(stamps, stamps[1:])]
    for i, g in enumerate(gaps):
        if g <= 0:
            raise FormatError(f"{speeds_path}: timestamps not increasing at row {i + 3}")
        if g != gaps[0]:
            raise FormatError(f"{speeds_path}: uneven timestamp spacing at row {i + 3}")
    if gaps[0] % 60:
        raise FormatError(f"{speeds_path}: spacing must be a whole number of minutes")
    resolution = int(gaps[0] // 60)
    for j in range(len(node_ids)):
        row = values[j]
        if np.all(np.isnan(row)):
            raise FormatError(f"{speeds_path}: node {node_ids[j]!r} has no observations")
        idx = np.where(np.isnan(row), 0, np.arange(row.size))
        np.maximum.accumulate(idx, out=idx)
        row = row[idx]  # forward fill
        first = np.flatnonzero(~np.isnan(row))[0]
        row[:first] = row[first]  # back fill the leading gap
        values[j] = row

    with graph_path.open(newline="") as fh:
        grows = list(csv.reader(fh))
    if not grows or [c.strip() for c in grows[0]] != ["node_a", "node_b", "distance_m"]:
        raise FormatError(f"{graph_path}: header must be node_a,node_b,distance_m")
    index = {nid: i for i, nid in enumerate(node_ids)}
    edges, unknown = [], []
    for i, r in enumerate(grows[1:]):
        if not any(c.strip() for c in r):
            continue
        if len(r) != 3:
            raise FormatError(f"{graph_path}: row {i + 2} needs 3 cells")
        a, b = r[0].strip(), r[1].strip()
        for nid in (a, b):
            if nid not in index and nid not in unknown:
                unknown.append(nid)
        try:
            dist = float(r[2])
        except ValueError:
            raise FormatError(f"{graph_path}: row {i + 2} has a non-numeric distance {r[2]!r}") from None
        if not math.isfinite(dist) or dist < 0:
            raise FormatError(f"{graph_path}: row {i + 2} has an invalid distance {r[2]}")
        if a in index and b in index:
            edges.append((index[a], index[b], dist))
    if unknown:
        raise IngestionError(f"graph references node ids missing from the speeds file: {unknown}")
    graph = TrafficGraph(node_ids, edges)
    dataset = TrafficDataset(node_ids, resolution, stamps[0], values)
    return graph, dataset


def write_csv(graph: TrafficGraph, dataset: TrafficDataset, speeds_path: str | Path, graph_path: str | Path) -> None:
    with Path(speeds_path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["timestamp", *dataset.node_ids])
        for t in range(dataset.num_steps):
            w.writerow([dataset.timestamp(t).isoformat(), *(_fmt(v) for v in dataset.speeds[:, t])])
    with Path(graph_path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["node_a", "node_b", "distance_m"])
        for a, b, d in graph.edges:
            w.writerow([graph.node_ids[a], graph.node_ids[b], _fmt(d)])


# --- windows --------------------------------------------------------------------


@dataclass(frozen=True)
class WindowSpec:
    case: str
    input_len: int
    horizon: int
    context_offsets: tuple[int, ...] = ()  # case 2: start offsets of daily blocks, relative to the target start
    block_len: int = 0

    @classmethod
    def for_case(cls, case: str, resolution_min: int = 30) -> WindowSpec:
        if case not in CASES:
            raise ConfigError(f"unknown case {case!r}; expected one of {CASES}")
        if resolution_min < 1 or 60 % resolution_min:
            raise ConfigError(f"resolution {resolution_min} min must divide an hour")
        hour = 60 // resolution_min
        day = 24 * hour
        if case == "case1":
            return cls(case, hour, hour)
        if case == "case2":
            offsets = tuple(-d * day for d in range(7, 0, -1))
            return cls(case, 8 * hour, hour, offsets, hour)
        if case == "case3":
            return cls(case, 7 * day, hour)
        return cls(case, 7 * day, 12 * hour)

    def input_indices(self, target_start: int) -> np.ndarray:
        """Absolute time indices forming the input of the window whose first target is ``target_start``."""
        recent = np.arange(target_start - self.block_len if self.context_offsets else target_start - self.input_len, target_start)
        if not self.context_offsets:
            return recent
        blocks = [target_start + off + np.arange(self.block_len) for off in self.context_offsets]
        return np.concatenate(blocks + [recent])

    @property
    def lookback(self) -> int:
        """How far before the first target step the input reaches."""
        return -min(self.context_offsets) if self.context_offsets else self.input_len


class WindowSet:
    """Stride-1 windows inside one split; item i is (input [N, L, 1], target [N, Q, 1], target start time)."""

    def __init__(self, dataset: TrafficDataset, spec: WindowSpec, split_name: str, normalize: bool = False):
        self.dataset = dataset
        self.spec = spec
        self.split_name = split_name
        self.normalize = normalize
        lo, hi = dataset.split_range(split_name)
        first = lo + spec.lookback
        last = hi - spec.horizon
        self.target_starts = np.arange(first, last + 1) if last >= first else np.arange(0)
        if self.target_starts.size == 0:
            warnings.warn(
                f"{split_name} split ({hi - lo} steps) is shorter than lookback+horizon "
                f"({spec.lookback + spec.horizon}); no {spec.case} windows",
                stacklevel=2,
            )

    def __len__(self) -> int:
        return int(self.target_starts.size)

    def input_indices(self, i: int) -> np.ndarray:
        return self.spec.input_indices(int(self.target_starts[i]))

    def target_indices(self, i: int) -> np.ndarray:
        return int(self.target_starts[i]) + np.arange(self.spec.horizon)

    def _scale(self, values: np.ndarray) -> np.ndarray:
        if not self.normalize:
            return values
        mean, std = self.dataset.normalization()
        return (values - mean[..., None]) / std[..., None]

    def batch(self, idx) -> tuple[np.ndarray, np.ndarray]:
        """Inputs [B, N, L, 1] and targets [B, N, Q, 1] for window indices ``idx``."""
        idx = np.atleast_1d(np.asarray(idx, dtype=np.intp))
        starts = self.target_starts[idx]
        inp = np.stack([self.spec.input_indices(int(s)) for s in starts])
        tgt = starts[:, None] + np.arange(self.spec.horizon)[None, :]
        s = self.dataset.speeds
        x = np.transpose(s[:, inp], (1, 0, 2))[..., None]
        y = np.transpose(s[:, tgt], (1, 0, 2))[..., None]
        return self._scale(x), self._scale(y)

    def __getitem__(self, i: int):
        if not -len(self) <= i < len(self):
            raise IndexError(f"window {i} out of range for {len(self)} windows")
        i = i % len(self)
        x, y = self.batch([i])
        return x[0], y[0], self.dataset.timestamp(int(self.target_starts[i]))

    def __iter__(self) -> Iterator:
        for i in range(len(self)):
            yield self[i]


def make_windows(dataset: TrafficDataset, spec: WindowSpec, split_name: str, normalize: bool = False) -> WindowSet:
    return WindowSet(dataset, spec, split_name, normalize=normalize)
