"""Pyramid autocorrelation attention: patch attention plus delay aggregation.

Tensors are laid out ``[batch, node, time, feature]``.  The module-level
functions also accept a single unbatched ``[node, time, feature]`` sequence.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .nn import AttentionVariant, Module, QKVMappings, glorot, parameter
from .spectral import autocorrelation, correlation_from_spectra, correlation_size, real_fft
from .errors import ConfigError
from .tensor import Tensor


def pad_to_multiple(x: Tensor, ps: int, axis: int = 2) -> Tensor:
    """Right-pad ``axis`` by repeating the final frame until divisible by ``ps``."""
    n = x.shape[axis]
    extra = (-n) % ps
    if extra == 0:
        return x
    return T.take(x, np.r_[np.arange(n), np.full(extra, n - 1)], axis)


def _key_slot_matrix(ps: int) -> np.ndarray:
    """Maps (member i, key slot s) products onto the query q whose keys use them.

    Keys for query q are the other ps-1 members in patch order, so member i sits
    in slot ``i`` when ``i < q`` and in slot ``i - 1`` when ``i > q``.
    """
    m = np.zeros((ps, ps - 1, ps))
    for q in range(ps):
        for i in range(ps):
            if i != q:
                m[i, i if i < q else i - 1, q] = 1.0
    return m.reshape(ps * (ps - 1), ps)


class PatchAttentionLayer(Module):
    """Compresses each patch of ``ps`` steps into one pseudo step."""

    def __init__(
        self,
        rng: np.random.Generator,
        dim: int,
        ps: int,
        variant: AttentionVariant = AttentionVariant.IDENTITY_VALUE,
        score_activation: str = "tanh",
    ):
        if ps < 2:
            raise ConfigError(f"patch size must be at least 2 (got {ps}); keys exclude the query itself")
        self.dim = dim
        self.ps = ps
        self.variant = AttentionVariant(variant)
        self.mappings = QKVMappings(rng, dim, self.variant)
        self.w_query = parameter(glorot(rng, ps * dim, 1, shape=(dim, 1)))
        self.w_keys = parameter(glorot(rng, ps * dim, 1, shape=(dim, ps - 1)))
        self._slots = _key_slot_matrix(ps)
        self._score = T.activation(score_activation)

    def output_length(self, length: int) -> int:
        return -(-length // self.ps)

    def patch_scores(self, xr: Tensor) -> Tensor:
        """Normalized scores S' for patched input ``[B, N, P, ps, D]`` -> ``[B, N, P, ps]``."""
        ps = self.ps
        q_part = T.matmul(self.mappings.q(xr), self.w_query)
        q_part = T.reshape(q_part, q_part.shape[:-1])
        k_proj = T.matmul(self.mappings.k(xr), self.w_keys)  # [B, N, P, ps, ps-1]
        k_proj = T.reshape(k_proj, k_proj.shape[:-2] + (ps * (ps - 1),))
        k_part = T.matmul(k_proj, Tensor(self._slots))
        return T.softmax(self._score(q_part + k_part), axis=-1)

    def forward(self, x: Tensor, scores: np.ndarray | None = None):
        """x: [B, N, L, D] -> (Y: [B, N, ceil(L/ps), D], S': [B, N, ceil(L/ps), ps])."""
        if x.shape[-1] != self.dim:
            raise T.ShapeError(f"feature width {x.shape[-1]} does not match layer width {self.dim}")
        x = pad_to_multiple(x, self.ps, axis=2)
        b, n, length, d = x.shape
        xr = T.reshape(x, (b, n, length // self.ps, self.ps, d))
        s = self.patch_scores(xr) if scores is None else Tensor(scores)
        y = T.reduce_sum(T.expand_dims(s, -1) * self.mappings.v(xr), axis=3)
        return y, s

    __call__ = forward


def pooled_correlation(q: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Mean lagged product per delay, pooled over nodes and features.

    q, k: [B, N, L, D] -> [B, L] with entry tau = mean_{n,d} R_{n,d}(tau) / L.
    """
    length = q.shape[2]
    r = autocorrelation(np.swapaxes(q, 2, 3), np.swapaxes(k, 2, 3))
    return r.mean(axis=(1, 2)) / length


def topk_delays(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest scores among delays 1..L-1; ties go to smaller delays.

    scores: [..., L] -> [..., k] sorted by descending score.
    """
    length = scores.shape[-1]
    if not 1 <= k <= length - 1:
        raise ConfigError(f"top-k count {k} must lie in 1..{length - 1}")
    flat = scores.reshape(-1, length)
    taus = np.arange(1, length)
    out = np.empty((flat.shape[0], k), dtype=np.intp)
    for row, values in enumerate(flat):
        order = np.lexsort((taus, -values[1:]))
        out[row] = taus[order[:k]]
    return out.reshape(scores.shape[:-1] + (k,))


class AutocorrAttentionLayer(Module):
    """Aggregates ``sum_i S_i * Roll(V, tau_i)`` over the top-k correlated delays."""

    def __init__(self, rng: np.random.Generator, dim: int, k: int, variant: AttentionVariant = AttentionVariant.IDENTITY_VALUE):
        if k < 1:
            raise ConfigError(f"top-k count must be at least 1, got {k}")
        self.dim = dim
        self.k = k
        self.variant = AttentionVariant(variant)
        self.mappings = QKVMappings(rng, dim, self.variant)

    def selection_scores(self, x: np.ndarray) -> np.ndarray:
        """Same values as ``pooled_correlation(F_Q(x), F_K(x))`` with one transform of ``x``.

        The mappings are affine, so their spectra follow from the spectrum of
        the layer input by a matrix product plus the transform of the bias.
        """
        b, n, length, d = x.shape
        size = correlation_size(length)
        spec = np.swapaxes(real_fft(np.swapaxes(x, 2, 3), size), 2, 3)  # [B, N, S, D]
        ones = real_fft(np.ones(length), size)[:, None]

        def mapped(lin):
            out = spec @ lin.weight.data.astype(np.complex128)
            if lin.bias is not None:
                out += ones * lin.bias.data
            return out

        fq = mapped(self.mappings.query)
        fk = fq if self.mappings.key is None else mapped(self.mappings.key)
        cross = (fq * np.conj(fk)).sum(axis=(1, 3))
        return correlation_from_spectra(cross, np.ones_like(cross), length) / (n * d * length)

    def delay_scores(self, q: Tensor, kk: Tensor, delays: np.ndarray) -> Tensor:
        """Differentiable pooled correlation at the chosen delays: [B, k]."""
        b, n, length, d = q.shape
        t = np.arange(length)
        lagged = t[None, None, :] - delays[:, :, None]  # [B, k, L]
        valid = (lagged >= 0).astype(np.float64)
        idx = np.clip(lagged, 0, None)[:, :, None, :, None]
        shifted = T.take_along_axis(T.expand_dims(kk, 1), idx, axis=3)
        prod = T.expand_dims(q, 1) * shifted * Tensor(valid[:, :, None, :, None])
        return T.reduce_sum(prod, axis=(2, 3, 4)) * (1.0 / (n * d * length))

    def forward(
        self,
        x: Tensor,
        positions: np.ndarray | None = None,
        delays: np.ndarray | None = None,
        scores: np.ndarray | None = None,
    ):
        """x: [B, N, L, D] -> (out: [B, N, P, D], delays: [B, k], scores S: [B, k]).

        Output position p holds ``sum_i S_i * V[(p + tau_i) mod L]``; ``positions``
        selects which p to emit (all L by default).  Given ``delays`` and
        ``scores`` are replayed as constants.
        """
        if x.shape[-1] != self.dim:
            raise T.ShapeError(f"feature width {x.shape[-1]} does not match layer width {self.dim}")
        b, n, length, d = x.shape
        if length < 2:
            raise ConfigError("autocorrelation attention needs at least 2 steps")
        if self.k > length - 1:
            raise ConfigError(f"top-k count {self.k} exceeds L-1 = {length - 1}")
        if positions is None:
            positions = np.arange(length)
        positions = np.asarray(positions, dtype=np.intp)
        if scores is None:
            q = self.mappings.q(x)
            kk = self.mappings.k(x)
            if delays is None:
                delays = topk_delays(self.selection_scores(x.data), self.k)
            s = T.softmax(self.delay_scores(q, kk, delays), axis=-1)
        else:
            if delays is None:
                raise ValueError("replayed scores need their delays")
            s = Tensor(scores)
        v = self.mappings.v(x)
        idx = (positions[None, None, :] + delays[:, :, None]) % length  # [B, k, P]
        gathered = T.take_along_axis(T.expand_dims(v, 1), idx[:, :, None, :, None], axis=3)
        weights = T.reshape(s, (b, self.k, 1, 1, 1))
        out = T.reduce_sum(weights * gathered, axis=1)
        return out, np.asarray(delays), s

    __call__ = forward


@dataclass
class PyramidOutput:
    levels: list[Tensor]
    outputs: list[Tensor]
    delays: list[np.ndarray]
    scores: list[np.ndarray]
    patch_scores: list[np.ndarray] = field(default_factory=list)

    def lengths(self) -> list[int]:
        return [lvl.shape[-2] for lvl in self.levels]


def _batched(x) -> tuple[Tensor, bool]:
    x = T.as_tensor(x)
    if x.ndim == 3:
        return T.expand_dims(x, 0), True
    if x.ndim != 4:
        raise T.ShapeError(f"expected [N, L, D] or [B, N, L, D], got {x.shape}")
    return x, False


def _unbatch(t: Tensor, squeeze: bool) -> Tensor:
    return T.reshape(t, t.shape[1:]) if squeeze else t


def patch_forward(layer: PatchAttentionLayer, x) -> Tensor:
    xb, squeeze = _batched(x)
    y, _ = layer(xb)
    return _unbatch(y, squeeze)


def autocorr_forward(layer: AutocorrAttentionLayer, x):
    """Returns (output, delays, scores); delays/scores drop the batch axis for unbatched input."""
    xb, squeeze = _batched(x)
    out, delays, s = layer(xb)
    if squeeze:
        return _unbatch(out, True), delays[0], s.data[0]
    return out, delays, s.data


def pyramid_forward(
    levels: Sequence[PatchAttentionLayer],
    head: AutocorrAttentionLayer | Sequence[AutocorrAttentionLayer],
    x,
) -> PyramidOutput:
    """Patch levels applied in sequence; autocorrelation attention on every level (raw input first)."""
    xb, squeeze = _batched(x)
    heads = list(head) if isinstance(head, (list, tuple)) else [head] * (len(levels) + 1)
    if len(heads) != len(levels) + 1:
        raise ConfigError(f"need {len(levels) + 1} autocorrelation heads, got {len(heads)}")
    seqs = [xb]
    patch_scores = []
    for layer in levels:
        y, s = layer(seqs[-1])
        seqs.append(y)
        patch_scores.append(s.data[0] if squeeze else s.data)
    outputs, delays, scores = [], [], []
    for seq, h in zip(seqs, heads):
        out, dl, s = h(seq)
        outputs.append(_unbatch(out, squeeze))
        delays.append(dl[0] if squeeze else dl)
        scores.append(s.data[0] if squeeze else s.data)
    return PyramidOutput(
        levels=[_unbatch(s, squeeze) for s in seqs],
        outputs=outputs,
        delays=delays,
        scores=scores,
        patch_scores=patch_scores,
    )
