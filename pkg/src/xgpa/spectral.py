"""Radix-2 FFT and FFT-based lagged correlation.

``autocorrelation(q, k)`` returns ``R(tau) = sum_t q[t] * k[t - tau]`` for
``tau = 0 .. L-1``.  Sequences are zero-padded to ``2 * next_pow2(L)`` before
the transform so no lag in that range picks up circular wrap-around terms;
:func:`naive_autocorrelation` evaluates the same sum directly and serves as
the test oracle.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError


def is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def next_pow2(n: int) -> int:
    return 1 << max(0, int(n - 1).bit_length())


@dataclass(frozen=True)
class ComplexBuffer:
    re: np.ndarray
    im: np.ndarray

    def __post_init__(self):
        if self.re.shape != self.im.shape:
            raise ContractError(f"re/im shapes differ: {self.re.shape} vs {self.im.shape}")
        if not is_pow2(self.re.shape[-1]):
            raise ContractError(f"buffer length {self.re.shape[-1]} is not a power of two")

    @property
    def length(self) -> int:
        return self.re.shape[-1]

    def to_complex(self) -> np.ndarray:
        return self.re + 1j * self.im

    @classmethod
    def from_complex(cls, z: np.ndarray) -> ComplexBuffer:
        return cls(np.ascontiguousarray(z.real), np.ascontiguousarray(z.imag))


_bitrev_cache: dict[int, np.ndarray] = {}
_twiddle_cache: dict[int, np.ndarray] = {}
_block_cache: dict[int, np.ndarray] = {}

# Butterfly stages below this span are folded into one small DFT-matrix product.
_BLOCK = 32
# Complex entries per row chunk (1 MiB), keeps butterfly passes in cache.
_CHUNK_ENTRIES = 1 << 16


def _bit_reverse(n: int) -> np.ndarray:
    perm = _bitrev_cache.get(n)
    if perm is None:
        bits = n.bit_length() - 1
        perm = np.zeros(n, dtype=np.intp)
        idx = np.arange(n)
        for b in range(bits):
            perm |= ((idx >> b) & 1) << (bits - 1 - b)
        _bitrev_cache[n] = perm
    return perm


def _twiddles(m: int) -> np.ndarray:
    w = _twiddle_cache.get(m)
    if w is None:
        w = np.exp(-2j * np.pi * np.arange(m // 2) / m)
        _twiddle_cache[m] = w
    return w


def _block_matrix(m: int) -> np.ndarray:
    """The first log2(m) radix-2 stages on a bit-reversed block, as one right-multiplication."""
    d = _block_cache.get(m)
    if d is None:
        j = np.arange(m)
        d = np.exp(-2j * np.pi * np.outer(j, j) / m)[:, _bit_reverse(m)].T.copy()
        _block_cache[m] = d
    return d


def _fft_last_axis(z: np.ndarray, inverse: bool = False) -> np.ndarray:
    """Iterative decimation-in-time radix-2 FFT over the last axis.

    After the bit-reversal permutation the first stages only mix entries inside
    contiguous blocks of ``_BLOCK``; those are applied together as a small
    matrix product, the wider butterflies run stage by stage.  Rows go through
    in chunks small enough to stay cache resident.
    """
    n = z.shape[-1]
    if not is_pow2(n):
        raise ContractError(f"FFT length {n} is not a power of two")
    lead = z.shape[:-1]
    flat = z.reshape(-1, n)
    out = np.empty(flat.shape, dtype=np.complex128)
    chunk = max(1, _CHUNK_ENTRIES // n)
    for lo in range(0, flat.shape[0], chunk):
        out[lo : lo + chunk] = _fft_rows(flat[lo : lo + chunk], inverse)
    return out.reshape(lead + (n,))


def _fft_rows(z: np.ndarray, inverse: bool) -> np.ndarray:
    rows, n = z.shape
    x = z[:, _bit_reverse(n)]
    if inverse:
        np.conjugate(x, out=x)
    m0 = min(n, _BLOCK)
    x = (x.reshape(-1, m0) @ _block_matrix(m0)).reshape(rows, n)
    buf = np.empty_like(x)
    tmp = np.empty((rows, n // 2), dtype=np.complex128)
    m = 2 * m0
    while m <= n:
        half = m // 2
        src = x.reshape(rows, n // m, 2, half)
        dst = buf.reshape(rows, n // m, 2, half)
        t = tmp.reshape(rows, n // m, half)
        np.multiply(src[:, :, 1], _twiddles(m), out=t)
        np.add(src[:, :, 0], t, out=dst[:, :, 0])
        np.subtract(src[:, :, 0], t, out=dst[:, :, 1])
        x, buf = buf, x
        m *= 2
    if inverse:
        np.conjugate(x, out=x)
        x /= n
    return x


def real_fft(x, size: int) -> np.ndarray:
    """Spectra of real rows (last axis) zero-padded to ``size``, two rows per complex transform."""
    x = np.asarray(x, dtype=np.float64)
    if not is_pow2(size) or size < x.shape[-1]:
        raise ContractError(f"size {size} must be a power of two no shorter than {x.shape[-1]}")
    lead, n = x.shape[:-1], x.shape[-1]
    flat = x.reshape(-1, n)
    rows = flat.shape[0]
    pairs = (rows + 1) // 2
    z = np.zeros((pairs, size), dtype=np.complex128)
    z[:, :n].real = flat[0::2]
    z[: rows // 2, :n].imag = flat[1::2]
    spec = _fft_last_axis(z)
    mirror = np.conj(spec[:, (-np.arange(size)) % size])
    out = np.empty((2 * pairs, size), dtype=np.complex128)
    out[0::2] = 0.5 * (spec + mirror)
    out[1::2] = -0.5j * (spec - mirror)
    return out[:rows].reshape(lead + (size,))


def fft(x, padded_length: int | None = None) -> ComplexBuffer:
    """Unnormalized DFT of real ``x`` (last axis), zero-padded to ``padded_length``."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[-1]
    size = n if padded_length is None else int(padded_length)
    if not is_pow2(size):
        raise ContractError(f"padded_length {size} is not a power of two")
    if size < n:
        raise ContractError(f"padded_length {size} is shorter than the sequence ({n})")
    z = np.zeros(x.shape[:-1] + (size,), dtype=np.complex128)
    z[..., :n] = x
    return ComplexBuffer.from_complex(_fft_last_axis(z))


def ifft(buf: ComplexBuffer) -> ComplexBuffer:
    """Inverse DFT (with the 1/n factor) so ``ifft(fft(x))`` recovers ``x``."""
    return ComplexBuffer.from_complex(_fft_last_axis(buf.to_complex(), inverse=True))


def _check_pair(q: np.ndarray, k: np.ndarray) -> int:
    if q.shape != k.shape:
        raise ContractError(f"query/key sequences differ in shape: {q.shape} vs {k.shape}")
    n = q.shape[-1]
    if n < 2:
        raise ContractError(f"correlation needs at least 2 steps, got {n}")
    return n


def correlation_size(n: int) -> int:
    """Transform length leaving lags 0..n-1 free of wrap-around."""
    return 2 * next_pow2(n)


def correlation_from_spectra(fq: np.ndarray, fk: np.ndarray, n: int) -> np.ndarray:
    """``R(tau)`` for tau = 0..n-1 from padded spectra of q and k."""
    return _fft_last_axis(fq * np.conj(fk), inverse=True).real[..., :n]


def autocorrelation(q, k, unbiased: bool = False) -> np.ndarray:
    """Lagged correlation ``R(tau)``, tau = 0..L-1, over the last axis via FFT.

    With ``unbiased=True`` each lag is divided by its overlap count ``L - tau``.
    """
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    n = _check_pair(q, k)
    spec = real_fft(np.stack([q, k]), correlation_size(n))
    r = correlation_from_spectra(spec[0], spec[1], n)
    if unbiased:
        r = r / (n - np.arange(n))
    return r


def naive_autocorrelation(q, k, unbiased: bool = False) -> np.ndarray:
    """Direct O(L^2) evaluation of the same lagged sum (zero outside the window)."""
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    n = _check_pair(q, k)
    r = np.zeros(q.shape[:-1] + (n,))
    for tau in range(n):
        r[..., tau] = np.sum(q[..., tau:] * k[..., : n - tau], axis=-1)
    if unbiased:
        r = r / (n - np.arange(n))
    return r
