"""Radix-2 Cooley-Tukey transforms on plain numpy arrays.

Both directions carry a 1/sqrt(n) factor per axis, so the 2-D transform is
unitary and its adjoint is the inverse.
"""

from functools import lru_cache

import numpy as np


def is_power_of_two(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


@lru_cache(maxsize=None)
def _bit_reverse(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.intp)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    rev.flags.writeable = False
    return rev


@lru_cache(maxsize=None)
def _twiddles(size: int, inverse: bool) -> np.ndarray:
    sign = 1.0 if inverse else -1.0
    tw = np.exp(sign * 2j * np.pi * np.arange(size // 2) / size)
    tw.flags.writeable = False
    return tw


def _transform_last(x: np.ndarray, inverse: bool) -> np.ndarray:
    n = x.shape[-1]
    lead = x.shape[:-1]
    out = np.asarray(x, dtype=np.complex128)[..., _bit_reverse(n)]
    size = 2
    while size <= n:
        half = size // 2
        blocks = out.reshape(lead + (n // size, size))
        even = blocks[..., :half]
        odd = blocks[..., half:] * _twiddles(size, inverse)
        out = np.concatenate([even + odd, even - odd], axis=-1).reshape(lead + (n,))
        size *= 2
    return out / np.sqrt(n)


def _check_sizes(x: np.ndarray) -> None:
    if x.ndim < 2:
        raise ValueError(f"need at least 2 dims, got shape {x.shape}")
    h, w = x.shape[-2:]
    if not (is_power_of_two(h) and is_power_of_two(w)):
        raise ValueError(f"radix-2 transform needs power-of-two sizes, got {h}x{w}")


def fft2(x: np.ndarray) -> np.ndarray:
    """Unitary 2-D DFT over the last two axes."""
    _check_sizes(x)
    out = _transform_last(x, inverse=False)
    out = _transform_last(np.swapaxes(out, -1, -2), inverse=False)
    return np.ascontiguousarray(np.swapaxes(out, -1, -2))


def ifft2(x: np.ndarray) -> np.ndarray:
    """Inverse of :func:`fft2` (and its adjoint)."""
    _check_sizes(x)
    out = _transform_last(x, inverse=True)
    out = _transform_last(np.swapaxes(out, -1, -2), inverse=True)
    return np.ascontiguousarray(np.swapaxes(out, -1, -2))
