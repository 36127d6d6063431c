"""Per-filter weight binarization: sign pattern plus one positive scale.

A real filter W is approximated by ``alpha * B`` where B holds elementwise
signs and alpha is a single positive scale.  The closed form
``alpha = mean(|W|)``, ``B = sign(W)`` minimizes ``||W - alpha*B||^2`` over
all sign patterns and scales; ``brute_force_binarize`` provides the
exhaustive-enumeration oracle for that claim.

Latent real weights are kept by the training loop and re-binarized every
iteration; ``ste_backward`` maps the gradient of the scaled binary weights
back onto the latent weights with a hard-threshold straight-through estimator
for the sign's derivative.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "BinarizedFilter",
    "binarize_filter",
    "binarize_layer",
    "quantization_error",
    "ste_backward",
    "ste_backward_layer",
    "pack_bits",
    "unpack_bits",
    "brute_force_binarize",
]


@dataclass(frozen=True)
class BinarizedFilter:
    """Packed sign bits and scale for one filter.

    ``bits`` stores one bit per weight, MSB first within each byte, bit 1
    meaning +1; the final partial byte is zero padded.  ``alpha`` is zero only
    for an all-zero source filter.
    """

    alpha: float
    bits: bytes
    n: int
    shape: tuple[int, ...]

    def signs(self) -> np.ndarray:
        """The +/-1 sign array, in the original filter shape."""
        return unpack_bits(self.bits, self.n).reshape(self.shape)

    def effective(self, dtype=np.float32) -> np.ndarray:
        """The scaled binary weights ``alpha * B``."""
        return (self.signs() * self.alpha).astype(dtype)


def pack_bits(signs: np.ndarray) -> bytes:
    """Pack a +/-1 vector into bytes, MSB first, zero padded to ceil(n/8)."""
    flat = np.asarray(signs).reshape(-1)
    if flat.size < 1:
        raise ValueError("cannot pack an empty sign vector")
    return np.packbits(flat >= 0).tobytes()


def unpack_bits(packed: bytes, n: int) -> np.ndarray:
    """Inverse of pack_bits: the first ``n`` bits as a +/-1 float array."""
    bits = np.unpackbits(np.frombuffer(packed, dtype=np.uint8), count=n)
    return bits.astype(np.float64) * 2.0 - 1.0


def binarize_filter(w) -> BinarizedFilter:
    """Closed-form best (alpha, B) for one filter: alpha = mean|W|, B = sign(W).

    sign(0) is taken as +1; a zero weight contributes alpha^2 to the residual
    either way, so the choice does not affect optimality.
    """
    arr = np.asarray(getattr(w, "data", w))
    if arr.size < 1:
        raise ValueError("cannot binarize an empty filter")
    alpha = float(np.abs(arr).mean(dtype=arr.dtype))
    return BinarizedFilter(alpha=alpha, bits=pack_bits(arr.reshape(-1)),
                           n=arr.size, shape=arr.shape)


def binarize_layer(weights: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Binarize every output filter of a conv weight array [c_out, ...].

    Returns (alphas[c_out], signs same shape as weights).  Equivalent to
    binarize_filter applied per output filter, vectorized.
    """
    c_out = weights.shape[0]
    flat = weights.reshape(c_out, -1)
    alphas = np.abs(flat).mean(axis=1, dtype=weights.dtype)
    signs = np.where(flat >= 0, 1.0, -1.0).astype(weights.dtype)
    return alphas, signs.reshape(weights.shape)


def quantization_error(w, f: BinarizedFilter) -> float:
    """The residual ||W - alpha*B||^2 measuring how lossy the binarization is."""
    arr = np.asarray(getattr(w, "data", w))
    if arr.shape != f.shape:
        raise ValueError(f"shape mismatch: weights {arr.shape} vs filter {f.shape}")
    diff = arr.astype(np.float64) - f.signs() * f.alpha
    return float((diff * diff).sum())


def ste_backward(grad_scaled, w, f: BinarizedFilter) -> np.ndarray:
    """Map the gradient of the scaled binary weights onto the latent weights.

    Elementwise ``g * (1/n + ste(w) * alpha)`` where ste(w) = 1 on |w| <= 1
    and 0 elsewhere: the scale path contributes 1/n everywhere, the sign path
    passes straight through only inside the unit clip range.
    """
    g = np.asarray(getattr(grad_scaled, "data", grad_scaled))
    arr = np.asarray(getattr(w, "data", w))
    if g.shape != arr.shape or arr.shape != f.shape:
        raise ValueError(
            f"shape mismatch: grad {g.shape}, weights {arr.shape}, filter {f.shape}")
    gate = (np.abs(arr) <= 1.0).astype(arr.dtype)
    return g * (1.0 / f.n + gate * f.alpha)


def ste_backward_layer(grad_scaled: np.ndarray, weights: np.ndarray,
                       alphas: np.ndarray) -> np.ndarray:
    """ste_backward vectorized over the output filters of a conv layer."""
    n = int(np.prod(weights.shape[1:]))
    gate = (np.abs(weights) <= 1.0).astype(weights.dtype)
    expand = (slice(None),) + (None,) * (weights.ndim - 1)
    return grad_scaled * (np.asarray(1.0 / n, dtype=weights.dtype) + gate * alphas[expand])


def brute_force_binarize(w, max_n: int = 20) -> tuple[float, np.ndarray, float]:
    """Exhaustively minimize ||W - alpha*B||^2 over all 2^n sign patterns.

    For each candidate B the optimal scale is max(0, B.W/n).  Returns
    (alpha, signs, error) for the global minimizer.  Only feasible for small
    n; used as the optimality oracle for binarize_filter.
    """
    arr = np.asarray(getattr(w, "data", w)).astype(np.float64)
    n = arr.size
    if n < 1:
        raise ValueError("cannot binarize an empty filter")
    if n > max_n:
        raise ValueError(f"enumeration over 2^{n} sign vectors refused (n > {max_n})")
    flat = arr.reshape(-1)
    codes = np.arange(1 << n, dtype=np.uint64)
    # bit i of the code selects the sign of element i
    patterns = ((codes[:, None] >> np.arange(n, dtype=np.uint64)) & 1).astype(np.float64)
    signs = patterns * 2.0 - 1.0
    dots = signs @ flat
    alphas = np.maximum(0.0, dots / n)
    wsq = float(flat @ flat)
    errors = wsq - 2.0 * alphas * dots + n * alphas * alphas
    best = int(np.argmin(errors))
    return float(alphas[best]), signs[best].reshape(arr.shape), float(errors[best])
