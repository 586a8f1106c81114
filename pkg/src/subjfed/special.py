"""Special functions and seeded randomness for Dirichlet arithmetic.

All three gamma-family functions use the same scheme: shift the argument
above a threshold with the functional recurrence, evaluate the asymptotic
(Stirling / de Moivre) series there, then undo the shift.  ``lgamma`` also
switches to Taylor expansions around its zeros at 1 and 2 so the relative
error stays bounded where the value itself vanishes.

Every function accepts scalars or arrays and returns the same kind.
"""

from __future__ import annotations

import hashlib
import math

import numpy as np

__all__ = [
    "DomainError",
    "RngStream",
    "derive_stream_id",
    "lgamma",
    "digamma",
    "trigamma",
    "dirichlet_sample",
]

EULER_GAMMA = 0.57721566490153286061
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)

# Even Bernoulli numbers B_2 .. B_16.
_BERNOULLI = (
    1.0 / 6.0,
    -1.0 / 30.0,
    1.0 / 42.0,
    -1.0 / 30.0,
    5.0 / 66.0,
    -691.0 / 2730.0,
    7.0 / 6.0,
    -3617.0 / 510.0,
)

_SHIFT = 6
_LGAMMA_SHIFT = 10
_TAYLOR_RADIUS = 0.25
_TAYLOR_TERMS = 32


class DomainError(ValueError):
    """Argument outside the domain of a function."""


def _zeta_tail(k: int, start: int) -> float:
    """sum_{n >= start} n**-k by direct summation plus Euler-Maclaurin tail."""
    cut = start + 20
    head = math.fsum(n ** -float(k) for n in range(start, cut))
    tail = cut ** (1.0 - k) / (k - 1) + 0.5 * cut ** -float(k)
    # Derivative corrections B_2j/(2j)! * k(k+1)...(k+2j-2) * cut**-(k+2j-1)
    rising = float(k)
    fact = 2.0
    for j, b in enumerate(_BERNOULLI[:5], start=1):
        tail += b / fact * rising * cut ** -(k + 2.0 * j - 1.0)
        rising *= (k + 2 * j - 1) * (k + 2 * j)
        fact *= (2 * j + 1) * (2 * j + 2)
    return head + tail


# Taylor coefficients: lgamma(1+d) = -gamma*d + sum_k (-1)^k zeta(k)/k d^k
#                      lgamma(2+d) = (1-gamma)*d + sum_k (-1)^k (zeta(k)-1)/k d^k
_K = np.arange(2, _TAYLOR_TERMS + 1)
_COEF_AT_1 = np.array([(-1.0) ** k * _zeta_tail(k, 1) / k for k in _K])
_COEF_AT_2 = np.array([(-1.0) ** k * _zeta_tail(k, 2) / k for k in _K])


def _as_checked(x, name: str) -> tuple[np.ndarray, bool]:
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)) or np.any(arr <= 0.0):
        raise DomainError(f"{name} requires finite x > 0")
    return arr, arr.ndim == 0


def _out(arr: np.ndarray, scalar: bool):
    return float(arr) if scalar else arr


def _taylor(d: np.ndarray, linear: float, coef: np.ndarray) -> np.ndarray:
    acc = np.zeros_like(d)
    for c in coef[::-1]:
        acc = acc * d + c
    return linear * d + d * d * acc


def _stirling(y: np.ndarray) -> np.ndarray:
    inv = 1.0 / y
    inv2 = inv * inv
    series = np.zeros_like(y)
    for n in range(len(_BERNOULLI) - 1, -1, -1):
        two_n = 2 * (n + 1)
        series = series * inv2 + _BERNOULLI[n] / (two_n * (two_n - 1))
    return (y - 0.5) * np.log(y) - y + _HALF_LOG_2PI + series * inv


def lgamma(x):
    """Natural log of the gamma function for x > 0."""
    arr, scalar = _as_checked(x, "lgamma")
    shape = arr.shape
    arr = arr.reshape(-1)
    out = np.empty_like(arr)

    near1 = np.abs(arr - 1.0) < _TAYLOR_RADIUS
    near2 = np.abs(arr - 2.0) < _TAYLOR_RADIUS
    small = (arr < _LGAMMA_SHIFT) & ~near1 & ~near2
    large = ~(near1 | near2 | small)

    if near1.any():
        out[near1] = _taylor(arr[near1] - 1.0, -EULER_GAMMA, _COEF_AT_1)
    if near2.any():
        out[near2] = _taylor(arr[near2] - 2.0, 1.0 - EULER_GAMMA, _COEF_AT_2)
    if small.any():
        xs = arr[small]
        prod = np.ones_like(xs)
        for i in range(_LGAMMA_SHIFT):
            prod *= xs + i
        out[small] = _stirling(xs + _LGAMMA_SHIFT) - np.log(prod)
    if large.any():
        out[large] = _stirling(arr[large])
    return _out(out.reshape(shape), scalar)


def _two_prod_err(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Rounding error of a*b (Dekker/Veltkamp split), so a*b == fl(a*b) + err."""
    split = 134217729.0  # 2**27 + 1
    t = split * a
    ah = t - (t - a)
    al = a - ah
    t = split * b
    bh = t - (t - b)
    bl = b - bh
    p = a * b
    return ((ah * bh - p) + ah * bl + al * bh) + al * bl


def _reciprocal_parts(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """1/x as an unevaluated sum hi + lo."""
    hi = 1.0 / x
    lo = ((1.0 - hi * x) - _two_prod_err(hi, x)) / x
    return hi, lo


def _digamma_unchecked(arr: np.ndarray) -> np.ndarray:
    low = arr < _SHIFT
    y = np.where(low, arr + _SHIFT, arr)
    inv = 1.0 / y
    inv2 = inv * inv
    series = np.zeros_like(y)
    for n in range(len(_BERNOULLI) - 2, -1, -1):
        series = series * inv2 + _BERNOULLI[n] / (2 * (n + 1))
    value = np.log(y) - 0.5 * inv - series * inv2
    if low.any():
        recip = np.zeros_like(arr)
        for i in range(1, _SHIFT):
            recip += 1.0 / (arr + i)
        # 1/x dominates for tiny x; subtract it last, with its rounding error folded in
        hi, lo = _reciprocal_parts(arr)
        value = np.where(low, ((value - recip) - lo) - hi, value)
    return value


def _trigamma_unchecked(arr: np.ndarray) -> np.ndarray:
    low = arr < _SHIFT
    y = np.where(low, arr + _SHIFT, arr)
    inv = 1.0 / y
    inv2 = inv * inv
    series = np.zeros_like(y)
    for n in range(len(_BERNOULLI) - 2, -1, -1):
        series = series * inv2 + _BERNOULLI[n]
    value = inv + 0.5 * inv2 + series * inv2 * inv
    if low.any():
        recip = np.zeros_like(arr)
        for i in range(1, _SHIFT):
            recip += 1.0 / ((arr + i) * (arr + i))
        value = np.where(low, (value + recip) + 1.0 / (arr * arr), value)
    return value


def digamma(x):
    """Digamma psi(x) = d/dx ln Gamma(x), for x > 0."""
    arr, scalar = _as_checked(x, "digamma")
    return _out(_digamma_unchecked(arr), scalar)


def trigamma(x):
    """Trigamma psi'(x), for x > 0."""
    arr, scalar = _as_checked(x, "trigamma")
    return _out(_trigamma_unchecked(arr), scalar)


def derive_stream_id(*parts) -> int:
    """Stable 64-bit stream id from a tuple of labels (str/int)."""
    text = "\x1f".join(str(p) for p in parts).encode("utf-8")
    return int.from_bytes(hashlib.blake2b(text, digest_size=8).digest(), "little")


class RngStream:
    """Seeded, splittable random stream.

    Backed by the counter-based Philox generator keyed through
    ``numpy.random.SeedSequence(seed, spawn_key=(stream_id,))`` so any
    (seed, stream_id) pair can be rebuilt independently of every other
    stream.  A stream is meant to be consumed by one task at a time.
    """

    def __init__(self, seed: int, stream_id: int = 0):
        if not (0 <= seed < 2**64 and 0 <= stream_id < 2**64):
            raise ValueError("seed and stream_id must be unsigned 64-bit integers")
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        seq = np.random.SeedSequence(self.seed, spawn_key=(self.stream_id,))
        self.generator = np.random.Generator(np.random.Philox(seq))

    @classmethod
    def for_purpose(cls, seed: int, *parts) -> "RngStream":
        return cls(seed, derive_stream_id(*parts))

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"


def _log_gamma_variates(gen: np.random.Generator, shape: np.ndarray) -> np.ndarray:
    # Marsaglia-Tsang for shape >= 1; the shape < 1 boost
    # G(a) = G(a+1) * U**(1/a) is applied in log space so tiny draws never underflow.
    boost = shape < 1.0
    draw = gen.standard_gamma(np.where(boost, shape + 1.0, shape))
    logs = np.log(draw)
    if boost.any():
        u = gen.random(shape.shape)
        logs = np.where(boost, logs + np.log(u) / shape, logs)
    return logs


def dirichlet_sample(rng: RngStream, alpha) -> np.ndarray:
    """One draw from Dir(alpha) as normalized independent Gamma variates."""
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.ndim != 1 or alpha.size == 0:
        raise DomainError("alpha must be a non-empty vector")
    if not np.all(np.isfinite(alpha)) or np.any(alpha <= 0.0):
        raise DomainError("Dirichlet concentration must be finite and positive")
    logs = _log_gamma_variates(rng.generator, alpha)
    w = np.exp(logs - logs.max())
    return w / w.sum()
