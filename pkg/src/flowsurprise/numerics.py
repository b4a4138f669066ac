"""Random streams and small statistical helpers shared by every experiment."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgument, UndefinedCorrelation

_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class Rng:
    """Value-typed handle on a counter-based random stream.

    The pair ``(seed, stream)`` is used directly as the Philox key, so two
    handles with equal fields always produce the same draws and distinct
    stream ids give independent sequences. Consumers never share a generator:
    each call to :meth:`generator` starts the stream from its beginning.
    """

    seed: int = 0
    stream: int = 0

    def __post_init__(self):
        if not (0 <= self.seed <= _MASK64 and 0 <= self.stream <= _MASK64):
            raise InvalidArgument("seed and stream must be 64-bit unsigned integers")

    def generator(self) -> np.random.Generator:
        return np.random.Generator(np.random.Philox(key=[self.seed, self.stream]))

    def child(self, *keys: int) -> "Rng":
        """Derive a new stream id from this one and an integer path."""
        entropy = [self.stream, *[int(k) & _MASK64 for k in keys]]
        stream = int(np.random.SeedSequence(entropy).generate_state(1, np.uint64)[0])
        return Rng(self.seed, stream)


def sample_rademacher(n: int, rng: Rng) -> np.ndarray:
    if n < 1:
        raise InvalidArgument(f"n must be positive, got {n}")
    bits = rng.generator().integers(0, 2, size=n)
    return (2.0 * bits - 1.0).astype(np.float64)


def rademacher_probes(shape, rng: Rng) -> np.ndarray:
    """Rademacher array of arbitrary shape drawn from one stream."""
    bits = rng.generator().integers(0, 2, size=shape)
    return 2.0 * bits - 1.0


def isotropic_gaussian_logpdf(z, sigma: float) -> np.ndarray | float:
    """Log-density of N(0, sigma^2 I) in nats, reduced over the last axis."""
    if not sigma > 0:
        raise InvalidArgument(f"sigma must be positive, got {sigma}")
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 0 or z.shape[-1] < 1:
        raise InvalidArgument("z must have at least one dimension")
    d = z.shape[-1]
    sq = np.sum(z * z, axis=-1)
    out = -0.5 * d * math.log(2 * math.pi) - d * math.log(sigma) - sq / (2 * sigma**2)
    return float(out) if np.ndim(out) == 0 else out


def average_ranks(x) -> np.ndarray:
    """Mid-ranks (1-based), ties share the average of their positions."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    ranks = np.empty(len(x), dtype=np.float64)
    # run boundaries of equal values
    edges = np.flatnonzero(np.diff(xs) != 0) + 1
    starts = np.concatenate(([0], edges))
    ends = np.concatenate((edges, [len(x)]))
    for s, e in zip(starts, ends):
        ranks[order[s:e]] = 0.5 * (s + e - 1) + 1.0
    return ranks


def _check_pair(xs, ys):
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.ndim != 1 or ys.ndim != 1 or len(xs) != len(ys):
        raise InvalidArgument("spearman_rho needs two 1-D series of equal length")
    if len(xs) < 3:
        raise InvalidArgument("spearman_rho needs at least 3 observations")
    return xs, ys


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    a = a - a.mean()
    b = b - b.mean()
    den = math.sqrt(float(a @ a) * float(b @ b))
    if den == 0.0:
        raise UndefinedCorrelation("zero rank variance")
    return float(np.clip((a @ b) / den, -1.0, 1.0))


def spearman_rho(xs, ys) -> float:
    xs, ys = _check_pair(xs, ys)
    return _pearson(average_ranks(xs), average_ranks(ys))


def spearman_permutation_test(xs, ys, n_permutations: int, rng: Rng) -> tuple[float, float]:
    """Spearman's rho with a two-sided permutation p-value.

    Returns
    -------
    rho, p : float
        ``p = (1 + #{|rho_perm| >= |rho|}) / (1 + n_permutations)``.
    """
    xs, ys = _check_pair(xs, ys)
    rx = average_ranks(xs)
    ry = average_ranks(ys)
    rho = _pearson(rx, ry)
    rx = rx - rx.mean()
    ry = ry - ry.mean()
    den = math.sqrt(float(rx @ rx) * float(ry @ ry))
    gen = rng.generator()
    hits = 0
    block = 1000
    done = 0
    while done < n_permutations:
        m = min(block, n_permutations - done)
        perms = gen.permuted(np.tile(ry, (m, 1)), axis=1)
        null = perms @ rx / den
        hits += int(np.count_nonzero(np.abs(null) >= abs(rho) - 1e-12))
        done += m
    return rho, (1 + hits) / (1 + n_permutations)


@dataclass(frozen=True)
class ErrorStats:
    mae_normalized: float
    me_normalized: float


def error_stats(estimates, references) -> ErrorStats:
    est = np.asarray(estimates, dtype=np.float64)
    ref = np.asarray(references, dtype=np.float64)
    if est.shape != ref.shape or est.size == 0:
        raise InvalidArgument("estimates and references must be nonempty and equally shaped")
    scale = float(np.mean(np.abs(ref)))
    if scale == 0.0:
        raise InvalidArgument("references are all zero")
    diff = est - ref
    return ErrorStats(float(np.mean(np.abs(diff))) / scale, float(np.mean(diff)) / scale)
