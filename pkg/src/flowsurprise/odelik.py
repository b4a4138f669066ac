"""Likelihoods by integrating the probability-flow ODE jointly with its divergence.

The core solver is a Dormand-Prince 5(4) pair that advances a whole batch of
independent problems at once. Every row keeps its own time, step size and
error history, so a batched solve is equivalent to solving each row alone;
batching only shares the numpy calls.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgument, NoConvergence, NumericalBlowup
from .numerics import Rng, rademacher_probes
from .process import prior_logpdf

# Dormand & Prince (1980) coefficients
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
# fifth-order minus embedded fourth-order weights
_E = np.array([71 / 57600, 0.0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40])

SAFETY = 0.9
MIN_FACTOR = 0.2
MAX_FACTOR = 10.0
PI_BETA = 0.04
PI_ALPHA = 0.2 - 0.75 * PI_BETA


@dataclass(frozen=True)
class SolverConfig:
    atol: float = 1e-3
    rtol: float = 1e-3
    max_steps: int = 10_000
    divergence: str = "hutchinson"
    n_r: int = 4

    def __post_init__(self):
        if not (self.atol > 0 and self.rtol > 0):
            raise InvalidArgument("tolerances must be positive")
        if self.max_steps < 1:
            raise InvalidArgument("max_steps must be positive")
        if self.divergence not in ("exact", "hutchinson"):
            raise InvalidArgument(f"unknown divergence mode {self.divergence!r}")
        if self.divergence == "hutchinson" and self.n_r < 1:
            raise InvalidArgument("n_r must be positive")

    @classmethod
    def with_tol(cls, tol: float, **kw) -> "SolverConfig":
        return cls(atol=tol, rtol=tol, **kw)


@dataclass
class AugmentedState:
    """Frame vector and accumulated log-density change ``log p(z0) - log p(z)``."""

    z: np.ndarray
    delta_logp: float = 0.0

    def as_vector(self) -> np.ndarray:
        return np.concatenate([np.asarray(self.z, dtype=np.float64).ravel(), [self.delta_logp]])

    @classmethod
    def from_vector(cls, y) -> "AugmentedState":
        return cls(np.array(y[:-1]), float(y[-1]))


@dataclass
class SolveStats:
    accepted: int | np.ndarray = 0
    rejected: int | np.ndarray = 0
    nfev: int | np.ndarray = 0


def _rms(x):
    return np.sqrt(np.mean(x * x, axis=-1))


def _initial_step(fun, t0, y0, f0, direction, atol, rtol, idx):
    """Automatic first step (Hairer, Norsett & Wanner, II.4)."""
    scale = atol + np.abs(y0) * rtol
    d0 = _rms(y0 / scale)
    d1 = _rms(f0 / scale)
    h0 = np.where((d0 < 1e-5) | (d1 < 1e-5), 1e-6, 0.01 * d0 / np.maximum(d1, 1e-300))
    y1 = y0 + direction * h0[:, None] * f0
    f1 = fun(t0 + direction * h0, y1, idx)
    d2 = _rms((f1 - f0) / scale) / h0
    big = np.maximum(d1, d2)
    h1 = np.where(big <= 1e-15, np.maximum(1e-6, h0 * 1e-3), (0.01 / np.maximum(big, 1e-300)) ** 0.2)
    return np.minimum(100 * h0, h1)


def dopri5_batch(fun, y0, t0, t1: float, atol: float, rtol: float, max_steps: int = 10_000):
    """Integrate ``dy/dt = fun(t, y, idx)`` for each row of y0 from t0 to t1.

    Parameters
    ----------
    fun : callable
        ``fun(t, y, idx)`` with ``t`` of shape (m,), ``y`` of shape (m, n) and
        ``idx`` the row indices (into the original batch) being evaluated.
    y0 : array (B, n)
    t0 : float or array (B,)
        Start times; all must lie on the same side of ``t1``.

    Returns
    -------
    y1 : array (B, n)
    stats : SolveStats with per-row integer arrays
    """
    y = np.array(y0, dtype=np.float64)
    if y.ndim != 2:
        raise InvalidArgument("y0 must be (B, n)")
    B = y.shape[0]
    t = np.broadcast_to(np.asarray(t0, dtype=np.float64), (B,)).copy()
    span = t1 - t
    if np.any(span == 0):
        raise InvalidArgument("t0 must differ from t1")
    direction = float(np.sign(span[0]))
    if np.any(np.sign(span) != direction):
        raise InvalidArgument("all start times must lie on the same side of t1")

    accepted = np.zeros(B, dtype=np.int64)
    rejected = np.zeros(B, dtype=np.int64)
    nfev = np.zeros(B, dtype=np.int64)
    idx = np.arange(B)

    def call(tt, yy, ii):
        out = fun(tt, yy, ii)
        nfev[ii] += 1
        if not np.all(np.isfinite(out)):
            raise NumericalBlowup("non-finite right-hand side")
        return out

    f = call(t, y, idx)
    h = _initial_step(call, t, y, f, direction, atol, rtol, idx)
    h = np.minimum(h, np.abs(t1 - t))
    err_old = np.full(B, 1e-4)
    just_rejected = np.zeros(B, dtype=bool)
    active = idx.copy()

    while active.size:
        if np.any(accepted[active] + rejected[active] >= max_steps):
            raise NoConvergence(f"step budget of {max_steps} exhausted")
        ta, ya, ha, fa = t[active], y[active], h[active], f[active]
        sh = (direction * ha)[:, None]
        K = [fa]
        for s in range(1, 7):
            ys = ya + sh * sum(a * k for a, k in zip(_A[s], K) if a != 0.0)
            K.append(call(ta + direction * _C[s] * ha, ys, active))
        y_new = ya + sh * sum(b * k for b, k in zip(_B, K) if b != 0.0)
        err = sh * sum(e * k for e, k in zip(_E, K))
        scale = atol + rtol * np.maximum(np.abs(ya), np.abs(y_new))
        err_norm = np.max(np.abs(err) / scale, axis=-1)

        ok = err_norm <= 1.0
        safe_err = np.maximum(err_norm, 1e-10)
        grow = SAFETY * safe_err**-PI_ALPHA * err_old[active] ** PI_BETA
        grow = np.clip(grow, MIN_FACTOR, MAX_FACTOR)
        grow = np.where(just_rejected[active], np.minimum(grow, 1.0), grow)
        shrink = np.clip(SAFETY * safe_err**-PI_ALPHA, MIN_FACTOR, 1.0)

        acc = active[ok]
        if acc.size:
            t_next = t[acc] + direction * h[acc]
            finished = np.abs(t1 - t_next) <= 1e-12 * max(1.0, abs(t1))
            t[acc] = np.where(finished, t1, t_next)
            y[acc] = y_new[ok]
            f[acc] = K[6][ok]
            accepted[acc] += 1
            err_old[acc] = np.maximum(err_norm[ok], 1e-4)
            just_rejected[acc] = False
            h[acc] = np.minimum(h[acc] * grow[ok], np.abs(t1 - t[acc]))
        rej = active[~ok]
        if rej.size:
            rejected[rej] += 1
            just_rejected[rej] = True
            h[rej] = h[rej] * shrink[~ok]
            if np.any(h[rej] <= 1e-14 * np.maximum(1.0, np.abs(t[rej]))):
                raise NoConvergence("step size underflow")
        active = active[t[active] != t1]

    return y, SolveStats(accepted, rejected, nfev)


def rk45_integrate(rhs, y0, t0: float, t1: float, cfg: SolverConfig):
    """Single-problem front end of :func:`dopri5_batch`.

    ``rhs(t, y)`` maps a float and a state vector to its derivative. ``y0`` may
    be an :class:`AugmentedState` (the result is then one as well) or a plain
    vector.
    """
    aug = isinstance(y0, AugmentedState)
    vec = y0.as_vector() if aug else np.atleast_1d(np.asarray(y0, dtype=np.float64))

    def fun(t, y, idx):
        return np.asarray(rhs(float(t[0]), y[0]), dtype=np.float64)[None]

    y, stats = dopri5_batch(fun, vec[None], t0, t1, cfg.atol, cfg.rtol, cfg.max_steps)
    stats = SolveStats(int(stats.accepted[0]), int(stats.rejected[0]), int(stats.nfev[0]))
    return (AugmentedState.from_vector(y[0]) if aug else y[0]), stats


# -- divergence ------------------------------------------------------------------


def _batch(z, ctx):
    single = np.ndim(z) == 1
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    if ctx is None:
        ctx = np.zeros((z.shape[0], 0))
    return single, z, ctx


def basis_probes(d: int, batch: int) -> np.ndarray:
    return np.broadcast_to(np.eye(d)[:, None, :], (d, batch, d))


def divergence_exact(field, z, t, ctx=None):
    """Jacobian trace as the sum of e_i^T (e_i^T J) over the d basis cotangents."""
    single, z, ctx = _batch(z, ctx)
    _, vj = field.velocity(z, t, ctx, basis_probes(z.shape[1], z.shape[0]))
    div = np.einsum("ibi->b", vj)
    if not np.all(np.isfinite(div)):
        raise NumericalBlowup("non-finite divergence")
    return float(div[0]) if single else div


def hutchinson_from_probes(field, z, t, ctx, probes):
    _, vj = field.velocity(z, t, ctx, probes)
    return np.mean(np.sum(probes * vj, axis=-1), axis=0)


def divergence_hutchinson(field, z, t, ctx, n_r: int, rng: Rng):
    """Skilling-Hutchinson estimate with n_r Rademacher probes."""
    if n_r < 1:
        raise InvalidArgument("n_r must be positive")
    single, z, ctx = _batch(z, ctx)
    probes = rademacher_probes((n_r,) + z.shape, rng)
    div = hutchinson_from_probes(field, z, t, ctx, probes)
    if not np.all(np.isfinite(div)):
        raise NumericalBlowup("non-finite divergence")
    return float(div[0]) if single else div


# -- likelihood -------------------------------------------------------------------


def draw_probes(cfg: SolverConfig, rngs, d: int) -> np.ndarray | None:
    """Per-row Rademacher probes (n_r, B, d); one stream per row."""
    if cfg.divergence == "exact":
        return None
    return np.stack([rademacher_probes((cfg.n_r, d), r) for r in rngs], axis=1)


def log_likelihood_batch(model, z_t, t, ctx, cfg: SolverConfig, probes=None):
    """Log-density (nats) of each row of z_t under the level-t marginal.

    Integrates (z, delta_logp) from t to the process end, with probes held
    fixed for the whole solve, and adds the prior log-density at the end point.
    ``probes`` (n_r, B, d) is required in Hutchinson mode.

    Returns ``(loglik (B,), SolveStats)``.
    """
    z_t = np.atleast_2d(np.asarray(z_t, dtype=np.float64))
    B, d = z_t.shape
    spec = model.process
    t = spec.check_time(np.broadcast_to(np.asarray(t, dtype=np.float64), (B,)))
    ctx = np.zeros((B, 0)) if ctx is None else np.asarray(ctx, dtype=np.float64)
    if ctx.ndim == 1:
        ctx = np.broadcast_to(ctx, (B, ctx.shape[0]))
    exact = cfg.divergence == "exact"
    if not exact:
        if probes is None or probes.shape != (cfg.n_r, B, d):
            raise InvalidArgument("hutchinson mode needs probes of shape (n_r, B, d)")

    def fun(tt, y, idx):
        z = y[:, :d]
        if exact:
            f, vj = model.velocity(z, tt, ctx[idx], basis_probes(d, len(idx)))
            div = np.einsum("ibi->b", vj)
        else:
            p = probes[:, idx]
            f, vj = model.velocity(z, tt, ctx[idx], p)
            div = np.mean(np.sum(p * vj, axis=-1), axis=0)
        # d/dt [log p0(z0) - log p_t(z(t))] = +tr(df/dz)
        return np.concatenate([f, div[:, None]], axis=1)

    done = t >= spec.t_end
    y0 = np.concatenate([z_t, np.zeros((B, 1))], axis=1)
    out = y0.copy()
    stats = SolveStats(np.zeros(B, np.int64), np.zeros(B, np.int64), np.zeros(B, np.int64))
    live = np.flatnonzero(~done)
    if live.size:
        def sub(tt, y, idx):
            return fun(tt, y, live[idx])

        y1, st = dopri5_batch(sub, y0[live], t[live], spec.t_end, cfg.atol, cfg.rtol, cfg.max_steps)
        out[live] = y1
        stats.accepted[live], stats.rejected[live], stats.nfev[live] = st.accepted, st.rejected, st.nfev
    return prior_logpdf(out[:, :d], spec) + out[:, d], stats


def log_likelihood_augmented(model, z_t, t: float, ctx, cfg: SolverConfig, rng: Rng | None = None) -> float:
    """Log-density of a single point z_t under the level-t marginal (nats)."""
    z_t = np.asarray(z_t, dtype=np.float64)
    probes = None
    if cfg.divergence == "hutchinson":
        probes = draw_probes(cfg, [rng if rng is not None else Rng()], z_t.shape[-1])
    ll, _ = log_likelihood_batch(model, z_t[None], t, None if ctx is None else np.atleast_2d(ctx), cfg, probes)
    return float(ll[0])


__all__ = [
    "AugmentedState",
    "SolveStats",
    "SolverConfig",
    "divergence_exact",
    "divergence_hutchinson",
    "dopri5_batch",
    "draw_probes",
    "log_likelihood_augmented",
    "log_likelihood_batch",
    "rk45_integrate",
]
