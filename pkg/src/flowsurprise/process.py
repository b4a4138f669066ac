"""EDM and rectified-flow processes: ODE fields, priors, kernel means, losses."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgument, TrainingDiverged
from .neural.encoder import EncoderParams, encoder_apply, encoder_backward, encoder_forward
from .neural.mlp import MlpParams, input_vjp_from_cache, mlp_backward, mlp_forward, split_input_grad
from .numerics import Rng, isotropic_gaussian_logpdf

EDM = "edm"
RFF = "rff"

# log-normal sigma sampling for EDM training, stated for data of scale
# EDM_REF_SIGMA_DATA; the location moves by log(sigma_data / EDM_REF_SIGMA_DATA)
P_MEAN = -1.2
P_STD = 1.2
EDM_REF_SIGMA_DATA = 0.5

# top frequency of the head's noise-level embedding. EDM's c_noise spans ~2.7
# over [t_start, t_end] but training rarely visits the top of it, so a low top
# frequency keeps the embedding smooth where the head has to extrapolate.
TIME_FREQ = {EDM: 4.0, RFF: 32.0}

# ~99th percentile of the training sigma law at the reference scale; the EDM
# head sees its noise level saturate here (scaled like the law), so larger
# sigmas reuse the last well-trained condition
EDM_COND_SIGMA_MAX = 5.0


@dataclass(frozen=True)
class ProcessSpec:
    kind: str
    t_start: float
    t_end: float
    sigma_max: float = 1.0

    def __post_init__(self):
        if self.kind not in (EDM, RFF):
            raise InvalidArgument(f"unknown process kind {self.kind!r}")
        if not self.t_start < self.t_end:
            raise InvalidArgument("t_start must precede t_end")

    def check_time(self, t):
        t = np.asarray(t, dtype=np.float64)
        if np.any(t < self.t_start) or np.any(t > self.t_end) or not np.all(np.isfinite(t)):
            raise InvalidArgument(f"time outside [{self.t_start}, {self.t_end}] for {self.kind}")
        return t

    def prior_sigma(self) -> float:
        return self.sigma_max if self.kind == EDM else 1.0

    def to_dict(self) -> dict:
        return {"kind": self.kind, "t_start": self.t_start, "t_end": self.t_end, "sigma_max": self.sigma_max}


def edm_process() -> ProcessSpec:
    return ProcessSpec(EDM, 0.002, 80.0, 80.0)


def rff_process() -> ProcessSpec:
    return ProcessSpec(RFF, 0.0, 1.0, 1.0)


def process_for(kind: str) -> ProcessSpec:
    makers = {EDM: edm_process, RFF: rff_process}
    if kind not in makers:
        raise InvalidArgument(f"unknown process kind {kind!r}")
    return makers[kind]()


def edm_coefficients(sigma, sigma_data):
    """c_skip, c_out, c_in, c_noise of the EDM preconditioner."""
    s2 = sigma * sigma + sigma_data * sigma_data
    c_skip = sigma_data**2 / s2
    c_out = sigma * sigma_data / np.sqrt(s2)
    c_in = 1.0 / np.sqrt(s2)
    c_noise = np.log(sigma) / 4.0
    return c_skip, c_out, c_in, c_noise


def edm_sigma_location(sigma_data: float) -> float:
    """Location of the log-normal training sigma law for data of scale sigma_data."""
    return P_MEAN + math.log(sigma_data / EDM_REF_SIGMA_DATA)


def edm_head_condition(c_noise, sigma_data: float = EDM_REF_SIGMA_DATA):
    """Noise condition fed to the EDM head: c_noise, saturated at the sigma
    where the training law runs out (EDM_COND_SIGMA_MAX at the reference scale)."""
    cap = EDM_COND_SIGMA_MAX * sigma_data / EDM_REF_SIGMA_DATA
    return np.minimum(c_noise, np.log(cap) / 4.0)


def rff_input_scale(t, sigma_data):
    return 1.0 / np.sqrt((1.0 - t) ** 2 * sigma_data**2 + t * t)


def _col(x, n):
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    return np.broadcast_to(x, (n,))[:, None]


class ScoreModel:
    """Encoder plus conditioned head, read through one of the two processes.

    For EDM the head is the raw network F of the preconditioned denoiser
    ``D = c_skip z + c_out F(c_in z, c_noise, ctx)``; for RFF the head is the
    velocity network fed ``c_in(t) z`` (input normalisation only).
    """

    def __init__(self, process: ProcessSpec, head: MlpParams, encoder: EncoderParams | None = None,
                 sigma_data: float = 1.0):
        self.process = process
        self.head = head
        self.encoder = encoder
        self.sigma_data = float(sigma_data)

    @property
    def kind(self) -> str:
        return self.process.kind

    @property
    def dim(self) -> int:
        return self.head.in_dim

    def contexts(self, frames) -> np.ndarray:
        """Context per position (T, width); row k conditions the prediction of frame k+1."""
        frames = np.asarray(frames, dtype=np.float64)
        if self.encoder is None:
            return np.zeros((frames.shape[0], 0))
        return encoder_apply(self.encoder, frames)

    def tensors(self) -> dict[str, np.ndarray]:
        out = {"head/" + k: v for k, v in self.head.tensors().items()}
        if self.encoder is not None:
            out.update({"encoder/" + k: v for k, v in self.encoder.tensors.items()})
        return out

    def with_tensors(self, tensors: dict) -> "ScoreModel":
        head = MlpParams.from_tensors(
            {k[5:]: v for k, v in tensors.items() if k.startswith("head/")}, self.head.config()
        )
        enc = None
        if self.encoder is not None:
            enc = EncoderParams.from_tensors(
                {k[8:]: v for k, v in tensors.items() if k.startswith("encoder/")}, self.encoder.config()
            )
        return ScoreModel(self.process, head, enc, self.sigma_data)

    # -- field evaluation -------------------------------------------------

    def denoise(self, z, sigma, ctx) -> np.ndarray:
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        sig = _col(sigma, z.shape[0])
        c_skip, c_out, c_in, c_noise = edm_coefficients(sig, self.sigma_data)
        F, _ = mlp_forward(self.head, c_in * z, edm_head_condition(c_noise[:, 0], self.sigma_data), ctx)
        return c_skip * z + c_out * F

    def velocity(self, z, t, ctx, probes=None):
        """ODE right-hand side and optionally ``probes^T df/dz``.

        z (B, d), t scalar or (B,), ctx (B, c) or (c,); probes (n, B, d).
        Returns ``(f, vjps)`` with vjps None when no probes are given.
        """
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        tt = _col(t, z.shape[0])
        if self.kind == EDM:
            c_skip, c_out, c_in, c_noise = edm_coefficients(tt, self.sigma_data)
            F, cache = mlp_forward(self.head, c_in * z, edm_head_condition(c_noise[:, 0], self.sigma_data), ctx)
            f = ((1.0 - c_skip) * z - c_out * F) / tt
            if probes is None:
                return f, None
            jv = input_vjp_from_cache(self.head, cache, probes)
            return f, ((1.0 - c_skip) * probes - c_out * c_in * jv) / tt
        c_in = rff_input_scale(tt, self.sigma_data)
        F, cache = mlp_forward(self.head, c_in * z, tt[:, 0], ctx)
        if probes is None:
            return F, None
        return F, c_in * input_vjp_from_cache(self.head, cache, probes)


class GaussianEDM(ScoreModel):
    """Exact EDM model for i.i.d. data N(0, s0^2 I); context is ignored."""

    def __init__(self, dim: int, s0: float):
        head = MlpParams([np.zeros((dim + 32, dim))], [np.zeros(dim)], dim, 0)
        super().__init__(edm_process(), head, None, s0)
        self.s0 = float(s0)

    def denoise(self, z, sigma, ctx):
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        sig = _col(sigma, z.shape[0])
        return z * self.s0**2 / (self.s0**2 + sig**2)

    def velocity(self, z, t, ctx, probes=None):
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        tt = _col(t, z.shape[0])
        k = tt / (self.s0**2 + tt**2)
        return k * z, (None if probes is None else k * probes)


class GaussianRFF(ScoreModel):
    """Exact rectified-flow velocity for i.i.d. data N(0, s0^2 I)."""

    def __init__(self, dim: int, s0: float):
        head = MlpParams([np.zeros((dim + 32, dim))], [np.zeros(dim)], dim, 0)
        super().__init__(rff_process(), head, None, s0)
        self.s0 = float(s0)

    def velocity(self, z, t, ctx, probes=None):
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        tt = _col(t, z.shape[0])
        s2 = self.s0**2
        k = (tt - (1 - tt) * s2) / ((1 - tt) ** 2 * s2 + tt**2)
        return k * z, (None if probes is None else k * probes)


def edm_score(model: ScoreModel, z, sigma, ctx) -> np.ndarray:
    if model.kind != EDM:
        raise InvalidArgument("edm_score needs an EDM model")
    model.process.check_time(sigma)
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    sig = _col(sigma, z.shape[0])
    return (model.denoise(z, sigma, ctx) - z) / sig**2


def ode_rhs(model: ScoreModel, z, t, ctx) -> np.ndarray:
    """dz/dt of the probability-flow ODE (data flows to noise as t grows).

    EDM: ``-t * score(z, t)``; RFF: the velocity network.
    """
    model.process.check_time(t)
    single = np.ndim(z) == 1
    f, _ = model.velocity(z, t, ctx)
    return f[0] if single else f


def perturbation_mean(z0, t, spec: ProcessSpec) -> np.ndarray:
    """Expected value of the noised point at level t given clean z0."""
    spec.check_time(t)
    z0 = np.asarray(z0, dtype=np.float64)
    if spec.kind == EDM:
        return z0.copy()
    t = np.asarray(t, dtype=np.float64)
    if t.ndim:
        t = t[..., None]
    return (1.0 - t) * z0


def prior_logpdf(z1, spec: ProcessSpec):
    return isotropic_gaussian_logpdf(z1, spec.prior_sigma())


# -- training losses -----------------------------------------------------------


def _teacher_forced(model: ScoreModel, frames):
    """Contexts from clean frames[:, :-1] and targets frames[:, 1:], flattened."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim == 2:
        frames = frames[None]
    if frames.shape[1] < 2:
        raise InvalidArgument("sequences need at least two frames")
    if not np.all(np.isfinite(frames)):
        raise InvalidArgument("batch contains non-finite frames")
    B, T, d = frames.shape
    if model.encoder is None:
        ctx, cache = np.zeros((B, T - 1, 0)), None
    else:
        ctx, cache = encoder_forward(model.encoder, frames[:, :-1])
    return ctx.reshape(B * (T - 1), -1), frames[:, 1:].reshape(-1, d), cache, (B, T - 1)


def _finish(model, loss, head_cache, dout, enc_cache, shape):
    if not math.isfinite(loss):
        raise TrainingDiverged("non-finite loss")
    hg, dinput = mlp_backward(model.head, head_cache, dout)
    grads = {"head/" + k: v for k, v in hg.items()}
    if model.encoder is not None:
        _, dctx = split_input_grad(model.head, dinput)
        eg = encoder_backward(model.encoder, enc_cache, dctx.reshape(*shape, -1))
        grads.update({"encoder/" + k: v for k, v in eg.items()})
    return loss, grads


def edm_loss_and_grads(model: ScoreModel, frames, rng: Rng):
    """Denoising score-matching loss with EDM preconditioning and weighting.

    With the EDM weight the loss reduces to ``E ||F(c_in x) - target||^2`` with
    ``target = (z0 - c_skip x) / c_out`` and ``x = z0 + sigma n``.
    """
    ctx, z0, cache, shape = _teacher_forced(model, frames)
    n, d = z0.shape
    g = rng.generator()
    lo, hi = model.process.t_start, model.process.t_end
    sigma = np.clip(np.exp(edm_sigma_location(model.sigma_data) + P_STD * g.standard_normal(n)), lo, hi)[:, None]
    x = z0 + sigma * g.standard_normal((n, d))
    c_skip, c_out, c_in, c_noise = edm_coefficients(sigma, model.sigma_data)
    F, head_cache = mlp_forward(model.head, c_in * x, edm_head_condition(c_noise[:, 0], model.sigma_data), ctx)
    diff = F - (z0 - c_skip * x) / c_out
    loss = float(np.mean(np.sum(diff * diff, axis=-1)))
    return _finish(model, loss, head_cache, 2.0 * diff / n, cache, shape)


def rff_loss_and_grads(model: ScoreModel, frames, rng: Rng):
    """Sample estimate of E_t ||(z1 - z0) - v(z_t, t)||^2, t ~ U[0, 1]."""
    ctx, z0, cache, shape = _teacher_forced(model, frames)
    n, d = z0.shape
    g = rng.generator()
    t = g.random(n)[:, None]
    z1 = g.standard_normal((n, d))
    zt = (1.0 - t) * z0 + t * z1
    F, head_cache = mlp_forward(model.head, rff_input_scale(t, model.sigma_data) * zt, t[:, 0], ctx)
    diff = F - (z1 - z0)
    loss = float(np.mean(np.sum(diff * diff, axis=-1)))
    return _finish(model, loss, head_cache, 2.0 * diff / n, cache, shape)


def edm_train_loss(model: ScoreModel, frames, rng: Rng) -> float:
    return edm_loss_and_grads(model, frames, rng)[0]


def rff_train_loss(model: ScoreModel, frames, rng: Rng) -> float:
    return rff_loss_and_grads(model, frames, rng)[0]


def loss_and_grads(model: ScoreModel, frames, rng: Rng):
    fn = edm_loss_and_grads if model.kind == EDM else rff_loss_and_grads
    return fn(model, frames, rng)
