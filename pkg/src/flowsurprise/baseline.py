"""GIVT-style baseline: diagonal Gaussian mixture over the next frame from a causal context."""

from __future__ import annotations

import math

import numpy as np

from .errors import InvalidArgument, TrainingDiverged
from .neural import EncoderParams, MlpParams, encoder_apply, init_encoder, init_mlp, mlp_backward, mlp_forward
from .neural.encoder import encoder_backward
from .neural.layers import sigmoid, softplus
from .numerics import Rng
from .process import _teacher_forced
from .surprisal import ICCurve, bits_per_dim
from .synthdata import LatentSequence

GIVT = "givt"
SIGMA_FLOOR = 1e-3
_LOG_2PI = math.log(2 * math.pi)


class GivtModel:
    """Causal encoder plus an MLP that maps each context to K-component GMM parameters.

    Head output layout per position: ``[logits (K) | means (K*d) | raw scales (K*d)]``
    with ``sigma = softplus(raw) + SIGMA_FLOOR``.
    """

    kind = GIVT

    def __init__(self, encoder: EncoderParams, head: MlpParams, n_components: int, dim: int,
                 sigma_floor: float = SIGMA_FLOOR):
        if head.in_dim or head.emb_dim or head.ctx_dim != encoder.out_dim:
            raise InvalidArgument("GIVT head must read only the context")
        if head.out_dim != n_components * (1 + 2 * dim):
            raise InvalidArgument("head output does not match K * (1 + 2d)")
        self.encoder = encoder
        self.head = head
        self.n_components = n_components
        self.dim = dim
        self.sigma_floor = sigma_floor

    def contexts(self, frames) -> np.ndarray:
        return encoder_apply(self.encoder, np.asarray(frames, dtype=np.float64))

    def tensors(self) -> dict[str, np.ndarray]:
        out = {"head/" + k: v for k, v in self.head.tensors().items()}
        out.update({"encoder/" + k: v for k, v in self.encoder.tensors.items()})
        return out

    def with_tensors(self, tensors: dict) -> "GivtModel":
        head = MlpParams.from_tensors({k[5:]: v for k, v in tensors.items() if k.startswith("head/")},
                                      self.head.config())
        enc = EncoderParams.from_tensors({k[8:]: v for k, v in tensors.items() if k.startswith("encoder/")},
                                         self.encoder.config())
        return GivtModel(enc, head, self.n_components, self.dim, self.sigma_floor)

    def split(self, out):
        """Head output (..., K(1+2d)) to (logits, means, raw scales)."""
        K, d = self.n_components, self.dim
        lead = out.shape[:-1]
        logits = out[..., :K]
        means = out[..., K:K + K * d].reshape(*lead, K, d)
        raw = out[..., K + K * d:].reshape(*lead, K, d)
        return logits, means, raw

    def mixture(self, ctx):
        out, cache = mlp_forward(self.head, None, None, np.atleast_2d(ctx))
        logits, means, raw = self.split(out)
        return (logits, means, softplus(raw) + self.sigma_floor), (cache, raw)


def init_givt(dim: int, n_components: int = 8, width: int = 64, heads: int = 4, blocks: int = 2,
              max_len: int = 256, hidden: int = 128, layers: int = 3, rng: Rng | None = None,
              frame_skip: bool = False, window: int | None = None) -> GivtModel:
    rng = rng or Rng()
    enc = init_encoder(dim, width=width, heads=heads, blocks=blocks, max_len=max_len, rng=rng.child(1),
                       frame_skip=frame_skip, window=window)
    head = init_mlp(0, enc.out_dim, n_components * (1 + 2 * dim), hidden=hidden, layers=layers, emb_dim=0,
                    rng=rng.child(2), zero_last=False)
    # spread initial means, start with unit-ish scales
    head.weights[-1] *= 0.1
    return GivtModel(enc, head, n_components, dim)


def log_softmax(logits):
    m = np.max(logits, axis=-1, keepdims=True)
    s = logits - m
    return s - np.log(np.sum(np.exp(s), axis=-1, keepdims=True))


def _component_logpdf(means, sigmas, z):
    z = np.asarray(z, dtype=np.float64)[..., None, :]
    u = (z - means) / sigmas
    return -0.5 * np.sum(u * u, axis=-1) - np.sum(np.log(sigmas), axis=-1) - 0.5 * means.shape[-1] * _LOG_2PI


def gmm_logpdf(logits, means, sigmas, z):
    """log sum_k w_k prod_i N(z_i; mu_ki, sigma_ki^2) with w = softmax(logits), in nats.

    Shapes: logits (..., K), means and sigmas (..., K, d), z (..., d).
    """
    logits, means, sigmas = (np.asarray(a, dtype=np.float64) for a in (logits, means, sigmas))
    if not (np.all(np.isfinite(logits)) and np.all(np.isfinite(means)) and np.all(np.isfinite(sigmas))):
        raise InvalidArgument("mixture parameters must be finite")
    if np.any(sigmas <= 0):
        raise InvalidArgument("standard deviations must be positive")
    if means.shape != sigmas.shape or means.shape[:-1] != logits.shape or means.shape[-1] != np.shape(z)[-1]:
        raise InvalidArgument("inconsistent mixture dimensions")
    joint = log_softmax(logits) + _component_logpdf(means, sigmas, z)
    m = np.max(joint, axis=-1)
    out = m + np.log(np.sum(np.exp(joint - m[..., None]), axis=-1))
    return float(out) if out.ndim == 0 else out


def givt_loss_and_grads(model: GivtModel, frames, rng: Rng | None = None):
    """Mean next-frame NLL (nats per frame) under teacher forcing, and its gradients.

    ``rng`` is accepted for interface parity with the diffusion losses; the
    objective is deterministic.
    """
    ctx, z, enc_cache, shape = _teacher_forced(model, frames)
    n = z.shape[0]
    (logits, means, sigmas), (cache, raw) = model.mixture(ctx)
    logw = log_softmax(logits)
    joint = logw + _component_logpdf(means, sigmas, z)
    m = np.max(joint, axis=-1, keepdims=True)
    lse = m[:, 0] + np.log(np.sum(np.exp(joint - m), axis=-1))
    loss = float(-np.mean(lse))
    if not math.isfinite(loss):
        raise TrainingDiverged("non-finite GIVT loss")
    resp = np.exp(joint - lse[:, None])  # posterior responsibilities
    diff = z[:, None, :] - means
    # d(-lse)/d(params), averaged over frames
    d_logits = (np.exp(logw) - resp) / n
    d_means = -(resp[..., None] * diff / sigmas**2) / n
    d_sigma = -(resp[..., None] * (diff**2 / sigmas**3 - 1.0 / sigmas)) / n
    d_raw = d_sigma * sigmoid(raw)
    dout = np.concatenate([d_logits, d_means.reshape(n, -1), d_raw.reshape(n, -1)], axis=-1)
    hg, dinput = mlp_backward(model.head, cache, dout)
    grads = {"head/" + k: v for k, v in hg.items()}
    eg = encoder_backward(model.encoder, enc_cache, dinput.reshape(*shape, -1))
    grads.update({"encoder/" + k: v for k, v in eg.items()})
    return loss, grads


def givt_train_loss(model: GivtModel, frames, rng: Rng | None = None) -> float:
    return givt_loss_and_grads(model, frames, rng)[0]


def _frame_logliks(model: GivtModel, seq: LatentSequence, ks):
    ks = np.asarray(ks, dtype=np.int64)
    if ks.size and (ks.min() < 1 or ks.max() >= seq.length):
        raise InvalidArgument("frame index must lie in 1..T-1 (frame 0 has no context)")
    ctx = model.contexts(seq.frames[: ks.max()])[ks - 1]
    (logits, means, sigmas), _ = model.mixture(ctx)
    return gmm_logpdf(logits, means, sigmas, seq.frames[ks])


def givt_frame_ic(model: GivtModel, seq: LatentSequence, k: int) -> float:
    if k < 1:
        raise InvalidArgument("frame 0 has no context")
    return float(bits_per_dim(_frame_logliks(model, seq, [k]), seq.dim)[0])


def givt_ic_curve(model: GivtModel, seq: LatentSequence, model_id: str = "") -> ICCurve:
    """Exact IC curve; there is no noise level, so ``noise_level`` is None."""
    if seq.length < 2:
        raise InvalidArgument("sequence needs at least two frames")
    ll = _frame_logliks(model, seq, np.arange(1, seq.length))
    return ICCurve(bits_per_dim(ll, seq.dim), None, seq.frame_rate, model_id, {"sequence": seq.name})
