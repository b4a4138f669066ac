"""Conditioned MLP used as diffusion head (input z, noise time, context) and,
with no z/time inputs, as the GIVT mixture head."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import InvalidArgument
from .layers import linear_backward, silu, silu_grad

TIME_EMB_DIM = 32
TIME_MAX_FREQ = 32.0


def time_embedding(t, dim: int = TIME_EMB_DIM, max_freq: float = TIME_MAX_FREQ) -> np.ndarray:
    """Sinusoidal embedding of a scalar noise coordinate, shape (B, dim); frequencies 1..max_freq."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(np.linspace(0.0, np.log(max_freq), half))
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


@dataclass
class MlpParams:
    """Weights of an L-layer MLP with SiLU between layers.

    The network input is ``concat(z, time_embedding(t), ctx)``; ``in_dim`` or
    ``emb_dim`` may be zero, in which case that block is absent.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    in_dim: int
    ctx_dim: int
    emb_dim: int = TIME_EMB_DIM
    emb_freq: float = TIME_MAX_FREQ
    out_dim: int = field(init=False)

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise InvalidArgument("need one bias per weight matrix")
        if self.weights[0].shape[0] != self.in_dim + self.emb_dim + self.ctx_dim:
            raise InvalidArgument("first layer does not match input dimensions")
        for a, b in zip(self.weights, self.weights[1:]):
            if a.shape[1] != b.shape[0]:
                raise InvalidArgument("inconsistent hidden sizes")
        for w, b in zip(self.weights, self.biases):
            if b.shape != (w.shape[1],):
                raise InvalidArgument("bias shape mismatch")
        self.out_dim = self.weights[-1].shape[1]

    def tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"W{i}"] = w
            out[f"b{i}"] = b
        return out

    def config(self) -> dict:
        return {
            "in_dim": self.in_dim,
            "ctx_dim": self.ctx_dim,
            "emb_dim": self.emb_dim,
            "emb_freq": self.emb_freq,
            "sizes": [int(self.weights[0].shape[0])] + [int(w.shape[1]) for w in self.weights],
        }

    @classmethod
    def from_tensors(cls, tensors: dict, config: dict) -> "MlpParams":
        n = len(config["sizes"]) - 1
        return cls(
            [tensors[f"W{i}"] for i in range(n)],
            [tensors[f"b{i}"] for i in range(n)],
            config["in_dim"],
            config["ctx_dim"],
            config["emb_dim"],
            config.get("emb_freq", TIME_MAX_FREQ),
        )


def init_mlp(in_dim, ctx_dim, out_dim, hidden=128, layers=3, emb_dim=TIME_EMB_DIM, rng=None,
             zero_last=True, emb_freq=TIME_MAX_FREQ) -> MlpParams:
    gen = rng.generator() if rng is not None else np.random.default_rng(0)
    sizes = [in_dim + emb_dim + ctx_dim] + [hidden] * (layers - 1) + [out_dim]
    ws, bs = [], []
    for i, (a, b) in enumerate(zip(sizes, sizes[1:])):
        last = i == len(sizes) - 2
        scale = 0.0 if (last and zero_last) else 1.0 / np.sqrt(a)
        ws.append(gen.normal(0.0, 1.0, (a, b)) * scale)
        bs.append(np.zeros(b))
    return MlpParams(ws, bs, in_dim, ctx_dim, emb_dim, emb_freq)


def _assemble_input(params: MlpParams, z, t, ctx):
    parts = []
    batch = None
    if params.in_dim:
        z = np.asarray(z, dtype=np.float64)
        if z.shape[-1] != params.in_dim:
            raise InvalidArgument(f"z has dimension {z.shape[-1]}, expected {params.in_dim}")
        batch = z.shape[0]
        parts.append(z)
    if params.ctx_dim:
        ctx = np.asarray(ctx, dtype=np.float64)
        if ctx.ndim == 1:
            ctx = np.broadcast_to(ctx, (batch or 1, ctx.shape[0]))
        if ctx.shape[-1] != params.ctx_dim:
            raise InvalidArgument(f"ctx has dimension {ctx.shape[-1]}, expected {params.ctx_dim}")
        if batch is not None and ctx.shape[0] != batch:
            ctx = np.broadcast_to(ctx, (batch, params.ctx_dim))
        batch = ctx.shape[0]
    if params.emb_dim:
        t = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1), (batch,))
        parts.insert(1 if params.in_dim else 0, time_embedding(t, params.emb_dim, params.emb_freq))
    if params.ctx_dim:
        parts.append(ctx)
    return np.concatenate(parts, axis=-1)


def mlp_forward(params: MlpParams, z, t, ctx):
    """Batched forward pass. Returns ``(out, cache)`` with out of shape (B, out_dim)."""
    single = params.in_dim and np.ndim(z) == 1
    if single:
        z = np.asarray(z)[None]
    h = _assemble_input(params, z, t, ctx)
    cache = []
    n = len(params.weights)
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        pre = h @ w + b
        cache.append((h, pre))
        h = silu(pre) if i < n - 1 else pre
    return (h[0] if single else h), cache


def mlp_apply(params: MlpParams, z, t, ctx) -> np.ndarray:
    return mlp_forward(params, z, t, ctx)[0]


def mlp_backward(params: MlpParams, cache, dout):
    """Parameter gradients and gradient with respect to the assembled input."""
    grads = {}
    dy = dout
    for i in reversed(range(len(params.weights))):
        h, pre = cache[i]
        if i < len(params.weights) - 1:
            dy = dy * silu_grad(pre)
        dh, grads[f"W{i}"], grads[f"b{i}"] = linear_backward(h, params.weights[i], dy)
        dy = dh
    return grads, dy


def split_input_grad(params: MlpParams, dinput):
    """Split an input gradient into its (z, ctx) blocks."""
    dz = dinput[..., : params.in_dim]
    dctx = dinput[..., params.in_dim + params.emb_dim:]
    return dz, dctx


def input_vjp_from_cache(params: MlpParams, cache, v):
    """v^T dOut/dz for cotangents v of shape (..., B, out_dim)."""
    dy = v
    n = len(params.weights)
    for i in reversed(range(n)):
        _, pre = cache[i]
        if i < n - 1:
            dy = dy * silu_grad(pre)
        w = params.weights[i]
        dy = dy @ (w[: params.in_dim].T if i == 0 else w.T)
    return dy


def mlp_vjp(params: MlpParams, z, t, ctx, v) -> np.ndarray:
    """Contract a cotangent with the input Jacobian, holding t and ctx fixed."""
    if not params.in_dim:
        raise InvalidArgument("network has no z input")
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != params.out_dim:
        raise InvalidArgument(f"cotangent has dimension {v.shape[-1]}, expected {params.out_dim}")
    single = np.ndim(z) == 1
    out, cache = mlp_forward(params, np.atleast_2d(z), t, ctx)
    res = input_vjp_from_cache(params, cache, v[None] if single and v.ndim == 1 else v)
    return res[0] if single and v.ndim == 1 else res
