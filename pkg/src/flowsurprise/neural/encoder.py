"""Causal pre-LN transformer that turns past frames into context vectors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import InvalidArgument
from .layers import (
    causal_attention,
    causal_attention_backward,
    layernorm,
    layernorm_backward,
    linear_backward,
    rope,
    rope_backward,
    rope_tables,
    silu,
    silu_grad,
)


@dataclass
class EncoderParams:
    tensors: dict[str, np.ndarray]
    in_dim: int
    width: int = 64
    heads: int = 4
    blocks: int = 2
    max_len: int = 256
    ff_mult: int = 4
    frame_skip: bool = False
    window: int | None = None  # inference context length; None = whole prefix

    def __post_init__(self):
        if self.width % self.heads or (self.width // self.heads) % 2:
            raise InvalidArgument("width must split into heads of even size")
        if self.window is not None and not 1 <= self.window <= self.max_len:
            raise InvalidArgument("window must lie in [1, max_len]")
        self._cos, self._sin = rope_tables(self.max_len, self.width // self.heads)

    def config(self) -> dict:
        return {
            "in_dim": self.in_dim,
            "width": self.width,
            "heads": self.heads,
            "blocks": self.blocks,
            "max_len": self.max_len,
            "ff_mult": self.ff_mult,
            "frame_skip": self.frame_skip,
            "window": self.window,
        }

    @property
    def out_dim(self) -> int:
        """Context size: the transformer width, plus the raw latest frame when ``frame_skip``."""
        return self.width + (self.in_dim if self.frame_skip else 0)

    @classmethod
    def from_tensors(cls, tensors, config) -> "EncoderParams":
        return cls(dict(tensors), **config)


def init_encoder(in_dim, width=64, heads=4, blocks=2, max_len=256, ff_mult=4, rng=None,
                 frame_skip=False, window=None) -> EncoderParams:
    gen = rng.generator() if rng is not None else np.random.default_rng(0)

    def dense(a, b, scale=1.0):
        return gen.normal(0.0, scale / np.sqrt(a), (a, b))

    resid = 1.0 / np.sqrt(2 * blocks)
    p = {"in.W": dense(in_dim, width), "in.b": np.zeros(width)}
    for i in range(blocks):
        pre = f"blk{i}."
        p[pre + "ln1.g"] = np.ones(width)
        p[pre + "ln1.b"] = np.zeros(width)
        p[pre + "Wq"] = dense(width, width)
        p[pre + "Wk"] = dense(width, width)
        p[pre + "Wv"] = dense(width, width)
        p[pre + "Wo"] = dense(width, width, resid)
        p[pre + "bo"] = np.zeros(width)
        p[pre + "ln2.g"] = np.ones(width)
        p[pre + "ln2.b"] = np.zeros(width)
        p[pre + "W1"] = dense(width, ff_mult * width)
        p[pre + "b1"] = np.zeros(ff_mult * width)
        p[pre + "W2"] = dense(ff_mult * width, width, resid)
        p[pre + "b2"] = np.zeros(width)
    p["lnf.g"] = np.ones(width)
    p["lnf.b"] = np.zeros(width)
    return EncoderParams(p, in_dim, width, heads, blocks, max_len, ff_mult, frame_skip, window)


def _split_heads(x, h):
    b, t, w = x.shape
    return x.reshape(b, t, h, w // h).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, t, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * dh)


def encoder_forward(params: EncoderParams, frames):
    """frames (B, T, d) -> (contexts (B, T, out_dim), cache)."""
    x = np.asarray(frames, dtype=np.float64)
    if x.ndim != 3 or x.shape[1] == 0:
        raise InvalidArgument("frames must be a nonempty (B, T, d) array")
    if x.shape[-1] != params.in_dim:
        raise InvalidArgument(f"frames have dimension {x.shape[-1]}, expected {params.in_dim}")
    T = x.shape[1]
    if T > params.max_len:
        raise InvalidArgument(f"sequence length {T} exceeds maximum {params.max_len}")
    p = params.tensors
    cos, sin = params._cos[:T], params._sin[:T]
    cache = {"frames": x}
    h = x @ p["in.W"] + p["in.b"]
    for i in range(params.blocks):
        pre = f"blk{i}."
        c = {"x_in": h}
        a, c["ln1"] = layernorm(h, p[pre + "ln1.g"], p[pre + "ln1.b"])
        c["a"] = a
        q = _split_heads(a @ p[pre + "Wq"], params.heads)
        k = _split_heads(a @ p[pre + "Wk"], params.heads)
        v = _split_heads(a @ p[pre + "Wv"], params.heads)
        qr, kr = rope(q, cos, sin), rope(k, cos, sin)
        o, att = causal_attention(qr, kr, v)
        om = _merge_heads(o)
        c.update(qr=qr, kr=kr, v=v, att=att, om=om)
        h = h + om @ p[pre + "Wo"] + p[pre + "bo"]
        c["x_mid"] = h
        a2, c["ln2"] = layernorm(h, p[pre + "ln2.g"], p[pre + "ln2.b"])
        u = a2 @ p[pre + "W1"] + p[pre + "b1"]
        s = silu(u)
        c.update(a2=a2, u=u, s=s)
        h = h + s @ p[pre + "W2"] + p[pre + "b2"]
        cache[i] = c
    out, cache["lnf"] = layernorm(h, p["lnf.g"], p["lnf.b"])
    if params.frame_skip:
        out = np.concatenate([out, x], axis=-1)
    return out, cache


def encoder_apply(params: EncoderParams, frames) -> np.ndarray:
    """Context vector per position; position k summarises frames 0..k.

    With ``params.window = W`` position k only sees frames k-W+1..k, matching
    the crop length the encoder was trained on; then any length is accepted.
    Accepts a single sequence (T, d) or a batch (B, T, d).
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim == 2:
        if frames.shape[0] == 0:
            raise InvalidArgument("empty sequence")
        return encoder_apply(params, frames[None])[0]
    W = params.window
    if W is None or frames.shape[1] <= W:
        return encoder_forward(params, frames)[0]
    B, T, d = frames.shape
    head = encoder_forward(params, frames[:, :W])[0]
    # one window per later position, batched; keep the last output of each
    idx = np.arange(1, T - W + 1)[:, None] + np.arange(W)
    wins = frames[:, idx].reshape(-1, W, d)
    tail = encoder_forward(params, wins)[0][:, -1].reshape(B, T - W, -1)
    return np.concatenate([head, tail], axis=1)


def encoder_backward(params: EncoderParams, cache, dctx):
    """Gradients of all encoder tensors given dLoss/dcontexts (B, T, out_dim)."""
    p = params.tensors
    dctx = dctx[..., : params.width]
    T = dctx.shape[1]
    cos, sin = params._cos[:T], params._sin[:T]
    g = {}
    dh, g["lnf.g"], g["lnf.b"] = layernorm_backward(cache["lnf"], p["lnf.g"], dctx)
    for i in reversed(range(params.blocks)):
        pre = f"blk{i}."
        c = cache[i]
        # feed-forward branch
        ds, g[pre + "W2"], g[pre + "b2"] = linear_backward(c["s"], p[pre + "W2"], dh)
        du = ds * silu_grad(c["u"])
        da2, g[pre + "W1"], g[pre + "b1"] = linear_backward(c["a2"], p[pre + "W1"], du)
        dx, g[pre + "ln2.g"], g[pre + "ln2.b"] = layernorm_backward(c["ln2"], p[pre + "ln2.g"], da2)
        dh = dh + dx
        # attention branch
        dom, g[pre + "Wo"], g[pre + "bo"] = linear_backward(c["om"], p[pre + "Wo"], dh)
        do = _split_heads(dom, params.heads)
        dqr, dkr, dv = causal_attention_backward(c["qr"], c["kr"], c["v"], c["att"], do)
        dq = _merge_heads(rope_backward(dqr, cos, sin))
        dk = _merge_heads(rope_backward(dkr, cos, sin))
        dv = _merge_heads(dv)
        a = c["a"]
        da = 0.0
        for name, d_ in (("Wq", dq), ("Wk", dk), ("Wv", dv)):
            dpart, g[pre + name], _ = linear_backward(a, p[pre + name], d_)
            da = da + dpart
        dx, g[pre + "ln1.g"], g[pre + "ln1.b"] = layernorm_backward(c["ln1"], p[pre + "ln1.g"], da)
        dh = dh + dx
    _, g["in.W"], g["in.b"] = linear_backward(cache["frames"], p["in.W"], dh)
    return g
