"""Model construction, the training loop and checkpoint round-trips for all three model kinds."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .baseline import GIVT, GivtModel, givt_loss_and_grads, init_givt
from .errors import CorruptCheckpoint, InvalidArgument, TrainingDiverged
from .neural import AdamState, EncoderParams, MlpParams, TrainConfig, init_encoder, init_mlp, train_step
from .neural.checkpoint import load_checkpoint, save_checkpoint
from .numerics import Rng
from .process import EDM, RFF, TIME_FREQ, ScoreModel, loss_and_grads, process_for

KINDS = (EDM, RFF, GIVT)


@dataclass(frozen=True)
class ModelConfig:
    kind: str = EDM
    width: int = 64
    heads: int = 4
    blocks: int = 2
    max_len: int = 256
    hidden: int = 128
    layers: int = 3
    n_components: int = 8
    frame_skip: bool = True
    context_window: int | None = 64

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidArgument(f"unknown model kind {self.kind!r}")
        if self.context_window is not None and not 1 <= self.context_window <= self.max_len:
            raise InvalidArgument("context_window must lie in [1, max_len]")
        if self.width % self.heads or (self.width // self.heads) % 2:
            raise InvalidArgument("width must split into heads of even size")


def build_model(cfg: ModelConfig, dim: int, sigma_data: float, rng: Rng):
    if cfg.kind == GIVT:
        return init_givt(dim, cfg.n_components, cfg.width, cfg.heads, cfg.blocks, cfg.max_len, cfg.hidden,
                         cfg.layers, rng, cfg.frame_skip, cfg.context_window)
    enc = init_encoder(dim, width=cfg.width, heads=cfg.heads, blocks=cfg.blocks, max_len=cfg.max_len,
                       rng=rng.child(1), frame_skip=cfg.frame_skip, window=cfg.context_window)
    head = init_mlp(dim, enc.out_dim, dim, hidden=cfg.hidden, layers=cfg.layers, rng=rng.child(2),
                    emb_freq=TIME_FREQ[cfg.kind])
    return ScoreModel(process_for(cfg.kind), head, enc, sigma_data)


def estimate_sigma_data(sequences) -> float:
    """Per-coordinate standard deviation of all frames, pooled."""
    frames = np.concatenate([s.frames for s in sequences])
    return float(frames.std())


def model_loss_and_grads(model, frames, rng: Rng):
    if model.kind == GIVT:
        return givt_loss_and_grads(model, frames, rng)
    return loss_and_grads(model, frames, rng)


def sample_batch(sequences, batch_size: int, crop_len: int, rng: Rng) -> np.ndarray:
    """Random equal-length crops (B, L, d) drawn with replacement."""
    g = rng.generator()
    L = min(crop_len, min(s.length for s in sequences))
    if L < 2:
        raise InvalidArgument("sequences are too short to train on")
    out = []
    for i in g.integers(len(sequences), size=batch_size):
        s = sequences[i]
        start = int(g.integers(s.length - L + 1))
        out.append(s.frames[start:start + L])
    return np.stack(out)


@dataclass
class TrainResult:
    model: object
    state: AdamState
    step: int
    losses: list[float]
    diverged: bool = False


def train_model(model, sequences, cfg: TrainConfig, rng: Rng, start_step: int = 0, state: AdamState | None = None,
                stop_step: int | None = None) -> TrainResult:
    """Run Adam from ``start_step`` up to ``stop_step`` (default: the schedule end).

    Batch and noise draws at step s come from streams keyed by s, so a resumed
    run sees the same data as an uninterrupted one. On divergence the last good
    parameters are returned with ``diverged=True``.
    """
    stop = cfg.total_steps if stop_step is None else min(stop_step, cfg.total_steps)
    if not 0 <= start_step <= stop:
        raise InvalidArgument("bad step range")
    params = model.tensors()
    state = state or AdamState()
    losses = []
    for step in range(start_step, stop):
        batch = sample_batch(sequences, cfg.batch_size, cfg.crop_len, rng.child(1, step))
        try:
            loss, grads = model_loss_and_grads(model.with_tensors(params), batch, rng.child(2, step))
            params, state = train_step(params, grads, state, step, cfg)
        except TrainingDiverged:
            return TrainResult(model.with_tensors(params), state, step, losses, diverged=True)
        losses.append(loss)
    return TrainResult(model.with_tensors(params), state, stop, losses)


# -- checkpoints ------------------------------------------------------------------


def model_header(model, extra: dict | None = None) -> dict:
    header = {"kind": model.kind, "head": model.head.config(), "encoder": model.encoder.config()}
    if model.kind == GIVT:
        header.update(n_components=model.n_components, dim=model.dim, sigma_floor=model.sigma_floor)
    else:
        header.update(sigma_data=model.sigma_data, process=model.process.to_dict())
    header.update(extra or {})
    return header


def save_model(path, model, state: AdamState | None = None, **meta) -> None:
    tensors = dict(model.tensors())
    if state is not None:
        for name in list(tensors):
            if name in state.m:
                tensors["opt.m/" + name] = state.m[name]
                tensors["opt.v/" + name] = state.v[name]
    save_checkpoint(path, tensors, model_header(model, meta))


def load_model(path):
    """Returns ``(model, AdamState, header)``."""
    tensors, header = load_checkpoint(path)
    try:
        kind = header["kind"]
        params = {k: v for k, v in tensors.items() if not k.startswith("opt.")}
        head = MlpParams.from_tensors({k[5:]: v for k, v in params.items() if k.startswith("head/")},
                                      header["head"])
        enc = EncoderParams.from_tensors({k[8:]: v for k, v in params.items() if k.startswith("encoder/")},
                                         header["encoder"])
        if kind == GIVT:
            model = GivtModel(enc, head, header["n_components"], header["dim"], header["sigma_floor"])
        elif kind in (EDM, RFF):
            model = ScoreModel(process_for(kind), head, enc, header["sigma_data"])
        else:
            raise CorruptCheckpoint(f"{path}: unknown model kind {kind!r}")
    except (KeyError, TypeError, InvalidArgument) as exc:
        raise CorruptCheckpoint(f"{path}: incomplete model header ({exc})") from exc
    state = AdamState(
        {k[6:]: v for k, v in tensors.items() if k.startswith("opt.m/")},
        {k[6:]: v for k, v in tensors.items() if k.startswith("opt.v/")},
    )
    return model, state, header


def is_finite_model(model) -> bool:
    return all(np.all(np.isfinite(v)) for v in model.tensors().values())


__all__ = [
    "KINDS",
    "ModelConfig",
    "TrainResult",
    "build_model",
    "estimate_sigma_data",
    "load_model",
    "model_loss_and_grads",
    "sample_batch",
    "save_model",
    "train_model",
]
