"""Per-frame information content (IC) in bits per dimension, at any noise level."""

from __future__ import annotations

import csv
import json
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidArgument
from .numerics import Rng
from .odelik import SolverConfig, draw_probes, log_likelihood_batch
from .process import perturbation_mean
from .synthdata import LatentSequence

LN2 = math.log(2.0)


def bits_per_dim(loglik_nats, d: int):
    if d < 1:
        raise InvalidArgument("d must be at least 1")
    out = -np.asarray(loglik_nats, dtype=np.float64) / (d * LN2)
    return float(out) if out.ndim == 0 else out


@dataclass
class ICCurve:
    """IC of frames 1..T-1 of one sequence; ``values[j]`` belongs to frame j+1."""

    values: np.ndarray
    noise_level: float | None
    frame_rate: float
    model_id: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)

    def __len__(self) -> int:
        return len(self.values)

    def times(self) -> np.ndarray:
        return np.arange(1, len(self.values) + 1) / self.frame_rate

    def save(self, path) -> None:
        """Write ``<path>.csv`` (frame, time_seconds, ic_bits_per_dim) and ``<path>.json``."""
        base = Path(path).with_suffix("")
        base.parent.mkdir(parents=True, exist_ok=True)
        with open(base.with_suffix(".csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["frame", "time_seconds", "ic_bits_per_dim"])
            for j, (tm, v) in enumerate(zip(self.times(), self.values)):
                w.writerow([j + 1, repr(float(tm)), repr(float(v))])
        side = {"model_id": self.model_id, "t": self.noise_level, "frame_rate": self.frame_rate, **self.meta}
        base.with_suffix(".json").write_text(json.dumps(side, indent=1))

    @classmethod
    def load(cls, path) -> "ICCurve":
        base = Path(path).with_suffix("")
        side = json.loads(base.with_suffix(".json").read_text())
        with open(base.with_suffix(".csv"), newline="") as fh:
            rows = list(csv.DictReader(fh))
        values = np.array([float(r["ic_bits_per_dim"]) for r in rows])
        model_id, t, fps = side.pop("model_id"), side.pop("t"), side.pop("frame_rate")
        return cls(values, t, fps, model_id, side)


def sequence_key(seq: LatentSequence) -> int:
    """Stable integer id for a sequence, used to derive per-frame streams."""
    return zlib.crc32(seq.name.encode())


def frame_rngs(seed: int, seq: LatentSequence, ks, stream: int = 0) -> list[Rng]:
    base = Rng(seed, stream)
    key = sequence_key(seq)
    return [base.child(key, int(k)) for k in ks]


def frame_ics(model, items, t: float, cfg: SolverConfig, seed: int = 0, stream: int = 0):
    """IC (bits/dim) for (sequence, frame indices) pairs in one batched solve.

    Probes for frame k of a sequence come from ``Rng(seed, stream)`` keyed by
    (sequence, k); returns one array per item.
    """
    zs, ctxs, rngs, sizes = [], [], [], []
    for seq, ks in items:
        ks = np.asarray(ks, dtype=np.int64)
        if ks.size == 0:
            sizes.append(0)
            continue
        if ks.min() < 1 or ks.max() >= seq.length:
            raise InvalidArgument("frame index must lie in 1..T-1 (frame 0 has no context)")
        ctx = model.contexts(seq.frames[: ks.max()])
        ctxs.append(ctx[ks - 1])
        zs.append(perturbation_mean(seq.frames[ks], t, model.process))
        rngs.extend(frame_rngs(seed, seq, ks, stream))
        sizes.append(len(ks))
    if not zs:
        return [np.zeros(0) for _ in items]
    z = np.concatenate(zs)
    ctx = np.concatenate(ctxs)
    probes = draw_probes(cfg, rngs, z.shape[1])
    ll, _ = log_likelihood_batch(model, z, t, ctx, cfg, probes)
    ic = bits_per_dim(ll, z.shape[1])
    return np.split(np.atleast_1d(ic), np.cumsum(sizes)[:-1])


def frame_ic(model, seq: LatentSequence, k: int, t: float, cfg: SolverConfig, seed: int = 0) -> float:
    """IC of frame k given clean frames < k, with the frame moved to its level-t mean."""
    if k < 1:
        raise InvalidArgument("frame 0 has no context")
    return float(frame_ics(model, [(seq, [k])], t, cfg, seed)[0][0])


def ic_curves(model, sequences, t: float, cfg: SolverConfig, seed: int = 0, model_id: str = "") -> list[ICCurve]:
    """IC curves of several sequences, solved as one batch."""
    items = []
    for seq in sequences:
        if seq.length < 2:
            raise InvalidArgument("sequence needs at least two frames")
        items.append((seq, np.arange(1, seq.length)))
    values = frame_ics(model, items, t, cfg, seed)
    meta = {"solver": {"atol": cfg.atol, "rtol": cfg.rtol, "divergence": cfg.divergence, "n_r": cfg.n_r},
            "seed": seed}
    return [ICCurve(v, t, s.frame_rate, model_id, {**meta, "sequence": s.name}) for v, s in zip(values, sequences)]


def ic_curve(model, seq: LatentSequence, t: float, cfg: SolverConfig, seed: int = 0, model_id: str = "") -> ICCurve:
    return ic_curves(model, [seq], t, cfg, seed, model_id)[0]


def mean_nll(curves, trim_mask=None) -> float:
    """Mean IC over all curves; ``trim_mask`` (over the concatenated values) marks entries to drop."""
    values = np.concatenate([np.asarray(c.values if isinstance(c, ICCurve) else c, dtype=np.float64)
                             for c in curves]) if len(curves) else np.zeros(0)
    if trim_mask is not None:
        trim_mask = np.asarray(trim_mask, dtype=bool)
        if trim_mask.shape != values.shape:
            raise InvalidArgument("mask length must match the number of values")
        values = values[~trim_mask]
    if values.size == 0:
        raise InvalidArgument("nothing left to average")
    return float(values.mean())
