"""Synthetic latent sequences with known symbol surprisal and planted section boundaries.

Each frame is split into a low-dimensional coarse block that carries the
symbol (a Markov chain over a small alphabet, one symbol spanning several
frames) and a fine block filled with timbre-dependent texture. The texture is
an AR(1) process with anisotropic innovations, rotated by an orthogonal matrix
that depends on the timbre id, so it is learnable but says nothing about the
symbols.

On-disk layout of a dataset directory::

    <name>.bin   frames, float32 little-endian, row-major T x d
    <name>.json  {"format": 1, "name", "shape": [T, d], "frame_rate",
                  "annotations": {...}, "generator_seed"}
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CorruptDataset, InvalidArgument
from .numerics import Rng

_DATA_FORMAT = 1

# stream tags for Rng.child
_SYMBOLS, _TEXTURE, _TIMBRE, _SECTIONS = 1, 2, 3, 4


@dataclass
class LatentSequence:
    frames: np.ndarray
    frame_rate: float
    name: str = "seq"
    symbols: np.ndarray | None = None  # symbol id per frame
    symbol_ics: np.ndarray | None = None  # bits, one per symbol event
    onsets: np.ndarray | None = None  # frame index of each symbol event
    boundaries: tuple[float, ...] = ()
    timbre: int | None = None
    seed: int | None = None

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[0] < 2:
            raise InvalidArgument("a sequence needs a T x d frame matrix with T >= 2")
        if not np.all(np.isfinite(self.frames)):
            raise InvalidArgument("frames must be finite")
        if not self.frame_rate > 0:
            raise InvalidArgument("frame_rate must be positive")
        b = np.asarray(self.boundaries, dtype=np.float64)
        if b.size and (np.any(np.diff(b) <= 0) or b[0] <= 0 or b[-1] >= self.duration):
            raise InvalidArgument("boundaries must be sorted and strictly inside the sequence")
        self.boundaries = tuple(float(x) for x in b)

    @property
    def length(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]

    @property
    def duration(self) -> float:
        return self.length / self.frame_rate

    def annotations(self) -> dict:
        def as_list(a):
            return None if a is None else np.asarray(a).tolist()

        return {
            "symbols": as_list(self.symbols),
            "symbol_ics": as_list(self.symbol_ics),
            "onsets": as_list(self.onsets),
            "boundaries": list(self.boundaries),
            "timbre": self.timbre,
        }


@dataclass
class SectionStyle:
    """Symbol alphabet rendering and transition law used by one section."""

    transitions: np.ndarray  # S x S
    embeddings: np.ndarray  # S x d_c


@dataclass
class GeneratorSpec:
    styles: list[SectionStyle]  # styles[0] drives gen_pitch_timbre
    dim: int = 16
    coarse_dim: int = 4
    frames_per_symbol: int = 4
    frame_rate: float = 10.0
    a_fine: float = 0.05
    fine_rho: float = 0.9
    fine_spread: float = 10.0  # ratio of largest to smallest fine innovation scale
    coarse_jitter: float = 0.05
    texture_seed: int = 0
    _mixers: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if not 0 < self.coarse_dim < self.dim:
            raise InvalidArgument("need 0 < coarse_dim < dim")
        if self.frames_per_symbol < 1 or not self.frame_rate > 0 or not self.a_fine > 0:
            raise InvalidArgument("frames_per_symbol, frame_rate and a_fine must be positive")
        if not 0 <= self.fine_rho < 1 or self.fine_spread < 1 or self.coarse_jitter < 0:
            raise InvalidArgument("bad texture parameters")
        if not self.styles:
            raise InvalidArgument("at least one style is required")
        for style in self.styles:
            check_transitions(style.transitions)
            e = np.asarray(style.embeddings, dtype=np.float64)
            if e.shape != (style.transitions.shape[0], self.coarse_dim):
                raise InvalidArgument("embeddings must be S x coarse_dim")
            if min_separation(e) < 4 * self.a_fine:
                raise InvalidArgument("coarse embeddings must be separated by at least 4 * a_fine")

    @property
    def n_symbols(self) -> int:
        return self.styles[0].transitions.shape[0]

    @property
    def transitions(self) -> np.ndarray:
        return self.styles[0].transitions

    @property
    def embeddings(self) -> np.ndarray:
        return self.styles[0].embeddings

    @property
    def fine_dim(self) -> int:
        return self.dim - self.coarse_dim

    def fine_scales(self) -> np.ndarray:
        return self.a_fine * np.geomspace(1.0, 1.0 / self.fine_spread, self.fine_dim)

    def mixer(self, timbre: int) -> np.ndarray:
        """Orthogonal fine-texture rotation for a timbre id."""
        if timbre not in self._mixers:
            g = Rng(self.texture_seed).child(_TIMBRE, timbre).generator()
            q, r = np.linalg.qr(g.standard_normal((self.fine_dim, self.fine_dim)))
            self._mixers[timbre] = q * np.sign(np.diag(r))
        return self._mixers[timbre]


def check_transitions(p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] != p.shape[1] or p.shape[0] < 1:
        raise InvalidArgument("transition matrix must be square")
    if np.any(p < 0) or not np.all(np.isfinite(p)) or not np.allclose(p.sum(axis=1), 1.0, atol=1e-9):
        raise InvalidArgument("transition rows must be probability vectors")
    return p


def min_separation(e) -> float:
    e = np.asarray(e, dtype=np.float64)
    if len(e) < 2:
        return math.inf
    dist = np.linalg.norm(e[:, None] - e[None], axis=-1)
    return float(dist[np.triu_indices(len(e), 1)].min())


def random_style(n_symbols: int, coarse_dim: int, scale: float, concentration: float, rng: Rng,
                 min_sep: float) -> SectionStyle:
    """Dirichlet transition rows (no self-transitions) and well-separated embeddings."""
    g = rng.generator()
    p = np.zeros((n_symbols, n_symbols))
    for i in range(n_symbols):
        others = [j for j in range(n_symbols) if j != i] if n_symbols > 1 else [i]
        p[i, others] = g.dirichlet(np.full(len(others), concentration))
    for _ in range(1000):
        e = g.standard_normal((n_symbols, coarse_dim)) * scale
        if min_separation(e) >= min_sep:
            return SectionStyle(p, e)
    raise InvalidArgument("could not place separated embeddings; raise scale")


def _style_centers(n: int, d: int, sep: float, rng: Rng) -> np.ndarray:
    """Origin plus ``n - 1`` random centers, all pairwise at least ``sep`` apart."""
    g = rng.generator()
    for _ in range(1000):
        c = np.vstack([np.zeros(d), g.standard_normal((n - 1, d)) * sep])
        if n < 2 or min_separation(c) >= sep:
            return c
    raise InvalidArgument("could not place separated style centers")


def make_generator_spec(rng: Rng, n_symbols: int = 8, dim: int = 16, coarse_dim: int = 4,
                        n_styles: int = 4, coarse_scale: float = 3.0, concentration: float = 0.5,
                        style_separation: float = 0.0, **kwargs) -> GeneratorSpec:
    """Random spec with ``n_styles`` section styles; style 0 is the default one.

    With ``style_separation > 0`` every style other than 0 has its palette moved
    to its own center, at least that far from the others, so a style switch
    lands away from the current palette.
    """
    a_fine = kwargs.get("a_fine", 0.05)
    min_sep = max(4 * a_fine, 0.5 * coarse_scale)
    styles = [
        random_style(n_symbols, coarse_dim, coarse_scale, concentration, rng.child(_SECTIONS, k), min_sep)
        for k in range(n_styles)
    ]
    if style_separation > 0:
        centers = _style_centers(n_styles, coarse_dim, style_separation, rng.child(_SECTIONS, n_styles))
        styles = [SectionStyle(st.transitions, st.embeddings + c) for st, c in zip(styles, centers)]
    kwargs.setdefault("texture_seed", rng.seed)
    return GeneratorSpec(styles, dim=dim, coarse_dim=coarse_dim, **kwargs)


def _symbol_path(p, n: int, g: np.random.Generator, first=None):
    """Markov path of length n; returns symbols and their ICs in bits."""
    S = p.shape[0]
    syms = np.empty(n, dtype=np.int64)
    ics = np.empty(n)
    if first is None:
        syms[0] = g.integers(S)
        ics[0] = math.log2(S)
    else:
        syms[0] = g.choice(S, p=p[first])
        ics[0] = -math.log2(p[first, syms[0]])
    cdf = np.cumsum(p, axis=1)
    for i in range(1, n):
        row = cdf[syms[i - 1]]
        syms[i] = min(int(np.searchsorted(row, g.random() * row[-1], side="right")), S - 1)
        ics[i] = -math.log2(p[syms[i - 1], syms[i]])
    return syms, ics


def _texture(spec: GeneratorSpec, n_frames: int, timbre: int, rng: Rng):
    """Coarse jitter and fine AR(1) texture, both depending on the timbre."""
    g = rng.child(_TEXTURE, timbre).generator()
    scales = spec.fine_scales()
    rho = spec.fine_rho
    innov = g.standard_normal((n_frames, spec.fine_dim)) * scales * math.sqrt(1 - rho * rho)
    u = np.empty_like(innov)
    u[0] = g.standard_normal(spec.fine_dim) * scales
    for k in range(1, n_frames):
        u[k] = rho * u[k - 1] + innov[k]
    fine = u @ spec.mixer(timbre).T
    jitter = g.standard_normal((n_frames, spec.coarse_dim)) * spec.coarse_jitter
    return jitter, fine


def _render(spec, styles_per_frame, symbols, timbre, rng):
    n = len(symbols)
    jitter, fine = _texture(spec, n, timbre, rng)
    coarse = np.stack([spec.styles[s].embeddings[k] for s, k in zip(styles_per_frame, symbols)])
    return np.concatenate([coarse + jitter, fine], axis=1)


def gen_pitch_timbre(spec: GeneratorSpec, length_symbols: int, timbre: int, rng: Rng,
                     name: str | None = None) -> LatentSequence:
    """Render a Markov symbol path under one timbre.

    The symbol path is drawn from a stream that does not involve the timbre, so
    equal ``rng`` with different timbres gives the same notes, different texture.
    """
    if length_symbols < 2:
        raise InvalidArgument("need at least two symbols")
    check_transitions(spec.transitions)
    syms, ics = _symbol_path(spec.transitions, length_symbols, rng.child(_SYMBOLS).generator())
    fps = spec.frames_per_symbol
    per_frame = np.repeat(syms, fps)
    frames = _render(spec, np.zeros(len(per_frame), dtype=np.int64), per_frame, timbre, rng)
    return LatentSequence(
        frames, spec.frame_rate, name or f"pt_{rng.seed}_{rng.stream}_{timbre}",
        symbols=per_frame, symbol_ics=ics, onsets=np.arange(length_symbols) * fps,
        timbre=timbre, seed=rng.seed,
    )


def gen_segmented(spec: GeneratorSpec, n_sections: int, rng: Rng, section_frames: int | None = None,
                  timbre: int | None = None, name: str | None = None) -> LatentSequence:
    """Concatenate sections that each switch to a different style.

    Section lengths default to a random whole number of symbols between 8 and
    16; ``section_frames`` fixes them instead. A boundary sits at the first
    frame of every section after the first.
    """
    if n_sections < 2:
        raise InvalidArgument("need at least two sections")
    if len(spec.styles) < 2:
        raise InvalidArgument("segmented data needs at least two styles")
    g = rng.child(_SECTIONS).generator()
    if timbre is None:
        timbre = int(g.integers(4))
    fps = spec.frames_per_symbol
    style_ids, symbols, ics, onsets, boundaries = [], [], [], [], []
    style = int(g.integers(len(spec.styles)))
    start = 0
    for sec in range(n_sections):
        if sec:
            style = int((style + g.integers(1, len(spec.styles))) % len(spec.styles))
            boundaries.append(start / spec.frame_rate)
        n = section_frames if section_frames is not None else fps * int(g.integers(8, 17))
        n_sym = -(-n // fps)
        syms, sym_ics = _symbol_path(spec.styles[style].transitions, n_sym, g)
        per_frame = np.repeat(syms, fps)[:n]
        style_ids.append(np.full(n, style))
        symbols.append(per_frame)
        ics.append(sym_ics)
        onsets.append(start + np.arange(n_sym) * fps)
        start += n
    style_ids = np.concatenate(style_ids)
    symbols = np.concatenate(symbols)
    frames = _render(spec, style_ids, symbols, timbre, rng)
    return LatentSequence(
        frames, spec.frame_rate, name or f"seg_{rng.seed}_{rng.stream}",
        symbols=symbols, symbol_ics=np.concatenate(ics), onsets=np.concatenate(onsets),
        boundaries=tuple(boundaries), timbre=timbre, seed=rng.seed,
    )


# -- dataset files ---------------------------------------------------------------


def save_dataset(sequences, path) -> None:
    """Write each sequence as ``<name>.bin`` plus a JSON sidecar.

    Frames are stored as float32, so a saved dataset reloads to the float32
    values of the input.
    """
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    names = [s.name for s in sequences]
    if len(set(names)) != len(names):
        raise InvalidArgument("sequence names must be unique")
    for seq in sequences:
        if not seq.name or any(c in seq.name for c in "/\\") or seq.name.startswith("."):
            raise InvalidArgument(f"bad sequence name {seq.name!r}")
        data = np.ascontiguousarray(seq.frames, dtype="<f4").tobytes()
        header = {
            "format": _DATA_FORMAT,
            "name": seq.name,
            "shape": list(seq.frames.shape),
            "frame_rate": seq.frame_rate,
            "annotations": seq.annotations(),
            "generator_seed": seq.seed,
        }
        _atomic_write(root / f"{seq.name}.bin", data)
        _atomic_write(root / f"{seq.name}.json", json.dumps(header, indent=1).encode())


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def load_dataset(path) -> list[LatentSequence]:
    """Read every sequence in a directory written by :func:`save_dataset`, sorted by name."""
    root = Path(path)
    if not root.is_dir():
        raise CorruptDataset(f"{root} is not a directory")
    out = []
    for side in sorted(root.glob("*.json")):
        try:
            header = json.loads(side.read_text())
            T, d = (int(x) for x in header["shape"])
            ann = header["annotations"]
            fps = float(header["frame_rate"])
            if header.get("format") != _DATA_FORMAT:
                raise CorruptDataset(f"{side}: unknown format {header.get('format')!r}")
        except (OSError, ValueError, KeyError, TypeError) as exc:
            raise CorruptDataset(f"{side}: malformed header ({exc})") from exc
        binary = side.with_suffix(".bin")
        try:
            raw = binary.read_bytes()
        except OSError as exc:
            raise CorruptDataset(f"{binary}: {exc}") from exc
        if len(raw) != 4 * T * d:
            raise CorruptDataset(f"{binary}: expected {4 * T * d} bytes, found {len(raw)}")
        frames = np.frombuffer(raw, dtype="<f4").reshape(T, d).astype(np.float64)

        def arr(key, dtype):
            v = ann.get(key)
            return None if v is None else np.asarray(v, dtype=dtype)

        try:
            out.append(LatentSequence(
                frames, fps, header["name"],
                symbols=arr("symbols", np.int64), symbol_ics=arr("symbol_ics", np.float64),
                onsets=arr("onsets", np.int64), boundaries=tuple(ann.get("boundaries") or ()),
                timbre=ann.get("timbre"), seed=header.get("generator_seed"),
            ))
        except InvalidArgument as exc:
            raise CorruptDataset(f"{side}: {exc}") from exc
    return out
