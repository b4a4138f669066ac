"""Evaluation harnesses: error tables, trimming, onset correlation, timbre invariance, segmentation."""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np
from scipy.ndimage import gaussian_filter1d

from .baseline import GIVT, givt_ic_curve
from .errors import InvalidArgument
from .numerics import Rng, error_stats, spearman_permutation_test, spearman_rho
from .odelik import SolverConfig
from .surprisal import ICCurve, frame_ics, ic_curves
from .synthdata import LatentSequence

BOUNDARY_WINDOW = 0.5  # seconds


@dataclass
class ExperimentReport:
    columns: tuple[str, ...]
    rows: list[tuple] = field(default_factory=list)

    def add(self, *row) -> None:
        if len(row) != len(self.columns):
            raise InvalidArgument("row does not match the report columns")
        self.rows.append(tuple(row))

    def to_csv(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.columns)
            for row in self.rows:
                w.writerow([repr(v) if isinstance(v, float) else v for v in row])

    def where(self, **match) -> list[dict]:
        out = []
        for row in self.rows:
            d = dict(zip(self.columns, row))
            if all(d[k] == v for k, v in match.items()):
                out.append(d)
        return out


@dataclass(frozen=True)
class NoveltyConfig:
    sigma: float = 5.0
    window: int = 10
    kappa: float = 1.0

    def __post_init__(self):
        if not self.sigma > 0 or self.window < 1:
            raise InvalidArgument("need sigma > 0 and window >= 1")


@dataclass
class BoundaryMatchResult:
    precision: float
    recall: float
    f1: float
    pairs: list[tuple[float, float]]


# -- trimming ----------------------------------------------------------------------


def trim_extremes(curves, fraction: float) -> np.ndarray:
    """Shared mask of time steps that are extreme under any model.

    For T steps each model flags its ``n = ceil(fraction * T)`` most extreme
    values: the ``ceil(n/2)`` lowest and the ``floor(n/2)`` highest.
    """
    if not 0 <= fraction < 0.5:
        raise InvalidArgument("fraction must lie in [0, 0.5)")
    arrays = [np.asarray(c.values if isinstance(c, ICCurve) else c, dtype=np.float64) for c in curves]
    if not arrays:
        raise InvalidArgument("no curves given")
    T = arrays[0].shape
    if any(a.shape != T or a.ndim != 1 for a in arrays):
        raise InvalidArgument("curves must be aligned vectors of equal length")
    mask = np.zeros(T, dtype=bool)
    n = math.ceil(fraction * T[0] - 1e-12)
    if n == 0:
        return mask
    lo, hi = -(-n // 2), n // 2
    for a in arrays:
        order = np.argsort(a, kind="stable")
        mask[order[:lo]] = True
        if hi:
            mask[order[-hi:]] = True
    return mask


# -- novelty segmentation -------------------------------------------------------


def novelty_curve(ic, cfg: NoveltyConfig = NoveltyConfig()) -> np.ndarray:
    """First difference of the Gaussian-smoothed curve (kernel cut at 4 sigma, reflective edges)."""
    x = np.asarray(ic.values if isinstance(ic, ICCurve) else ic, dtype=np.float64)
    if x.ndim != 1 or x.size < 3:
        raise InvalidArgument("novelty needs at least three values")
    smooth = gaussian_filter1d(x, cfg.sigma, mode="reflect", truncate=4.0)
    return np.diff(smooth)


def pick_peaks(curve, cfg: NoveltyConfig = NoveltyConfig()) -> list[int]:
    """Interior strict maxima of the window [i-w, i+w] that clear mean + kappa * std there."""
    x = np.asarray(curve, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise InvalidArgument("need a nonempty vector")
    w = cfg.window
    peaks = []
    for i in range(1, len(x) - 1):
        lo, hi = max(0, i - w), min(len(x), i + w + 1)
        win = x[lo:hi]
        others = np.delete(win, i - lo)
        if not np.all(x[i] > others):
            continue
        if x[i] >= win.mean() + cfg.kappa * win.std():
            peaks.append(i)
    return peaks


def novelty_index_times(n: int, frame_rate: float) -> np.ndarray:
    """Time of novelty index i: the rise from curve value i to i+1 ends at frame i+2."""
    return (np.arange(n) + 2) / frame_rate


def boundary_prf(predicted, annotated, window: float = BOUNDARY_WINDOW) -> BoundaryMatchResult:
    """Greedy one-to-one matching, closest pairs first, within +-window seconds."""
    p = np.asarray(predicted, dtype=np.float64)
    a = np.asarray(annotated, dtype=np.float64)
    if not window > 0:
        raise InvalidArgument("window must be positive")
    if np.any(np.diff(p) < 0) or np.any(np.diff(a) < 0):
        raise InvalidArgument("times must be sorted")
    cands = []
    for i, pt in enumerate(p):
        for j, at in enumerate(a):
            dist = abs(pt - at)
            if dist <= window + 1e-9:
                cands.append((dist, min(pt, at), max(pt, at), i, j))
    cands.sort(key=lambda c: c[:3])
    used_p, used_a, pairs = set(), set(), []
    for _, _, _, i, j in cands:
        if i not in used_p and j not in used_a:
            used_p.add(i)
            used_a.add(j)
            pairs.append((float(p[i]), float(a[j])))
    m = len(pairs)
    prec = m / len(p) if len(p) else 0.0
    rec = m / len(a) if len(a) else 0.0
    f1 = 2 * prec * rec / (prec + rec) if prec + rec > 0 else 0.0
    return BoundaryMatchResult(prec, rec, f1, sorted(pairs))


def segment_boundaries(ic: ICCurve, cfg: NoveltyConfig = NoveltyConfig()) -> np.ndarray:
    """Predicted boundary times (seconds) from the novelty peaks of an IC curve."""
    nov = novelty_curve(ic, cfg)
    times = novelty_index_times(len(nov), ic.frame_rate)
    return times[pick_peaks(nov, cfg)]


def random_peak_f1(n_peaks: int, duration: float, annotated, rng: Rng, draws: int = 100,
                   window: float = BOUNDARY_WINDOW) -> float:
    """Average F1 of ``n_peaks`` uniformly placed predictions."""
    g = rng.generator()
    return float(np.mean([
        boundary_prf(np.sort(g.uniform(0, duration, n_peaks)), annotated, window).f1 for _ in range(draws)
    ]))


# -- onset-aligned correlation ----------------------------------------------------


def onset_aligned_ic(ic, onsets) -> np.ndarray:
    """Mean IC of each onset frame and the frame after it (clamped at the end).

    With an :class:`ICCurve`, onsets are sequence frame indices (frame k sits at
    ``values[k-1]``); with a plain array they index the array directly.
    """
    if isinstance(ic, ICCurve):
        values, offset = ic.values, 1
    else:
        values, offset = np.asarray(ic, dtype=np.float64), 0
    idx = np.asarray(onsets, dtype=np.int64) - offset
    if idx.size == 0:
        return np.zeros(0)
    if idx.min() < 0 or idx.max() >= len(values):
        raise InvalidArgument("onset outside the curve")
    nxt = np.minimum(idx + 1, len(values) - 1)
    return 0.5 * (values[idx] + values[nxt])


def _scored_onsets(seq: LatentSequence):
    """Onsets that have a context (frame > 0) and their true symbol ICs."""
    if seq.onsets is None or seq.symbol_ics is None:
        raise InvalidArgument(f"sequence {seq.name} has no symbol annotations")
    keep = np.asarray(seq.onsets) > 0
    return np.asarray(seq.onsets)[keep], np.asarray(seq.symbol_ics)[keep]


def onset_correlation(curves, sequences, rng: Rng, n_permutations: int = 10_000):
    """Spearman rho and permutation p between onset-aligned IC and true symbol IC, pooled."""
    model_ic, true_ic = [], []
    for c, s in zip(curves, sequences, strict=True):
        on, ics = _scored_onsets(s)
        model_ic.append(onset_aligned_ic(c, on))
        true_ic.append(ics)
    return spearman_permutation_test(np.concatenate(model_ic), np.concatenate(true_ic), n_permutations, rng)


def model_curves(model, sequences, t, cfg: SolverConfig, seed: int = 0, model_id: str = "") -> list[ICCurve]:
    if getattr(model, "kind", None) == GIVT:
        return [givt_ic_curve(model, s, model_id) for s in sequences]
    return ic_curves(model, sequences, t, cfg, seed, model_id)


def _levels(model, noise_levels, model_id):
    if getattr(model, "kind", None) == GIVT:
        return [None]
    levels = noise_levels.get(model_id) if isinstance(noise_levels, dict) else noise_levels
    if not levels:
        raise InvalidArgument(f"no noise levels for {model_id}")
    return list(levels)


def correlation_experiment(models: dict, sequences, noise_levels, cfg: SolverConfig, seed: int = 0,
                           n_permutations: int = 10_000) -> ExperimentReport:
    """Rows (model, t, rho, p); ``noise_levels`` is a list or a dict keyed by model id."""
    rep = ExperimentReport(("model", "t", "rho", "p"))
    for mid, model in models.items():
        for t in _levels(model, noise_levels, mid):
            curves = model_curves(model, sequences, t, cfg, seed, mid)
            rho, p = onset_correlation(curves, sequences, Rng(seed).child(7), n_permutations)
            rep.add(mid, t, rho, p)
    return rep


def timbre_pair_correlation(curves, sequences) -> float:
    """Mean Spearman rho of onset-aligned IC over all pairs in one note-material group."""
    if len(curves) < 2:
        raise InvalidArgument("a group needs at least two renderings")
    ref = sequences[0]
    for s in sequences[1:]:
        if not (np.array_equal(s.symbols, ref.symbols) and np.array_equal(s.onsets, ref.onsets)):
            raise InvalidArgument("sequences in a group must share note material")
    on, _ = _scored_onsets(ref)
    aligned = [onset_aligned_ic(c, on) for c in curves]
    return float(np.mean([spearman_rho(a, b) for a, b in itertools.combinations(aligned, 2)]))


def timbre_invariance_experiment(models: dict, groups, noise_levels, cfg: SolverConfig,
                                 seed: int = 0) -> ExperimentReport:
    """Rows (model, t, rho): rho averaged over every pair within every group."""
    rep = ExperimentReport(("model", "t", "rho"))
    flat = [s for g in groups for s in g]
    for mid, model in models.items():
        for t in _levels(model, noise_levels, mid):
            curves = model_curves(model, flat, t, cfg, seed, mid)
            rhos, pos = [], 0
            for g in groups:
                rhos.append(timbre_pair_correlation(curves[pos:pos + len(g)], g))
                pos += len(g)
            rep.add(mid, t, float(np.mean(rhos)))
    return rep


def segmentation_experiment(models: dict, sequences, noise_levels, cfg: SolverConfig, seed: int = 0,
                            novelty: NoveltyConfig = NoveltyConfig(),
                            window: float = BOUNDARY_WINDOW) -> ExperimentReport:
    """Rows (model, t, precision, recall, f1, random_f1), averaged over sequences."""
    rep = ExperimentReport(("model", "t", "precision", "recall", "f1", "random_f1"))
    for mid, model in models.items():
        for t in _levels(model, noise_levels, mid):
            curves = model_curves(model, sequences, t, cfg, seed, mid)
            scores, rand = [], []
            for i, (c, s) in enumerate(zip(curves, sequences)):
                pred = segment_boundaries(c, novelty)
                scores.append(boundary_prf(pred, s.boundaries, window))
                rand.append(random_peak_f1(len(pred), s.duration, s.boundaries, Rng(seed).child(11, i),
                                           window=window))
            rep.add(mid, t, float(np.mean([r.precision for r in scores])),
                    float(np.mean([r.recall for r in scores])), float(np.mean([r.f1 for r in scores])),
                    float(np.mean(rand)))
    return rep


def error_experiment(model, sequences, n_r_list=(1, 2, 4, 8, 16), tol_list=(1.0, 0.1, 0.01, 0.001),
                     seed: int = 0, max_frames: int = 500, ref_n_r: int = 32, s_tol: float = 1e-3,
                     ref_tol: float = 1e-5, q_n_r: int = 4, model_id: str = "") -> ExperimentReport:
    """Hutchinson (S) and solver (Q) error of data-level NLL, normalised by mean |reference|.

    S rows use independent probe streams per n_r against an n_r = ``ref_n_r``
    reference at ``s_tol``. Q rows reuse one probe draw per frame at every
    tolerance, so they isolate the discretisation error against ``ref_tol``.
    Rows are (model, metric, param, value) with metric in S-MAE, Q-MAE, Q-ME.
    An empty ``n_r_list`` or ``tol_list`` skips that half.
    """
    items, total = [], 0
    for s in sequences:
        ks = np.arange(1, s.length)[: max(0, max_frames - total)]
        if ks.size:
            items.append((s, ks))
            total += ks.size
    if total < 100:
        raise InvalidArgument("error experiment needs at least 100 frames")
    t0 = model.process.t_start

    def nll(n_r, tol, stream):
        cfg = SolverConfig.with_tol(tol, n_r=n_r)
        return np.concatenate(frame_ics(model, items, t0, cfg, seed, stream))

    rep = ExperimentReport(("model", "metric", "param", "value"))
    if len(n_r_list):
        ref = nll(ref_n_r, s_tol, ref_n_r)
    for n_r in n_r_list:
        est = ref if n_r == ref_n_r else nll(n_r, s_tol, n_r)
        rep.add(model_id, "S-MAE", n_r, error_stats(est, ref).mae_normalized)
    q_stream = 1000 + q_n_r
    if len(tol_list):
        qref = nll(q_n_r, ref_tol, q_stream)
    for tol in tol_list:
        st = error_stats(nll(q_n_r, tol, q_stream), qref)
        rep.add(model_id, "Q-MAE", tol, st.mae_normalized)
        rep.add(model_id, "Q-ME", tol, st.me_normalized)
    return rep


# -- drawing -------------------------------------------------------------------------


def svg_line_plot(series: dict, path, title: str = "", xlabel: str = "", ylabel: str = "",
                  vlines=(), width: int = 720, height: int = 300) -> None:
    """Minimal SVG line chart: ``series`` maps a label to (x, y) arrays; ``vlines`` are x markers."""
    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]
    pad_l, pad_r, pad_t, pad_b = 60, 120, 30, 40
    xs = np.concatenate([np.asarray(x, float) for x, _ in series.values()] + [np.asarray(vlines, float)])
    ys = np.concatenate([np.asarray(y, float) for _, y in series.values()])
    xs, ys = xs[np.isfinite(xs)], ys[np.isfinite(ys)]
    if xs.size == 0 or ys.size == 0:
        raise InvalidArgument("nothing to draw")
    x0, x1 = float(xs.min()), float(xs.max()) or 1.0
    y0, y1 = float(ys.min()), float(ys.max())
    if x1 == x0:
        x1 = x0 + 1
    if y1 == y0:
        y1 = y0 + 1
    pw, ph = width - pad_l - pad_r, height - pad_t - pad_b

    def px(x):
        return pad_l + (x - x0) / (x1 - x0) * pw

    def py(y):
        return pad_t + (1 - (y - y0) / (y1 - y0)) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" '
           'font-size="11">',
           f'<rect x="{pad_l}" y="{pad_t}" width="{pw}" height="{ph}" fill="none" stroke="#888"/>',
           f'<text x="{width / 2}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>',
           f'<text x="{pad_l + pw / 2}" y="{height - 8}" text-anchor="middle">{escape(xlabel)}</text>',
           f'<text x="14" y="{pad_t + ph / 2}" transform="rotate(-90 14 {pad_t + ph / 2})" '
           f'text-anchor="middle">{escape(ylabel)}</text>',
           f'<text x="{pad_l - 4}" y="{pad_t + 4}" text-anchor="end">{y1:.3g}</text>',
           f'<text x="{pad_l - 4}" y="{pad_t + ph}" text-anchor="end">{y0:.3g}</text>',
           f'<text x="{pad_l}" y="{pad_t + ph + 14}" text-anchor="middle">{x0:.3g}</text>',
           f'<text x="{pad_l + pw}" y="{pad_t + ph + 14}" text-anchor="middle">{x1:.3g}</text>']
    for v in vlines:
        out.append(f'<line x1="{px(v):.1f}" y1="{pad_t}" x2="{px(v):.1f}" y2="{pad_t + ph}" '
                   'stroke="#aaa" stroke-dasharray="4 3"/>')
    for n, (label, (x, y)) in enumerate(series.items()):
        c = colors[n % len(colors)]
        pts = " ".join(f"{px(a):.1f},{py(b):.1f}" for a, b in zip(x, y) if np.isfinite(a) and np.isfinite(b))
        out.append(f'<polyline fill="none" stroke="{c}" stroke-width="1.3" points="{pts}"/>')
        out.append(f'<text x="{width - pad_r + 8}" y="{pad_t + 14 * (n + 1)}" fill="{c}">{escape(str(label))}</text>')
    out.append("</svg>")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("\n".join(out))
