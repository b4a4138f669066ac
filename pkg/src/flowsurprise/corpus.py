"""The synthetic corpus used by every experiment: training data plus held-out test sets.

Directory layout written by :func:`save_corpus`::

    manifest.json        seeds, counts and the timbre groups of the melody test set
    train/               melodies and segmented sequences
    test_melodies/       each held-out note stream rendered under every timbre
    test_segmented/      held-out sequences with planted boundaries
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .config import DataSection
from .errors import CorruptDataset
from .numerics import Rng
from .synthdata import GeneratorSpec, LatentSequence, gen_pitch_timbre, gen_segmented, load_dataset, \
    make_generator_spec, save_dataset

# stream ids under the data seed
_SPEC, _TRAIN_PT, _TRAIN_SEG, _TEST_PT, _TEST_SEG = 1, 2, 3, 4, 5


@dataclass
class Corpus:
    train: list[LatentSequence]
    test_groups: list[list[LatentSequence]]  # one note stream per group, one entry per timbre
    test_segmented: list[LatentSequence]

    @property
    def test_melodies(self) -> list[LatentSequence]:
        return [s for g in self.test_groups for s in g]


def generator_spec(cfg: DataSection, seed: int) -> GeneratorSpec:
    return make_generator_spec(
        Rng(seed, _SPEC), n_symbols=cfg.n_symbols, dim=cfg.dim, coarse_dim=cfg.coarse_dim, n_styles=cfg.n_styles,
        coarse_scale=cfg.coarse_scale, concentration=cfg.concentration, style_separation=cfg.style_separation,
        frames_per_symbol=cfg.frames_per_symbol,
        frame_rate=cfg.frame_rate, a_fine=cfg.a_fine, fine_rho=cfg.fine_rho, fine_spread=cfg.fine_spread,
        coarse_jitter=cfg.coarse_jitter, texture_seed=seed,
    )


def build_corpus(cfg: DataSection, seed: int) -> Corpus:
    spec = generator_spec(cfg, seed)
    base = Rng(seed)
    train = [
        gen_pitch_timbre(spec, cfg.length_symbols, i % cfg.n_timbres, base.child(_TRAIN_PT, i), name=f"mel{i:04d}")
        for i in range(cfg.train_melodies)
    ]
    train += [
        gen_segmented(spec, cfg.sections, base.child(_TRAIN_SEG, i), timbre=i % cfg.n_timbres, name=f"seg{i:04d}")
        for i in range(cfg.train_segmented)
    ]
    groups = [
        [gen_pitch_timbre(spec, cfg.length_symbols, tb, base.child(_TEST_PT, i), name=f"grp{i:03d}_t{tb}")
         for tb in range(cfg.n_timbres)]
        for i in range(cfg.test_melodies)
    ]
    seg = [
        gen_segmented(spec, cfg.sections, base.child(_TEST_SEG, i), timbre=i % cfg.n_timbres, name=f"tseg{i:03d}")
        for i in range(cfg.test_segmented)
    ]
    return Corpus(train, groups, seg)


def save_corpus(corpus: Corpus, root, seed: int, cfg: DataSection) -> None:
    root = Path(root)
    save_dataset(corpus.train, root / "train")
    save_dataset(corpus.test_melodies, root / "test_melodies")
    save_dataset(corpus.test_segmented, root / "test_segmented")
    manifest = {
        "seed": seed,
        "data": cfg.model_dump(),
        "counts": {"train": len(corpus.train), "test_melodies": len(corpus.test_melodies),
                   "test_segmented": len(corpus.test_segmented)},
        "groups": [[s.name for s in g] for g in corpus.test_groups],
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")


def load_corpus(root) -> Corpus:
    root = Path(root)
    try:
        manifest = json.loads((root / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CorruptDataset(f"{root}: missing or unreadable manifest ({exc})") from exc
    melodies = {s.name: s for s in load_dataset(root / "test_melodies")}
    try:
        groups = [[melodies[n] for n in g] for g in manifest["groups"]]
    except KeyError as exc:
        raise CorruptDataset(f"{root}: manifest names a missing sequence {exc}") from exc
    return Corpus(load_dataset(root / "train"), groups, load_dataset(root / "test_segmented"))
