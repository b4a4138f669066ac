import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowsurprise.errors import CorruptDataset, InvalidArgument
from flowsurprise.numerics import Rng
from flowsurprise.synthdata import (
    GeneratorSpec,
    LatentSequence,
    SectionStyle,
    gen_pitch_timbre,
    gen_segmented,
    load_dataset,
    make_generator_spec,
    save_dataset,
)


@pytest.fixture(scope="module")
def spec():
    return make_generator_spec(Rng(0))


def spec_with(transitions, coarse_dim=4):
    S = len(transitions)
    emb = np.eye(S, coarse_dim) * 3 if S <= coarse_dim else Rng(1).generator().normal(size=(S, coarse_dim)) * 3
    return GeneratorSpec([SectionStyle(np.asarray(transitions, float), emb)], coarse_dim=coarse_dim)


class TestPitchTimbre:
    def test_uniform_transitions_two_bits(self):
        s = spec_with(np.full((4, 4), 0.25))
        seq = gen_pitch_timbre(s, 40, 0, Rng(1))
        np.testing.assert_allclose(seq.symbol_ics, 2.0)

    def test_identity_transitions_zero_bits(self):
        s = spec_with(np.eye(4))
        seq = gen_pitch_timbre(s, 20, 0, Rng(2))
        assert np.all(seq.symbol_ics[1:] == 0)
        assert np.all(seq.symbols == seq.symbols[0])

    def test_timbre_changes_frames_not_notes(self, spec):
        a = gen_pitch_timbre(spec, 30, 0, Rng(3))
        b = gen_pitch_timbre(spec, 30, 1, Rng(3))
        np.testing.assert_array_equal(a.symbols, b.symbols)
        np.testing.assert_array_equal(a.symbol_ics, b.symbol_ics)
        np.testing.assert_array_equal(a.onsets, b.onsets)
        assert not np.allclose(a.frames, b.frames)

    def test_shape_and_onsets(self, spec):
        seq = gen_pitch_timbre(spec, 32, 2, Rng(4))
        assert seq.frames.shape == (128, 16)
        np.testing.assert_array_equal(seq.onsets, np.arange(32) * 4)
        assert seq.frame_rate == 10.0

    def test_invalid_transitions(self):
        with pytest.raises(InvalidArgument):
            spec_with(np.full((3, 3), 0.5))
        with pytest.raises(InvalidArgument):
            spec_with([[1.5, -0.5], [0.5, 0.5]])

    def test_too_short(self, spec):
        with pytest.raises(InvalidArgument):
            gen_pitch_timbre(spec, 1, 0, Rng(0))

    def test_embeddings_separated(self, spec):
        for style in spec.styles:
            e = style.embeddings
            d = np.linalg.norm(e[:, None] - e[None], axis=-1)
            assert d[np.triu_indices(len(e), 1)].min() >= 4 * spec.a_fine

    def test_transition_frequencies(self, spec):
        seq = gen_pitch_timbre(spec, 100_001, 0, Rng(5))
        syms = seq.symbols[seq.onsets]
        P = spec.transitions
        S = len(P)
        counts = np.zeros((S, S))
        np.add.at(counts, (syms[:-1], syms[1:]), 1)
        n = counts.sum(axis=1, keepdims=True)
        sd = np.sqrt(n * P * (1 - P))
        assert np.all(np.abs(counts - n * P) <= 3 * sd + 1e-9)
        np.testing.assert_allclose(seq.symbol_ics[1:], -np.log2(P[syms[:-1], syms[1:]]))

    def test_coarse_block_recovers_symbols(self, spec):
        seq = gen_pitch_timbre(spec, 2500, 3, Rng(6))
        coarse = seq.frames[:, : spec.coarse_dim]
        d = np.linalg.norm(coarse[:, None] - spec.embeddings[None], axis=-1)
        assert np.mean(d.argmin(axis=1) == seq.symbols) >= 0.999

    def test_fine_texture_is_correlated(self, spec):
        seq = gen_pitch_timbre(spec, 2500, 0, Rng(7))
        fine = seq.frames[:, spec.coarse_dim:]
        innov = fine[1:] - spec.fine_rho * fine[:-1]
        c = np.corrcoef(innov.T)
        off = np.abs(c[np.triu_indices(len(c), 1)])
        assert off.max() > 0.3


class TestSegmented:
    def test_two_fixed_sections(self, spec):
        seq = gen_segmented(spec, 2, Rng(1), section_frames=50)
        assert seq.length == 100
        assert seq.boundaries == (5.0,)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000), st.integers(2, 6))
    def test_boundaries_interior_and_increasing(self, seed, n):
        seq = gen_segmented(make_spec_cached(), n, Rng(seed))
        b = np.array(seq.boundaries)
        assert len(b) == n - 1
        assert np.all(np.diff(b) > 0) and b[0] > 0 and b[-1] < seq.duration

    def test_deterministic(self, spec):
        a = gen_segmented(spec, 3, Rng(9))
        b = gen_segmented(spec, 3, Rng(9))
        np.testing.assert_array_equal(a.frames, b.frames)
        assert a.boundaries == b.boundaries

    def test_one_section_rejected(self, spec):
        with pytest.raises(InvalidArgument):
            gen_segmented(spec, 1, Rng(0))


_SPEC = []


def make_spec_cached():
    if not _SPEC:
        _SPEC.append(make_generator_spec(Rng(0)))
    return _SPEC[0]


class TestDatasetFiles:
    def test_round_trip_bit_exact(self, spec, tmp_path):
        seqs = [gen_pitch_timbre(spec, 10, 0, Rng(1)), gen_segmented(spec, 3, Rng(2))]
        save_dataset(seqs, tmp_path)
        back = load_dataset(tmp_path)
        assert [s.name for s in back] == sorted(s.name for s in seqs)
        by_name = {s.name: s for s in back}
        for s in seqs:
            r = by_name[s.name]
            np.testing.assert_array_equal(r.frames, s.frames.astype(np.float32).astype(np.float64))
            assert r.annotations() == s.annotations()
            assert r.frame_rate == s.frame_rate
        save_dataset(back, tmp_path / "again")
        for s in seqs:
            assert (tmp_path / f"{s.name}.bin").read_bytes() == (tmp_path / "again" / f"{s.name}.bin").read_bytes()

    @settings(max_examples=20, deadline=None)
    @given(st.integers(2, 30), st.integers(1, 6), st.integers(0, 2**31))
    def test_round_trip_property(self, T, d, seed):
        import tempfile

        frames = np.random.default_rng(seed).normal(size=(T, d)).astype(np.float32)
        seq = LatentSequence(frames, 7.5, "x")
        with tempfile.TemporaryDirectory() as tmp:
            save_dataset([seq], tmp)
            (back,) = load_dataset(tmp)
        assert back.frames.astype(np.float32).tobytes() == frames.tobytes()

    def test_truncated(self, spec, tmp_path):
        save_dataset([gen_pitch_timbre(spec, 10, 0, Rng(1), name="a")], tmp_path)
        raw = (tmp_path / "a.bin").read_bytes()
        (tmp_path / "a.bin").write_bytes(raw[:-3])
        with pytest.raises(CorruptDataset):
            load_dataset(tmp_path)

    def test_bad_header(self, spec, tmp_path):
        save_dataset([gen_pitch_timbre(spec, 10, 0, Rng(1), name="a")], tmp_path)
        header = json.loads((tmp_path / "a.json").read_text())
        del header["shape"]
        (tmp_path / "a.json").write_text(json.dumps(header))
        with pytest.raises(CorruptDataset):
            load_dataset(tmp_path)

    def test_empty_directory(self, tmp_path):
        assert load_dataset(tmp_path) == []

    def test_missing_directory(self, tmp_path):
        with pytest.raises(CorruptDataset):
            load_dataset(tmp_path / "nope")
