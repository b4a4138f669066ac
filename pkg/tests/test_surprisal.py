import math

import numpy as np
import pytest

from flowsurprise.errors import InvalidArgument
from flowsurprise.neural import init_encoder, init_mlp
from flowsurprise.numerics import Rng, isotropic_gaussian_logpdf
from flowsurprise.odelik import SolverConfig
from flowsurprise.process import GaussianEDM, GaussianRFF, ScoreModel, edm_process, rff_process
from flowsurprise.surprisal import ICCurve, bits_per_dim, frame_ic, ic_curve, ic_curves, mean_nll
from flowsurprise.synthdata import LatentSequence

EXACT = SolverConfig.with_tol(1e-5, divergence="exact")


def random_model(kind, d=3, seed=0):
    head = init_mlp(d, 8, d, hidden=16, rng=Rng(seed), zero_last=False)
    enc = init_encoder(d, width=8, heads=2, blocks=1, max_len=64, rng=Rng(seed, 1))
    spec = edm_process() if kind == "edm" else rff_process()
    return ScoreModel(spec, head, enc, sigma_data=0.7)


def sequence(T=12, d=3, seed=0, name="s"):
    return LatentSequence(Rng(seed).generator().normal(size=(T, d)) * 0.5, 10.0, name)


class TestBitsPerDim:
    def test_examples(self):
        assert bits_per_dim(-5 * math.log(2), 5) == pytest.approx(1.0)
        assert bits_per_dim(0.0, 3) == 0.0
        assert bits_per_dim(-math.log(2 * math.pi), 2) == pytest.approx(1.3257, abs=1e-4)

    def test_bad_dim(self):
        with pytest.raises(InvalidArgument):
            bits_per_dim(1.0, 0)


class TestFrameIc:
    @pytest.mark.parametrize("kind", ["edm", "rff"])
    def test_start_level_is_data_level(self, kind):
        m = random_model(kind)
        seq = sequence()
        t0 = m.process.t_start
        cfg = SolverConfig.with_tol(1e-4, n_r=2)
        a = frame_ic(m, seq, 5, t0, cfg, seed=3)
        b = ic_curve(m, seq, t0, cfg, seed=3).values[4]
        assert a == pytest.approx(b, rel=1e-9)
        assert frame_ic(m, seq, 5, t0, cfg, seed=3) == a

    def test_frame_zero_rejected(self):
        with pytest.raises(InvalidArgument):
            frame_ic(GaussianEDM(3, 0.5), sequence(), 0, 1.0, EXACT)

    def test_edm_evaluates_clean_frame(self):
        # for the Gaussian model the level-t IC must equal the N(0, s0^2 + t^2) density at the clean frame
        s0, t = 0.5, 7.0
        seq = sequence(d=2)
        got = frame_ic(GaussianEDM(2, s0), seq, 3, t, EXACT)
        ref = bits_per_dim(isotropic_gaussian_logpdf(seq.frames[3], math.hypot(s0, t)), 2)
        assert got == pytest.approx(ref, abs=1e-3)

    def test_rff_evaluates_scaled_frame(self):
        s0, t = 0.5, 0.5
        seq = sequence(d=2)
        got = frame_ic(GaussianRFF(2, s0), seq, 3, t, EXACT)
        marg = math.sqrt((1 - t) ** 2 * s0**2 + t**2)
        ref = bits_per_dim(isotropic_gaussian_logpdf(0.5 * seq.frames[3], marg), 2)
        assert got == pytest.approx(ref, abs=1e-3)


class TestIcCurve:
    def test_length(self):
        seq = sequence(T=9)
        assert len(ic_curve(GaussianEDM(3, 0.5), seq, 0.002, EXACT)) == 8

    def test_gaussian_oracle_per_frame(self):
        seq = sequence(T=20, d=4)
        curve = ic_curve(GaussianEDM(4, 0.5), seq, 0.002, EXACT)
        ref = bits_per_dim(isotropic_gaussian_logpdf(seq.frames[1:], 0.5), 4)
        np.testing.assert_allclose(curve.values, ref, atol=1e-3 / math.log(2))

    def test_farther_frames_are_more_surprising(self):
        base = Rng(4).generator().normal(size=3)
        base /= np.linalg.norm(base)
        frames = np.outer(np.linspace(0, 3, 10), base)
        curve = ic_curve(GaussianEDM(3, 0.5), LatentSequence(frames, 10.0), 0.002, EXACT)
        assert np.all(np.diff(curve.values) > 0)

    @pytest.mark.parametrize("kind", ["edm", "rff"])
    @pytest.mark.parametrize("j", [1, 4, 9])
    def test_causality(self, kind, j):
        m = random_model(kind)
        seq = sequence(T=12)
        cfg = SolverConfig.with_tol(1e-4, n_r=1)
        base = ic_curve(m, seq, m.process.t_start, cfg).values
        frames = seq.frames.copy()
        frames[j:] += 3.0
        pert = ic_curve(m, LatentSequence(frames, 10.0, seq.name), m.process.t_start, cfg).values
        # values[i] belongs to frame i+1 and may only see frames <= i+1
        np.testing.assert_array_equal(pert[: j - 1], base[: j - 1])
        assert pert[j - 1] != base[j - 1]

    def test_deterministic_and_seeded(self):
        m = random_model("edm")
        seq = sequence()
        cfg = SolverConfig.with_tol(1e-4, n_r=1)
        a = ic_curve(m, seq, 1.0, cfg, seed=1).values
        np.testing.assert_array_equal(a, ic_curve(m, seq, 1.0, cfg, seed=1).values)
        assert not np.array_equal(a, ic_curve(m, seq, 1.0, cfg, seed=2).values)

    def test_batched_curves_match_single(self):
        m = random_model("rff")
        seqs = [sequence(T=8, seed=1, name="a"), sequence(T=11, seed=2, name="b")]
        cfg = SolverConfig.with_tol(1e-4, n_r=2)
        many = ic_curves(m, seqs, 0.3, cfg, seed=5)
        for s, c in zip(seqs, many):
            np.testing.assert_allclose(c.values, ic_curve(m, s, 0.3, cfg, seed=5).values, rtol=1e-12)

    def test_round_trip_files(self, tmp_path):
        c = ICCurve(np.array([1.5, 0.25, -0.125]), 10.0, 10.0, "edm-0", {"seed": 3})
        c.save(tmp_path / "curve")
        assert (tmp_path / "curve.csv").read_text().splitlines()[0] == "frame,time_seconds,ic_bits_per_dim"
        back = ICCurve.load(tmp_path / "curve")
        np.testing.assert_array_equal(back.values, c.values)
        assert (back.noise_level, back.frame_rate, back.model_id, back.meta) == (10.0, 10.0, "edm-0", {"seed": 3})


class TestMeanNll:
    def test_single_curve(self):
        assert mean_nll([ICCurve([1.0, 2.0, 6.0], None, 10)]) == 3.0

    def test_mask(self):
        assert mean_nll([ICCurve([1.0, 2.0, 3.0], None, 10)], [False, False, True]) == 1.5

    def test_full_mask(self):
        with pytest.raises(InvalidArgument):
            mean_nll([ICCurve([1.0, 2.0], None, 10)], [True, True])
