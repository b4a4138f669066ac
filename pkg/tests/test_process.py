import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from flowsurprise.errors import InvalidArgument
from flowsurprise.neural import AdamState, TrainConfig, init_encoder, init_mlp, train_step
from flowsurprise.numerics import Rng
from flowsurprise.odelik import dopri5_batch
from flowsurprise.process import (
    EDM_COND_SIGMA_MAX,
    EDM_REF_SIGMA_DATA,
    P_MEAN,
    GaussianEDM,
    ScoreModel,
    edm_coefficients,
    edm_head_condition,
    edm_sigma_location,
    edm_process,
    edm_score,
    edm_train_loss,
    loss_and_grads,
    ode_rhs,
    perturbation_mean,
    prior_logpdf,
    process_for,
    rff_process,
    rff_train_loss,
)


class IdentityDenoiser(ScoreModel):
    def denoise(self, z, sigma, ctx):
        return np.atleast_2d(z).copy()


def constant_head(d, c, value):
    head = init_mlp(d, c, d, hidden=4, rng=Rng(0))
    head.biases[-1][:] = value
    return head


class TestSpecs:
    def test_constants(self):
        e, r = edm_process(), rff_process()
        assert (e.t_start, e.t_end, e.prior_sigma()) == (0.002, 80.0, 80.0)
        assert (r.t_start, r.t_end, r.prior_sigma()) == (0.0, 1.0, 1.0)
        assert process_for("edm") == e and process_for("rff") == r

    def test_unknown_kind(self):
        with pytest.raises(InvalidArgument):
            process_for("vp")


class TestScore:
    def test_identity_denoiser_scores_zero(self):
        m = IdentityDenoiser(edm_process(), init_mlp(3, 0, 3, rng=Rng(0)))
        assert np.all(edm_score(m, np.ones(3), 1.0, None) == 0)

    def test_gaussian_closed_form(self):
        s0 = 0.7
        m = GaussianEDM(3, s0)
        z = np.array([0.5, -1.0, 2.0])
        for sigma in (0.002, 1.0, 80.0):
            np.testing.assert_allclose(edm_score(m, z, sigma, None)[0], -z / (s0**2 + sigma**2), rtol=1e-9)
        assert np.all(edm_score(m, np.zeros(3), 2.0, None) == 0)

    def test_sigma_out_of_range(self):
        m = GaussianEDM(2, 1.0)
        for sigma in (0.001, 81.0):
            with pytest.raises(InvalidArgument):
                edm_score(m, np.zeros(2), sigma, None)

    def test_head_condition_saturates(self):
        sig = np.array([0.002, 1.0, EDM_COND_SIGMA_MAX, 10.0, 80.0])
        c_noise = edm_coefficients(sig, 1.0)[3]
        np.testing.assert_array_equal(c_noise, np.log(sig) / 4)
        cond = edm_head_condition(c_noise)
        np.testing.assert_array_equal(cond[:3], c_noise[:3])
        assert np.all(cond[3:] == cond[2])

    def test_sigma_law_at_reference_scale(self):
        assert edm_sigma_location(EDM_REF_SIGMA_DATA) == P_MEAN
        assert edm_sigma_location(4 * EDM_REF_SIGMA_DATA) == pytest.approx(P_MEAN + np.log(4))

    @given(st.floats(0.1, 20.0))
    def test_saturation_scales_with_sigma_data(self, sd):
        cap = EDM_COND_SIGMA_MAX * sd / EDM_REF_SIGMA_DATA
        cond = edm_head_condition(np.log(np.array([0.5 * cap, cap, 2 * cap])) / 4, sd)
        np.testing.assert_allclose(cond, np.log([0.5 * cap, cap, cap]) / 4, rtol=1e-12)

    def test_head_output_fixed_above_saturation(self):
        d = 3
        m = ScoreModel(edm_process(), init_mlp(d, 0, d, rng=Rng(1), zero_last=False), sigma_data=1.0)
        u = np.array([[0.3, -0.2, 1.1]])
        # same head input c_in * z at two sigmas beyond the saturation point
        heads = []
        for sigma in (20.0, 60.0):
            c_skip, c_out, c_in, _ = edm_coefficients(sigma, 1.0)
            z = u / c_in
            heads.append((m.denoise(z, sigma, None) - c_skip * z) / c_out)
        np.testing.assert_allclose(heads[0], heads[1], rtol=1e-12)

    def test_rff_model_rejected(self):
        m = ScoreModel(rff_process(), init_mlp(2, 0, 2, rng=Rng(0)))
        with pytest.raises(InvalidArgument):
            edm_score(m, np.zeros(2), 1.0, None)


class TestOdeRhs:
    def test_edm_gaussian(self):
        s0, t = 0.5, 3.0
        z = np.array([1.0, -2.0])
        np.testing.assert_allclose(ode_rhs(GaussianEDM(2, s0), z, t, None), t * z / (s0**2 + t**2), rtol=1e-12)

    def test_origin_is_fixed(self):
        assert np.all(ode_rhs(GaussianEDM(4, 1.0), np.zeros(4), 10.0, None) == 0)

    def test_rff_constant_velocity(self):
        c = np.array([0.3, -0.1, 2.0])
        m = ScoreModel(rff_process(), constant_head(3, 5, c))
        g = Rng(1).generator()
        for t in (0.0, 0.4, 1.0):
            np.testing.assert_allclose(ode_rhs(m, g.normal(size=3) * 4, t, g.normal(size=5)), c, atol=1e-15)

    def test_time_out_of_range(self):
        with pytest.raises(InvalidArgument):
            ode_rhs(GaussianEDM(2, 1.0), np.zeros(2), 0.0, None)

    def test_gaussian_marginal_transport(self):
        s0, t_end = 0.5, 10.0
        m = GaussianEDM(1, s0)
        g = Rng(2).generator()
        z = g.normal(size=(1000, 1)) * math.sqrt(s0**2 + 0.002**2)

        def fun(t, y, idx):
            return m.velocity(y, t, None)[0]

        out, _ = dopri5_batch(fun, z, 0.002, t_end, 1e-6, 1e-6)
        assert out.var() == pytest.approx(s0**2 + t_end**2, rel=0.05)


class TestPerturbationAndPrior:
    def test_edm_mean(self):
        z0 = np.array([1.0, -3.0])
        np.testing.assert_array_equal(perturbation_mean(z0, 17.0, edm_process()), z0)

    def test_rff_mean(self):
        z0 = np.array([1.0, -3.0])
        np.testing.assert_array_equal(perturbation_mean(z0, 0.5, rff_process()), 0.5 * z0)

    @pytest.mark.parametrize("spec", [edm_process(), rff_process()], ids=["edm", "rff"])
    def test_identity_at_start(self, spec):
        z0 = Rng(0).generator().normal(size=5)
        np.testing.assert_array_equal(perturbation_mean(z0, spec.t_start, spec), z0)

    def test_range_checked(self):
        with pytest.raises(InvalidArgument):
            perturbation_mean(np.zeros(2), 1.5, rff_process())

    def test_prior_examples(self):
        assert prior_logpdf(np.zeros(1), edm_process()) == pytest.approx(-0.5 * math.log(2 * math.pi * 6400))
        assert prior_logpdf(np.zeros(2), rff_process()) == pytest.approx(-math.log(2 * math.pi))

    def test_prior_difference(self):
        z = np.array([0.3, -1.2, 2.5])
        d, sq = 3, float(z @ z)
        diff = prior_logpdf(z, rff_process()) - prior_logpdf(z, edm_process())
        assert diff == pytest.approx(d * math.log(80) - sq * (0.5 - 1 / 12800), abs=1e-12)

    @pytest.mark.parametrize("spec", [edm_process(), rff_process()], ids=["edm", "rff"])
    def test_prior_peak_at_origin(self, spec):
        z = Rng(3).generator().normal(size=(50, 4))
        assert np.all(prior_logpdf(z, spec) < prior_logpdf(np.zeros(4), spec))


def small_model(kind, d=3, seed=0, encoder=True):
    head = init_mlp(d, 8 if encoder else 0, d, hidden=16, rng=Rng(seed))
    enc = init_encoder(d, width=8, heads=2, blocks=1, max_len=32, rng=Rng(seed, 1)) if encoder else None
    return ScoreModel(process_for(kind), head, enc, sigma_data=0.8)


class TestLosses:
    def test_edm_single_point_data(self):
        head = init_mlp(2, 0, 2, hidden=4, rng=Rng(0))
        m = ScoreModel(edm_process(), head, None, sigma_data=1e-6)
        assert edm_train_loss(m, np.zeros((4, 6, 2)), Rng(1)) < 1e-5

    def test_rff_exact_minimiser(self):
        # one (z0, z1, t) triple; reproduce the draws and set the net to the target
        z0 = np.array([0.4, -0.2])
        g = Rng(5).generator()
        g.random(1)
        z1 = g.standard_normal((1, 2))[0]
        m = ScoreModel(rff_process(), constant_head(2, 0, z1 - z0))
        frames = np.stack([np.zeros(2), z0])[None]
        assert rff_train_loss(m, frames, Rng(5)) == pytest.approx(0.0, abs=1e-24)

    def test_rff_hand_oracle(self):
        c = np.array([0.1, 0.5, -0.3])
        m = ScoreModel(rff_process(), constant_head(3, 0, c))
        frames = Rng(6).generator().normal(size=(2, 4, 3))
        g = Rng(7).generator()
        n = 2 * 3
        g.random(n)
        z1 = g.standard_normal((n, 3))
        z0 = frames[:, 1:].reshape(-1, 3)
        expected = np.mean(np.sum((z1 - z0 - c) ** 2, axis=1))
        assert rff_train_loss(m, frames, Rng(7)) == pytest.approx(expected, rel=1e-12)

    @pytest.mark.parametrize("kind", ["edm", "rff"])
    def test_nonnegative_and_deterministic(self, kind):
        m = small_model(kind)
        frames = Rng(8).generator().normal(size=(3, 10, 3))
        a = loss_and_grads(m, frames, Rng(9))[0]
        b = loss_and_grads(m, frames, Rng(9))[0]
        assert a >= 0 and a == b

    @pytest.mark.parametrize("kind", ["edm", "rff"])
    def test_gradients_match_finite_differences(self, kind):
        m = small_model(kind, seed=3)
        g = Rng(3).generator()
        for arr in m.tensors().values():
            arr += g.normal(0, 0.1, arr.shape)
        frames = g.normal(size=(2, 5, 3))
        _, grads = loss_and_grads(m, frames, Rng(4))
        tensors = m.tensors()
        h = 1e-5
        for name in ("head/W0", "head/b2", "encoder/in.W", "encoder/blk0.Wq"):
            arr = tensors[name]
            idx = tuple(int(i) for i in np.unravel_index(int(np.argmax(np.abs(grads[name]))), arr.shape))
            old = arr[idx]
            arr[idx] = old + h
            hi = loss_and_grads(m, frames, Rng(4))[0]
            arr[idx] = old - h
            lo = loss_and_grads(m, frames, Rng(4))[0]
            arr[idx] = old
            fd = (hi - lo) / (2 * h)
            assert grads[name][idx] == pytest.approx(fd, rel=1e-3), name

    def test_short_sequences_rejected(self):
        with pytest.raises(InvalidArgument):
            rff_train_loss(small_model("rff"), np.zeros((2, 1, 3)), Rng(0))

    def test_rff_training_decreases_loss(self):
        m = small_model("rff", seed=1)
        g = Rng(10).generator()
        base = g.normal(size=(1, 3))
        frames = base + 0.1 * g.normal(size=(4, 12, 3))
        cfg = TrainConfig(lr=3e-3, warmup_steps=10, total_steps=100, batch_size=4)
        probe = Rng(99)
        start = rff_train_loss(m, frames, probe)
        params, state = m.tensors(), AdamState()
        for step in range(100):
            _, grads = loss_and_grads(m.with_tensors(params), frames, Rng(11, step))
            params, state = train_step(params, grads, state, step, cfg)
        assert rff_train_loss(m.with_tensors(params), frames, probe) < 0.8 * start
