import csv

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oflseg.errors import ConfigError, ShapeError, StateError
from oflseg.learner import (
    MappingWeights, Sample, SampleBuffer, apply_mapping, fit, learner_gradient, learner_loss,
    online_refine, sd_step, write_trace_csv,
)
from oflseg.tensor import Tensor
from oracles import conv_design_matrix, random_ridge_problem, ridge_loss, ridge_solve


def f32(samples):
    # the buffer stores float32; the oracle must see the same numbers
    return [(np.float32(F), np.float32(M)) for F, M in samples]


def buffer_of(samples, cap=8, seed=True):
    return SampleBuffer(cap, [Sample(Tensor(F), Tensor(M), 1.0, seed) for F, M in samples])


def scalar_problem():
    buf = SampleBuffer(4, [Sample(Tensor(np.full((1, 1, 1), 2.0)), Tensor(np.full((1, 1, 1), 3.0)))])
    return MappingWeights(np.zeros((1, 1, 1, 1), np.float32), lam=1.0), buf


def monotone(trace, tol=1e-6):
    return all(b <= a + tol * abs(a) for a, b in zip(trace, trace[1:]))


class TestLoss:
    def test_zero(self):
        buf = buffer_of([(np.ones((2, 3, 3)), np.zeros((1, 3, 3)))])
        assert learner_loss(MappingWeights.zeros(2, 1, 3), buf) == 0.0

    def test_scalar_value(self):
        mw, buf = scalar_problem()
        assert learner_loss(mw, buf) == 4.5

    @pytest.mark.parametrize("seed", range(3))
    def test_design_matrix_oracle(self, seed):
        C, D, k, lam, samples = random_ridge_problem(seed)
        samples = f32(samples)
        tau = np.random.default_rng(seed).normal(size=(D, C, k, k)).astype(np.float32)
        got = learner_loss(MappingWeights(tau, lam), buffer_of(samples))
        assert got == pytest.approx(ridge_loss(samples, tau, D, k, lam), rel=1e-9)

    def test_empty_buffer(self):
        with pytest.raises(StateError):
            learner_loss(MappingWeights.zeros(2, 1, 3), SampleBuffer(4))

    def test_gradient_matches_normal_equations(self, rng):
        C, D, k, lam, samples = random_ridge_problem(5)
        samples = f32(samples)
        tau = rng.normal(size=(D, C, k, k)).astype(np.float32)
        g_ref = lam * tau.astype(np.float64).ravel()
        for F, M in samples:
            A = conv_design_matrix(F, D, k)
            g_ref += A.T @ (A @ tau.ravel().astype(np.float64) - M.ravel())
        g = learner_gradient(MappingWeights(tau, lam), buffer_of(samples))
        np.testing.assert_allclose(g.ravel(), g_ref, rtol=1e-9, atol=1e-9)


class TestStep:
    def test_scalar_closed_form(self):
        mw, buf = scalar_problem()
        new, before, after, alpha = sd_step(mw, buf)
        assert alpha == pytest.approx(0.2, rel=1e-12)
        assert new.tau.item() == pytest.approx(1.2, rel=1e-6)
        assert after < before

    def test_fixed_point(self):
        mw, buf = scalar_problem()
        opt, *_ = sd_step(mw, buf)
        again, before, after, alpha = sd_step(opt, buf)
        assert abs(again.tau.item() - opt.tau.item()) <= 1e-6
        assert after <= before

    def test_zero_gradient_is_noop(self):
        buf = buffer_of([(np.ones((2, 3, 3)), np.zeros((1, 3, 3)))])
        mw = MappingWeights.zeros(2, 1, 3)
        new, before, after, alpha = sd_step(mw, buf)
        assert new is mw and alpha == 0.0 and before == after == 0.0

    def test_solution_is_fixed_point(self):
        C, D, k, lam, samples = random_ridge_problem(2)
        tau = ridge_solve(samples, D, k, lam).reshape(D, C, k, k).astype(np.float32)
        new, *_ = sd_step(MappingWeights(tau, lam), buffer_of(samples))
        assert np.abs(new.tau - tau).max() <= 1e-6 * max(1.0, np.abs(tau).max()) * 10

    @given(st.integers(0, 10_000))
    def test_never_increases(self, seed):
        C, D, k, lam, samples = random_ridge_problem(seed, min_ratio=0)
        tau = np.random.default_rng(seed).normal(size=(D, C, k, k)).astype(np.float32)
        _, before, after, _ = sd_step(MappingWeights(tau, lam), buffer_of(samples))
        assert after <= before + 1e-6 * abs(before)


class TestFit:
    def test_zero_iters(self):
        mw, buf = scalar_problem()
        res = fit(buf, 0, mw)
        assert res.weights is mw and res.trace == [4.5]

    def test_scalar_one_iteration(self):
        mw, buf = scalar_problem()
        assert fit(buf, 1, mw).weights.tau.item() == pytest.approx(1.2, rel=1e-6)

    def test_reference_problem_against_ridge(self):
        r = np.random.default_rng(0)
        samples = [(r.normal(size=(4, 6, 6)), r.normal(size=(2, 6, 6))) for _ in range(2)]
        res = fit(buffer_of(samples), 5 * 72, MappingWeights.zeros(4, 2, 3, 0.05))
        ref = ridge_solve(samples, 2, 3, 0.05)
        assert np.linalg.norm(res.weights.tau.ravel() - ref) / np.linalg.norm(ref) < 1e-3
        assert monotone(res.trace)

    def test_zero_targets_keep_zero(self, rng):
        buf = buffer_of([(rng.normal(size=(3, 4, 4)), np.zeros((2, 4, 4)))])
        assert not fit(buf, 10, MappingWeights.zeros(3, 2, 3)).weights.tau.any()

    def test_negative_iters(self):
        mw, buf = scalar_problem()
        with pytest.raises(ConfigError):
            fit(buf, -1, mw)

    def test_unpacks_as_pair(self):
        mw, buf = scalar_problem()
        weights, trace = fit(buf, 2, mw)
        assert len(trace) == 3

    def test_shape_mismatch(self, rng):
        buf = buffer_of([(rng.normal(size=(3, 4, 4)), rng.normal(size=(2, 4, 4)))])
        with pytest.raises(ShapeError):
            fit(buf, 1, MappingWeights.zeros(4, 2, 3))

    def test_residual_on_fitted_sample_decreases(self, rng):
        F, M = rng.normal(size=(3, 5, 5)), rng.normal(size=(2, 5, 5))
        buf = buffer_of([(F, M)])
        mw = MappingWeights.zeros(3, 2, 3)
        errs = []
        for _ in range(8):
            errs.append(float(np.linalg.norm(apply_mapping(mw, Tensor(F)).data - M)))
            mw = fit(buf, 1, mw).weights
        assert all(b <= a for a, b in zip(errs, errs[1:]))

    def test_trace_csv(self, tmp_path):
        mw, buf = scalar_problem()
        write_trace_csv(tmp_path / "t.csv", fit(buf, 2, mw).trace)
        rows = list(csv.reader(open(tmp_path / "t.csv")))
        assert rows[0] == ["iteration", "loss"] and float(rows[1][1]) == 4.5


class TestMapping:
    def test_zero_tau(self, rng):
        assert not apply_mapping(MappingWeights.zeros(3, 2, 3), Tensor(rng.normal(size=(3, 4, 4)))).data.any()

    def test_linear(self, rng):
        mw = MappingWeights(rng.normal(size=(2, 3, 3, 3)).astype(np.float32))
        f = rng.normal(size=(3, 4, 4)).astype(np.float32)
        np.testing.assert_allclose(apply_mapping(mw, Tensor(2 * f)).data,
                                   2 * apply_mapping(mw, Tensor(f)).data, rtol=1e-6, atol=1e-6)

    def test_shape_error(self, rng):
        with pytest.raises(ShapeError):
            apply_mapping(MappingWeights.zeros(3, 2, 3), Tensor(rng.normal(size=(4, 4, 4))))

    def test_weights_validate(self):
        with pytest.raises(ConfigError):
            MappingWeights(np.zeros((1, 1, 3, 3), np.float32), lam=0.0)
        with pytest.raises(ShapeError):
            MappingWeights(np.zeros((1, 1, 2, 2), np.float32))


class TestBuffer:
    def sample(self, rng, seed=False):
        return Sample(Tensor(rng.normal(size=(2, 3, 3))), Tensor(rng.normal(size=(1, 3, 3))), 1.0, seed)

    def test_seed_fifo(self, rng):
        seeds = [self.sample(rng, True) for _ in range(2)]
        buf = SampleBuffer(4, seeds)
        online = [self.sample(rng) for _ in range(3)]
        for s in online:
            buf = buf.with_sample(s)
        assert buf.samples == seeds + online[1:]

    def test_online_slot_always_kept(self, rng):
        buf = SampleBuffer(2, [self.sample(rng, True) for _ in range(3)])
        s = self.sample(rng)
        buf = buf.with_sample(s)
        assert len(buf) == 4 and buf.samples[-1] is s

    def test_shape_check(self, rng):
        buf = SampleBuffer(4, [self.sample(rng)])
        with pytest.raises(ShapeError):
            buf.with_sample(Sample(Tensor(rng.normal(size=(3, 3, 3))), Tensor(rng.normal(size=(1, 3, 3)))))

    def test_with_sample_is_functional(self, rng):
        buf = SampleBuffer(4, [self.sample(rng, True)])
        before = buf.checksum()
        buf.with_sample(self.sample(rng))
        assert buf.checksum() == before

    @given(st.integers(1, 6), st.integers(0, 4), st.integers(0, 10))
    def test_seeds_never_evicted(self, cap, n_seed, n_online):
        r = np.random.default_rng(0)
        seeds = [self.sample(r, True) for _ in range(n_seed)]
        buf = SampleBuffer(cap, seeds)
        for _ in range(n_online):
            buf = buf.with_sample(self.sample(r))
        assert buf.samples[:n_seed] == seeds
        assert len(buf) - n_seed == min(n_online, max(cap - n_seed, 1))


class TestOnlineRefine:
    def test_zero_iters(self, rng):
        F, M = rng.normal(size=(2, 3, 3)), rng.normal(size=(1, 3, 3))
        buf = buffer_of([(F, M)])
        mw = MappingWeights(rng.normal(size=(1, 2, 3, 3)).astype(np.float32))
        new, buf2 = online_refine(mw, buf, Sample(Tensor(F), Tensor(M)), 0)
        assert new.checksum() == mw.checksum() and len(buf2) == 2

    def test_continues_from_current(self, rng):
        C, D, k, lam, samples = random_ridge_problem(4)
        buf = buffer_of(samples)
        mw = fit(buf, 40, MappingWeights.zeros(C, D, k, lam)).weights
        F, M = samples[0]
        new, buf2 = online_refine(mw, buf, Sample(Tensor(F), Tensor(M)), 5)
        cold = fit(buf2, 5, MappingWeights.zeros(C, D, k, lam)).weights
        assert learner_loss(new, buf2) < learner_loss(cold, buf2)

    def test_exact_sample_shrinkage_only(self, rng):
        F = rng.normal(size=(2, 4, 4))
        mw = MappingWeights(rng.normal(size=(1, 2, 3, 3)).astype(np.float32), 0.05)
        M = apply_mapping(mw, Tensor(F)).data
        buf = SampleBuffer(4)
        buf = buf.with_sample(Sample(Tensor(F), Tensor(M)))
        before = learner_loss(mw, buf)
        new, buf2 = online_refine(mw, SampleBuffer(4), Sample(Tensor(F), Tensor(M)), 1)
        assert learner_loss(new, buf2) <= before
