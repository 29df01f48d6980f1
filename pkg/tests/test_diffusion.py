import itertools
import math

import numpy as np
import pytest
import torch

from conftest import PerfectOracle, UniformOracle
from scaffold.backbone import BackboneConfig, build_model
from scaffold.diffusion import (
    SampleTrace,
    ar_inputs,
    draw_categorical,
    loss_autoregressive,
    loss_continuous,
    loss_discrete,
    nelbo_report,
    prior_kl,
    reverse_step,
    run_reverse,
    sample,
    sample_autoregressive,
    sample_times,
    step_rng,
)
from scaffold.schedule import LogLinearSchedule, ScheduleDomainError
from scaffold.voxels import OccupancyMap, Vocabulary, VoxelGrid

S = LogLinearSchedule(1e-3)


def line_positions(B, L):
    pos = np.stack([np.arange(L), np.zeros(L, int), np.zeros(L, int)], axis=1)
    return np.broadcast_to(pos, (B, L, 3)).copy()


def random_model(V_total=7, L=8, dim=8, seed=0, **kw):
    cfg = BackboneConfig(depth=2, heads=2, width=24, L=L, V_total=V_total, dim=dim, **kw)
    model = build_model(cfg, seed)
    with torch.no_grad():
        model.head.weight.normal_(0, 1.0, generator=torch.Generator().manual_seed(seed))
    return model.double().eval()


class TestContinuousLoss:
    def test_perfect_model_scores_zero(self):
        rng = np.random.default_rng(0)
        x = rng.integers(0, 4, size=(16, 8))
        loss = loss_continuous(PerfectOracle(4, x), x, line_positions(16, 8), S, rng).loss
        assert loss.item() == 0.0

    def test_uniform_model_quick(self):
        rng = np.random.default_rng(1)
        x = rng.integers(0, 4, size=(256, 8))
        vals = [
            loss_continuous(UniformOracle(4), x, line_positions(256, 8), S, rng).loss.item()
            for _ in range(40)
        ]
        se = np.std(vals, ddof=1) / np.sqrt(len(vals))
        assert abs(np.mean(vals) - (1 - S.eps_min) * math.log(4)) < 4 * se

    def test_finite_near_t_one(self):
        rng = np.random.default_rng(2)
        x = rng.integers(0, 4, size=(4, 8))
        out = loss_continuous(UniformOracle(4), x, line_positions(4, 8), S, rng, t_min=1 - 1e-9)
        assert np.isfinite(out.loss.item())

    def test_antithetic_times_stratified(self):
        t = sample_times(np.random.default_rng(3), 8, antithetic=True, t_min=0.0)
        assert np.allclose(np.sort(np.diff(np.sort(t))), 1 / 8)

    def test_active_only_ignores_padding(self):
        rng = np.random.default_rng(4)
        x = rng.integers(0, 4, size=(2, 8))
        k = np.array([3, 5])
        a = loss_continuous(UniformOracle(4), x, line_positions(2, 8), S, step_rng(0, 0), k=k, active_only=True)
        assert np.all(a.per_slot[0, 3:] == 0) and np.all(a.per_slot[1, 5:] == 0)

    def test_per_token_times(self):
        rng = np.random.default_rng(5)
        x = rng.integers(0, 4, size=(2, 8))
        out = loss_continuous(UniformOracle(4), x, line_positions(2, 8), S, rng, per_token_t=True)
        assert out.t.shape == (2, 8)

    def test_gradient_reaches_parameters(self):
        model = random_model().float().train()
        rng = np.random.default_rng(6)
        x = rng.integers(0, 4, size=(4, 8))
        loss_continuous(model, x, line_positions(4, 8), S, rng).loss.backward()
        assert model.tok.weight.grad.abs().sum() > 0


class TestDiscreteLoss:
    def test_perfect_model_scores_zero(self):
        rng = np.random.default_rng(0)
        x = rng.integers(0, 4, size=(8, 8))
        assert loss_discrete(PerfectOracle(4, x), x, line_positions(8, 8), S, 10, rng).loss.item() == 0.0

    def test_terms_non_negative(self):
        rng = np.random.default_rng(1)
        x = rng.integers(0, 4, size=(64, 8))
        out = loss_discrete(UniformOracle(4), x, line_positions(64, 8), S, 5, rng)
        assert (out.per_slot >= 0).all()

    def test_uniform_closed_form(self):
        # E_i[T (a_s - a_t)/(1 - a_t) * (1 - a_t)] log 4 = (1 - eps) log 4 for any T
        rng = np.random.default_rng(2)
        x = rng.integers(0, 4, size=(512, 8))
        vals = [
            loss_discrete(UniformOracle(4), x, line_positions(512, 8), S, 4, rng).loss.item()
            for _ in range(40)
        ]
        se = np.std(vals, ddof=1) / np.sqrt(len(vals))
        assert abs(np.mean(vals) - (1 - S.eps_min) * math.log(4)) < 4 * se

    def test_bad_T(self):
        with pytest.raises(ScheduleDomainError):
            loss_discrete(UniformOracle(4), np.zeros((1, 2), int), line_positions(1, 2), S, 0, np.random.default_rng())


class TestPriorAndReport:
    def test_prior_kl(self):
        forward, reverse = prior_kl(1e-3, 10)
        assert forward == math.inf
        assert reverse == pytest.approx(-10 * math.log(1 - 1e-3))
        assert prior_kl(0.0, 10) == (0.0, 0.0)
        assert prior_kl(1e-12, 10)[1] < 1e-10

    def test_report_terms(self):
        rng = np.random.default_rng(0)
        x = rng.integers(0, 4, size=(8, 8))
        rep = nelbo_report(PerfectOracle(4, x), x, line_positions(8, 8), S, rng)
        assert rep["recons_term"] == 0.0 and rep["diffusion_term"] == 0.0
        assert rep["prior_term"] == math.inf


class TestAutoregressive:
    def test_inputs_shift(self):
        tokens = np.array([[0, 1, 2]])
        pos = line_positions(1, 3)
        inp, p = ar_inputs(tokens, pos, bos_id=9)
        assert inp.tolist() == [[9, 0, 1]]
        assert p[0, 0].tolist() == [-1, -1, -1] and p[0, 1].tolist() == [0, 0, 0]
        _, p2 = ar_inputs(tokens, pos, bos_id=9, position_mode="target")
        assert np.array_equal(p2, pos)

    def test_uniform_head_loss(self):
        model = build_model(BackboneConfig(depth=1, heads=2, width=24, L=8, V_total=7, dim=8, causal=True), 0)
        x = np.random.default_rng(0).integers(0, 4, size=(4, 8))
        loss = loss_autoregressive(model.double(), x, line_positions(4, 8)).loss.item()
        assert loss == pytest.approx(math.log(7 - 2), abs=1e-12)

    def test_prediction_ignores_own_target(self):
        model = random_model(causal=True)
        rng = np.random.default_rng(1)
        x = rng.integers(0, 4, size=(1, 8))
        base = loss_autoregressive(model, x, line_positions(1, 8)).per_slot
        y = x.copy()
        y[0, 5] = (y[0, 5] + 1) % 4
        after = loss_autoregressive(model, y, line_positions(1, 8)).per_slot
        # slots before 5 see neither x_5 as input nor as target
        assert np.allclose(base[0, :5], after[0, :5], atol=1e-12)

    def test_memorizes_single_sequence(self):
        cfg = BackboneConfig(depth=1, heads=2, width=24, L=6, V_total=7, dim=8, causal=True)
        model = build_model(cfg, 0)
        x = np.array([[0, 3, 1, 1, 2, 0]])
        pos = line_positions(1, 6)
        opt = torch.optim.Adam(model.parameters(), lr=1e-2)
        for _ in range(150):
            opt.zero_grad()
            loss = loss_autoregressive(model, x, pos).loss
            loss.backward()
            opt.step()
        assert loss.item() < 0.05


class TestReverseStep:
    def test_draw_categorical_skips_zero_mass(self):
        probs = np.array([[0.0, 0.5, 0.0, 0.5, 0.0]] * 4)
        u = np.array([0.0, 0.49999, 0.5, 0.999999999])
        assert draw_categorical(probs, u).tolist() == [1, 1, 3, 3]

    def test_invariants_random(self):
        rng = np.random.default_rng(0)
        V, mask = 7, 4
        for _ in range(200):
            L = int(rng.integers(1, 12))
            z = rng.integers(0, V, size=L)
            z[rng.random(L) < 0.5] = mask
            clamp = rng.random(L) < 0.2
            s, t = np.sort(rng.random(2))
            if s == t:
                continue
            probs = rng.dirichlet(np.ones(V), size=L)
            probs[:, mask] = 0
            probs /= probs.sum(1, keepdims=True)
            out = reverse_step(z, s, t, probs, S, rng, mask, clamp)
            keep = (z != mask) | clamp
            assert np.array_equal(out[keep], z[keep])
            assert (out != mask).sum() >= (z != mask).sum()

    def test_s_zero_resolves_everything(self):
        z = np.full(6, 4)
        probs = np.full((6, 7), 0.25)
        probs[:, 4:] = 0
        out = reverse_step(z, 0.0, 0.3, probs, S, np.random.default_rng(0), 4)
        assert (out != 4).all()

    def test_vanishing_step_changes_nothing(self):
        z = np.full(1000, 4)
        probs = np.full((1000, 7), 0.25)
        probs[:, 4:] = 0
        out = reverse_step(z, 0.5 - 1e-12, 0.5, probs, S, np.random.default_rng(0), 4)
        assert (out == 4).all()

    def test_requires_s_below_t(self):
        with pytest.raises(ScheduleDomainError):
            reverse_step(np.zeros(2, int), 0.5, 0.5, np.ones((2, 3)) / 3, S, np.random.default_rng(), 1)

    def test_mask_fraction_tracks_schedule(self):
        # from all-MASK at t = 1, the count at s is Binomial(n, 1 - (1-alpha_s)/(1-alpha_1))
        n = 200_000
        probs = np.tile([0.5, 0.5, 0, 0, 0], (n, 1))
        out = reverse_step(np.full(n, 2), 0.6, 1.0, probs, S, np.random.default_rng(1), 2)
        p = S.unmask_probability(0.6, 1.0)
        assert abs((out != 2).mean() - p) < 3 * np.sqrt(p * (1 - p) / n)


class TestRunReverse:
    def test_enumeration_small(self):
        # two slots, two tokens, two steps, state-dependent denoiser
        mask = 2

        def probs_for(z):
            out = np.zeros(z.shape + (5,))
            other = z[..., ::-1]
            out[..., 0] = np.where(other == 0, 0.8, np.where(other == 1, 0.3, 0.6))
            out[..., 1] = 1 - out[..., 0]
            return out

        p1 = S.unmask_probability(0.5, 1.0)
        exact = {}
        for r0, r1 in itertools.product([0, 1], repeat=2):
            pr = (p1 if r0 else 1 - p1) * (p1 if r1 else 1 - p1)
            start = np.array([mask, mask])
            pz = probs_for(start)
            for a, b in itertools.product([0, 1], repeat=2):
                mid = np.array([a if r0 else mask, b if r1 else mask])
                pm = pr * (pz[0, a] if r0 else 1) * (pz[1, b] if r1 else 1)
                if not r0 and a == 1 or not r1 and b == 1:
                    continue
                pmid = probs_for(mid)
                for c, d in itertools.product([0, 1], repeat=2):
                    if r0 and c != a or r1 and d != b:
                        continue
                    pf = pm * (1 if r0 else pmid[0, c]) * (1 if r1 else pmid[1, d])
                    exact[(c, d)] = exact.get((c, d), 0.0) + pf
        assert sum(exact.values()) == pytest.approx(1.0)
        n = 40_000
        z, _ = run_reverse(np.full((n, 2), mask), lambda z, t: probs_for(z), S, 2, 7, mask,
                           cached=False, record=False)
        for outcome, p in exact.items():
            freq = np.mean((z[:, 0] == outcome[0]) & (z[:, 1] == outcome[1]))
            assert abs(freq - p) < 3 * np.sqrt(p * (1 - p) / n)

    def test_trace_monotone_and_complete(self):
        probs = np.tile([0.3, 0.7, 0, 0, 0], (10, 1))
        z, trace = run_reverse(np.full(10, 2), lambda z, t: probs, S, 20, 3, 2)
        counts = trace.mask_counts(2)
        assert counts[0] == 10 and counts[-1] == 0
        assert all(a >= b for a, b in zip(counts, counts[1:]))
        assert trace.times[0] == 1.0 and trace.times[-1] == 0.0

    def test_cache_skips_calls_but_not_results(self):
        probs = np.tile([0.3, 0.7, 0, 0, 0], (6, 1))
        a, ta = run_reverse(np.full(6, 2), lambda z, t: probs, S, 50, 1, 2, cached=True)
        b, tb = run_reverse(np.full(6, 2), lambda z, t: probs, S, 50, 1, 2, cached=False)
        assert np.array_equal(a, b)
        assert all(np.array_equal(x, y) for x, y in zip(ta.states, tb.states))
        assert ta.denoiser_calls < tb.denoiser_calls

    def test_trace_ndjson_round_trip(self):
        probs = np.tile([0.3, 0.7, 0, 0, 0], (5, 1))
        z0 = np.array([2, 2, 1, 2, 3])
        _, trace = run_reverse(z0, lambda z, t: probs, S, 8, 0, 2)
        back = SampleTrace.from_ndjson(trace.to_ndjson(2), 5, 2)
        assert back.times == trace.times
        assert all(np.array_equal(a, b) for a, b in zip(back.states, trace.states))


class TestSample:
    vocab = Vocabulary([1, 2, 3, 4])

    def occupancy(self, seed, k=6, dim=8):
        rng = np.random.default_rng(seed)
        flat = rng.choice(dim**3, size=k, replace=False)
        return OccupancyMap(dim, frozenset(tuple(int(v) for v in np.unravel_index(i, (dim,) * 3)) for i in flat))

    def test_respects_occupancy(self):
        model = random_model()
        occ = self.occupancy(0)
        grid, trace = sample(occ, model, self.vocab, S, 16, seed=1)
        assert grid.occupancy() == occ
        assert set(grid.cells.values()) <= {1, 2, 3, 4}
        assert trace.mask_counts(self.vocab.mask)[-1] == 0

    def test_empty_occupancy_skips_model(self):
        class Exploding:
            cfg = random_model().cfg

            def log_probs(self, *a, **k):
                raise AssertionError("denoiser called")

        grid, trace = sample(OccupancyMap(8, frozenset()), Exploding(), self.vocab, S, 8, 0)
        assert grid.k == 0 and trace.denoiser_calls == 0

    def test_seed_reproducible_and_varied(self):
        model = random_model()
        occ = self.occupancy(1, k=8)
        a, _ = sample(occ, model, self.vocab, S, 16, seed=3)
        b, _ = sample(occ, model, self.vocab, S, 16, seed=3)
        assert a == b
        others = {tuple(sorted(sample(occ, model, self.vocab, S, 16, seed=s)[0].cells.items())) for s in range(6)}
        assert len(others) > 1

    def test_too_many_voxels(self):
        model = random_model(L=4)
        with pytest.raises(Exception):
            sample(self.occupancy(2, k=6), model, self.vocab, S, 4, 0)

    def test_autoregressive_greedy_deterministic(self):
        model = random_model(causal=True)
        occ = self.occupancy(3)
        a = sample_autoregressive(occ, model, self.vocab, seed=0, temperature=0)
        b = sample_autoregressive(occ, model, self.vocab, seed=5, temperature=0)
        assert a == b and a.occupancy() == occ
        assert sample_autoregressive(OccupancyMap(8, frozenset()), model, self.vocab, 0).k == 0
