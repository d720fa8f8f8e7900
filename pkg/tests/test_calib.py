"""Calibration engine: losses, freeze mechanics, diagnostics, cache IO."""

import numpy as np
import pytest

from vqkit import calib, dit, tensor as T, vq
from vqkit.tensor import Tensor

TINY = dit.DiTConfig(depth=2, d_in=8, heads=2, n_tok=4, classes=3, timesteps=4)
TINY_D, TINY_K = 2, 16


@pytest.fixture(scope="module")
def fp_params():
    return dit.init_params(TINY, seed=0)


@pytest.fixture(scope="module")
def cache(fp_params):
    return calib.build_cache(fp_params, TINY, num_trajectories=4, seed=0)


def fresh_states(fp_params, n=2):
    names = dit.quantizable_layer_names(TINY)
    return calib.quantize_layers(fp_params, names, d=TINY_D, k=TINY_K, n=n, seed=0)


class TestLossLd:
    def test_identical_outputs_zero(self, rng):
        outs = [rng.normal(size=(4, 8)).astype(np.float32) for _ in range(2)]
        q = [Tensor(o.copy()) for o in outs]
        assert calib.loss_ld(outs, q).item() == 0.0

    def test_single_block_example(self):
        fp = [np.array([1.0, 2.0], dtype=np.float32)]
        q = [Tensor(np.array([1.0, 3.0], dtype=np.float32))]
        assert calib.loss_ld(fp, q).item() == pytest.approx(0.5)

    def test_non_negative(self, rng):
        for _ in range(5):
            fp = [rng.normal(size=(3, 3)).astype(np.float32)]
            q = [Tensor(rng.normal(size=(3, 3)).astype(np.float32))]
            assert calib.loss_ld(fp, q).item() >= 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            calib.loss_ld(
                [np.zeros((2, 2), dtype=np.float32)],
                [Tensor(np.zeros((2, 3), dtype=np.float32))],
            )
        with pytest.raises(ValueError):
            calib.loss_ld([np.zeros(2, dtype=np.float32)], [])


class TestLossLr:
    def test_uniform_pairs(self):
        for m in (1, 5, 100):
            r = np.full((m, 2), 0.5)
            assert calib.loss_lr(r) == pytest.approx(2.0)

    def test_one_hot_zero(self):
        r = np.array([[1.0, 0.0], [0.0, 1.0]])
        assert calib.loss_lr(r) == pytest.approx(0.0)

    def test_skewed_pair(self):
        assert calib.loss_lr(np.array([[0.9, 0.1]])) == pytest.approx(0.4)

    def test_permutation_invariant(self, rng):
        r = rng.dirichlet(np.ones(2), size=20)
        shuffled = r[rng.permutation(20)]
        assert calib.loss_lr(r) == pytest.approx(calib.loss_lr(shuffled))

    def test_monotone_toward_one_hot(self):
        # n=2: contribution decreases as |2r-1| grows
        vals = [calib.loss_lr(np.array([[p, 1 - p]])) for p in (0.5, 0.6, 0.8, 0.99)]
        assert all(a > b for a, b in zip(vals, vals[1:]))

    def test_pull_gradient_matches_fd_off_kink(self, rng):
        # closed-form subgradient against central differences, probed
        # away from the |2r-1| kink at one half
        r = rng.dirichlet(np.ones(2), size=8).astype(np.float32)
        r = np.clip(r, 0.1, 0.9)
        r = r / r.sum(axis=1, keepdims=True)
        r[np.abs(r - 0.5) < 0.05] += 0.07
        lam = 0.7
        g = calib._pull_gradient(r, r.shape[0], lam)
        h = 1e-3
        for i, j in ((0, 0), (3, 1), (7, 0)):
            up, down = r.copy(), r.copy()
            up[i, j] += h
            down[i, j] -= h
            fd = lam * (calib.loss_lr(up) - calib.loss_lr(down)) / (2 * h)
            assert g[i, j] == pytest.approx(fd, rel=1e-4)

    def test_pull_gradient_tie_favors_first_position(self):
        r = np.full((3, 2), 0.5, dtype=np.float32)
        g = calib._pull_gradient(r, 3, 1.0)
        # descent subtracts the gradient: first position rises
        assert np.all(g[:, 0] < 0) and np.all(g[:, 1] > 0)


class TestCacheIO:
    def test_structure(self, cache):
        assert cache.size == 4
        assert cache.trajectories[0].y == 1
        rec = cache.step(2, 3)
        assert rec.t == 3
        assert len(rec.block_inputs) == TINY.depth

    def test_roundtrip(self, tmp_path, cache):
        path = tmp_path / "cache.bin"
        calib.save_cache(path, cache)
        loaded = calib.load_cache(path)
        assert loaded.config == cache.config
        assert loaded.size == cache.size
        for a, b in zip(cache.trajectories, loaded.trajectories):
            assert (a.y, a.seed) == (b.y, b.seed)
            np.testing.assert_array_equal(a.final, b.final)
            for sa, sb in zip(a.steps, b.steps):
                np.testing.assert_array_equal(sa.z, sb.z)
                for x, y in zip(sa.block_inputs, sb.block_inputs):
                    np.testing.assert_array_equal(x, y)
                for x, y in zip(sa.block_outputs, sb.block_outputs):
                    np.testing.assert_array_equal(x, y)

    def test_wrong_file_rejected(self, tmp_path, fp_params):
        from vqkit import modelio

        path = tmp_path / "not_cache.bin"
        modelio.write_container_file(path, {"w": np.zeros(3, dtype=np.float32)})
        with pytest.raises(ValueError):
            calib.load_cache(path)

    def test_incomplete_trajectory_rejected(self, fp_params):
        traj = dit.ddpm_sample(fp_params, y=1, config=TINY, seed=0)
        traj.steps = traj.steps[:-1]
        with pytest.raises(ValueError):
            calib.TrajectoryCache(config=TINY, trajectories=[traj])


class TestQuantizeLayers:
    def test_covers_all_names(self, fp_params):
        states = fresh_states(fp_params)
        assert set(states) == set(dit.quantizable_layer_names(TINY))
        for name, s in states.items():
            w = fp_params[name]
            assert s.shape.o == w.shape[0] and s.shape.i == w.shape[1]
            assert s.codebook.shape == (TINY_K, TINY_D)
            assert s.cand.candidates.shape == (s.shape.num_subvectors, 2)
            assert not s.cand.frozen

    def test_deterministic(self, fp_params):
        a = fresh_states(fp_params)
        b = fresh_states(fp_params)
        for name in a:
            np.testing.assert_array_equal(a[name].codebook, b[name].codebook)
            np.testing.assert_array_equal(
                a[name].cand.candidates, b[name].cand.candidates
            )

    def test_clone_is_independent(self, fp_params):
        states = fresh_states(fp_params)
        clone = calib.clone_states(states)
        name = next(iter(states))
        clone[name].codebook += 1.0
        clone[name].cand.logits += 1.0
        assert not np.array_equal(clone[name].codebook, states[name].codebook)
        assert not np.array_equal(clone[name].cand.logits, states[name].cand.logits)


class TestBlockOutputError:
    def test_exact_weights_give_zero(self, fp_params, cache):
        weights = {
            name: fp_params[name] for name in dit.quantizable_layer_names(TINY)
        }
        err = calib.block_output_error(fp_params, weights, TINY, cache)
        assert err == 0.0

    def test_perturbed_weights_give_positive(self, fp_params, cache):
        weights = {
            name: fp_params[name] + 0.01 for name in dit.quantizable_layer_names(TINY)
        }
        err = calib.block_output_error(fp_params, weights, TINY, cache)
        assert err > 0.0

    def test_limit(self, fp_params, cache):
        weights = {
            name: fp_params[name] + 0.01 for name in dit.quantizable_layer_names(TINY)
        }
        err_few = calib.block_output_error(fp_params, weights, TINY, cache, limit=3)
        assert err_few > 0.0


class TestGradSpotCheck:
    def test_codebook_and_ratio_grads_match_fd(self, fp_params, cache):
        """The composed gradient actually used by the update step — data
        term through the graph plus the closed-form one-hot pull — probed
        coordinate-wise with central differences on the complete loss."""
        states = fresh_states(fp_params)
        name = "block0.attn.wq"
        state = states[name]
        rows = state.shape.num_subvectors
        rec = cache.step(0, 2)
        y = cache.trajectories[0].y
        hard = {
            n: s.hard_weight()
            for n, s in states.items()
            if n != name
        }

        def data_loss(codebook_arr, ratio_arr):
            cb = Tensor(codebook_arr, requires_grad=True)
            ratios = Tensor(ratio_arr, requires_grad=True)
            sub = T.weighted_rows(cb, ratios, state.cand.candidates)
            w = T.reshape(sub, (state.shape.o, state.shape.i))
            p = dit.param_tensors(fp_params)
            for n2, arr in hard.items():
                p[n2] = Tensor(arr)
            p[name] = w
            c = dit.condition_embed(p, rec.t, y, TINY)
            q_outs = [
                dit.dit_block(Tensor(rec.block_inputs[b]), c, p, b, TINY.heads)
                for b in range(TINY.depth)
            ]
            return calib.loss_ld(rec.block_outputs, q_outs), cb, ratios

        def total_value(codebook_arr, ratio_arr):
            ld = data_loss(codebook_arr, ratio_arr)[0].item()
            return ld + calib.loss_lr(ratio_arr)

        base_cb = state.codebook.copy()
        # probe off the |2r-1| kink so the FD stencil is two-sided smooth
        base_r = np.tile(
            np.array([0.62, 0.38], dtype=np.float32), (rows, 1)
        )
        loss, cb, ratios = data_loss(base_cb, base_r)
        loss.backward()
        full_ratio_grad = ratios.grad + calib._pull_gradient(base_r, rows, 1.0)

        rng = np.random.default_rng(0)
        step = 1e-2
        for _ in range(3):
            i, j = rng.integers(base_cb.shape[0]), rng.integers(base_cb.shape[1])
            up, down = base_cb.copy(), base_cb.copy()
            up[i, j] += step
            down[i, j] -= step
            fd = (total_value(up, base_r) - total_value(down, base_r)) / (2 * step)
            assert cb.grad[i, j] == pytest.approx(fd, rel=1e-2, abs=1e-4)
        for _ in range(3):
            i, j = rng.integers(rows), rng.integers(2)
            up, down = base_r.copy(), base_r.copy()
            up[i, j] += step
            down[i, j] -= step
            fd = (total_value(base_cb, up) - total_value(base_cb, down)) / (2 * step)
            assert full_ratio_grad[i, j] == pytest.approx(fd, rel=1e-2, abs=1e-4)


class TestCalibrate:
    def test_mode_none_returns_kmeans_assignments(self, fp_params, cache):
        states = fresh_states(fp_params)
        expected = {n: s.cand.candidates[:, 0].copy() for n, s in states.items()}
        result = calib.calibrate(
            fp_params, states, TINY, calib.CalibConfig(mode="none"), cache
        )
        for n in expected:
            np.testing.assert_array_equal(result.assignments[n], expected[n])
        assert result.log == []

    def test_codebook_only_freezes_immediately(self, fp_params, cache):
        states = fresh_states(fp_params)
        cfg = calib.CalibConfig(mode="codebook_only", batch=2, iters=3, seed=1)
        result = calib.calibrate(fp_params, states, TINY, cfg, cache)
        assert all(it == 0 for it in result.frozen_at.values())
        assert len(result.frozen_at) == len(states)
        for n, s in states.items():
            assert s.cand.n == 1
            np.testing.assert_array_equal(
                result.assignments[n], s.cand.candidates[:, 0]
            )

    def test_codebook_only_improves_block_error(self, fp_params, cache):
        states = fresh_states(fp_params)
        before = calib.block_output_error(
            fp_params, {n: s.hard_weight() for n, s in states.items()}, TINY, cache
        )
        cfg = calib.CalibConfig(
            mode="codebook_only", batch=4, iters=40, lr_codebook=1e-3, seed=0
        )
        calib.calibrate(fp_params, states, TINY, cfg, cache)
        after = calib.block_output_error(
            fp_params, {n: s.hard_weight() for n, s in states.items()}, TINY, cache
        )
        assert after <= before

    def test_full_mode_improves_block_error(self, fp_params, cache):
        states = fresh_states(fp_params)
        before = calib.block_output_error(
            fp_params, {n: s.hard_weight() for n, s in states.items()}, TINY, cache
        )
        cfg = calib.CalibConfig(
            mode="full", batch=4, iters=60, lr_codebook=1e-3, seed=0
        )
        result = calib.calibrate(fp_params, states, TINY, cfg, cache)
        after = calib.block_output_error(
            fp_params, {n: s.hard_weight() for n, s in states.items()}, TINY, cache
        )
        assert after <= before
        assert len(result.log) == 60
        for reca, recb in zip(result.log, result.log[1:]):
            assert recb["frozen"] >= reca["frozen"]

    def test_lossless_layer_is_fixed_point(self, cache, fp_params):
        # weights drawn from k distinct sub-vectors quantize exactly;
        # with the nearest-codeword candidate alone, L_d starts at 0 and
        # codebook steps are exactly zero
        params = dict(fp_params)
        rng = np.random.default_rng(5)
        pool = rng.normal(size=(TINY_K, TINY_D)).astype(np.float32)
        for name in dit.quantizable_layer_names(TINY):
            shape = params[name].shape
            picks = rng.integers(TINY_K, size=shape[0] * shape[1] // TINY_D)
            params[name] = pool[picks].reshape(shape)
        lossless_cache = calib.build_cache(params, TINY, num_trajectories=2, seed=0)
        states = calib.quantize_layers(
            params, dit.quantizable_layer_names(TINY), d=TINY_D, k=TINY_K, n=1, seed=0
        )
        for name, s in states.items():
            np.testing.assert_array_equal(
                vq.reconstruct_hard(s.codebook, s.cand.candidates[:, 0], s.shape),
                params[name],
            )
        cfg = calib.CalibConfig(mode="codebook_only", batch=2, iters=10, seed=0)
        result = calib.calibrate(params, states, TINY, cfg, lossless_cache)
        assert all(rec["L_d"] == 0.0 for rec in result.log)
        err = calib.block_output_error(
            params, {n: s.hard_weight() for n, s in states.items()}, TINY, lossless_cache
        )
        assert err <= 1e-6

    def test_freeze_stops_ratio_updates(self, fp_params, cache):
        states = fresh_states(fp_params)
        cfg = calib.CalibConfig(
            mode="full", batch=2, iters=40, lr_ratio=0.6, seed=3
        )
        result = calib.calibrate(fp_params, states, TINY, cfg, cache)
        assert result.frozen_at, "raise lr_ratio: no layer froze in 40 iterations"
        for name, it in result.frozen_at.items():
            state = states[name]
            assert state.cand.frozen
            # frozen state is fully decided: exact one-hot ratios whose
            # argmax is the stored assignment
            r = state.cand.ratios()
            assert float(r.max(axis=1).min()) > 1.0 - 1e-9
            np.testing.assert_array_equal(
                vq.finalize(state.cand), state.assignments
            )
            np.testing.assert_array_equal(result.assignments[name], state.assignments)
            assert it < cfg.iters

    def test_frozen_layer_lr_below_threshold(self, fp_params, cache):
        states = fresh_states(fp_params)
        cfg = calib.CalibConfig(mode="full", batch=2, iters=40, lr_ratio=0.6, seed=3)
        result = calib.calibrate(fp_params, states, TINY, cfg, cache)
        for name in result.frozen_at:
            assert calib.loss_lr(states[name].cand.ratios()) < cfg.lambda_freeze

    def test_single_candidate_full_mode_freezes_at_start(self, fp_params, cache):
        # n=1 has nothing to choose: the pinned ratio of one is already
        # one-hot, so full mode degenerates to codebook-only behavior
        states = fresh_states(fp_params, n=1)
        cfg = calib.CalibConfig(mode="full", batch=2, iters=5, seed=0)
        result = calib.calibrate(fp_params, states, TINY, cfg, cache)
        assert all(it == 0 for it in result.frozen_at.values())
        assert len(result.frozen_at) == len(states)

    def test_unfrozen_ratios_stay_on_simplex(self, fp_params, cache):
        states = fresh_states(fp_params)
        # weak pull so some layers are still in flight at the end
        cfg = calib.CalibConfig(mode="full", batch=2, iters=4, lr_ratio=1e-3, seed=0)
        calib.calibrate(fp_params, states, TINY, cfg, cache)
        for s in states.values():
            assert s.ratios is not None
            np.testing.assert_allclose(s.ratios.sum(axis=1), 1.0, rtol=1e-5)
            assert np.all(s.ratios > 0.0)

    def test_snap_ratios_one_hot_lowest_tie(self):
        state = calib.LayerState(
            name="x",
            shape=vq.LayerShape(o=2, i=2, d=2, k=4),
            codebook=np.zeros((4, 2), dtype=np.float32),
            cand=vq.CandidateSet(
                candidates=np.array([[0, 1], [2, 3]]),
                logits=np.zeros((2, 2), dtype=np.float32),
            ),
            ratios=np.array([[0.4, 0.6], [0.5, 0.5]], dtype=np.float32),
        )
        state.snap_ratios()
        np.testing.assert_array_equal(
            state.ratios, np.array([[0.0, 1.0], [1.0, 0.0]], dtype=np.float32)
        )

    def test_full_beats_codebook_only_at_budget(self):
        # paired runs, identical seed and budget: letting assignments
        # move must not end with a worse data loss than codebook-only.
        # Needs a lossy setting (many more sub-vectors than codewords),
        # otherwise assignments have nothing to improve.
        config = dit.DiTConfig(
            depth=2, d_in=16, heads=2, n_tok=8, classes=5, timesteps=6
        )
        params = dit.init_params(config, seed=0)
        cache = calib.build_cache(params, config, num_trajectories=4, seed=0)
        names = dit.quantizable_layer_names(config)
        finals = {}
        for mode in ("full", "codebook_only"):
            states = calib.quantize_layers(params, names, d=2, k=16, n=2, seed=0)
            cfg = calib.CalibConfig(mode=mode, batch=16, iters=500, seed=0)
            res = calib.calibrate(params, states, config, cfg, cache)
            finals[mode] = res.log[-1]["L_d"]
        assert finals["full"] <= finals["codebook_only"]

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_raises_with_snapshot(self, fp_params, cache):
        states = fresh_states(fp_params)
        cfg = calib.CalibConfig(
            mode="codebook_only", batch=2, iters=20, lr_codebook=1e30, seed=0
        )
        with pytest.raises(calib.CalibrationDiverged) as exc:
            calib.calibrate(fp_params, states, TINY, cfg, cache)
        assert "iter" in exc.value.snapshot

    def test_log_record_fields(self, fp_params, cache):
        states = fresh_states(fp_params)
        cfg = calib.CalibConfig(mode="full", batch=3, iters=2, seed=0)
        result = calib.calibrate(fp_params, states, TINY, cfg, cache)
        rec = result.log[0]
        assert set(rec) == {"iter", "t", "L_d", "L_r", "L", "frozen"}
        assert len(rec["t"]) == 3
        assert all(1 <= t <= TINY.timesteps for t in rec["t"])
        # uniform candidate init pins each layer's starting ratio loss at 2
        assert rec["L_r"] == pytest.approx(2.0 * len(states), abs=1e-5)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            calib.CalibConfig(mode="fancy")
        with pytest.raises(ValueError):
            calib.CalibConfig(lambda_d=-1.0)
        with pytest.raises(ValueError):
            calib.CalibConfig(n=0)
        with pytest.raises(ValueError):
            calib.CalibConfig(batch=0)


class TestDiagnostics:
    def test_pairwise_cosine_identical(self):
        v = np.tile([1.0, 2.0, 3.0], (4, 1))
        assert calib.mean_pairwise_cosine(v) == pytest.approx(1.0)

    def test_pairwise_cosine_opposite(self):
        v = np.array([[1.0, 0.0], [-1.0, 0.0]])
        assert calib.mean_pairwise_cosine(v) == pytest.approx(-1.0)

    def test_pairwise_cosine_orthogonal(self):
        v = np.array([[1.0, 0.0], [0.0, 1.0]])
        assert calib.mean_pairwise_cosine(v) == pytest.approx(0.0, abs=1e-12)

    def test_pairwise_cosine_needs_two(self):
        with pytest.raises(ValueError):
            calib.mean_pairwise_cosine(np.array([[1.0, 0.0]]))

    def test_grad_cosine_report_structure(self, fp_params, cache):
        states = fresh_states(fp_params)
        cfg = calib.CalibConfig(mode="full", batch=2, iters=15, lr_ratio=0.3, seed=0)
        rep = calib.grad_cosine_report(
            fp_params, states, TINY, cache, cfg, sample_size=4
        )
        assert set(rep.before) == set(states)
        for vals in list(rep.before.values()) + list(rep.after.values()):
            assert np.all(vals >= -1.0 - 1e-9) and np.all(vals <= 1.0 + 1e-9)
        assert np.isfinite(rep.mean_before) and np.isfinite(rep.mean_after)
        # measurement must not touch the caller's states
        pristine = fresh_states(fp_params)
        for name in states:
            np.testing.assert_array_equal(
                states[name].codebook, pristine[name].codebook
            )

    def test_position_report_n1(self):
        cand = vq.CandidateSet(
            candidates=np.arange(5)[:, None], logits=np.zeros((5, 1), dtype=np.float32)
        )
        rep = calib.candidate_position_report(np.arange(5), cand)
        np.testing.assert_allclose(rep, [1.0])

    def test_position_report_sums_to_one(self, rng):
        cand = vq.CandidateSet(
            candidates=np.stack([np.arange(10), np.arange(10) + 10], axis=1),
            logits=np.zeros((10, 2), dtype=np.float32),
        )
        pick = rng.integers(0, 2, size=10)
        assignments = cand.candidates[np.arange(10), pick]
        rep = calib.candidate_position_report(assignments, cand)
        assert rep.sum() == pytest.approx(1.0, abs=1e-9)
        assert rep[1] == pytest.approx(pick.mean())

    def test_position_report_rejects_foreign_assignment(self):
        cand = vq.CandidateSet(
            candidates=np.array([[0, 1]]), logits=np.zeros((1, 2), dtype=np.float32)
        )
        with pytest.raises(ValueError):
            calib.candidate_position_report(np.array([5]), cand)
