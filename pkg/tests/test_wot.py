import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wotlab.attacks import AttackConfig
from wotlab.data import Dataset
from wotlab.errors import ConfigError, ContractError
from wotlab.models import block_partition, build_model, mlp_spec, partition_from_groups
from wotlab.tensor import ParamVector
from wotlab.wot import (AlphaState, AlphaTrace, TrajectoryBuffer, alpha_gradient, alpha_step, compose_delta,
                        holdout_loss, recomposed_weights, refine)

from conftest import max_rel_err


def random_buffer(model, k, scale=0.3, seed=0):
    rng = np.random.default_rng(seed)
    buf = TrajectoryBuffer(k, m=1, size=len(model.params))
    w = model.params.copy()
    buf.clear(w)
    for _ in range(k):
        w = w.with_values(w.values + (scale * rng.standard_normal(len(w))).astype(np.float32))
        buf.record(w)
    return buf, w


class TestTrajectoryBuffer:
    def test_single_record(self, tiny_mlp):
        a = tiny_mlp.params
        b = a.with_values(a.values + 1)
        buf = TrajectoryBuffer(3, 5, len(a))
        buf.clear(a)
        buf.record(b)
        assert len(buf) == 1
        assert np.array_equal(buf.delta(0).values, b.values - a.values)

    def test_first_record_after_bare_clear_sets_anchor(self, tiny_mlp):
        buf = TrajectoryBuffer(2, 1, len(tiny_mlp.params))
        buf.clear()
        buf.record(tiny_mlp.params)
        assert len(buf) == 0 and buf.anchor == tiny_mlp.params

    def test_telescoping(self, tiny_mlp):
        buf, current = random_buffer(tiny_mlp, 4, scale=0.05)
        total = buf.anchor.values.astype(np.float64) + buf.deltas.astype(np.float64).sum(axis=0)
        assert max_rel_err(total, current.values) <= 1e-5

    def test_record_on_full_buffer_is_an_error(self, tiny_mlp):
        buf, current = random_buffer(tiny_mlp, 2)
        with pytest.raises(ContractError):
            buf.record(current)

    def test_clear(self, tiny_mlp):
        buf, current = random_buffer(tiny_mlp, 2)
        buf.clear(current)
        assert len(buf) == 0 and buf.anchor == current


class TestComposeDelta:
    def test_all_ones_telescopes(self, tiny_mlp):
        buf, current = random_buffer(tiny_mlp, 3, scale=0.05)
        part = block_partition(tiny_mlp, "wot_b")
        w = recomposed_weights(buf, np.ones((3, part.block_count)), part)
        assert max_rel_err(w.values, current.values) <= 1e-5

    def test_all_zero_reverts_to_anchor(self, tiny_mlp):
        buf, _ = random_buffer(tiny_mlp, 3)
        part = block_partition(tiny_mlp, "wot_b")
        assert not compose_delta(buf, np.zeros((3, part.block_count)), part).values.any()
        assert recomposed_weights(buf, np.zeros((3, part.block_count)), part) == buf.anchor

    def test_hand_arithmetic(self):
        model = build_model(mlp_spec([1, 1, 2]), 0)  # 6 parameters
        buf = TrajectoryBuffer(2, 1, 6)
        buf.clear(ParamVector.zeros(model.layout))
        buf.deltas[:] = [[1, 0, 1, 0, 1, 0], [0, 2, 0, 2, 0, 2]]
        buf.count = 2
        part = block_partition(model, "wot_w")
        out = compose_delta(buf, [[0.5], [0.25]], part).values
        assert out.tolist() == [0.5, 0.5] * 3

    def test_per_block_coefficients(self, tiny_mlp):
        buf, _ = random_buffer(tiny_mlp, 2)
        part = block_partition(tiny_mlp, "wot_b")
        alpha = np.array([[0.1, 0.2, 0.3], [0.9, 0.8, 0.7]])
        out = compose_delta(buf, alpha, part).values
        blocks = part.assignment()
        want = alpha[0, blocks] * buf.deltas[0] + alpha[1, blocks] * buf.deltas[1]
        np.testing.assert_allclose(out, want, rtol=1e-6)

    def test_partition_mismatch(self, tiny_mlp):
        buf, _ = random_buffer(tiny_mlp, 2)
        other = block_partition(build_model(mlp_spec([6, 4, 3]), 0), "wot_w")
        with pytest.raises(ContractError):
            compose_delta(buf, np.zeros((2, 1)), other)


class TestAlphaGradient:
    def batch(self, blobs):
        return blobs.images[:16], blobs.labels[:16]

    def test_zero_deltas(self, tiny_mlp, blobs):
        buf = TrajectoryBuffer(2, 1, len(tiny_mlp.params))
        buf.clear(tiny_mlp.params)
        buf.record(tiny_mlp.params)
        buf.record(tiny_mlp.params)
        part = block_partition(tiny_mlp, "wot_b")
        g = alpha_gradient(tiny_mlp, buf, np.full((2, 3), 0.5), part, self.batch(blobs))
        assert not g.any()

    def test_single_gap_is_dot_product(self, tiny_mlp, blobs):
        from wotlab.tensor import GradTape, backward
        buf, _ = random_buffer(tiny_mlp, 1)
        part = block_partition(tiny_mlp, "wot_w")
        alpha = np.array([[0.4]])
        w = recomposed_weights(buf, alpha, part).tensors(requires_grad=True)
        with GradTape():
            loss = holdout_loss(tiny_mlp, w, *self.batch(blobs))
        gw = backward(loss, w).values.astype(np.float64)
        g = alpha_gradient(tiny_mlp, buf, alpha, part, self.batch(blobs))
        assert g[0, 0] == pytest.approx(gw @ buf.deltas[0].astype(np.float64), rel=1e-6)

    @pytest.mark.parametrize("seed", range(3))
    def test_finite_differences(self, tiny_mlp, blobs, seed):
        buf, _ = random_buffer(tiny_mlp, 2, seed=seed)
        part = block_partition(tiny_mlp, "wot_b")
        alpha = np.random.default_rng(seed).uniform(0.2, 0.8, (2, 3))
        x, y = self.batch(blobs)
        g = alpha_gradient(tiny_mlp, buf, alpha, part, (x, y))
        fd = np.zeros_like(alpha)
        for idx in np.ndindex(alpha.shape):
            vals = []
            for h in (1e-3, -1e-3):
                a = alpha.copy()
                a[idx] += h
                vals.append(holdout_loss(tiny_mlp, recomposed_weights(buf, a, part), x, y).data.astype(np.float64))
            fd[idx] = (vals[0] - vals[1]) / 2e-3
        assert max_rel_err(g, fd) < 1e-2

    @pytest.mark.parametrize("mode", ["wot_w", "wot_b"])
    def test_chain_rule_matches_inner_product(self, tiny_cnn, mode):
        rng = np.random.default_rng(4)
        buf, _ = random_buffer(tiny_cnn, 3, scale=0.1, seed=4)
        part = block_partition(tiny_cnn, mode)
        alpha = rng.uniform(0, 1, (3, part.block_count))
        batch = (rng.random((5, 2, 6, 6)).astype(np.float32), rng.integers(0, 3, 5))
        inner = alpha_gradient(tiny_cnn, buf, alpha, part, batch, method="inner")
        chain = alpha_gradient(tiny_cnn, buf, alpha, part, batch, method="chain")
        assert max_rel_err(chain, inner) < 1e-4


class TestAlphaStep:
    def test_zero_gradient_keeps_alpha(self):
        s = AlphaState(2, 3)
        s.alpha[:] = 0.3
        alpha_step(s, np.zeros((2, 3)))
        assert np.all(s.alpha == 0.3)

    def test_two_hand_iterated_steps(self):
        s = AlphaState(1, 1, lr=0.1, gamma=0.9)
        alpha_step(s, [[-1.0]])
        assert s.alpha[0, 0] == pytest.approx(0.1)
        alpha_step(s, [[-1.0]])
        assert s.momentum[0, 0] == pytest.approx(-1.9)
        assert s.alpha[0, 0] == pytest.approx(0.29)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=30), st.floats(0, 5), st.floats(0, 0.99))
    def test_clamp_contract(self, grads, lr, gamma):
        s = AlphaState(1, 2, lr=lr, gamma=gamma)
        for g in grads:
            alpha_step(s, np.full((1, 2), g))
            assert s.alpha.min() >= 0 and s.alpha.max() <= 1

    def test_shape_mismatch(self):
        with pytest.raises(ContractError):
            alpha_step(AlphaState(2, 2), np.zeros((2, 3)))


def _holdout(n=40, seed=0):
    rng = np.random.default_rng(seed)
    return Dataset(rng.random((n, 6)), rng.integers(0, 3, n), 3)


class TestRefine:
    cfg = AttackConfig(epsilon=0.05, steps=2)

    def test_zero_lr_reverts_to_anchor(self, tiny_mlp):
        buf, _ = random_buffer(tiny_mlp, 2)
        anchor = buf.anchor.copy()
        part = block_partition(tiny_mlp, "wot_b")
        w, alpha = refine(tiny_mlp, buf, AlphaState(2, 3, lr=0.0), _holdout(), self.cfg, part, 0, 16)
        assert w == anchor and tiny_mlp.params == anchor and not alpha.any()
        assert len(buf) == 0 and buf.anchor == anchor

    def test_zero_steps_reverts_to_anchor(self, tiny_mlp):
        buf, _ = random_buffer(tiny_mlp, 2)
        anchor = buf.anchor.copy()
        part = block_partition(tiny_mlp, "wot_w")
        w, _ = refine(tiny_mlp, buf, AlphaState(2, 1, n_steps=0), _holdout(), self.cfg, part, 0, 16)
        assert w == anchor

    def test_one_block_wot_b_equals_wot_w(self, tiny_mlp):
        results = []
        for part in (block_partition(tiny_mlp, "wot_w"), partition_from_groups(tiny_mlp.layout, lambda n: "all")):
            model = tiny_mlp.copy()
            buf, _ = random_buffer(model, 3, scale=0.05)
            w, alpha = refine(model, buf, AlphaState(3, part.block_count, lr=0.05), _holdout(), self.cfg,
                              part, 11, 16)
            results.append((w.checksum(), alpha.tobytes()))
        assert results[0] == results[1]

    def test_alpha_bounds_and_trace(self, tiny_mlp):
        buf, _ = random_buffer(tiny_mlp, 2, scale=0.05)
        part = block_partition(tiny_mlp, "wot_b")
        trace = AlphaTrace()
        refine(tiny_mlp, buf, AlphaState(2, 3, lr=5.0, n_steps=4), _holdout(), self.cfg, part, 0, 16,
               trace=trace, round_index=7)
        assert len(trace.rows) == 4 * 2 * 3
        assert all(r[0] == 7 and 0 <= r[4] <= 1 for r in trace.rows)

    def test_once_per_round_adversarial_examples(self, tiny_mlp):
        buf, _ = random_buffer(tiny_mlp, 2, scale=0.05)
        part = block_partition(tiny_mlp, "wot_b")
        w, alpha = refine(tiny_mlp, buf, AlphaState(2, 3, lr=0.5, n_steps=3), _holdout(), self.cfg, part, 0, 16,
                          regenerate_per_step=False)
        assert alpha.min() >= 0 and alpha.max() <= 1

    def test_empty_holdout(self, tiny_mlp):
        buf, _ = random_buffer(tiny_mlp, 2)
        with pytest.raises(ConfigError):
            refine(tiny_mlp, buf, AlphaState(2, 1), Dataset(np.zeros((0, 6)), np.zeros(0), 3), self.cfg,
                   block_partition(tiny_mlp, "wot_w"), 0)
