import numpy as np
import pytest

from wotlab.baselines import AveragerState, BestTracker, ema_update, swa_update, track_best
from wotlab.errors import ConfigError, ContractError
from wotlab.models import build_model, mlp_spec
from wotlab.tensor import ParamVector

from conftest import max_rel_err

LAYOUT = build_model(mlp_spec([3, 2, 2]), 0).layout  # 14 parameters


def vec(values):
    return ParamVector(np.asarray(values, np.float32), LAYOUT)


def rand_vecs(n, seed=0):
    rng = np.random.default_rng(seed)
    return [vec(rng.standard_normal(14)) for _ in range(n)]


class TestSwa:
    def test_single_update_is_identity(self):
        (w,) = rand_vecs(1)
        assert swa_update(AveragerState(), w).average == w

    def test_midpoint(self):
        s = swa_update(swa_update(AveragerState(), vec(np.zeros(14))), vec(np.full(14, 2.0)))
        assert np.all(s.average.values == 1.0) and s.count == 2

    def test_matches_arithmetic_mean(self):
        ws = rand_vecs(50, seed=1)
        s = AveragerState()
        for w in ws:
            swa_update(s, w)
        want = np.mean([w.values.astype(np.float64) for w in ws], axis=0)
        assert max_rel_err(s.average.values, want) <= 1e-6

    def test_order_invariant(self):
        ws = rand_vecs(20, seed=2)
        a, b = AveragerState(), AveragerState()
        for w in ws:
            swa_update(a, w)
        for w in ws[::-1]:
            swa_update(b, w)
        assert max_rel_err(a.average.values, b.average.values) <= 1e-6

    def test_layout_mismatch(self):
        s = swa_update(AveragerState(), rand_vecs(1)[0])
        other = build_model(mlp_spec([4, 2, 2]), 0).params
        with pytest.raises(ContractError):
            swa_update(s, other)


class TestEma:
    def test_decay_zero_tracks_latest(self):
        s = AveragerState(decay=0.0)
        for w in rand_vecs(5):
            ema_update(s, w)
            assert s.average == w

    def test_converges_on_constant_sequence(self):
        s = AveragerState(decay=0.9)
        ema_update(s, vec(np.zeros(14)))
        c = vec(np.full(14, 3.0))
        for _ in range(300):
            ema_update(s, c)
        assert np.allclose(s.average.values, 3.0, rtol=1e-6)

    def test_closed_form(self):
        ws = rand_vecs(10, seed=3)
        s = AveragerState(decay=0.9)
        for w in ws:
            ema_update(s, w)
        # first update copies; afterwards avg_n = d avg_{n-1} + (1 - d) w_n
        d = 0.9
        want = d ** 9 * ws[0].values.astype(np.float64)
        for i, w in enumerate(ws[1:], start=1):
            want += (1 - d) * d ** (9 - i) * w.values.astype(np.float64)
        assert max_rel_err(s.average.values, want) <= 1e-6

    @pytest.mark.parametrize("decay", [-0.1, 1.0, None])
    def test_bad_decay(self, decay):
        with pytest.raises(ConfigError):
            ema_update(AveragerState(decay=decay), rand_vecs(1)[0])


class TestBestTracker:
    def test_peak_then_drop(self):
        t = BestTracker()
        for e, a in enumerate([0.3, 0.5, 0.4], start=1):
            track_best(t, e, a)
        assert t.best_epoch == 2 and t.final_epoch == 3
        assert t.diff == pytest.approx(-0.1)

    def test_monotone_best_is_final(self):
        t = BestTracker()
        for e, a in enumerate([0.1, 0.2, 0.3], start=1):
            track_best(t, e, a)
        assert t.best_epoch == t.final_epoch == 3 and t.diff == 0

    def test_tie_keeps_earlier(self):
        t = BestTracker()
        track_best(t, 1, 0.5, "a")
        track_best(t, 2, 0.5, "b")
        assert t.best_epoch == 1 and t.best_ref == "a"
